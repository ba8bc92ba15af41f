"""
Run registry initialization script
Creates the runs and artifacts tables and reports what the registry already holds
"""
import sys

from app import app, db
from models.db import Artifact, RunLog


def init_database():
    """Create registry tables and print a short inventory"""
    print("=" * 60)
    print("🔧 Initializing Run Registry...")
    print("=" * 60)

    with app.app_context():
        try:
            print("\n📊 Creating registry tables...")
            db.create_all()
            print("✅ Tables created successfully!")

            runs = RunLog.query.count()
            artifacts = Artifact.query.count()
            if runs:
                failed = RunLog.query.filter_by(status='failed').count()
                print(f"\n✅ Registry holds {runs} run(s) and {artifacts} artifact(s)")
                if failed:
                    print(f"   ⚠️  {failed} run(s) ended with an error")
            else:
                print("\n✅ Registry is empty")
                print(f"   Output directory: {app.config['DLL_OUTPUT_DIR']}")

            print("\n" + "=" * 60)
            print("🎉 Registry initialization complete!")
            print("=" * 60)
            return True

        except Exception as e:
            print(f"\n❌ Error initializing registry: {str(e)}")
            return False


if __name__ == '__main__':
    success = init_database()
    sys.exit(0 if success else 1)
