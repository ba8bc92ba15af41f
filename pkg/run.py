#!/usr/bin/env python
"""
Quick start script for the DLL laboratory
Runs the desk-scale pipeline for one system: gen, both training stages, the
deterministic baseline, evaluation and (for trajectory systems) rollouts.
"""
import os
import sys

STAGES = ['gen', 'train-encoder', 'train-dll', 'train-fno', 'eval']


def main():
    """Main function driving the command group stage by stage"""
    system = sys.argv[1] if len(sys.argv) > 1 else 'sburgers'
    extra = sys.argv[2:]

    print("=" * 60)
    print(f"  🚀 DLL laboratory quick start: {system} (desk scale)")
    print("=" * 60)

    if not os.path.exists('.env'):
        print("\n⚠️  WARNING: .env file not found!")
        print("   Defaults apply; copy env.example to .env to change them\n")

    # Check if required packages are installed
    try:
        import flask
        import flask_sqlalchemy
        import numpy
        import scipy
        from dotenv import load_dotenv
    except ImportError as e:
        print(f"\n❌ Missing required package: {e.name}")
        print("\n📦 Please install requirements:")
        print("   pip install -r requirements.txt\n")
        sys.exit(1)

    from app import app

    stages = list(STAGES)
    if system in ('ks', 'kolmogorov'):
        stages.append('rollout')

    for number, stage in enumerate(stages, start=1):
        print(f"\n{number}. {stage}")
        args = [stage, '--system', system, '--scale', 'desk'] + extra
        if stage == 'rollout':
            args += ['--identity']
        with app.app_context():
            try:
                app.cli.main(args=args, standalone_mode=False)
            except SystemExit as e:
                if e.code:
                    print(f"\n❌ Stage {stage} failed with exit code {e.code}")
                    sys.exit(e.code)

    print("\n" + "=" * 60)
    print("🎉 Quick start complete! CSV reports are under the run directory")
    print("=" * 60)


if __name__ == '__main__':
    main()
