"""
Run registry for the DLL laboratory
Defines RunLog and Artifact models using SQLAlchemy ORM. Every CLI command
logs one run and one artifact row per file it writes.
"""
from datetime import datetime

import pytz
from flask_sqlalchemy import SQLAlchemy

db = SQLAlchemy()


def utc_now():
    return datetime.now(pytz.utc)


class RunLog(db.Model):
    """One CLI invocation"""
    __tablename__ = 'runs'

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(40), nullable=False, index=True)
    system = db.Column(db.String(20), nullable=True)
    seed = db.Column(db.Integer, nullable=True)
    config_digest = db.Column(db.String(16), nullable=True, index=True)
    output_dir = db.Column(db.Text, nullable=True)
    # Plain strings rather than ENUM, like the rest of the schema
    status = db.Column(db.String(20), default='running', nullable=False)
    error_category = db.Column(db.String(20), nullable=True)
    error_message = db.Column(db.Text, nullable=True)
    created_at = db.Column(db.DateTime(timezone=True), default=utc_now)
    finished_at = db.Column(db.DateTime(timezone=True), nullable=True)

    artifacts = db.relationship('Artifact', backref='run', lazy='dynamic', cascade='all, delete-orphan')

    def mark_succeeded(self):
        """Mark run as finished without error"""
        self.status = 'succeeded'
        self.finished_at = utc_now()
        db.session.commit()

    def mark_failed(self, error):
        """Mark run as failed, keeping the error category when it has one"""
        self.status = 'failed'
        self.error_category = getattr(error, 'category', 'error')
        self.error_message = str(error)
        self.finished_at = utc_now()
        db.session.commit()

    def duration(self):
        """Run duration in seconds"""
        if self.created_at and self.finished_at:
            return round((self.finished_at - self.created_at).total_seconds(), 2)
        return None

    def __repr__(self):
        return f'<RunLog {self.command} {self.status}>'


class Artifact(db.Model):
    """A file written by a run: dataset, checkpoint, report or curve"""
    __tablename__ = 'artifacts'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False, index=True)
    kind = db.Column(db.String(20), nullable=False)
    path = db.Column(db.Text, nullable=False)
    digest = db.Column(db.String(16), nullable=True, index=True)
    upstream_digest = db.Column(db.String(16), nullable=True)
    created_at = db.Column(db.DateTime(timezone=True), default=utc_now)

    @staticmethod
    def latest(kind, digest=None):
        """Most recent artifact of a kind, optionally with a given digest"""
        query = Artifact.query.filter_by(kind=kind)
        if digest is not None:
            query = query.filter_by(digest=digest)
        return query.order_by(Artifact.id.desc()).first()

    def __repr__(self):
        return f'<Artifact {self.kind} {self.path}>'


def init_db(app):
    """Initialize database with app context"""
    db.init_app(app)

    with app.app_context():
        try:
            from sqlalchemy import inspect
            existing_tables = inspect(db.engine).get_table_names()
            if 'runs' not in existing_tables or 'artifacts' not in existing_tables:
                db.create_all()
        except Exception as e:
            print(f"⚠️ Could not prepare the run registry: {e}")
