"""
Database connection and session management for the run registry.
"""
from sqlalchemy import Column, DateTime, Float, Integer, JSON, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.sql import func

Base = declarative_base()


class Run(Base):
    """One completed (or diverged) training run."""
    __tablename__ = "runs"

    run_id = Column(String(64), primary_key=True)
    problem = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)
    config_hash = Column(String(64), nullable=False)
    output_dir = Column(String(1024), nullable=False)
    iterations = Column(Integer, nullable=False, default=0)
    final_rel_l2 = Column(Float, nullable=True)
    best_rel_l2 = Column(Float, nullable=True)
    final_loss = Column(Float, nullable=True)
    coeffs = Column(JSON, default=dict)
    status = Column(String(32), default="completed")
    created_at = Column(String(40), nullable=False)
    recorded_at = Column(DateTime(timezone=True), server_default=func.now())


def make_session_factory(url: str):
    """Engine + session factory; tables are created on first use."""
    kwargs = {"connect_args": {"check_same_thread": False}} if url.startswith("sqlite") else {"pool_pre_ping": True}
    engine = create_engine(url, **kwargs)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)
