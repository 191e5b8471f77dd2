"""Database models for the run ledger."""

from __future__ import annotations

from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.orm import declarative_base
from sqlalchemy.sql import func

Base = declarative_base()


class StageRun(Base):
    __tablename__ = "stage_runs"

    id = Column(Integer, primary_key=True, index=True)
    stage = Column(String(50), index=True, nullable=False)
    seed = Column(Integer, nullable=False)
    config_hash = Column(String(64), index=True, nullable=False)
    out_dir = Column(String(1000), nullable=False)
    metrics_json = Column(Text, nullable=False)
    artifacts_json = Column(Text, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
