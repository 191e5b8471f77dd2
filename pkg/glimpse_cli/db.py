"""Database connection helpers and run-ledger queries."""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from .models import Base, StageRun


def create_db_engine(database_url: str):
    connect_args = {"check_same_thread": False} if database_url.startswith("sqlite") else {}
    return create_engine(database_url, connect_args=connect_args, echo=False)


def create_session_factory(database_url: str):
    engine = create_db_engine(database_url)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine), engine


def init_db(database_url: str) -> None:
    _, engine = create_session_factory(database_url)
    Base.metadata.create_all(bind=engine)


@contextmanager
def get_session(database_url: str):
    session_factory, _ = create_session_factory(database_url)
    db: Session = session_factory()
    try:
        yield db
    finally:
        db.close()


def record_run(
    db: Session,
    stage: str,
    seed: int,
    config_digest: str,
    out_dir: Path,
    metrics: Mapping[str, Any],
    artifacts: Sequence[Path],
) -> int:
    run = StageRun(
        stage=stage,
        seed=seed,
        config_hash=config_digest,
        out_dir=str(out_dir),
        metrics_json=json.dumps(dict(metrics), sort_keys=True),
        artifacts_json=json.dumps([str(path) for path in artifacts]),
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    return int(run.id)


def list_runs(db: Session, limit: int = 20) -> List[StageRun]:
    return db.query(StageRun).order_by(StageRun.created_at.desc(), StageRun.id.desc()).limit(limit).all()


def find_run(db: Session, run_id: int) -> Optional[StageRun]:
    return db.query(StageRun).filter(StageRun.id == run_id).first()


def run_to_dict(run: StageRun) -> Dict[str, Any]:
    return {
        "id": run.id,
        "stage": run.stage,
        "seed": run.seed,
        "config_hash": run.config_hash,
        "out_dir": run.out_dir,
        "metrics": json.loads(run.metrics_json),
        "artifacts": json.loads(run.artifacts_json),
        "created_at": str(run.created_at),
    }
