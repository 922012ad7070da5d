# bqfl/database.py
import logging
import os
from contextlib import contextmanager
from typing import Generator, Optional

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Index, Integer, String, Text, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session as SQLAlchemySession, declarative_base, relationship, sessionmaker
from sqlalchemy.sql import func

from .config import RunConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

RESULTS_DB_FILE = "results.db"

engine: Optional[Engine] = None
SessionLocal = sessionmaker(autocommit=False, autoflush=False)

Base = declarative_base()


def resolve_results_url(cfg: RunConfig) -> Optional[str]:
    """`auto` puts results.db in the output directory, `none` disables the store."""
    value = cfg.results_db.strip()
    if value.lower() == "none":
        return None
    if value.lower() == "auto":
        return f"sqlite:///{os.path.abspath(os.path.join(cfg.output_dir, RESULTS_DB_FILE))}"
    if "://" not in value:
        raise ConfigError(f"results_db must be 'auto', 'none' or a database URL, got '{value}'")
    return value


def _ensure_sqlite_dir(url: str) -> None:
    if not url.startswith("sqlite:///"):
        return
    db_file_path = url.replace("sqlite:///", "", 1)
    db_dir = os.path.dirname(db_file_path)
    if db_dir and not os.path.exists(db_dir):
        try:
            os.makedirs(db_dir, exist_ok=True)
            logger.info(f"DATABASE: Created directory '{db_dir}' for SQLite database.")
        except OSError as e:
            logger.error(f"DATABASE: Error creating directory '{db_dir}': {e}.")


def configure(url: str) -> Engine:
    """Binds the session factory to a results database and creates missing tables."""
    global engine
    _ensure_sqlite_dir(url)
    if engine is not None:
        engine.dispose()
    engine = create_engine(
        url,
        connect_args={"check_same_thread": False, "timeout": 15} if url.startswith("sqlite") else {},
    )
    SessionLocal.configure(bind=engine)
    create_db_and_tables()
    return engine


def dispose() -> None:
    global engine
    if engine is not None:
        engine.dispose()
        engine = None


@contextmanager
def db_session_scope() -> Generator[SQLAlchemySession, None, None]:
    if engine is None:
        raise RuntimeError("results database is not configured")
    db = SessionLocal()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


# --- Database Models ---
class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_name = Column(String, index=True, nullable=False)
    mode = Column(String, nullable=False)
    seed = Column(String, nullable=False)  # u64 does not fit a signed SQLite integer
    config_text = Column(Text, nullable=False)
    status = Column(String, nullable=False, default="running")
    final_accuracy = Column(Float, nullable=True)
    ensemble = Column(Boolean, nullable=False, default=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    finished_at = Column(DateTime(timezone=True), nullable=True)

    blocks = relationship("BlockRecord", back_populates="run", cascade="all, delete-orphan")
    metrics = relationship("MetricsRecord", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<RunRecord(id={self.id}, run_name='{self.run_name}', status='{self.status}')>"


class BlockRecord(Base):
    __tablename__ = "blocks"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    block_index = Column(Integer, nullable=False)
    block_hash = Column(String(64), nullable=False)
    miner_id = Column(Integer, nullable=False)
    n_updates = Column(Integer, nullable=False)
    timestamp_s = Column(Float, nullable=False)
    block_time_s = Column(Float, nullable=False)
    assembly_wall_s = Column(Float, nullable=False)

    run = relationship("RunRecord", back_populates="blocks")

    __table_args__ = (Index("ix_blocks_run_index", "run_id", "block_index"),)

    def __repr__(self):
        return f"<BlockRecord(run_id={self.run_id}, index={self.block_index}, hash='{self.block_hash[:16]}')>"


class MetricsRecord(Base):
    __tablename__ = "round_metrics"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    round = Column(Integer, nullable=False)
    device_id = Column(Integer, nullable=False)
    role = Column(String, nullable=False)
    train_loss = Column(Float, nullable=True)
    train_acc = Column(Float, nullable=True)
    test_acc_top1 = Column(Float, nullable=True)
    comm_time_s = Column(Float, nullable=False)
    block_gen_time_s = Column(Float, nullable=False)
    stake = Column(Float, nullable=False)
    wall_time_s = Column(Float, nullable=True)

    run = relationship("RunRecord", back_populates="metrics")

    def __repr__(self):
        return f"<MetricsRecord(run_id={self.run_id}, round={self.round}, device_id={self.device_id})>"


def create_db_and_tables():
    logger.info("DATABASE: Attempting to create database tables...")
    Base.metadata.create_all(bind=engine)
    logger.info("DATABASE: Database tables checked/created successfully.")


# --- Recording helpers ---
def record_run_start(db: SQLAlchemySession, cfg: RunConfig, config_text: str) -> int:
    run = RunRecord(
        run_name=cfg.run_name,
        mode=cfg.mode.value,
        seed=str(cfg.seed),
        config_text=config_text,
        status="running",
        ensemble=not cfg.mode.averages,
    )
    db.add(run)
    db.flush()
    return run.id


def record_round(db: SQLAlchemySession, run_id: int, result) -> None:
    """Stores one fed.RoundResult: its block and its metrics rows plus measured wall times."""
    if result.block is not None:
        db.add(BlockRecord(
            run_id=run_id,
            block_index=result.block.index,
            block_hash=result.block.block_hash.hex(),
            miner_id=result.block.miner_id,
            n_updates=len(result.block.updates),
            timestamp_s=result.block.timestamp_s,
            block_time_s=result.block_time_s,
            assembly_wall_s=result.block_wall_time_s,
        ))
    for row in result.rows:
        db.add(MetricsRecord(
            run_id=run_id,
            round=row.round,
            device_id=row.device_id,
            role=row.role.value,
            train_loss=row.train_loss,
            train_acc=row.train_acc,
            test_acc_top1=row.test_acc_top1,
            comm_time_s=row.comm_time_s,
            block_gen_time_s=row.block_gen_time_s,
            stake=row.stake,
            wall_time_s=result.wall_times.get(row.device_id),
        ))


def finish_run(db: SQLAlchemySession, run_id: int, status: str, final_accuracy: Optional[float]) -> None:
    run = db.get(RunRecord, run_id)
    if run is None:
        logger.warning(f"DATABASE: Run {run_id} vanished before it could be finalized.")
        return
    run.status = status
    run.final_accuracy = final_accuracy
    run.finished_at = func.now()
