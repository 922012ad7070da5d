# bqfl/commands/run_cmd.py
import asyncio
import logging
from pathlib import Path
from typing import Optional

from .. import database, tasks
from ..analytics import round_summary, write_metrics
from ..config import RunConfig, config_from_command, render_config
from ..data import load_experiment_data
from ..errors import DataError
from ..fed import Federation
from ..schemas import Command

# Initialize logger for this module
logger = logging.getLogger(__name__)


def output_paths(cfg: RunConfig) -> dict:
    out = Path(cfg.output_dir)
    return {
        "config": out / f"{cfg.run_name}.cfg",
        "metrics": out / f"{cfg.run_name}.csv",
        "ledger": out / f"{cfg.run_name}.ledger",
    }


def _recorder(run_id: Optional[int]):
    if run_id is None:
        return None

    def record(result) -> None:
        with database.db_session_scope() as db:
            database.record_round(db, run_id, result)

    return record


def cmd_run(cmd: Command) -> int:
    """Executes the configured federated rounds and writes the config echo, metrics CSV and ledger."""
    cfg = config_from_command(cmd)
    paths = output_paths(cfg)
    try:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        config_text = render_config(cfg)
        paths["config"].write_text(config_text, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write to output directory '{cfg.output_dir}': {e}") from e
    logger.info(f"RUN: Starting {cfg.run_name}; outputs go to {cfg.output_dir}.")

    data = load_experiment_data(cfg)
    federation = Federation(cfg, data)

    run_id = None
    url = database.resolve_results_url(cfg)
    if url is not None:
        database.configure(url)
        with database.db_session_scope() as db:
            run_id = database.record_run_start(db, cfg, config_text)

    status = "failed"
    try:
        asyncio.run(tasks.run_exclusive(lambda: federation.run(on_round=_recorder(run_id))))
        completed = [r for r in federation.results if r.ok]
        status = "ok" if completed else "aborted"
    except Exception as e:
        logger.error(f"RUN: Exception during federated run {cfg.run_name}: {e}", exc_info=True)
        raise
    finally:
        if run_id is not None:
            with database.db_session_scope() as db:
                database.finish_run(db, run_id, status, federation.final_accuracy)
            database.dispose()

    write_metrics(federation.rows, paths["metrics"])
    federation.ledger.save(paths["ledger"])
    logger.info(f"RUN: Wrote {paths['metrics']}, {paths['ledger']} and {paths['config']}.")

    for result in federation.results:
        if not result.ok:
            print(f"round {result.round}: aborted (rejected: {result.rejected or 'no updates'})")
    for rnd, s in round_summary(federation.rows).items():
        print(
            f"round {rnd}: worker test acc min {s.min_acc:.4f} max {s.max_acc:.4f} mean {s.mean_acc:.4f}; "
            f"comm time min {s.min_comm_s:.6f}s max {s.max_comm_s:.6f}s mean {s.mean_comm_s:.6f}s"
        )

    final = federation.final_accuracy
    if final is None:
        print(f"{cfg.run_name}: every round aborted; no global model was produced")
        return 1
    label = "ensemble" if not cfg.mode.averages else "global"
    print(f"{cfg.run_name}: final {label} top-1 test accuracy {final:.4f}")
    return 0
