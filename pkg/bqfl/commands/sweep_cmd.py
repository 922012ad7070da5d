# bqfl/commands/sweep_cmd.py
import asyncio
import logging
from pathlib import Path
from typing import List

from .. import tasks
from ..analytics import write_sweep
from ..config import RunConfig, config_from_command, load_config, render_config
from ..data import build_experiment_data, load_idx_files
from ..errors import ConfigError, DataError
from ..fed import Federation
from ..schemas import Command, FedMode, SweepPoint

# Initialize logger for this module
logger = logging.getLogger(__name__)

SWEEP_MODES = (FedMode.BQFL_AVG, FedMode.BQFL_INF, FedMode.BCFL_AVG)


def sweep_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / f"classes_sweep_{cfg.seed}.csv"


def point_config(cfg: RunConfig, m: int, mode: FedMode) -> RunConfig:
    """The base run with m_classes and mode replaced, validated like a run file."""
    return load_config(render_config(cfg), overrides=[f"m_classes={m}", f"mode={mode.value}"])


def run_sweep(cfg: RunConfig) -> List[SweepPoint]:
    if not cfg.sweep_m_classes:
        raise ConfigError("sweep_m_classes lists no class counts")
    # every cell is validated before the first federation starts
    cells = [(m, mode, point_config(cfg, m, mode)) for m in cfg.sweep_m_classes for mode in SWEEP_MODES]
    train_raw = load_idx_files(cfg.train_images, cfg.train_labels)
    test_raw = load_idx_files(cfg.test_images, cfg.test_labels)

    points: List[SweepPoint] = []
    for m, mode, point_cfg in cells:
        logger.info(f"SWEEP: Running {mode.value} with {m} class(es) per worker.")
        federation = Federation(point_cfg, build_experiment_data(point_cfg, train_raw, test_raw))
        asyncio.run(tasks.run_exclusive(federation.run))
        points.append(
            SweepPoint(
                m_classes=m,
                mode=mode,
                final_acc=federation.final_accuracy,
                rounds_ok=sum(1 for r in federation.results if r.ok),
            )
        )
    return points


def format_sweep(points: List[SweepPoint]) -> List[str]:
    lines = [f"{'m':>3}  " + "  ".join(f"{mode.value:>9}" for mode in SWEEP_MODES)]
    by_cell = {(p.m_classes, p.mode): p for p in points}
    for m in dict.fromkeys(p.m_classes for p in points):
        cells = []
        for mode in SWEEP_MODES:
            acc = by_cell[(m, mode)].final_acc
            cells.append(f"{acc:>9.4f}" if acc is not None else f"{'-':>9}")
        lines.append(f"{m:>3}  " + "  ".join(cells))
    return lines


def cmd_sweep_classes(cmd: Command) -> int:
    """Final test accuracy of every mode for each configured number of classes per worker."""
    cfg = config_from_command(cmd)
    points = run_sweep(cfg)
    path = sweep_path(cfg)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory '{path.parent}': {e}") from e
    write_sweep(points, path)
    print("\n".join(format_sweep(points)))
    print(f"sweep written to {path}")
    return 0
