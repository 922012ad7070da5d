# bqfl/analytics.py
"""
Closed-form calculators for the convergence bound, the encoding-time model and the
total-time bound, plus the CSV metrics sink.

The total-time bound adds a dimensionless optimality gap to seconds. That is how the
bound is stated; the units are heterogeneous and are left as they are.
"""
import csv
import io
import logging
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, TextIO, Union

from pydantic import ValidationError

from .chain import StakeTable, expected_block_time
from .errors import ArgumentError, DataError, ParseError
from .schemas import BoundConstants, DeviceRole, MetricsRow, SweepPoint

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "round",
    "device_id",
    "role",
    "mode",
    "train_loss",
    "train_acc",
    "test_acc_top1",
    "comm_time_s",
    "block_gen_time_s",
    "stake",
)
_INT_COLUMNS = {"round", "device_id"}
_OPTIONAL_COLUMNS = {"train_loss", "train_acc", "test_acc_top1"}


# --- Bound calculators ---
def variance_term(c: BoundConstants) -> float:
    """B = sum p_k^2 sigma_k^2 + 6 L Gamma + 8 (E-1)^2 G^2."""
    noise = math.fsum(p * p * s * s for p, s in zip(c.p_k, c.sigma_k))
    return noise + 6.0 * c.L_smooth * c.Gamma + 8.0 * (c.E_local - 1) ** 2 * c.G ** 2


def fedavg_bound(c: BoundConstants) -> float:
    if not c.mu > 0:
        raise ArgumentError(f"mu must be positive, got {c.mu}")
    gamma = c.gamma
    b = variance_term(c)
    return c.kappa / (gamma + c.T_rounds - 1) * (2.0 * b / c.mu + c.mu * gamma / 2.0 * c.theta_gap)


def step_size(c: BoundConstants, t: int) -> float:
    """Decaying learning rate eta_t = 2 / (mu (gamma + t))."""
    if t < 0:
        raise ArgumentError(f"step index must be >= 0, got {t}")
    return 2.0 / (c.mu * (c.gamma + t))


def encoding_time(L_len: float, n: float, t_gate: float) -> float:
    if L_len < 0 or n < 0 or t_gate < 0:
        raise ArgumentError("encoding_time inputs must be >= 0")
    return L_len * n * t_gate


def total_time_bound(
    c: BoundConstants,
    stakes: StakeTable,
    per_node_T: Mapping[int, float],
    L_len: float,
    n: float,
    t_gate: float,
) -> float:
    return fedavg_bound(c) + expected_block_time(stakes, per_node_T) + encoding_time(L_len, n, t_gate)


def bound_sweep(c: BoundConstants, rounds: Iterable[int]) -> List[tuple]:
    """(T, bound) pairs with every other constant held fixed."""
    return [(t, fedavg_bound(c.model_copy(update={"T_rounds": t}))) for t in rounds]


def meta_experience(d_rate: float, uplink_err: float, vr_e: float) -> float:
    """Immersion score D_rate * (1 - uplink error rate) * VR_e."""
    if not 0.0 <= uplink_err <= 1.0:
        raise ArgumentError(f"uplink error rate must lie in [0, 1], got {uplink_err}")
    if d_rate < 0 or vr_e < 0:
        raise ArgumentError("d_rate and vr_e must be >= 0")
    return d_rate * (1.0 - uplink_err) * vr_e


# --- Metrics sink ---
def _format_cell(value) -> str:
    if value is None:
        return ""
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_rows(rows: Iterable[MetricsRow], stream: TextIO) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    count = 0
    for row in rows:
        writer.writerow([_format_cell(getattr(row, col)) for col in METRICS_COLUMNS])
        count += 1
    return count


def write_metrics(rows: Iterable[MetricsRow], destination: Union[str, Path, TextIO]) -> int:
    """Header plus one line per row; reals carry 17 significant digits so they re-parse exactly."""
    if hasattr(destination, "write"):
        return _write_rows(rows, destination)
    path = Path(destination)
    try:
        with path.open("w", encoding="utf-8", newline="") as f:
            count = _write_rows(rows, f)
    except OSError as e:
        raise DataError(f"cannot write metrics to '{path}': {e}") from e
    logger.info(f"ANALYTICS: Wrote {count} metrics row(s) to {path}.")
    return count


def parse_metrics(text: str) -> List[MetricsRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != METRICS_COLUMNS:
        raise ParseError(f"unexpected metrics header {header}", offset=0)
    rows: List[MetricsRow] = []
    for line_no, cells in enumerate(reader, start=2):
        if len(cells) != len(METRICS_COLUMNS):
            raise ParseError(f"line {line_no} has {len(cells)} cells", offset=line_no)
        record: Dict[str, object] = {}
        for col, cell in zip(METRICS_COLUMNS, cells):
            if col in _OPTIONAL_COLUMNS and cell == "":
                record[col] = None
            elif col in _INT_COLUMNS:
                record[col] = int(cell)
            else:
                record[col] = cell
        try:
            rows.append(MetricsRow(**record))
        except (ValidationError, ValueError) as e:
            raise ParseError(f"invalid metrics line {line_no}: {e}", offset=line_no) from e
    return rows


def read_metrics(path: Union[str, Path]) -> List[MetricsRow]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read metrics from '{path}': {e}") from e
    return parse_metrics(text)


@dataclass(frozen=True)
class RoundSummary:
    round: int
    devices: int
    min_acc: float
    max_acc: float
    mean_acc: float
    min_comm_s: float
    max_comm_s: float
    mean_comm_s: float


def round_summary(rows: Sequence[MetricsRow]) -> Dict[int, RoundSummary]:
    """Lowest / highest / mean worker test accuracy and communication time per round."""
    by_round: Dict[int, List[MetricsRow]] = {}
    for row in rows:
        if row.role is DeviceRole.WORKER and row.test_acc_top1 is not None:
            by_round.setdefault(row.round, []).append(row)
    summaries: Dict[int, RoundSummary] = {}
    for rnd in sorted(by_round):
        accs = [r.test_acc_top1 for r in by_round[rnd]]
        comms = [r.comm_time_s for r in by_round[rnd]]
        summaries[rnd] = RoundSummary(
            round=rnd,
            devices=len(accs),
            min_acc=min(accs),
            max_acc=max(accs),
            mean_acc=statistics.fmean(accs),
            min_comm_s=min(comms),
            max_comm_s=max(comms),
            mean_comm_s=statistics.fmean(comms),
        )
    return summaries


# --- Accuracy against classes per worker ---
SWEEP_COLUMNS = ("m_classes", "mode", "final_acc", "rounds_ok")


def write_sweep(points: Iterable[SweepPoint], path: Union[str, Path]) -> int:
    """One line per (m, mode) cell; an aborted cell leaves final_acc blank."""
    path = Path(path)
    count = 0
    try:
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            for point in points:
                writer.writerow([_format_cell(getattr(point, col)) for col in SWEEP_COLUMNS])
                count += 1
    except OSError as e:
        raise DataError(f"cannot write sweep results to '{path}': {e}") from e
    logger.info(f"ANALYTICS: Wrote {count} sweep point(s) to {path}.")
    return count
