# bqfl/commands/inspect_cmd.py
import logging
from pathlib import Path
from typing import List

from ..chain import audit_ledger_bytes, describe_block
from ..config import config_from_command
from ..data import ShardSpec, class_counts, class_filter, load_idx_files, shard_classes
from ..errors import DataError
from ..schemas import Command
from .run_cmd import output_paths

# Initialize logger for this module
logger = logging.getLogger(__name__)


def _format_counts(counts) -> str:
    return " ".join(f"{label}:{n}" for label, n in counts.items()) or "-"


def cmd_inspect_data(cmd: Command) -> int:
    """Class counts before and after the class filter, and each worker's shard."""
    cfg = config_from_command(cmd)
    lines: List[str] = []
    for split, images, labels in (
        ("train", cfg.train_images, cfg.train_labels),
        ("test", cfg.test_images, cfg.test_labels),
    ):
        raw = load_idx_files(images, labels)
        kept = class_filter(raw, cfg.removed_classes)
        lines.append(f"{split}: {len(raw)} samples before filter  {_format_counts(class_counts(raw.labels))}")
        lines.append(f"{split}: {len(kept)} samples after removing {list(cfg.removed_classes)}  {_format_counts(class_counts(kept.labels))}")
        if split == "train":
            train_counts = class_counts(kept.labels)

    spec = ShardSpec(m_classes=cfg.m_classes, n_workers=cfg.n_workers, kept_classes=cfg.kept_classes)
    lines.append(f"shards: m={cfg.m_classes} over classes {list(cfg.kept_classes)}")
    for worker in range(cfg.n_workers):
        classes = shard_classes(spec, worker)
        size = sum(train_counts.get(c, 0) for c in set(classes))
        if cfg.samples_per_worker:
            size = min(size, cfg.samples_per_worker)
        lines.append(f"worker {worker}: classes {list(classes)} samples {size}")
    print("\n".join(lines))
    return 0


def cmd_inspect_chain(cmd: Command) -> int:
    """Audits a persisted ledger and prints one summary per block; exit 1 names the first bad block."""
    if cmd.target is not None:
        path = Path(cmd.target)
    else:
        path = output_paths(config_from_command(cmd))["ledger"]
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read ledger '{path}': {e}") from e

    verdict = audit_ledger_bytes(data)
    for block in verdict.blocks:
        print(describe_block(block))
    if not verdict.ok:
        logger.warning(f"INSPECT: Ledger {path} failed the audit at block {verdict.bad_index}: {verdict.reason}.")
        print(f"ledger corrupt: first bad block index {verdict.bad_index} ({verdict.reason})")
        return 1
    print(f"ledger ok: {len(verdict.blocks)} block(s), head {verdict.blocks[-1].block_hash.hex()}")
    return 0
