# bqfl/data.py
import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import RunConfig, derive_rng
from .errors import ConfigError, DataError, ParseError
from .schemas import EncodingMode

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

ByteSource = Union[bytes, bytearray, BinaryIO]


@dataclass(frozen=True)
class RawDataset:
    images: np.ndarray  # [N, rows, cols] uint8
    labels: np.ndarray  # [N] integers 0..9

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class PreparedSample:
    x: np.ndarray  # unit-norm amplitude vector of length 2^n
    y: np.ndarray  # one-hot label
    source_label: int
    pixels: np.ndarray = field(repr=False)  # resized, shifted pixel vector before normalization


@dataclass(frozen=True)
class ShardSpec:
    m_classes: int
    n_workers: int
    kept_classes: Tuple[int, ...] = tuple(range(8))

    def check(self) -> None:
        if not self.kept_classes:
            raise ConfigError("shard spec needs at least one kept class")
        if not 1 <= self.m_classes <= min(8, len(self.kept_classes)):
            raise ConfigError(f"m_classes {self.m_classes} must lie in 1..{min(8, len(self.kept_classes))}")
        if self.n_workers < 1:
            raise ConfigError("shard spec needs at least one worker")


# --- IDX ingestion ---
def _read_all(source: ByteSource) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return source.read()


def _header(buf: bytes, n_fields: int, what: str) -> Tuple[int, ...]:
    need = 4 * n_fields
    if len(buf) < need:
        raise ParseError(f"{what} file truncated inside its {need}-byte header", offset=len(buf))
    return struct.unpack(f">{n_fields}I", buf[:need])


def parse_idx_images(image_file: ByteSource) -> np.ndarray:
    """[N, rows, cols] uint8 images from a rank-3 IDX stream."""
    image_buf = _read_all(image_file)
    magic, count, rows, cols = _header(image_buf, 4, "image")
    if magic != IDX_IMAGE_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}", offset=0)
    expected = 16 + count * rows * cols
    if len(image_buf) < expected:
        raise ParseError(f"image file truncated: {count} images of {rows}x{cols} need {expected} bytes", offset=len(image_buf))
    if len(image_buf) > expected:
        raise ParseError("trailing bytes after the last image", offset=expected)
    return np.frombuffer(image_buf, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols).copy()


def parse_idx_labels(label_file: ByteSource) -> np.ndarray:
    label_buf = _read_all(label_file)
    magic, label_count = _header(label_buf, 2, "label")
    if magic != IDX_LABEL_MAGIC:
        raise ParseError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}", offset=0)
    expected = 8 + label_count
    if len(label_buf) < expected:
        raise ParseError(f"label file truncated: {label_count} labels need {expected} bytes", offset=len(label_buf))
    if len(label_buf) > expected:
        raise ParseError("trailing bytes after the last label", offset=expected)
    labels = np.frombuffer(label_buf, dtype=np.uint8, count=label_count, offset=8)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} outside 0..9", offset=8 + int(bad[0]))
    return labels.astype(np.int64)


def _pair(images: np.ndarray, labels: np.ndarray) -> RawDataset:
    if len(images) != len(labels):
        # offset of the label count field
        raise ParseError(f"image count {len(images)} does not match label count {len(labels)}", offset=4)
    return RawDataset(images=images, labels=labels)


def parse_idx(image_file: ByteSource, label_file: ByteSource) -> RawDataset:
    """Parses a pair of IDX streams (ubyte images of rank 3, ubyte labels of rank 1)."""
    return _pair(parse_idx_images(image_file), parse_idx_labels(label_file))


def _open_maybe_gz(path: str) -> bytes:
    candidates = [path] if path.endswith(".gz") else [path, path + ".gz"]
    for candidate in candidates:
        if os.path.exists(candidate):
            opener = gzip.open if candidate.endswith(".gz") else open
            try:
                with opener(candidate, "rb") as f:
                    return f.read()
            except OSError as e:
                raise DataError(f"cannot read '{candidate}': {e}") from e
    raise DataError(f"dataset file not found: '{path}' (also tried '{path}.gz')")


def _parse_file(path: str, parser):
    try:
        return parser(_open_maybe_gz(path))
    except ParseError as e:
        raise ParseError(f"{path}: {e.message}", offset=e.offset) from e


def load_idx_files(image_path: str, label_path: str) -> RawDataset:
    logger.info(f"DATA: Loading IDX pair {image_path} / {label_path}")
    images = _parse_file(image_path, parse_idx_images)
    labels = _parse_file(label_path, parse_idx_labels)
    try:
        ds = _pair(images, labels)
    except ParseError as e:
        raise ParseError(f"{label_path}: {e.message}", offset=e.offset) from e
    logger.info(f"DATA: Loaded {len(ds)} samples of {ds.images.shape[1]}x{ds.images.shape[2]}.")
    return ds


def encode_idx(images: np.ndarray, labels: Sequence[int]) -> Tuple[bytes, bytes]:
    """Serializes arrays into the IDX image/label byte layout."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    image_bytes = struct.pack(">4I", IDX_IMAGE_MAGIC, count, rows, cols) + images.tobytes()
    label_bytes = struct.pack(">2I", IDX_LABEL_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    return image_bytes, label_bytes


# --- Filtering and preprocessing ---
def class_filter(ds: RawDataset, remove: Iterable[int]) -> RawDataset:
    removed = sorted(set(int(c) for c in remove))
    keep = ~np.isin(ds.labels, removed)
    return RawDataset(images=ds.images[keep], labels=ds.labels[keep])


def class_counts(labels: np.ndarray) -> Dict[int, int]:
    values, counts = np.unique(np.asarray(labels), return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def compute_train_mean(ds: RawDataset) -> np.ndarray:
    return (ds.images.astype(np.float64) / 255.0).mean(axis=0)


def _axis_weights(size_in: int, size_out: int):
    scale = size_in / size_out
    src = (np.arange(size_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, src - lo


def resize_bilinear(images: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize without corner alignment; accepts [H, W] or [N, H, W]."""
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    r_lo, r_hi, r_w = _axis_weights(arr.shape[1], side)
    c_lo, c_hi, c_w = _axis_weights(arr.shape[2], side)
    rows = arr[:, r_lo, :] * (1.0 - r_w)[None, :, None] + arr[:, r_hi, :] * r_w[None, :, None]
    out = rows[:, :, c_lo] * (1.0 - c_w)[None, None, :] + rows[:, :, c_hi] * c_w[None, None, :]
    return out[0] if single else out


def preprocess(
    ds: RawDataset,
    mode: EncodingMode,
    n_qubits: int,
    n_classes: int,
    train_mean: Optional[np.ndarray] = None,
    class_order: Optional[Sequence[int]] = None,
) -> List[PreparedSample]:
    """
    Scale to [0,1], shift per encoding mode, resize to 2^(n/2) per side, flatten,
    L2-normalize and one-hot the label (position of the label in `class_order`).
    """
    if n_qubits % 2 != 0:
        raise ConfigError(f"n_qubits must be even to resize to a square image, got {n_qubits}")
    if mode is EncodingMode.MEAN and train_mean is None:
        raise ConfigError("mean encoding needs the training-set mean image")
    order = list(class_order) if class_order is not None else list(range(n_classes))
    if len(order) != n_classes:
        raise ConfigError(f"class order {order} does not list {n_classes} classes")
    index_of = {c: i for i, c in enumerate(order)}
    if len(ds) == 0:
        return []
    unknown = sorted(set(int(l) for l in ds.labels) - set(index_of))
    if unknown:
        raise DataError(f"labels {unknown} have no one-hot slot among classes {order}")

    side = int(2 ** (n_qubits // 2))
    images = ds.images.astype(np.float64) / 255.0
    if mode is EncodingMode.MEAN:
        images = images - np.asarray(train_mean, dtype=np.float64)[None]
    elif mode is EncodingMode.HALF:
        images = images - 0.5
    pixels = resize_bilinear(images, side).reshape(len(ds), side * side)

    norms = np.sqrt(np.sum(pixels * pixels, axis=1))
    blank = norms == 0.0
    if blank.any():
        logger.warning(f"DATA: {int(blank.sum())} blank image(s) mapped to the basis-0 amplitude vector.")
    x = pixels / np.where(blank, 1.0, norms)[:, None]
    x[blank] = 0.0
    x[blank, 0] = 1.0

    samples: List[PreparedSample] = []
    for i, label in enumerate(ds.labels):
        y = np.zeros(n_classes)
        y[index_of[int(label)]] = 1.0
        samples.append(PreparedSample(x=x[i], y=y, source_label=int(label), pixels=pixels[i]))
    return samples


# --- Sharding and batching ---
def shard_classes(spec: ShardSpec, worker: int) -> Tuple[int, ...]:
    spec.check()
    if not 0 <= worker < spec.n_workers:
        raise ConfigError(f"worker {worker} out of range for {spec.n_workers} workers")
    c = len(spec.kept_classes)
    return tuple(spec.kept_classes[(worker * spec.m_classes + j) % c] for j in range(spec.m_classes))


def cycle_m_shard(samples: Sequence[PreparedSample], spec: ShardSpec, worker: int) -> List[PreparedSample]:
    classes = set(shard_classes(spec, worker))
    return [s for s in samples if s.source_label in classes]


def batches(
    shard: Sequence[PreparedSample], batch_size: int, seed: int, epoch: int, worker: int = 0
) -> List[List[PreparedSample]]:
    """Deterministic shuffle keyed by (seed, worker, epoch); the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = derive_rng(seed, "shuffle", worker, epoch).permutation(len(shard))
    return [[shard[i] for i in order[start:start + batch_size]] for start in range(0, len(shard), batch_size)]


def stack(samples: Sequence[PreparedSample], use_pixels: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs and one-hot labels as [B, d] and [B, C] arrays."""
    xs = np.stack([s.pixels if use_pixels else s.x for s in samples])
    ys = np.stack([s.y for s in samples])
    return xs, ys


# --- Experiment data ---
@dataclass
class ExperimentData:
    train_raw: RawDataset
    test_raw: RawDataset
    train: List[PreparedSample]
    test: List[PreparedSample]
    validation: List[PreparedSample]
    shards: Dict[int, List[PreparedSample]]
    shard_spec: ShardSpec


def load_experiment_data(cfg: RunConfig) -> ExperimentData:
    train_raw = load_idx_files(cfg.train_images, cfg.train_labels)
    test_raw = load_idx_files(cfg.test_images, cfg.test_labels)
    return build_experiment_data(cfg, train_raw, test_raw)


def build_experiment_data(cfg: RunConfig, train_raw: RawDataset, test_raw: RawDataset) -> ExperimentData:
    train_f = class_filter(train_raw, cfg.removed_classes)
    test_f = class_filter(test_raw, cfg.removed_classes)
    logger.info(f"DATA: Class filter removed {cfg.removed_classes}: train {len(train_raw)} -> {len(train_f)}, test {len(test_raw)} -> {len(test_f)}.")

    train_mean = compute_train_mean(train_f) if cfg.encoding is EncodingMode.MEAN else None
    train = preprocess(train_f, cfg.encoding, cfg.n_qubits, cfg.n_classes, train_mean, cfg.kept_classes)
    test_all = preprocess(test_f, cfg.encoding, cfg.n_qubits, cfg.n_classes, train_mean, cfg.kept_classes)

    validation = test_all[: cfg.validation_samples]
    test = test_all[: cfg.test_samples] if cfg.test_samples else test_all

    spec = ShardSpec(m_classes=cfg.m_classes, n_workers=cfg.n_workers, kept_classes=cfg.kept_classes)
    shards: Dict[int, List[PreparedSample]] = {}
    for worker in range(cfg.n_workers):
        shard = cycle_m_shard(train, spec, worker)
        if cfg.samples_per_worker:
            shard = shard[: cfg.samples_per_worker]
        shards[worker] = shard
        logger.info(f"DATA: Worker {worker} shard classes {shard_classes(spec, worker)} with {len(shard)} samples.")
    return ExperimentData(train_raw, test_raw, train, test, validation, shards, spec)
