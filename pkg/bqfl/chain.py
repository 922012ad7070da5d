# bqfl/chain.py
"""
Simulated proof-of-stake ledger.

Canonical block serialization: fixed field order, integers as 8-byte big-endian,
reals as IEEE-754 binary64 big-endian bit patterns, arrays and nested records
length-prefixed. Block hashes are SHA-256 over those bytes.
"""
import hashlib
import logging
import math
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .classical import MlpParams
from .errors import ArgumentError, DataError, IntegrityError, ParseError
from .models import ModelParams, evaluate, is_finite
from .schemas import PayloadKind
from .vqc import CircuitParams, ReadoutMode

if TYPE_CHECKING:
    from .fed import DeviceState

logger = logging.getLogger(__name__)

HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
GENESIS_MINER = 2 ** 64 - 1
GENESIS_STAKE = 1.0
LEDGER_MAGIC = b"BQFLLEDG"
LEDGER_VERSION = 2
# header byte naming what update records carry; codes differ in two bits
LEDGER_PAYLOAD_CODES = {PayloadKind.PARAMS: 1, PayloadKind.DIGEST: 2}

_PAYLOAD_DIGEST, _PAYLOAD_CIRCUIT, _PAYLOAD_MLP = 0, 1, 2


# --- Domain types ---
@dataclass(frozen=True, eq=False)
class ModelUpdate:
    device_id: int
    round: int
    params: Optional[ModelParams]  # None once only the digest was recorded
    n_samples: int
    train_loss: float
    train_accuracy: float
    wall_time_s: float = 0.0
    params_digest: bytes = b""
    epoch_losses: Tuple[float, ...] = field(default=(), repr=False)  # kept in memory only

    def __post_init__(self):
        if self.n_samples < 0:
            raise ArgumentError(f"n_samples must be >= 0, got {self.n_samples}")
        if not self.params_digest:
            if self.params is None:
                raise ArgumentError("an update needs parameters or a parameter digest")
            object.__setattr__(self, "params_digest", params_digest(self.params))

    def digest_only(self) -> "ModelUpdate":
        return replace(self, params=None)


@dataclass(frozen=True, eq=False)
class Block:
    index: int
    prev_hash: bytes
    timestamp_s: float
    miner_id: int
    updates: Tuple[ModelUpdate, ...]
    stake_snapshot: Tuple[Tuple[int, float], ...]
    signature: bytes = b""  # placeholder, never verified
    block_hash: bytes = b""

    def __post_init__(self):
        if not self.block_hash:
            object.__setattr__(self, "block_hash", hashlib.sha256(serialize_block_body(self)).digest())


@dataclass(frozen=True)
class StakeTable:
    stakes: Mapping[int, float]

    def __post_init__(self):
        ordered = {int(k): float(self.stakes[k]) for k in sorted(self.stakes)}
        for device_id, stake in ordered.items():
            if not math.isfinite(stake) or stake < 0:
                raise ArgumentError(f"stake of device {device_id} must be finite and >= 0, got {stake}")
        object.__setattr__(self, "stakes", ordered)

    @classmethod
    def genesis(cls, device_ids: Iterable[int], stake: float = GENESIS_STAKE) -> "StakeTable":
        return cls({int(d): stake for d in device_ids})

    @property
    def total(self) -> float:
        return math.fsum(self.stakes.values())

    def probabilities(self) -> Dict[int, float]:
        total = self.total
        if not total > 0:
            raise ArgumentError("total stake must be positive")
        return {d: s / total for d, s in self.stakes.items()}

    def subset(self, device_ids: Iterable[int]) -> "StakeTable":
        return StakeTable({d: self.stakes[d] for d in device_ids})

    def as_tuple(self) -> Tuple[Tuple[int, float], ...]:
        return tuple(self.stakes.items())


@dataclass(frozen=True)
class RewardRule:
    r_update: float = 1.0
    r_block: float = 2.0


@dataclass(frozen=True)
class ValidationVerdict:
    accepted: bool
    reason: str
    accuracy: Optional[float] = None


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    bad_index: Optional[int] = None
    reason: str = ""
    blocks: Tuple[Block, ...] = ()
    payload: Optional[PayloadKind] = None


# --- Canonical serialization ---
def _u8(v: int) -> bytes:
    return struct.pack(">B", v)


def _u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def _f64(v: float) -> bytes:
    return struct.pack(">d", v)


def _blob(b: bytes) -> bytes:
    return _u64(len(b)) + b


def _array(a: np.ndarray) -> bytes:
    arr = np.asarray(a, dtype=np.float64)
    return _u64(arr.ndim) + b"".join(_u64(d) for d in arr.shape) + arr.astype(">f8").tobytes()


def _params_bytes(params: ModelParams) -> bytes:
    if isinstance(params, CircuitParams):
        return _u8(_PAYLOAD_CIRCUIT) + _u64(params.k_layers) + _u64(params.n_qubits) + _array(params.values)
    if isinstance(params, MlpParams):
        return _u8(_PAYLOAD_MLP) + b"".join(_array(a) for a in params.leaves())
    raise ArgumentError(f"cannot serialize parameters of type {type(params).__name__}")


def params_digest(params: ModelParams) -> bytes:
    return hashlib.sha256(_params_bytes(params)).digest()


def payload_nbytes(params: ModelParams) -> int:
    """Size of the canonical parameter payload, the unit of simulated transfer cost."""
    return len(_params_bytes(params))


def serialize_update(update: ModelUpdate) -> bytes:
    payload = _params_bytes(update.params) if update.params is not None else _u8(_PAYLOAD_DIGEST)
    return b"".join([
        _u64(update.device_id),
        _u64(update.round),
        payload,
        update.params_digest,
        _u64(update.n_samples),
        _f64(update.train_loss),
        _f64(update.train_accuracy),
        _f64(update.wall_time_s),
    ])


def serialize_block_body(block: Block) -> bytes:
    parts = [
        _u64(block.index),
        block.prev_hash,
        _f64(block.timestamp_s),
        _u64(block.miner_id),
        _u64(len(block.updates)),
    ]
    parts.extend(_blob(serialize_update(u)) for u in block.updates)
    parts.append(_u64(len(block.stake_snapshot)))
    parts.extend(_u64(d) + _f64(s) for d, s in block.stake_snapshot)
    parts.append(_blob(block.signature))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, base: int = 0):
        self.buf = buf
        self.pos = 0
        self.base = base

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated record: need {n} bytes", offset=self.base + self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack(">B", self.take(1))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self.take(8))[0]

    def array(self) -> np.ndarray:
        ndim = self.u64()
        if ndim > 4:
            raise ParseError(f"implausible array rank {ndim}", offset=self.base + self.pos)
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype=">f8").astype(np.float64).reshape(shape)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _read_params(r: _Reader) -> Optional[ModelParams]:
    kind = r.u8()
    if kind == _PAYLOAD_DIGEST:
        return None
    if kind == _PAYLOAD_CIRCUIT:
        k, n = r.u64(), r.u64()
        return CircuitParams(k, n, r.array())
    if kind == _PAYLOAD_MLP:
        return MlpParams(*(r.array() for _ in range(4)))
    raise ParseError(f"unknown payload kind {kind}", offset=r.base + r.pos - 1)


def parse_update(buf: bytes, base: int = 0) -> ModelUpdate:
    r = _Reader(buf, base)
    device_id, round_index = r.u64(), r.u64()
    try:
        params = _read_params(r)
    except ParseError:
        raise
    except Exception as e:  # shape errors from corrupted dimension fields
        raise ParseError(f"malformed parameter payload: {e}", offset=base + r.pos) from e
    digest = r.take(HASH_SIZE)
    update = ModelUpdate(
        device_id=device_id,
        round=round_index,
        params=params,
        n_samples=r.u64(),
        train_loss=r.f64(),
        train_accuracy=r.f64(),
        wall_time_s=r.f64(),
        params_digest=digest,
    )
    if not r.done():
        raise ParseError("trailing bytes after update record", offset=base + r.pos)
    return update


def parse_block_body(body: bytes, block_hash: bytes = b"", base: int = 0) -> Block:
    r = _Reader(body, base)
    index = r.u64()
    prev_hash = r.take(HASH_SIZE)
    timestamp = r.f64()
    miner_id = r.u64()
    updates = []
    for _ in range(r.u64()):
        length = r.u64()
        start = r.base + r.pos
        updates.append(parse_update(r.take(length), start))
    stakes = tuple((r.u64(), r.f64()) for _ in range(r.u64()))
    signature = r.take(r.u64())
    if not r.done():
        raise ParseError("trailing bytes after block body", offset=r.base + r.pos)
    return Block(index, prev_hash, timestamp, miner_id, tuple(updates), stakes, signature, block_hash)


# --- Ledger ---
class Ledger:
    """Single-writer hash chain plus the live stake table."""

    def __init__(self, blocks: Sequence[Block], stakes: StakeTable, payload: PayloadKind = PayloadKind.PARAMS):
        self._blocks: List[Block] = list(blocks)
        self.stakes = stakes
        self.payload = payload
        self.clock_s = blocks[-1].timestamp_s if blocks else 0.0
        self._lock = threading.Lock()

    @classmethod
    def create(cls, device_ids: Iterable[int], payload: PayloadKind = PayloadKind.PARAMS) -> "Ledger":
        stakes = StakeTable.genesis(device_ids)
        genesis = Block(0, ZERO_HASH, 0.0, GENESIS_MINER, (), stakes.as_tuple())
        logger.info(f"CHAIN: Genesis block {genesis.block_hash.hex()[:16]} with {len(stakes.stakes)} devices at stake {GENESIS_STAKE}.")
        return cls([genesis], stakes, payload)

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def head(self) -> Block:
        return self._blocks[-1]

    def __len__(self) -> int:
        return len(self._blocks)

    def to_bytes(self) -> bytes:
        parts = [LEDGER_MAGIC, struct.pack(">IB", LEDGER_VERSION, LEDGER_PAYLOAD_CODES[self.payload])]
        for block in self.blocks:
            parts.append(_blob(serialize_block_body(block)))
            parts.append(block.block_hash)
        return b"".join(parts)

    def save(self, path) -> int:
        data = self.to_bytes()
        try:
            Path(path).write_bytes(data)
        except OSError as e:
            raise DataError(f"cannot write ledger to '{path}': {e}") from e
        return len(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ledger":
        verdict = audit_ledger_bytes(data)
        if not verdict.ok:
            raise IntegrityError(f"ledger rejected: {verdict.reason}", index=verdict.bad_index)
        stakes = StakeTable(dict(verdict.blocks[-1].stake_snapshot))
        return cls(verdict.blocks, stakes, verdict.payload)

    @classmethod
    def load(cls, path) -> "Ledger":
        return cls.from_bytes(Path(path).read_bytes())


def audit_ledger_bytes(data: bytes) -> ChainVerdict:
    """Parses a persisted ledger and checks every hash and parent link; reports the first bad block."""
    header = len(LEDGER_MAGIC) + 5
    if len(data) < header or data[: len(LEDGER_MAGIC)] != LEDGER_MAGIC:
        return ChainVerdict(False, 0, "missing ledger magic")
    version, code = struct.unpack(">IB", data[len(LEDGER_MAGIC):header])
    if version != LEDGER_VERSION:
        return ChainVerdict(False, 0, "unsupported ledger version")
    payload = next((kind for kind, c in LEDGER_PAYLOAD_CODES.items() if c == code), None)
    if payload is None:
        return ChainVerdict(False, 0, f"unknown ledger payload code {code}")
    r = _Reader(data)
    r.pos = header
    blocks: List[Block] = []
    while not r.done():
        index = len(blocks)
        try:
            body = r.take(r.u64())
            stored = r.take(HASH_SIZE)
            block = parse_block_body(body, stored, base=r.pos - HASH_SIZE - len(body))
        except ParseError as e:
            return ChainVerdict(False, index, f"unparseable block: {e.detail}", tuple(blocks))
        if hashlib.sha256(body).digest() != stored:
            return ChainVerdict(False, index, "stored hash does not match block contents", tuple(blocks))
        if serialize_block_body(block) != body:
            return ChainVerdict(False, index, "block bytes are not canonical", tuple(blocks))
        if any((u.params is None) != (payload is PayloadKind.DIGEST) for u in block.updates):
            return ChainVerdict(False, index, f"update records do not match the {payload.value} payload", tuple(blocks))
        blocks.append(block)
    if not blocks:
        return ChainVerdict(False, 0, "ledger holds no blocks")
    verdict = validate_chain(blocks)
    return ChainVerdict(verdict.ok, verdict.bad_index, verdict.reason, tuple(blocks), payload)


def validate_chain(ledger) -> ChainVerdict:
    """Recomputes every block hash and parent link of a Ledger or a block sequence."""
    blocks = ledger.blocks if isinstance(ledger, Ledger) else tuple(ledger)
    if not blocks:
        return ChainVerdict(False, 0, "ledger holds no blocks")
    prev_hash = ZERO_HASH
    for position, block in enumerate(blocks):
        if block.index != position:
            return ChainVerdict(False, position, f"index {block.index} where {position} was expected", blocks)
        if block.prev_hash != prev_hash:
            return ChainVerdict(False, position, "parent hash mismatch", blocks)
        if hashlib.sha256(serialize_block_body(block)).digest() != block.block_hash:
            return ChainVerdict(False, position, "block hash mismatch", blocks)
        prev_hash = block.block_hash
    return ChainVerdict(True, None, "ok", blocks)


# --- Consensus ---
def select_validator(stakes: StakeTable, rng_draw: float) -> int:
    """Inverse-CDF draw over cumulative stake intervals in ascending device-id order."""
    total = stakes.total
    if not total > 0:
        raise ArgumentError("cannot select a validator with zero total stake")
    if not 0.0 <= rng_draw < 1.0:
        raise ArgumentError(f"draw must lie in [0, 1), got {rng_draw}")
    target = rng_draw * total
    cumulative = 0.0
    chosen = None
    for device_id, stake in stakes.stakes.items():
        if stake > 0:
            chosen = device_id
        cumulative += stake
        if target < cumulative:
            return device_id
    return chosen  # rounding left target at the very top of the last interval


def block_time(t_create: float, latency_L: float) -> float:
    """Time for a block to be created and validated: max(t, L) + t."""
    if t_create < 0 or latency_L < 0:
        raise ArgumentError(f"times must be >= 0, got t={t_create}, L={latency_L}")
    return max(t_create, latency_L) + t_create


def expected_block_time(stakes: StakeTable, per_node_T: Mapping[int, float]) -> float:
    """
    E[T] = (1 / sum prob_i) * sum prob_i * T_i. The normalizer is identically one; it is
    kept as written. A constant schedule returns T itself.
    """
    probs = stakes.probabilities()
    missing = [d for d in probs if d not in per_node_T]
    if missing:
        raise ArgumentError(f"no block time for devices {missing}")
    times = [float(per_node_T[d]) for d in probs]
    if all(t == times[0] for t in times):
        return times[0]
    weighted = math.fsum(probs[d] * float(per_node_T[d]) for d in probs)
    return (1.0 / math.fsum(probs.values())) * weighted


def validate_update(
    update: ModelUpdate,
    miner: "DeviceState",
    threshold: float,
    readout: Optional[ReadoutMode] = None,
) -> ValidationVerdict:
    if update.params is None:
        return ValidationVerdict(False, "missing-params")
    if not is_finite(update.params):
        return ValidationVerdict(False, "nonfinite")
    acc = evaluate(update.params, miner.validation, readout)
    if acc >= threshold:
        return ValidationVerdict(True, "ok", acc)
    return ValidationVerdict(False, f"accuracy {acc:.4f} below threshold {threshold}", acc)


def append_block(
    ledger: Ledger,
    updates: Sequence[ModelUpdate],
    miner_id: int,
    stakes: StakeTable,
    clock: float,
) -> Block:
    """Seals the updates (ascending device id) into a block linked to the current head."""
    recorded = tuple(
        u if ledger.payload is PayloadKind.PARAMS else u.digest_only()
        for u in sorted(updates, key=lambda u: u.device_id)
    )
    with ledger._lock:
        parent = ledger.head
        block = Block(
            index=parent.index + 1,
            prev_hash=parent.block_hash,
            timestamp_s=float(clock),
            miner_id=int(miner_id),
            updates=recorded,
            stake_snapshot=stakes.as_tuple(),
        )
        if block.prev_hash != ledger.head.block_hash:
            raise IntegrityError("parent hash mismatch while appending", index=block.index)
        ledger._blocks.append(block)
        ledger.clock_s = block.timestamp_s
    logger.info(f"CHAIN: Block {block.index} sealed by miner {miner_id} with {len(recorded)} update(s), hash {block.block_hash.hex()[:16]}.")
    return block


def reward_stakes(stakes: StakeTable, worker_ids: Sequence[int], miner_id: int, reward_rule: RewardRule) -> StakeTable:
    if not worker_ids or miner_id == GENESIS_MINER:
        return stakes
    new = dict(stakes.stakes)
    for device_id in worker_ids:
        new[device_id] = new.get(device_id, 0.0) + reward_rule.r_update
    new[miner_id] = new.get(miner_id, 0.0) + reward_rule.r_block
    return StakeTable(new)


def apply_rewards(stakes: StakeTable, block: Block, reward_rule: RewardRule) -> StakeTable:
    """Each recorded update's worker gains r_update, the sealing miner gains r_block."""
    return reward_stakes(stakes, [u.device_id for u in block.updates], block.miner_id, reward_rule)


def block_size_bytes(block: Block) -> int:
    return len(serialize_block_body(block)) + HASH_SIZE


def describe_block(block: Block) -> str:
    miner = "genesis" if block.miner_id == GENESIS_MINER else f"miner {block.miner_id}"
    devices = ",".join(str(u.device_id) for u in block.updates) or "-"
    return (
        f"#{block.index} {block.block_hash.hex()[:16]} prev {block.prev_hash.hex()[:16]} "
        f"t={block.timestamp_s:.6f}s {miner} updates[{devices}] size={block_size_bytes(block)}B total_stake={math.fsum(s for _, s in block.stake_snapshot):g}"
    )
