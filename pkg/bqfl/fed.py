# bqfl/fed.py
"""
Federated orchestration: local training, FedAvg, ensemble inference and the round
pipeline that threads worker updates through miner validation into the ledger.

Device ids: workers are 0..n_workers-1, miners follow them.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analytics, models, tasks
from .chain import (
    Block,
    Ledger,
    ModelUpdate,
    RewardRule,
    ValidationVerdict,
    append_block,
    apply_rewards,
    block_time,
    payload_nbytes,
    reward_stakes,
    select_validator,
    serialize_update,
    validate_update,
)
from .config import RunConfig, derive_rng
from .data import ExperimentData, PreparedSample, batches
from .errors import ArgumentError, DimensionError
from .models import ModelParams
from .schemas import BoundConstants, DeviceRole, FedMode, MetricsRow, OptimizerKind, PayloadKind, TimingMode, WeightsRule
from .vqc import ReadoutMode

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# --- Domain types ---
@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        leaves = params.leaves()
        return cls([np.zeros_like(a) for a in leaves], [np.zeros_like(a) for a in leaves], 0)


@dataclass
class DeviceState:
    id: int
    role: DeviceRole
    params: Optional[ModelParams] = None
    shard: List[PreparedSample] = field(default_factory=list, repr=False)
    validation: List[PreparedSample] = field(default_factory=list, repr=False)
    optimizer_state: Optional[AdamState] = field(default=None, repr=False)
    last_wall_time_s: float = 0.0  # measured, never written to the ledger or CSV


@dataclass(frozen=True)
class TimingModel:
    """
    Simulated mode: latency draws are seeded exponentials, transfers cost bytes over the
    configured bandwidth and block creation costs t_byte_s per payload byte. Wall mode
    passes measured perf-counter times through.
    """
    mode: TimingMode = TimingMode.SIMULATED
    latency_mean_s: float = 0.1
    bandwidth_mbps: float = 20.0
    t_byte_s: float = 1e-8
    seed: int = 0

    @property
    def simulated(self) -> bool:
        return self.mode is TimingMode.SIMULATED

    def latency(self, purpose: str, *indices: int) -> float:
        if self.latency_mean_s == 0:
            return 0.0
        return float(derive_rng(self.seed, purpose, *indices).exponential(self.latency_mean_s))

    def transfer_time(self, nbytes: int) -> float:
        return nbytes / (self.bandwidth_mbps * 1e6 / 8.0)

    def comm_time(self, round_number: int, device_id: int, nbytes: int, measured_s: float) -> float:
        if not self.simulated:
            return measured_s
        return self.latency("comm", round_number, device_id) + self.transfer_time(nbytes)

    def create_time(self, payload_bytes: int, measured_s: float) -> float:
        return payload_bytes * self.t_byte_s if self.simulated else measured_s


@dataclass(frozen=True)
class RoundConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    mode: FedMode
    weights_rule: WeightsRule = WeightsRule.SAMPLES
    optimizer: OptimizerKind = OptimizerKind.ADAM
    readout: Optional[ReadoutMode] = None
    seed: int = 0
    bound: Optional[BoundConstants] = None
    validation_threshold: float = 0.0
    rewards: RewardRule = RewardRule()
    timing: TimingModel = TimingModel()

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        # lr = 0 is accepted here so a null update can be expressed
        if not self.learning_rate >= 0:
            raise ArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer is OptimizerKind.SGD_DECAY and self.bound is None:
            raise ArgumentError("sgd-decay needs bound constants")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "RoundConfig":
        return cls(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            mode=cfg.mode,
            weights_rule=cfg.aggregation_weights,
            optimizer=cfg.optimizer,
            readout=models.readout_mode(cfg) if cfg.mode.is_quantum else None,
            seed=cfg.seed,
            bound=cfg.bound_constants() if cfg.optimizer is OptimizerKind.SGD_DECAY else None,
            validation_threshold=cfg.validation_threshold,
            rewards=RewardRule(cfg.reward_update, cfg.reward_block),
            timing=TimingModel(cfg.timing, cfg.latency_mean_s, cfg.bandwidth_mbps, cfg.t_byte_s, cfg.seed),
        )


@dataclass
class RoundResult:
    round: int
    status: str  # "ok" or "aborted"
    global_params: Optional[ModelParams]
    models: Dict[int, ModelParams]
    rows: List[MetricsRow]
    block: Optional[Block] = None
    leader: Optional[int] = None
    accepted: List[int] = field(default_factory=list)
    rejected: Dict[int, str] = field(default_factory=dict)
    global_accuracy: Optional[float] = None
    epoch_losses: Dict[int, Tuple[float, ...]] = field(default_factory=dict)
    block_time_s: float = 0.0
    wall_times: Dict[int, float] = field(default_factory=dict)
    block_wall_time_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# --- Optimizers ---
def _check_shapes(params: ModelParams, grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    leaves = params.leaves()
    if len(leaves) != len(grads) or any(np.shape(a) != np.shape(g) for a, g in zip(leaves, grads)):
        raise DimensionError(
            f"gradient shapes {[np.shape(g) for g in grads]} do not match parameters {[a.shape for a in leaves]}"
        )
    return leaves


def adam_step(
    params: ModelParams, grads: Sequence[np.ndarray], opt_state: AdamState, lr: float
) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state."""
    leaves = _check_shapes(params, grads)
    if len(opt_state.m) != len(leaves) or any(m.shape != a.shape for m, a in zip(opt_state.m, leaves)):
        raise DimensionError("optimizer moments do not match the parameter shapes")
    step = opt_state.step + 1
    new_leaves, new_m, new_v = [], [], []
    for a, g, m, v in zip(leaves, grads, opt_state.m, opt_state.v):
        g = np.asarray(g, dtype=np.float64)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** step)
        v_hat = v / (1.0 - ADAM_BETA2 ** step)
        new_leaves.append(a - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return params.with_leaves(new_leaves), AdamState(new_m, new_v, step)


def sgd_decay_step(params: ModelParams, grads: Sequence[np.ndarray], bound: BoundConstants, t: int) -> ModelParams:
    lr = analytics.step_size(bound, t)
    leaves = _check_shapes(params, grads)
    return params.with_leaves([a - lr * np.asarray(g, dtype=np.float64) for a, g in zip(leaves, grads)])


# --- Local training ---
def local_train(
    device: DeviceState, cfg: RoundConfig, global_params: ModelParams, round_number: int = 1
) -> Optional[ModelUpdate]:
    """
    Starts from global_params with a fresh optimizer and runs cfg.epochs shuffled passes
    over the shard. Returns None (and logs) when the shard is empty.
    """
    if device.role is not DeviceRole.WORKER:
        raise ArgumentError(f"device {device.id} is a {device.role.value}, only workers train")
    if not device.shard:
        logger.warning(f"FED: Worker {device.id} has an empty shard; skipping local training in round {round_number}.")
        return None

    started = time.perf_counter()
    params = global_params
    state = AdamState.zeros(params)
    epoch_losses: List[float] = []
    for epoch in range(cfg.epochs):
        key = (round_number - 1) * cfg.epochs + epoch
        epoch_batches = batches(device.shard, cfg.batch_size, cfg.seed, key, worker=device.id)
        weighted_loss = 0.0
        for b, batch in enumerate(epoch_batches):
            x, y = models.batch_arrays(params, batch)
            loss, grads = models.loss_and_grad(params, x, y, cfg.readout)
            weighted_loss += loss * len(batch)
            if cfg.optimizer is OptimizerKind.SGD_DECAY:
                params = sgd_decay_step(params, grads, cfg.bound, key * len(epoch_batches) + b)
            else:
                params, state = adam_step(params, grads, state, cfg.learning_rate)
        epoch_losses.append(weighted_loss / len(device.shard))

    device.params = params
    device.optimizer_state = state
    device.last_wall_time_s = time.perf_counter() - started
    train_acc = models.evaluate(params, device.shard, cfg.readout)
    wall = time.perf_counter() - started
    logger.info(
        f"FED: Worker {device.id} round {round_number}: loss {epoch_losses[0]:.4f} -> {epoch_losses[-1]:.4f}, "
        f"train acc {train_acc:.4f} in {wall:.2f}s."
    )
    return ModelUpdate(
        device_id=device.id,
        round=round_number,
        params=params,
        n_samples=len(device.shard),
        train_loss=epoch_losses[-1],
        train_accuracy=train_acc,
        wall_time_s=wall if cfg.timing.mode is TimingMode.WALL else 0.0,
        epoch_losses=tuple(epoch_losses),
    )


# --- Aggregation ---
def fed_avg(updates: Sequence[ModelUpdate], weights_rule: WeightsRule = WeightsRule.SAMPLES) -> ModelParams:
    """
    Elementwise weighted mean, p_k = n_k / sum n_j (or uniform), reduced in ascending
    device-id order. Computed as an offset from the first model so identical inputs
    come back bitwise, then clipped into the inputs' elementwise hull.
    """
    if not updates:
        raise ArgumentError("fed_avg needs at least one update")
    ordered = sorted(updates, key=lambda u: u.device_id)
    if any(u.params is None for u in ordered):
        raise ArgumentError("fed_avg needs parameter payloads, not digests")
    reference = ordered[0].params
    shapes = [a.shape for a in reference.leaves()]
    for u in ordered[1:]:
        if type(u.params) is not type(reference) or [a.shape for a in u.params.leaves()] != shapes:
            raise DimensionError(f"update from device {u.device_id} does not match the model shape")

    counts = [float(u.n_samples) for u in ordered]
    total = math.fsum(counts)
    if weights_rule is WeightsRule.UNIFORM or total == 0:
        weights = [1.0 / len(ordered)] * len(ordered)
    else:
        weights = [c / total for c in counts]

    leaves = []
    for i, base in enumerate(reference.leaves()):
        stacked = np.stack([u.params.leaves()[i] for u in ordered])
        acc = np.zeros_like(base)
        for w, leaf in zip(weights, stacked):
            acc = acc + w * (leaf - base)
        leaves.append(np.clip(base + acc, stacked.min(axis=0), stacked.max(axis=0)))
    return reference.with_leaves(leaves)


def fed_inference_proba(model_list: Sequence[ModelParams], samples: Sequence[PreparedSample], mode: Optional[ReadoutMode]) -> np.ndarray:
    """Uniform mean of the members' class-probability vectors, [B, C]."""
    if not model_list:
        raise ArgumentError("fed_inference needs at least one model")
    total = None
    for params in model_list:
        x, _ = models.batch_arrays(params, samples)
        p = models.predict_proba(params, x, mode)
        total = p if total is None else total + p
    return total / len(model_list)


def fed_inference(model_list: Sequence[ModelParams], batch_x, mode: Optional[ReadoutMode]) -> np.ndarray:
    """Predicted classes of the uniform ensemble on a ready input array (lowest index on ties)."""
    if not model_list:
        raise ArgumentError("fed_inference needs at least one model")
    total = None
    for params in model_list:
        p = models.predict_proba(params, batch_x, mode)
        total = p if total is None else total + p
    return np.argmax(total / len(model_list), axis=1)


def ensemble_accuracy(model_list: Sequence[ModelParams], samples: Sequence[PreparedSample], mode: Optional[ReadoutMode]) -> float:
    if not samples:
        return 0.0
    probs = fed_inference_proba(model_list, samples, mode)
    labels = np.argmax(np.stack([s.y for s in samples]), axis=1)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


# --- Rounds ---
def build_devices(cfg: RunConfig, data: ExperimentData, init_params: ModelParams) -> List[DeviceState]:
    devices = [
        DeviceState(id=w, role=DeviceRole.WORKER, params=init_params, shard=list(data.shards.get(w, [])))
        for w in range(cfg.n_workers)
    ]
    # each miner validates on its own contiguous slice of the validation set
    bounds = np.linspace(0, len(data.validation), cfg.n_miners + 1).astype(int)
    for j in range(cfg.n_miners):
        devices.append(
            DeviceState(
                id=cfg.n_workers + j,
                role=DeviceRole.MINER,
                params=init_params,
                validation=list(data.validation[bounds[j]:bounds[j + 1]]),
            )
        )
    return devices


def _validate_all(miner: DeviceState, updates: Sequence[ModelUpdate], cfg: RoundConfig) -> Tuple[List[ValidationVerdict], float]:
    started = time.perf_counter()
    verdicts = [validate_update(u, miner, cfg.validation_threshold, cfg.readout) for u in updates]
    return verdicts, time.perf_counter() - started


async def run_round(
    devices: Sequence[DeviceState],
    cfg: RoundConfig,
    ledger: Ledger,
    global_params: ModelParams,
    round_number: int,
    test_set: Sequence[PreparedSample],
) -> RoundResult:
    """
    Workers train in parallel, every miner validates every update, the stake-selected
    leader's verdicts are committed in a new block, then the accepted updates are
    aggregated (avg modes) or kept as an ensemble (bqfl-inf).
    """
    workers = sorted((d for d in devices if d.role is DeviceRole.WORKER), key=lambda d: d.id)
    miners = sorted((d for d in devices if d.role is DeviceRole.MINER), key=lambda d: d.id)
    if not workers or not miners:
        raise ArgumentError("a round needs at least one worker and one miner")
    ensemble = cfg.mode is FedMode.BQFL_INF

    starts = [w.params if ensemble and w.params is not None else global_params for w in workers]
    results = await tasks.gather_blocking(
        [partial(local_train, w, cfg, s, round_number) for w, s in zip(workers, starts)]
    )
    updates = [u for u in results if u is not None]
    epoch_losses = {u.device_id: u.epoch_losses for u in updates}
    if not updates:
        logger.warning(f"FED: Round {round_number} aborted: no worker produced an update.")
        return RoundResult(round_number, "aborted", global_params, {}, [], epoch_losses=epoch_losses)

    verdict_sets = await tasks.gather_blocking([partial(_validate_all, m, updates, cfg) for m in miners])
    draw = float(derive_rng(cfg.seed, "validator", round_number).random())
    leader = select_validator(ledger.stakes.subset(m.id for m in miners), draw)
    verdicts, leader_wall = verdict_sets[[m.id for m in miners].index(leader)]
    accepted = [u for u, v in zip(updates, verdicts) if v.accepted]
    rejected = {u.device_id: v.reason for u, v in zip(updates, verdicts) if not v.accepted}
    for device_id, reason in rejected.items():
        logger.warning(f"FED: Miner {leader} rejected the update of worker {device_id} in round {round_number}: {reason}.")
    if not accepted:
        logger.warning(f"FED: Round {round_number} aborted: all {len(updates)} update(s) were rejected.")
        return RoundResult(
            round_number, "aborted", global_params, {}, [], leader=leader, rejected=rejected, epoch_losses=epoch_losses
        )

    # Aggregation. Every node would reach the same result from the block's recorded updates.
    if ensemble:
        ensemble_models = {u.device_id: u.params for u in sorted(accepted, key=lambda u: u.device_id)}
        new_global = None
        download_bytes = sum(payload_nbytes(p) for p in ensemble_models.values())
    else:
        ensemble_models = {}
        new_global = fed_avg(accepted, cfg.weights_rule)
        download_bytes = payload_nbytes(new_global)

    # Block assembly and timing
    assembly_started = time.perf_counter()
    upload_bytes = {u.device_id: len(serialize_update(u)) for u in updates}
    recorded_bytes = sum(
        len(serialize_update(u if ledger.payload is PayloadKind.PARAMS else u.digest_only())) for u in accepted
    )
    assembly_wall = time.perf_counter() - assembly_started

    timing = cfg.timing
    comm: Dict[int, float] = {}
    for w in workers:
        moved = upload_bytes.get(w.id, 0) + download_bytes
        comm[w.id] = timing.comm_time(round_number, w.id, moved, w.last_wall_time_s)
    miner_bytes = sum(upload_bytes.values())
    for m, (_, wall) in zip(miners, verdict_sets):
        comm[m.id] = timing.comm_time(round_number, m.id, miner_bytes, wall)
    t_create = timing.create_time(recorded_bytes, assembly_wall + leader_wall)
    latency = timing.latency("block-latency", round_number)
    t_block = block_time(t_create, latency)
    clock = ledger.clock_s + max(comm.values()) + t_block if timing.simulated else time.time()

    new_stakes = reward_stakes(ledger.stakes, [u.device_id for u in accepted], leader, cfg.rewards)
    append_started = time.perf_counter()
    block = append_block(ledger, accepted, leader, new_stakes, clock)
    block_wall = time.perf_counter() - append_started + assembly_wall
    ledger.stakes = apply_rewards(ledger.stakes, block, cfg.rewards)

    # Evaluation
    if ensemble:
        global_acc = await tasks.run_blocking(
            partial(ensemble_accuracy, list(ensemble_models.values()), test_set, cfg.readout)
        )
    else:
        global_acc = await tasks.run_blocking(partial(models.evaluate, new_global, test_set, cfg.readout))
        for d in list(workers) + list(miners):
            d.params = new_global
    local_accs = await tasks.gather_blocking(
        [partial(models.evaluate, u.params, test_set, cfg.readout) for u in updates]
    )
    local_acc = {u.device_id: acc for u, acc in zip(updates, local_accs)}

    rows: List[MetricsRow] = []
    stakes = ledger.stakes.stakes
    by_id = {u.device_id: u for u in updates}
    for w in workers:
        u = by_id.get(w.id)
        rows.append(MetricsRow(
            round=round_number,
            device_id=w.id,
            role=DeviceRole.WORKER,
            mode=cfg.mode,
            train_loss=u.train_loss if u else None,
            train_acc=u.train_accuracy if u else None,
            test_acc_top1=local_acc.get(w.id),
            comm_time_s=comm[w.id],
            block_gen_time_s=t_block,
            stake=stakes[w.id],
        ))
    for m in miners:
        rows.append(MetricsRow(
            round=round_number,
            device_id=m.id,
            role=DeviceRole.MINER,
            mode=cfg.mode,
            test_acc_top1=global_acc,
            comm_time_s=comm[m.id],
            block_gen_time_s=t_block,
            stake=stakes[m.id],
        ))
    rows.append(MetricsRow(
        round=round_number,
        device_id=-1,
        role=DeviceRole.GLOBAL,
        mode=cfg.mode,
        test_acc_top1=global_acc,
        comm_time_s=max(comm.values()),
        block_gen_time_s=t_block,
        stake=ledger.stakes.total,
    ))
    logger.info(
        f"FED: Round {round_number} sealed by miner {leader}: {len(accepted)}/{len(updates)} update(s) accepted, "
        f"{'ensemble' if ensemble else 'global'} test acc {global_acc:.4f}."
    )
    wall_times = {w.id: w.last_wall_time_s for w in workers}
    return RoundResult(
        round=round_number,
        status="ok",
        global_params=new_global if not ensemble else global_params,
        models=ensemble_models,
        rows=rows,
        block=block,
        leader=leader,
        accepted=[u.device_id for u in accepted],
        rejected=rejected,
        global_accuracy=global_acc,
        epoch_losses=epoch_losses,
        block_time_s=t_block,
        wall_times=wall_times,
        block_wall_time_s=block_wall,
    )


class Federation:
    """One configured federated run: devices, ledger and the evolving global state."""

    def __init__(self, cfg: RunConfig, data: ExperimentData, init_params: Optional[ModelParams] = None):
        self.cfg = cfg
        self.round_cfg = RoundConfig.from_run_config(cfg)
        self.global_params = init_params if init_params is not None else models.init_model(cfg)
        self.devices = build_devices(cfg, data, self.global_params)
        self.ledger = Ledger.create([d.id for d in self.devices], cfg.ledger_payload)
        self.test_set = data.test
        self.ensemble: Dict[int, ModelParams] = {}
        self.results: List[RoundResult] = []
        logger.info(
            f"FED: {cfg.run_name} with {cfg.n_workers} worker(s), {cfg.n_miners} miner(s) "
            f"and {models.parameter_count(self.global_params)} trainable parameter(s)."
        )

    @property
    def rows(self) -> List[MetricsRow]:
        return [row for result in self.results for row in result.rows]

    @property
    def final_accuracy(self) -> Optional[float]:
        for result in reversed(self.results):
            if result.ok:
                return result.global_accuracy
        return None

    async def run_round(self, round_number: int) -> RoundResult:
        result = await run_round(
            self.devices, self.round_cfg, self.ledger, self.global_params, round_number, self.test_set
        )
        if result.ok:
            if result.models:
                self.ensemble = dict(result.models)
            else:
                self.global_params = result.global_params
        self.results.append(result)
        return result

    async def run(self, on_round: Optional[Callable[[RoundResult], None]] = None) -> List[RoundResult]:
        logger.info(
            f"FED: Starting {self.cfg.rounds} round(s) of {self.cfg.mode.value} with "
            f"{self.cfg.n_workers} worker(s) and {self.cfg.n_miners} miner(s)."
        )
        for round_number in range(1, self.cfg.rounds + 1):
            result = await self.run_round(round_number)
            if on_round is not None:
                on_round(result)
        return self.results
