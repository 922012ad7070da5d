# bqfl/config.py
import hashlib
import io
import logging
import os
from pathlib import Path
from typing import Annotated, Dict, Iterable, List, Optional, Tuple

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .schemas import (
    BoundConstants,
    EncodingMode,
    FedMode,
    OptimizerKind,
    PayloadKind,
    ReadoutKind,
    TimingMode,
    WeightsRule,
)

load_dotenv() # Load environment variables from .env file

logger = logging.getLogger(__name__)

# --- Process Configuration ---
LOG_LEVEL = os.getenv("BQFL_LOG_LEVEL", "INFO").upper()
DATA_DIR = os.getenv("BQFL_DATA_DIR", "./data")
OUTPUT_DIR = os.getenv("BQFL_OUTPUT_DIR", "./runs")

try:
    MAX_PARALLEL = int(os.getenv("BQFL_MAX_PARALLEL", 4))
except ValueError:
    logger.warning("CONFIG: Invalid BQFL_MAX_PARALLEL in environment. Using default 4.")
    MAX_PARALLEL = 4

# Standard MNIST file names; a '.gz' sibling is accepted by the loader.
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

ALL_CLASSES = tuple(range(10))


def _split_list(value):
    if isinstance(value, str):
        if value.strip().lower() == "none":
            return ()
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


IntList = Annotated[Tuple[int, ...], BeforeValidator(_split_list)]
FloatList = Annotated[Tuple[float, ...], BeforeValidator(_split_list)]


class RunConfig(BaseModel):
    """Full description of one experiment. Immutable once validated."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: FedMode = FedMode.BQFL_AVG
    n_qubits: int = 8
    k_layers: int = 2
    readout: ReadoutKind = ReadoutKind.SOFTMAX
    n_workers: int = 7
    n_miners: int = 2
    m_classes: int = 8
    removed_classes: IntList = (8, 9)
    encoding: EncodingMode = EncodingMode.VANILLA
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.01
    optimizer: OptimizerKind = OptimizerKind.ADAM
    aggregation_weights: WeightsRule = WeightsRule.SAMPLES
    rounds: int = 3
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    samples_per_worker: int = Field(default=0, ge=0)
    test_samples: int = Field(default=0, ge=0)
    validation_samples: int = Field(default=500, ge=1)
    hidden_units: int = Field(default=32, ge=1)
    latency_mean_s: float = Field(default=0.1, ge=0.0)
    reward_update: float = Field(default=1.0, ge=0.0)
    reward_block: float = Field(default=2.0, ge=0.0)
    validation_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    ledger_payload: PayloadKind = PayloadKind.PARAMS
    timing: TimingMode = TimingMode.SIMULATED
    bandwidth_mbps: float = Field(default=20.0, gt=0.0)
    t_byte_s: float = Field(default=1e-8, ge=0.0)
    t_gate_s: float = Field(default=1e-9, ge=0.0)
    train_images: str = Field(default_factory=lambda: os.path.join(DATA_DIR, MNIST_FILES["train_images"]))
    train_labels: str = Field(default_factory=lambda: os.path.join(DATA_DIR, MNIST_FILES["train_labels"]))
    test_images: str = Field(default_factory=lambda: os.path.join(DATA_DIR, MNIST_FILES["test_images"]))
    test_labels: str = Field(default_factory=lambda: os.path.join(DATA_DIR, MNIST_FILES["test_labels"]))
    output_dir: str = Field(default_factory=lambda: OUTPUT_DIR)
    results_db: str = "none"
    sweep_m_classes: IntList = (2, 4, 8)
    bound_l_smooth: Optional[float] = None
    bound_mu: Optional[float] = None
    bound_sigma: Optional[FloatList] = None
    bound_p: Optional[FloatList] = None
    bound_gamma: float = Field(default=0.0, ge=0.0)
    bound_g: float = Field(default=0.0, ge=0.0)
    bound_theta_gap: float = Field(default=0.0, ge=0.0)
    bound_t: Optional[int] = Field(default=None, ge=1)
    bound_t_create_s: float = Field(default=0.0, ge=0.0)
    bound_node_times_s: Optional[FloatList] = None

    @model_validator(mode="after")
    def _check_invariants(self) -> "RunConfig":
        if self.n_qubits % 2 != 0:
            raise ValueError(f"n_qubits must be even so images resize to a square, got {self.n_qubits}")
        if not 2 <= self.n_qubits <= 12:
            raise ValueError(f"n_qubits must lie in 2..12, got {self.n_qubits}")
        if self.k_layers < 0:
            raise ValueError("k_layers must be >= 0")
        if self.n_workers < 1 or self.n_miners < 1:
            raise ValueError("n_workers and n_miners must both be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.rounds < 1:
            raise ValueError("batch_size, epochs and rounds must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if any(c not in ALL_CLASSES for c in self.removed_classes):
            raise ValueError(f"removed_classes must be digits 0..9, got {self.removed_classes}")
        n_classes = len(self.kept_classes)
        if n_classes < 2:
            raise ValueError("at least two classes must remain after removal")
        if not 1 <= self.m_classes <= min(8, n_classes):
            raise ValueError(f"m_classes must lie in 1..{min(8, n_classes)}, got {self.m_classes}")
        if self.mode.is_quantum:
            if self.readout is ReadoutKind.SOFTMAX and n_classes > self.n_qubits:
                raise ValueError(f"softmax readout needs n_classes ({n_classes}) <= n_qubits ({self.n_qubits})")
            if self.readout is ReadoutKind.SAMPLE and n_classes > 2 ** self.n_qubits:
                raise ValueError(f"sample readout needs n_classes ({n_classes}) <= 2^n_qubits")
        if self.bound_p is not None and len(self.bound_p) != self.n_workers:
            raise ValueError(f"bound_p needs one weight per worker ({self.n_workers})")
        if self.bound_node_times_s is not None and len(self.bound_node_times_s) != self.n_miners:
            raise ValueError(f"bound_node_times_s needs one time per miner ({self.n_miners})")
        if self.optimizer is OptimizerKind.SGD_DECAY and not self.has_bound_constants:
            raise ValueError("optimizer = sgd-decay needs bound_l_smooth, bound_mu and bound_sigma")
        return self

    @property
    def kept_classes(self) -> Tuple[int, ...]:
        return tuple(c for c in ALL_CLASSES if c not in self.removed_classes)

    @property
    def n_classes(self) -> int:
        return len(self.kept_classes)

    @property
    def run_name(self) -> str:
        return f"{self.mode.value}_{self.seed}"

    @property
    def has_bound_constants(self) -> bool:
        return self.bound_l_smooth is not None and self.bound_mu is not None and self.bound_sigma is not None

    def bound_constants(self) -> BoundConstants:
        """Assembles the bound constants; p_k defaults to uniform weights over the workers."""
        if not self.has_bound_constants:
            raise ConfigError("bound constants missing: set bound_l_smooth, bound_mu and bound_sigma")
        p_k = list(self.bound_p) if self.bound_p is not None else [1.0 / self.n_workers] * self.n_workers
        sigma_k = list(self.bound_sigma)
        if len(sigma_k) == 1 and len(p_k) > 1:
            sigma_k = sigma_k * len(p_k)
        try:
            return BoundConstants(
                L_smooth=self.bound_l_smooth,
                mu=self.bound_mu,
                sigma_k=sigma_k,
                p_k=p_k,
                Gamma=self.bound_gamma,
                G=self.bound_g,
                E_local=self.epochs,
                T_rounds=self.bound_t if self.bound_t is not None else self.rounds,
                theta_gap=self.bound_theta_gap,
            )
        except ValidationError as e:
            raise ConfigError(f"invalid bound constants: {_first_message(e)}") from e


def _first_message(error: ValidationError) -> str:
    details = error.errors()
    if not details:
        return str(error)
    first = details[0]
    loc = ".".join(str(part) for part in first.get("loc", ()))
    return f"{loc}: {first.get('msg')}" if loc else str(first.get("msg"))


def _raw_pairs(text: str, origin: str) -> Dict[str, str]:
    raw = dotenv_values(stream=io.StringIO(text))
    pairs: Dict[str, str] = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"{origin}: key '{key}' has no value (expected 'key = value')")
        if value.strip() == "":
            continue  # empty value means "use the default"
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        pairs.update(_raw_pairs(f"{key.strip()}={value.strip()}", "override"))
    return pairs


def load_config(text: str, overrides: Optional[Iterable[str]] = None) -> RunConfig:
    """
    Parses flat `key = value` text into a validated RunConfig.
    Overrides (`key=value` strings) are applied after the file and before validation.
    Unknown keys, malformed values and invariant violations raise ConfigError.
    """
    pairs = _raw_pairs(text, "config")
    if overrides:
        pairs.update(parse_overrides(overrides))
    try:
        cfg = RunConfig(**pairs)
    except ValidationError as e:
        details = e.errors()
        first = details[0] if details else {}
        key = first.get("loc", ("?",))[0] if first.get("loc") else None
        if first.get("type") == "extra_forbidden":
            raise ConfigError(f"unknown config key '{key}'") from e
        if key:
            raise ConfigError(f"invalid value for '{key}': {first.get('msg')}") from e
        raise ConfigError(f"invalid configuration: {first.get('msg', str(e))}") from e
    logger.debug(f"CONFIG: Loaded run configuration {cfg.run_name} ({len(pairs)} explicit keys).")
    return cfg


def load_config_file(path: Optional[str], overrides: Optional[Iterable[str]] = None) -> RunConfig:
    if path is None:
        return load_config("", overrides)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file '{path}': {e}") from e
    except UnicodeDecodeError as e:
        raise ConfigError(f"config file '{path}' is not UTF-8: {e}") from e
    return load_config(text, overrides)


def _render_value(value) -> str:
    if isinstance(value, tuple):
        if not value:
            return "none"
        return ",".join(_render_value(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str) and (value == "" or any(ch in value for ch in " #'\"\t")):
        return "'" + value + "'" if "'" not in value else '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(value)


def render_config(cfg: RunConfig) -> str:
    """Resolved-config echo; load_config(render_config(cfg)) == cfg."""
    lines: List[str] = [f"# resolved configuration for {cfg.run_name}"]
    for name in RunConfig.model_fields:
        value = getattr(cfg, name)
        if value is None:
            continue
        lines.append(f"{name} = {_render_value(value)}")
    return "\n".join(lines) + "\n"


# --- Seeding ---
def purpose_tag(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:4], "big")


def derive_rng(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """
    Counter-based substream: the generator depends only on (seed, purpose, indices),
    never on how many draws other consumers made before.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose_tag(purpose), *(int(i) for i in indices)))
    return np.random.default_rng(sequence)


def config_from_command(cmd) -> RunConfig:
    """File, then --set overrides, then the --seed / --out flags; all land in the resolved echo."""
    overrides = list(cmd.overrides)
    if cmd.seed is not None:
        overrides.append(f"seed={cmd.seed}")
    if cmd.output_dir is not None:
        overrides.append(f"output_dir={cmd.output_dir}")
    return load_config_file(cmd.config_path, overrides)
