# bqfl/schemas.py
import math
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


# --- Enumerations shared across modules ---
class FedMode(str, Enum):
    BQFL_AVG = "bqfl-avg"
    BQFL_INF = "bqfl-inf"
    BCFL_AVG = "bcfl-avg"

    @property
    def is_quantum(self) -> bool:
        return self is not FedMode.BCFL_AVG

    @property
    def averages(self) -> bool:
        return self is not FedMode.BQFL_INF


class ReadoutKind(str, Enum):
    SOFTMAX = "softmax"
    SAMPLE = "sample"


class EncodingMode(str, Enum):
    VANILLA = "vanilla"
    MEAN = "mean"
    HALF = "half"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD_DECAY = "sgd-decay"


class WeightsRule(str, Enum):
    SAMPLES = "samples"
    UNIFORM = "uniform"


class PayloadKind(str, Enum):
    PARAMS = "params"
    DIGEST = "digest"


class TimingMode(str, Enum):
    SIMULATED = "simulated"
    WALL = "wall"


class DeviceRole(str, Enum):
    WORKER = "worker"
    MINER = "miner"
    GLOBAL = "global"  # pseudo-device carrying the global / ensemble evaluation


class Verb(str, Enum):
    RUN = "run"
    BOUNDS = "bounds"
    INSPECT_DATA = "inspect-data"
    INSPECT_CHAIN = "inspect-chain"
    SWEEP_CLASSES = "sweep-classes"


# --- Pydantic Models ---
class BoundConstants(BaseModel):
    """Constants of the smoothness / convexity / variance assumptions behind the FedAvg bound."""
    L_smooth: float
    mu: float
    sigma_k: List[float]
    p_k: List[float]
    Gamma: float = 0.0
    G: float = 0.0
    E_local: int = 1
    T_rounds: int = 1
    theta_gap: float = 0.0

    @model_validator(mode="after")
    def _check_assumptions(self) -> "BoundConstants":
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.L_smooth < self.mu:
            raise ValueError(f"L_smooth ({self.L_smooth}) must be >= mu ({self.mu})")
        if len(self.sigma_k) != len(self.p_k) or not self.p_k:
            raise ValueError("sigma_k and p_k must be nonempty and of equal length")
        if any(p < 0 for p in self.p_k) or abs(math.fsum(self.p_k) - 1.0) > 1e-9:
            raise ValueError(f"p_k must be nonnegative and sum to 1, got {self.p_k}")
        if any(s < 0 for s in self.sigma_k) or self.Gamma < 0 or self.G < 0 or self.theta_gap < 0:
            raise ValueError("sigma_k, Gamma, G and theta_gap must be nonnegative")
        if self.T_rounds < 1 or self.E_local < 1:
            raise ValueError("T_rounds and E_local must be >= 1")
        return self

    @property
    def kappa(self) -> float:
        return self.L_smooth / self.mu

    @property
    def gamma(self) -> float:
        return max(8.0 * self.kappa, float(self.E_local))


class MetricsRow(BaseModel):
    round: int
    device_id: int
    role: DeviceRole
    mode: FedMode
    train_loss: Optional[float] = None
    train_acc: Optional[float] = None
    test_acc_top1: Optional[float] = None
    comm_time_s: float = 0.0
    block_gen_time_s: float = 0.0
    stake: float = 0.0

    @field_validator("train_acc", "test_acc_top1")
    @classmethod
    def _accuracy_range(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        return value

    @field_validator("comm_time_s", "block_gen_time_s")
    @classmethod
    def _nonnegative_time(cls, value: float) -> float:
        if value < 0:
            raise ValueError(f"time {value} is negative")
        return value


class SweepPoint(BaseModel):
    m_classes: int
    mode: FedMode
    final_acc: Optional[float] = None  # None when every round aborted
    rounds_ok: int = 0


class Command(BaseModel):
    verb: Verb
    config_path: Optional[str] = None
    overrides: List[str] = Field(default_factory=list)
    seed: Optional[int] = Field(default=None, ge=0, le=2**64 - 1)
    output_dir: Optional[str] = None
    target: Optional[str] = None  # inspect verbs: explicit file instead of the configured one
