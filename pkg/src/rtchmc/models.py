from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


class SamplerKind(Enum):
    RT_CHMC = "rt-chmc"
    RT_CHMC_UNADJUSTED = "rt-chmc-unadjusted"
    RMHMC = "rmhmc"
    RT_EXACT_SPHERE = "rt-exact-sphere"
    GBAOAB = "gbaoab"


class IssueLevel(Enum):
    OK = "ok"
    WARNING = "warning"
    ERROR = "error"


@dataclass
class PhasePoint:
    """Position on the manifold and tangent velocity, both in ambient coordinates."""

    x: np.ndarray
    v: np.ndarray


@dataclass
class RattleConfig:
    h: float
    shake_tol: float = 1e-12
    shake_max_iters: int = 500
    gram_regularization: float = 0.0

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise ValueError(f"stepsize must be positive, got {self.h}")
        if not self.shake_tol > 0:
            raise ValueError(f"shake_tol must be positive, got {self.shake_tol}")
        if self.shake_max_iters < 1:
            raise ValueError("shake_max_iters must be at least 1")
        if self.gram_regularization < 0:
            raise ValueError("gram_regularization must be nonnegative")


@dataclass
class FlowResult:
    end_state: PhasePoint
    converged: bool
    shake_iterations: int
    energy_start: float
    energy_end: float
    steps: int = 0
    grad_evals: int = 0
    trajectory: Optional[List[np.ndarray]] = None
    end_potential: float = float("nan")
    end_gradient: Optional[np.ndarray] = None


@dataclass
class SamplerConfig:
    mean_duration: float = 0.1
    dt_max: float = 1e-3
    n_samples: int = 1000
    seed: int = 0
    shake_tol: float = 1e-12
    shake_max_iters: int = 500
    rev_tol: float = 1e-8
    enable_rev_check: bool = False
    nonneg_blocks: List[Tuple[int, int]] = field(default_factory=list)
    feasibility_tol: float = 1e-9
    gram_regularization: float = 0.0
    thin_per_step: bool = False

    def __post_init__(self) -> None:
        if not self.dt_max > 0:
            raise ValueError(f"dt_max must be positive, got {self.dt_max}")
        if not self.mean_duration > 0:
            raise ValueError(
                f"mean_duration must be positive, got {self.mean_duration}"
            )
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        self.nonneg_blocks = [(int(a), int(b)) for a, b in self.nonneg_blocks]

    def rattle_config(self, h: float) -> RattleConfig:
        return RattleConfig(
            h=h,
            shake_tol=self.shake_tol,
            shake_max_iters=self.shake_max_iters,
            gram_regularization=self.gram_regularization,
        )


@dataclass
class LangevinConfig:
    gamma: float
    h: float
    n_samples: int = 1000
    seed: int = 0
    geodesic_substeps: int = 1
    shake_tol: float = 1e-12
    shake_max_iters: int = 500

    def __post_init__(self) -> None:
        # gamma == 0 is allowed: the scheme degenerates to constrained free flight
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if not self.h > 0:
            raise ValueError(f"stepsize must be positive, got {self.h}")
        if self.geodesic_substeps < 1:
            raise ValueError("geodesic_substeps must be at least 1")


@dataclass
class ChainRecord:
    sampler: str
    samples: np.ndarray
    accepted: np.ndarray
    energy: np.ndarray
    durations: np.ndarray
    potentials: np.ndarray
    rev_failures: int = 0
    shake_failures: int = 0
    grad_evals: int = 0
    wall_time: float = 0.0

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def acceptance_rate(self) -> float:
        if self.accepted.size == 0:
            return 0.0
        return float(np.mean(self.accepted))


@dataclass
class IacEstimate:
    tau: float
    max_lag: int
    autocovariances: np.ndarray
    ess: float
    n: int
    degenerate: bool = False
    clamped: bool = False


@dataclass
class BvmfParams:
    A: np.ndarray
    c: np.ndarray

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError(f"A must be square, got shape {self.A.shape}")
        if self.c.shape != (self.A.shape[0],):
            raise ValueError(
                f"c has shape {self.c.shape}, expected ({self.A.shape[0]},)"
            )
        if np.max(np.abs(self.A - self.A.T), initial=0.0) > 1e-12:
            raise ValueError("A must be symmetric")

    @property
    def dim(self) -> int:
        return int(self.c.shape[0])


@dataclass
class VmfStiefelParams:
    F: np.ndarray

    def __post_init__(self) -> None:
        self.F = np.asarray(self.F, dtype=float)
        if self.F.ndim != 2:
            raise ValueError(f"F must be a matrix, got shape {self.F.shape}")


@dataclass
class NormalizedData:
    data: np.ndarray
    scale: np.ndarray
    mean: np.ndarray
    constant_columns: List[int] = field(default_factory=list)


@dataclass
class CovModel:
    p: int
    m: int
    n: int
    sigma1: float
    sigma2: float
    scatter: np.ndarray
    mean: np.ndarray
    scale: np.ndarray


@dataclass
class CovReport:
    mean: np.ndarray
    sd: np.ndarray
    inverse_mean: np.ndarray
    map_estimate: Optional[np.ndarray]
    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    acceptance_rate: float = 0.0
    n_samples: int = 0
    inverse_sd: Optional[np.ndarray] = None
    # Over every sampled state, burn-in included
    max_constraint_violation: Optional[float] = None
    min_d: Optional[float] = None


@dataclass
class SweepSpec:
    parameter: str
    values: List[float]


@dataclass
class ExperimentConfig:
    name: str
    manifold: str
    target: Dict[str, Any]
    samplers: List[SamplerKind]
    settings: Dict[str, Any] = field(default_factory=dict)
    sweep: Optional[SweepSpec] = None
    observables: List[str] = field(default_factory=lambda: ["neglogpi"])
    x0: Optional[List[float]] = None
    burn_in: float = 0.1
    max_lag_fraction: float = 1 / 50
    output_dir: Optional[Path] = None
    base_dir: Optional[Path] = None


@dataclass
class ConfigIssue:
    level: IssueLevel
    message: str
