"""Experiment configuration: loading, validation, presets and target building.

Configs are TOML (or JSON by suffix) with flat sampler keys at top level, a
[target] table, an optional [sweep] table and an optional [covest] table.
Matrices and vectors are given inline or as a path to a CSV file, resolved
relative to the config file.
"""

import dataclasses
import difflib
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ConfigError, DataFormatError
from .logger import get_logger
from .manifolds import ConstraintManifold, Sphere, parse_manifold
from .models import (
    BvmfParams,
    ConfigIssue,
    ExperimentConfig,
    IssueLevel,
    LangevinConfig,
    SamplerConfig,
    SamplerKind,
    SweepSpec,
    VmfStiefelParams,
)
from .targets import (
    TargetDensity,
    bvmf_target,
    skew3,
    uniform_target,
    vmf_stiefel_target,
)

logger = get_logger()

SAMPLER_KEYS = {f.name for f in dataclasses.fields(SamplerConfig)} - {"nonneg_blocks"}
LANGEVIN_KEYS = {"gamma", "h", "geodesic_substeps"}
EXPERIMENT_KEYS = {
    "name",
    "manifold",
    "samplers",
    "observables",
    "x0",
    "burn_in",
    "max_lag_fraction",
    "output_dir",
    "target",
    "sweep",
    "covest",
}
KNOWN_KEYS = EXPERIMENT_KEYS | SAMPLER_KEYS | LANGEVIN_KEYS
TARGET_KEYS = {"name", "A", "A_diag", "c", "F", "F_skew", "data", "m", "sigma1", "sigma2"}
SWEEP_KEYS = {"parameter", "values"}
COVEST_KEYS = {
    "m",
    "sigma1",
    "sigma2",
    "map_steps",
    "map_lr",
    "refine_iters",
    "reference",
    "skip_header",
    "synthetic",
}
_HAMILTONIAN = {
    SamplerKind.RT_CHMC,
    SamplerKind.RT_CHMC_UNADJUSTED,
    SamplerKind.RMHMC,
}
# Samplers whose run changes with each sweepable parameter
SWEEP_USERS = {
    "mean_duration": _HAMILTONIAN | {SamplerKind.RT_EXACT_SPHERE},
    "dt_max": set(_HAMILTONIAN),
    "stepsize": _HAMILTONIAN | {SamplerKind.GBAOAB},
    "h": {SamplerKind.GBAOAB},
    "gamma": {SamplerKind.GBAOAB},
    "seed": set(SamplerKind),
}
SWEEPABLE = set(SWEEP_USERS)
TARGET_NAMES = ("bvmf", "vmf-stiefel", "uniform", "spiked-cov")

# Names people reach for first
KEY_ALIASES = {
    "stepsize_max": "dt_max",
    "max_stepsize": "dt_max",
    "h_max": "dt_max",
    "dt": "dt_max",
    "duration": "mean_duration",
    "lambda": "mean_duration",
    "event_rate": "mean_duration",
    "friction": "gamma",
    "samples": "n_samples",
    "num_samples": "n_samples",
    "n": "n_samples",
    "sampler": "samplers",
    "rev_check": "enable_rev_check",
    "substeps": "geodesic_substeps",
    "out": "output_dir",
}


def suggest_key(key: str, known: set) -> Optional[str]:
    alias = KEY_ALIASES.get(key)
    if alias in known:
        return alias
    matches = difflib.get_close_matches(key, sorted(known), n=1, cutoff=0.6)
    return matches[0] if matches else None


def load_config(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if path.suffix.lower() == ".json":
                raw = json.load(f)
            else:
                raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return raw


def resolve_array(value: Any, base_dir: Optional[Path], ndmin: int) -> np.ndarray:
    """Inline list or CSV path -> float array."""
    if isinstance(value, str):
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            return np.loadtxt(path, delimiter=",", ndmin=ndmin)
        except OSError:
            raise ConfigError(f"Matrix file not found: {path}")
        except ValueError as e:
            raise DataFormatError(f"{path}: {e}")
    try:
        return np.array(value, dtype=float, ndmin=ndmin)
    except (TypeError, ValueError):
        raise ConfigError(f"Expected a numeric array, got {value!r}")


def build_target(
    spec: Dict[str, Any], ambient_dim: int, base_dir: Optional[Path] = None
) -> TargetDensity:
    """Target from a [target] table; spiked-cov is built by build_problem."""
    name = spec.get("name", "uniform")
    if name == "uniform":
        return uniform_target(ambient_dim)
    if name == "bvmf":
        if "A_diag" in spec:
            A = np.diag(resolve_array(spec["A_diag"], base_dir, 1))
        elif "A" in spec:
            A = resolve_array(spec["A"], base_dir, 2)
        else:
            A = np.zeros((ambient_dim, ambient_dim))
        c = resolve_array(spec["c"], base_dir, 1) if "c" in spec else np.zeros(len(A))
        try:
            return bvmf_target(BvmfParams(A=A, c=c))
        except ValueError as e:
            raise ConfigError(f"bvmf target: {e}")
    if name == "vmf-stiefel":
        if "F_skew" in spec:
            F = skew3(*resolve_array(spec["F_skew"], base_dir, 1))
        elif "F" in spec:
            F = resolve_array(spec["F"], base_dir, 2)
        else:
            raise ConfigError("vmf-stiefel target needs F or F_skew")
        return vmf_stiefel_target(VmfStiefelParams(F=F))
    if name == "spiked-cov":
        raise ConfigError("spiked-cov targets need data; use build_problem")
    raise ConfigError(
        f"Unknown target '{name}'. Available: {', '.join(TARGET_NAMES)}"
    )


def _unknown_key_issues(
    table: Dict[str, Any], known: set, where: str
) -> List[ConfigIssue]:
    issues = []
    for key in table:
        if key in known:
            continue
        hint = suggest_key(key, known)
        message = f"Unknown key '{key}'{where}"
        if hint:
            message += f"; did you mean '{hint}'?"
        issues.append(ConfigIssue(IssueLevel.WARNING, message))
    return issues


def settings_of(raw: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in raw.items() if k in SAMPLER_KEYS | LANGEVIN_KEYS}


def sampler_config(settings: Dict[str, Any], **overrides: Any) -> SamplerConfig:
    values = {k: v for k, v in settings.items() if k in SAMPLER_KEYS}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SamplerConfig(**values)


def langevin_config(settings: Dict[str, Any], **overrides: Any) -> LangevinConfig:
    values = dict(settings)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return LangevinConfig(
        gamma=float(values.get("gamma", 1.0)),
        h=float(values.get("h", values.get("dt_max", 1e-2))),
        n_samples=int(values.get("n_samples", 1000)),
        seed=int(values.get("seed", 0)),
        geodesic_substeps=int(values.get("geodesic_substeps", 1)),
        shake_tol=float(values.get("shake_tol", 1e-12)),
        shake_max_iters=int(values.get("shake_max_iters", 500)),
    )


def _samplers_of(raw: Dict[str, Any]) -> List[Any]:
    value = raw.get("samplers", ["rt-chmc"])
    return [value] if isinstance(value, str) else list(value)


def validate_config(
    raw: Dict[str, Any], base_dir: Optional[Path] = None
) -> List[ConfigIssue]:
    """Report problems in a raw config dict; never raises."""
    issues = _unknown_key_issues(raw, KNOWN_KEYS, "")
    target_spec = raw.get("target", {})
    if not isinstance(target_spec, dict):
        issues.append(ConfigIssue(IssueLevel.ERROR, "[target] must be a table"))
        target_spec = {}
    issues += _unknown_key_issues(target_spec, TARGET_KEYS, " in [target]")
    if isinstance(raw.get("covest"), dict):
        issues += _unknown_key_issues(raw["covest"], COVEST_KEYS, " in [covest]")

    kinds: List[SamplerKind] = []
    for name in _samplers_of(raw):
        try:
            kinds.append(SamplerKind(name))
        except ValueError:
            options = ", ".join(k.value for k in SamplerKind)
            issues.append(
                ConfigIssue(
                    IssueLevel.ERROR, f"Unknown sampler '{name}'. Available: {options}"
                )
            )

    settings = settings_of(raw)
    try:
        sampler_config(settings)
        if SamplerKind.GBAOAB in kinds:
            langevin_config(settings)
    except (TypeError, ValueError) as e:
        issues.append(ConfigIssue(IssueLevel.ERROR, f"Invalid sampler settings: {e}"))

    sweep = raw.get("sweep")
    if sweep is not None:
        issues += _unknown_key_issues(sweep, SWEEP_KEYS, " in [sweep]")
        if sweep.get("parameter") not in SWEEPABLE:
            issues.append(
                ConfigIssue(
                    IssueLevel.ERROR,
                    f"Cannot sweep '{sweep.get('parameter')}'. "
                    f"Sweepable: {', '.join(sorted(SWEEPABLE))}",
                )
            )
        elif kinds:
            parameter = sweep["parameter"]
            users = set(SWEEP_USERS[parameter])
            if parameter == "dt_max" and "h" not in raw:
                users.add(SamplerKind.GBAOAB)
            if not users.intersection(kinds):
                names = ", ".join(kind.value for kind in kinds)
                issues.append(
                    ConfigIssue(
                        IssueLevel.WARNING,
                        f"Sweeping '{parameter}' has no effect on {names}; "
                        "sweep points differ only by seed",
                    )
                )
        if not sweep.get("values"):
            issues.append(ConfigIssue(IssueLevel.ERROR, "Sweep grid is empty"))

    manifold: Optional[ConstraintManifold] = None
    if "manifold" not in raw:
        if "covest" not in raw:
            issues.append(ConfigIssue(IssueLevel.ERROR, "Missing 'manifold'"))
    else:
        try:
            manifold = parse_manifold(str(raw["manifold"]))
        except (ConfigError, ValueError) as e:
            issues.append(ConfigIssue(IssueLevel.ERROR, str(e)))

    if manifold is not None:
        if SamplerKind.RT_EXACT_SPHERE in kinds:
            if not isinstance(manifold, Sphere):
                issues.append(
                    ConfigIssue(
                        IssueLevel.ERROR, "rt-exact-sphere needs a sphere manifold"
                    )
                )
            if target_spec.get("name", "uniform") != "uniform":
                issues.append(
                    ConfigIssue(
                        IssueLevel.WARNING,
                        "rt-exact-sphere samples the uniform law; target is ignored",
                    )
                )
        if target_spec.get("name") != "spiked-cov":
            try:
                target = build_target(target_spec, manifold.ambient_dim, base_dir)
                if target.dim != manifold.ambient_dim:
                    issues.append(
                        ConfigIssue(
                            IssueLevel.ERROR,
                            f"Dimension mismatch: target '{target.name}' lives in "
                            f"R^{target.dim} but {manifold.spec} is embedded in "
                            f"R^{manifold.ambient_dim}",
                        )
                    )
            except (ConfigError, ValueError) as e:
                issues.append(ConfigIssue(IssueLevel.ERROR, str(e)))
        if raw.get("x0") is not None:
            x0 = np.asarray(raw["x0"], dtype=float)
            if x0.shape != (manifold.ambient_dim,):
                issues.append(
                    ConfigIssue(
                        IssueLevel.ERROR,
                        f"x0 has length {x0.size}, expected {manifold.ambient_dim}",
                    )
                )

    if not issues:
        issues.append(ConfigIssue(IssueLevel.OK, "Configuration is valid"))
    return issues


def parse_experiment(
    raw: Dict[str, Any], base_dir: Optional[Path] = None, name: str = "run"
) -> ExperimentConfig:
    """Validate and convert a raw config dict; errors raise ConfigError."""
    issues = validate_config(raw, base_dir)
    for issue in issues:
        if issue.level == IssueLevel.WARNING:
            logger.warning(issue.message)
    errors = [issue.message for issue in issues if issue.level == IssueLevel.ERROR]
    if errors:
        raise ConfigError("; ".join(errors))

    sweep = None
    if raw.get("sweep") is not None:
        sweep = SweepSpec(
            parameter=raw["sweep"]["parameter"],
            values=[float(v) for v in raw["sweep"]["values"]],
        )
    return ExperimentConfig(
        name=str(raw.get("name", name)),
        manifold=str(raw["manifold"]),
        target=dict(raw.get("target", {})),
        samplers=[SamplerKind(s) for s in _samplers_of(raw)],
        settings=settings_of(raw),
        sweep=sweep,
        observables=list(raw.get("observables") or ["neglogpi"]),
        x0=raw.get("x0"),
        burn_in=float(raw.get("burn_in", 0.1)),
        max_lag_fraction=float(raw.get("max_lag_fraction", 1 / 50)),
        output_dir=Path(raw["output_dir"]) if raw.get("output_dir") else None,
        base_dir=base_dir,
    )


def _stiefel_18_3_field() -> List[List[float]]:
    A = skew3(2.0, -45.0, -4.0)
    I = np.eye(3)
    return np.vstack([I, -A, I, -A, I, -A]).tolist()


_STIFF_BVMF = {"name": "bvmf", "A_diag": [-1000.0, 0.0, 1000.0], "c": [100.0, 0.0, 0.0]}
_DURATION_GRID = [0.02, 0.04, 0.06, 0.08, 0.09, 0.1, 0.12, 0.15, 0.18, 0.2]

PRESETS: Dict[str, Dict[str, Any]] = {
    "revcheck-scan": {
        "name": "revcheck-scan",
        "manifold": "sphere:2",
        "target": _STIFF_BVMF,
        "samplers": ["rt-chmc"],
        "x0": [0.0, 0.0, 1.0],
        "mean_duration": 0.1,
        "n_samples": 2000,
        "enable_rev_check": True,
        "sweep": {
            "parameter": "stepsize",
            "values": [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2],
        },
    },
    "duration-scan-s2": {
        "name": "duration-scan-s2",
        "manifold": "sphere:2",
        "target": _STIFF_BVMF,
        "samplers": ["rt-chmc", "rmhmc"],
        "x0": [0.0, 0.0, 1.0],
        "dt_max": 1e-3,
        "n_samples": 20000,
        "sweep": {"parameter": "mean_duration", "values": _DURATION_GRID},
    },
    "langevin-bias-s4": {
        "name": "langevin-bias-s4",
        "manifold": "sphere:4",
        "target": {
            "name": "bvmf",
            "A_diag": [-20.0, -10.0, 0.0, 10.0, 20.0],
            "c": [40.0, 0.0, 0.0, 0.0, 0.0],
        },
        "samplers": ["gbaoab", "rt-chmc"],
        "x0": [1.0, 0.0, 0.0, 0.0, 0.0],
        "gamma": 2.0,
        "mean_duration": 0.5,
        "n_samples": 20000,
        "sweep": {"parameter": "stepsize", "values": [0.01, 0.05, 0.1]},
    },
    "duration-scan-o3": {
        "name": "duration-scan-o3",
        "manifold": "stiefel:3,3",
        "target": {"name": "vmf-stiefel", "F_skew": [2.0, -45.0, -4.0]},
        "samplers": ["rt-chmc", "rmhmc"],
        "dt_max": 1e-3,
        "n_samples": 10000,
        "sweep": {"parameter": "mean_duration", "values": _DURATION_GRID},
    },
    "duration-scan-v18": {
        "name": "duration-scan-v18",
        "manifold": "stiefel:18,3",
        "target": {"name": "vmf-stiefel", "F": _stiefel_18_3_field()},
        "samplers": ["rt-chmc", "rmhmc"],
        "dt_max": 1e-3,
        "n_samples": 10000,
        "sweep": {"parameter": "mean_duration", "values": [0.05, 0.1, 0.15, 0.2]},
    },
    "uniform-s2": {
        "name": "uniform-s2",
        "manifold": "sphere:2",
        "target": {"name": "uniform"},
        "samplers": ["rt-exact-sphere"],
        "mean_duration": 1.0,
        "n_samples": 100000,
        "observables": ["coord:0", "coord:1", "coord:2", "sq:0", "sq:1", "sq:2"],
    },
    "covest-synthetic": {
        "name": "covest-synthetic",
        "mean_duration": 0.05,
        "dt_max": 5e-3,
        "n_samples": 20000,
        "covest": {
            "synthetic": {"p": 30, "m": 5, "count": 20},
            "m": 5,
            "map_steps": 500,
        },
    },
}


# Short names for the two headline desk studies
PRESET_ALIASES = {"fig1-desk": "revcheck-scan", "fig2-desk": "duration-scan-s2"}


def load_preset(name: str) -> Dict[str, Any]:
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(
            f"Unknown preset '{name}'. "
            f"Available: {', '.join(sorted([*PRESETS, *PRESET_ALIASES]))}"
        )
    return json.loads(json.dumps(PRESETS[name]))
