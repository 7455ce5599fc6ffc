import dataclasses
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .artifacts import chain_metadata, run_stem, save_json, save_run, save_table
from .config import build_target, langevin_config, sampler_config
from .covest import build_cov_model, ingest, initialize, normalize
from .diagnostics import diagnostics_record, max_coordinate_iac
from .errors import ConfigError, RtchmcError
from .integrators import REV_TOL
from .logger import get_logger
from .manifolds import ConstraintManifold, parse_manifold
from .models import ChainRecord, ExperimentConfig, SamplerKind
from .samplers import (
    gbaoab,
    rmhmc_fixed,
    rt_chmc_metropolis,
    rt_chmc_unadjusted,
    rt_rmhmc_exact_sphere,
)
from .targets import TargetDensity, spiked_cov_target

# Sweep points that raised, for the end-of-run summary
_sweep_errors: List[str] = []

HMC_SAMPLERS: Dict[SamplerKind, Callable[..., ChainRecord]] = {
    SamplerKind.RT_CHMC: rt_chmc_metropolis,
    SamplerKind.RT_CHMC_UNADJUSTED: rt_chmc_unadjusted,
    SamplerKind.RMHMC: rmhmc_fixed,
}

logger = get_logger()


@dataclasses.dataclass
class Problem:
    manifold: ConstraintManifold
    target: TargetDensity
    x0: np.ndarray


def build_problem(config: ExperimentConfig) -> Problem:
    M = parse_manifold(config.manifold)
    spec = config.target
    if spec.get("name") == "spiked-cov":
        if "data" not in spec:
            raise ConfigError("spiked-cov target needs a 'data' CSV path")
        path = Path(spec["data"])
        if config.base_dir is not None and not path.is_absolute():
            path = config.base_dir / path
        model = build_cov_model(
            normalize(ingest(path)),
            spec.get("m"),
            float(spec.get("sigma1", 2.0)),
            float(spec.get("sigma2", 2.0)),
        )
        target = spiked_cov_target(model)
        if target.dim != M.ambient_dim:
            raise ConfigError(
                f"spiked-cov with p={model.p}, m={model.m} needs "
                f"product:[stiefel:{model.p},{model.m};euclid+:{model.m};"
                f"euclid+:{model.p}], got {M.spec}"
            )
        x0 = initialize(model) if config.x0 is None else np.asarray(config.x0, float)
        return Problem(M, target, x0)

    target = build_target(spec, M.ambient_dim, config.base_dir)
    if config.x0 is not None:
        x0 = np.asarray(config.x0, dtype=float)
    else:
        x0 = M.default_point()
    return Problem(M, target, x0)


def run_sampler(
    kind: SamplerKind, problem: Problem, settings: Dict[str, Any]
) -> ChainRecord:
    M = problem.manifold
    if kind == SamplerKind.GBAOAB:
        return gbaoab(M, problem.target, problem.x0, langevin_config(settings))
    if kind == SamplerKind.RT_EXACT_SPHERE:
        return rt_rmhmc_exact_sphere(
            M.ambient_dim, problem.x0, sampler_config(settings)
        )
    cfg = sampler_config(settings, nonneg_blocks=M.nonneg_ranges())
    return HMC_SAMPLERS[kind](M, problem.target, problem.x0, cfg)


def observable_series(name: str, record: ChainRecord) -> np.ndarray:
    """Named test function evaluated along the chain."""
    if name == "neglogpi":
        return record.potentials
    kind, _, index = name.partition(":")
    if kind in ("coord", "sq") and index.isdigit():
        i = int(index)
        if i >= record.samples.shape[1]:
            raise ConfigError(
                f"Observable '{name}' out of range for dimension "
                f"{record.samples.shape[1]}"
            )
        column = record.samples[:, i]
        return column if kind == "coord" else column**2
    raise ConfigError(f"Unknown observable '{name}'. Use neglogpi, coord:i or sq:i")


def summarize(
    record: ChainRecord, config: ExperimentConfig, run: str
) -> Dict[str, Any]:
    """Diagnostics payload for one chain after burn-in."""
    burn = int(config.burn_in * record.n_samples)
    kept = record.n_samples - burn
    if kept < 2:
        raise ConfigError(f"Only {kept} samples left after burn-in")
    max_lag = max(1, int(kept * config.max_lag_fraction))
    n_events = max(1, record.accepted.size)
    return {
        "run": run,
        "sampler": record.sampler,
        "n_samples": record.n_samples,
        "burn_in": burn,
        "acceptance_rate": record.acceptance_rate,
        "rev_failure_ratio": record.rev_failures / n_events,
        "shake_failure_ratio": record.shake_failures / n_events,
        "grad_evals": record.grad_evals,
        "max_coordinate_iac": max_coordinate_iac(record.samples[burn:], max_lag),
        "observables": [
            diagnostics_record(
                name,
                observable_series(name, record)[burn:],
                max_lag,
                grad_evals=record.grad_evals,
            )
            for name in config.observables
        ],
    }


def diagnose_chain(
    samples: np.ndarray,
    run: str,
    burn_in: float = 0.1,
    max_lag_fraction: float = 1 / 50,
) -> Dict[str, Any]:
    """Coordinate diagnostics of a stored chain (no potentials available)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    burn = int(burn_in * samples.shape[0])
    kept = samples[burn:]
    if kept.shape[0] < 2:
        raise ConfigError(f"Only {kept.shape[0]} samples left after burn-in")
    max_lag = max(1, int(kept.shape[0] * max_lag_fraction))
    return {
        "run": run,
        "n_samples": int(samples.shape[0]),
        "burn_in": burn,
        "max_coordinate_iac": max_coordinate_iac(kept, max_lag),
        "observables": [
            diagnostics_record(f"coord:{i}", kept[:, i], max_lag)
            for i in range(kept.shape[1])
        ],
    }


def run_single(
    config: ExperimentConfig, kind: SamplerKind, settings: Dict[str, Any], run: str
) -> Tuple[ChainRecord, Dict[str, Any]]:
    problem = build_problem(config)
    record = run_sampler(kind, problem, settings)
    return record, summarize(record, config, run)


def _metadata(
    config: ExperimentConfig, record: ChainRecord, settings: Dict[str, Any]
) -> Dict[str, Any]:
    return chain_metadata(
        record,
        settings,
        manifold=config.manifold,
        target=config.target,
        burn_in_fraction=config.burn_in,
        rev_tol=settings.get("rev_tol", REV_TOL),
    )


def run_experiment(
    config: ExperimentConfig, output_dir: Path, force: bool = False
) -> List[Path]:
    """Run every configured sampler once; write chain, metadata and diagnostics."""
    written: List[Path] = []
    for kind in config.samplers:
        stem = run_stem(config.name, kind.value)
        logger.info(f"Running {kind.value} on {config.manifold}")
        record, diagnostics = run_single(config, kind, config.settings, stem)
        written.extend(
            save_run(
                record,
                _metadata(config, record, config.settings),
                diagnostics,
                output_dir,
                stem,
                force,
            )
        )
    logger.info(f"Saved {len(written)} artifact files")
    return written


def sweep_settings(
    settings: Dict[str, Any], kind: SamplerKind, parameter: str, value: float
) -> Dict[str, Any]:
    """Settings for one sweep point; 'stepsize' means h for g-BAOAB, dt_max otherwise."""
    updated = dict(settings)
    if parameter == "stepsize":
        parameter = "h" if kind == SamplerKind.GBAOAB else "dt_max"
    updated[parameter] = int(value) if parameter == "seed" else value
    return updated


def _sweep_point(
    config: ExperimentConfig, kind: SamplerKind, value: float, index: int
) -> Tuple[Dict[str, Any], Optional[ChainRecord], Dict[str, Any]]:
    assert config.sweep is not None
    parameter = config.sweep.parameter
    settings = sweep_settings(config.settings, kind, parameter, value)
    if parameter != "seed":
        settings["seed"] = int(config.settings.get("seed", 0)) + index
    stem = run_stem(config.name, kind.value, f"{parameter}={value:g}")
    row: Dict[str, Any] = {"sampler": kind.value, "parameter": parameter, "value": value}
    try:
        record, diagnostics = run_single(config, kind, settings, stem)
    except (RtchmcError, ValueError) as e:
        logger.debug(f"Sweep point {stem} failed: {type(e).__name__}: {e}")
        row["error"] = str(e)
        return row, None, settings

    row.update(
        {
            "acceptance_rate": diagnostics["acceptance_rate"],
            "rev_failure_ratio": diagnostics["rev_failure_ratio"],
            "shake_failure_ratio": diagnostics["shake_failure_ratio"],
            "grad_evals": diagnostics["grad_evals"],
        }
    )
    for item in diagnostics["observables"]:
        name = item["observable"]
        for key in ("tau", "ess", "mean", "stderr", "grad_evals_per_ess"):
            row[f"{name}.{key}"] = item.get(key)
    row["_diagnostics"] = diagnostics
    return row, record, settings


def _sweep_point_star(args: Tuple[ExperimentConfig, SamplerKind, float, int]):
    return _sweep_point(*args)


def run_sweep(
    config: ExperimentConfig,
    output_dir: Path,
    threads: int = 1,
    force: bool = False,
) -> List[Dict[str, Any]]:
    """Run every (sampler, value) sweep point and write one row per point.

    Point i of the grid runs with seed + i, so results do not depend on threads.
    """
    if config.sweep is None:
        raise ConfigError("Config has no [sweep] table")
    _sweep_errors.clear()

    tasks = [
        (config, kind, value, index)
        for kind in config.samplers
        for index, value in enumerate(config.sweep.values)
    ]
    logger.info(
        f"Running sweep over {config.sweep.parameter}: {len(tasks)} points, "
        f"{threads} worker(s)"
    )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_point_star, tasks))
    else:
        results = [_sweep_point_star(task) for task in tasks]

    rows = []
    written: List[Path] = []
    for row, record, settings in results:
        diagnostics = row.pop("_diagnostics", None)
        if record is None:
            _sweep_errors.append(f"{row['sampler']} {row['parameter']}={row['value']}")
        else:
            written.extend(
                save_run(
                    record,
                    _metadata(config, record, settings),
                    diagnostics,
                    output_dir,
                    diagnostics["run"],
                    force,
                )
            )
        rows.append(row)

    for path in (
        save_table(rows, output_dir / f"{config.name}.sweep.csv", force),
        save_json({"rows": rows}, output_dir / f"{config.name}.sweep.json", force),
    ):
        if path is not None:
            written.append(path)

    if _sweep_errors:
        logger.info(f"Sweep failed for {len(_sweep_errors)} points.")
    logger.info(f"Saved {len(written)} artifact files")
    return rows


def get_sweep_errors() -> List[str]:
    """Get list of sweep points that failed in the last run_sweep."""
    return _sweep_errors.copy()
