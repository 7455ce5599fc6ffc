"""MCMC drivers on constraint manifolds.

Durations are parametrized by their mean everywhere: T ~ Exp(rate = 1 /
mean_duration). The Metropolized drivers resample the velocity at every step,
so rejected steps still refresh momentum.
"""

import math
import time
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .errors import (
    DimensionMismatchError,
    IntegrationError,
    SingularConstraintError,
    TargetEvaluationError,
)
from .integrators import (
    GEODESIC_TOL,
    flow,
    free_drift,
    kinetic_energy,
    momentum_flip,
    reversibility_error,
    sphere_geodesic_flow,
)
from .logger import get_logger
from .manifolds import (
    ConstraintManifold,
    Sphere,
    check_on_manifold,
    sample_tangent_gaussian,
)
from .models import (
    ChainRecord,
    LangevinConfig,
    PhasePoint,
    RattleConfig,
    SamplerConfig,
)
from .targets import TargetDensity

logger = get_logger()


def draw_duration(rng: np.random.Generator, mean_duration: float) -> float:
    return float(rng.exponential(mean_duration))


def step_schedule(T: float, dt_max: float) -> Tuple[int, float]:
    """L = ceil(T / dt_max) steps of size h = T / L <= dt_max."""
    L = max(1, math.ceil(T / dt_max))
    return L, T / L


def acceptance_probability(energy_start: float, energy_end: float) -> float:
    """min{1, exp(H(x, v) - H(x*, v*))}; non-finite proposals are never accepted."""
    if not (math.isfinite(energy_start) and math.isfinite(energy_end)):
        return 0.0
    delta = energy_start - energy_end
    return 1.0 if delta >= 0.0 else math.exp(delta)


def violates_nonneg(x: np.ndarray, blocks: Sequence[Tuple[int, int]]) -> bool:
    return any(np.any(x[start:stop] < 0.0) for start, stop in blocks)


def _check_target(M: ConstraintManifold, target: TargetDensity) -> None:
    if target.dim != M.ambient_dim:
        raise DimensionMismatchError(
            f"target '{target.name}' has dimension {target.dim}, "
            f"manifold {M.spec} is embedded in R^{M.ambient_dim}"
        )


def _log_summary(record: ChainRecord) -> None:
    logger.debug(
        f"{record.sampler}: {record.n_samples} samples, acceptance "
        f"{record.acceptance_rate:.3f}, {record.rev_failures} reversibility "
        f"failures, {record.shake_failures} SHAKE failures, "
        f"{record.grad_evals} gradient evaluations, {record.wall_time:.2f}s"
    )


def _metropolis_chain(
    M: ConstraintManifold,
    target: TargetDensity,
    x0: np.ndarray,
    cfg: SamplerConfig,
    duration: Callable[[np.random.Generator], float],
    name: str,
) -> ChainRecord:
    _check_target(M, target)
    check_on_manifold(M, x0, cfg.feasibility_tol)

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    samples = np.empty((n, M.ambient_dim))
    accepted = np.zeros(n, dtype=bool)
    energy = np.full(n, math.nan)
    durations = np.empty(n)
    potentials = np.empty(n)
    rev_failures = 0
    shake_failures = 0

    started = time.perf_counter()
    x = np.array(x0, dtype=float, copy=True)
    u_x = target.potential(x)
    grad_x = target.gradient(x)
    grad_evals = 1

    for k in range(n):
        v = sample_tangent_gaussian(M, x, rng, cfg.gram_regularization)
        T = duration(rng)
        durations[k] = T
        L, h = step_schedule(T, cfg.dt_max)

        if h > 0.0:
            start = PhasePoint(x, v)
            rattle = cfg.rattle_config(h)
            forward = flow(M, target, start, rattle, L, grad_x=grad_x)
            grad_evals += forward.grad_evals
            energy[k] = forward.energy_end

            if not forward.converged:
                shake_failures += 1
            else:
                proposal = momentum_flip(forward.end_state)
                passed = True
                if cfg.enable_rev_check:
                    error, back = reversibility_error(
                        M, target, start, proposal, rattle, L,
                        grad_x=forward.end_gradient,
                    )
                    grad_evals += back.grad_evals
                    if error > cfg.rev_tol:
                        rev_failures += 1
                        passed = False
                if passed and violates_nonneg(proposal.x, cfg.nonneg_blocks):
                    passed = False
                if passed:
                    alpha = acceptance_probability(
                        forward.energy_start, forward.energy_end
                    )
                    if rng.uniform() < alpha:
                        accepted[k] = True
                        x = proposal.x
                        u_x = forward.end_potential
                        grad_x = forward.end_gradient

        samples[k] = x
        potentials[k] = u_x

    record = ChainRecord(
        sampler=name,
        samples=samples,
        accepted=accepted,
        energy=energy,
        durations=durations,
        potentials=potentials,
        rev_failures=rev_failures,
        shake_failures=shake_failures,
        grad_evals=grad_evals,
        wall_time=time.perf_counter() - started,
    )
    _log_summary(record)
    return record


def rt_chmc_metropolis(
    M: ConstraintManifold, target: TargetDensity, x0: np.ndarray, cfg: SamplerConfig
) -> ChainRecord:
    """Randomized-time constrained HMC with Metropolis adjustment."""
    return _metropolis_chain(
        M,
        target,
        x0,
        cfg,
        lambda rng: draw_duration(rng, cfg.mean_duration),
        "rt-chmc",
    )


def rmhmc_fixed(
    M: ConstraintManifold, target: TargetDensity, x0: np.ndarray, cfg: SamplerConfig
) -> ChainRecord:
    """Fixed-duration baseline: T = mean_duration at every step."""
    return _metropolis_chain(
        M, target, x0, cfg, lambda rng: cfg.mean_duration, "rmhmc"
    )


def rt_chmc_unadjusted(
    M: ConstraintManifold, target: TargetDensity, x0: np.ndarray, cfg: SamplerConfig
) -> ChainRecord:
    """Discretized randomized-time constrained HMC without accept/reject.

    With cfg.thin_per_step every RATTLE position is emitted, otherwise only
    event endpoints. accepted, energy and durations are always per event.
    """
    _check_target(M, target)
    check_on_manifold(M, x0, cfg.feasibility_tol)

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    samples: List[np.ndarray] = []
    potentials: List[float] = []
    energy = np.empty(n)
    durations = np.empty(n)

    started = time.perf_counter()
    x = np.array(x0, dtype=float, copy=True)
    grad_x = target.gradient(x)
    grad_evals = 1

    for k in range(n):
        v = sample_tangent_gaussian(M, x, rng, cfg.gram_regularization)
        T = draw_duration(rng, cfg.mean_duration)
        durations[k] = T
        L, h = step_schedule(T, cfg.dt_max)
        if h <= 0.0:
            energy[k] = target.potential(x) + kinetic_energy(v)
            samples.append(x.copy())
            potentials.append(target.potential(x))
            continue

        result = flow(
            M,
            target,
            PhasePoint(x, v),
            cfg.rattle_config(h),
            L,
            grad_x=grad_x,
            record_trajectory=cfg.thin_per_step,
        )
        grad_evals += result.grad_evals
        if not result.converged:
            raise IntegrationError(
                f"SHAKE failed at event {k} after {result.steps} of {L} steps "
                f"(stepsize {h:.3g}, {result.shake_iterations} sweeps)"
            )
        energy[k] = result.energy_end
        x = result.end_state.x
        grad_x = result.end_gradient

        if cfg.thin_per_step and result.trajectory is not None:
            for position in result.trajectory[:-1]:
                samples.append(position)
                potentials.append(target.potential(position))
        samples.append(x.copy())
        potentials.append(result.end_potential)

    record = ChainRecord(
        sampler="rt-chmc-unadjusted",
        samples=np.array(samples),
        accepted=np.ones(n, dtype=bool),
        energy=energy,
        durations=durations,
        potentials=np.array(potentials),
        grad_evals=grad_evals,
        wall_time=time.perf_counter() - started,
    )
    _log_summary(record)
    return record


def rt_rmhmc_exact_sphere(n: int, x0: np.ndarray, cfg: SamplerConfig) -> ChainRecord:
    """Rejection-free exact-flow sampler for the uniform law on S^{n-1} in R^n."""
    sphere = Sphere(n - 1)
    check_on_manifold(sphere, x0, 2.0 * GEODESIC_TOL)

    rng = np.random.default_rng(cfg.seed)
    count = cfg.n_samples
    samples = np.empty((count, n))
    energy = np.empty(count)
    durations = np.empty(count)

    started = time.perf_counter()
    x = np.array(x0, dtype=float, copy=True)
    for k in range(count):
        v = sample_tangent_gaussian(sphere, x, rng)
        T = draw_duration(rng, cfg.mean_duration)
        state = sphere_geodesic_flow(x, v, T)
        x = state.x
        samples[k] = x
        energy[k] = kinetic_energy(state.v)
        durations[k] = T

    record = ChainRecord(
        sampler="rt-exact-sphere",
        samples=samples,
        accepted=np.ones(count, dtype=bool),
        energy=energy,
        durations=durations,
        potentials=np.zeros(count),
        wall_time=time.perf_counter() - started,
    )
    _log_summary(record)
    return record


def ornstein_uhlenbeck_step(
    M: ConstraintManifold,
    x: np.ndarray,
    v: np.ndarray,
    gamma: float,
    h: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exact OU velocity exchange restricted to the tangent space at x."""
    decay = math.exp(-gamma * h)
    noise = math.sqrt(-math.expm1(-2.0 * gamma * h))
    return decay * v + noise * sample_tangent_gaussian(M, x, rng)


def _geodesic_drift(
    M: ConstraintManifold, state: PhasePoint, cfg: RattleConfig, substeps: int, k: int
) -> PhasePoint:
    for _ in range(substeps):
        nxt, sweeps = free_drift(M, state, cfg)
        if nxt is None:
            raise IntegrationError(
                f"SHAKE failed in g-BAOAB drift at step {k} "
                f"(substep size {cfg.h:.3g}, {sweeps} sweeps)"
            )
        state = nxt
    return state


def gbaoab(
    M: ConstraintManifold, target: TargetDensity, x0: np.ndarray, lcfg: LangevinConfig
) -> ChainRecord:
    """Constrained underdamped Langevin with B-A-O-A-B splitting (unadjusted)."""
    _check_target(M, target)
    check_on_manifold(M, x0)

    rng = np.random.default_rng(lcfg.seed)
    n = lcfg.n_samples
    h = lcfg.h
    drift = RattleConfig(
        h=h / (2 * lcfg.geodesic_substeps),
        shake_tol=lcfg.shake_tol,
        shake_max_iters=lcfg.shake_max_iters,
    )
    samples = np.empty((n, M.ambient_dim))
    energy = np.empty(n)
    potentials = np.empty(n)

    started = time.perf_counter()
    x = np.array(x0, dtype=float, copy=True)
    try:
        grad = target.gradient(x)
    except TargetEvaluationError as e:
        raise IntegrationError(f"g-BAOAB start not evaluable: {e}")
    grad_evals = 1
    v = sample_tangent_gaussian(M, x, rng)

    for k in range(n):
        try:
            v = M.project(x, v - (0.5 * h) * grad)
            state = _geodesic_drift(
                M, PhasePoint(x, v), drift, lcfg.geodesic_substeps, k
            )
            v = ornstein_uhlenbeck_step(M, state.x, state.v, lcfg.gamma, h, rng)
            state = _geodesic_drift(
                M, PhasePoint(state.x, v), drift, lcfg.geodesic_substeps, k
            )
            x = state.x
            grad = target.gradient(x)
            grad_evals += 1
            v = M.project(x, state.v - (0.5 * h) * grad)
            u = target.potential(x)
        except (TargetEvaluationError, SingularConstraintError) as e:
            raise IntegrationError(f"g-BAOAB failed at step {k}: {e}")

        samples[k] = x
        potentials[k] = u
        energy[k] = u + kinetic_energy(v)

    record = ChainRecord(
        sampler="gbaoab",
        samples=samples,
        accepted=np.ones(n, dtype=bool),
        energy=energy,
        durations=np.full(n, h),
        potentials=potentials,
        grad_evals=grad_evals,
        wall_time=time.perf_counter() - started,
    )
    _log_summary(record)
    return record
