"""Constrained symplectic integration on embedded manifolds.

RATTLE with a SHAKE position solve (one multiplier adjusted at a time, fixed
ascending sweep order) and a projected velocity update. All functions are
state in, state out.
"""

import math
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import OffManifoldError, SingularConstraintError, TargetEvaluationError
from .logger import get_logger
from .manifolds import ConstraintManifold, constraint_violation
from .models import FlowResult, PhasePoint, RattleConfig
from .targets import TargetDensity

# SHAKE gives up when C_i(Q).C_i(x) collapses below this
DENOMINATOR_FLOOR = 1e-14
REV_TOL = 1e-8
GEODESIC_TOL = 1e-12

logger = get_logger()


def kinetic_energy(v: np.ndarray) -> float:
    return 0.5 * float(v @ v)


def hamiltonian(target: TargetDensity, state: PhasePoint) -> float:
    """H(x, v) = U(x) + v.v / 2 for the embedded Hamiltonian."""
    return target.potential(state.x) + kinetic_energy(state.v)


def shake_solve(
    M: ConstraintManifold,
    x: np.ndarray,
    v: np.ndarray,
    grad_x: np.ndarray,
    cfg: RattleConfig,
) -> Tuple[np.ndarray, int, bool]:
    """Position half of RATTLE: returns (x_next, sweeps, converged)."""
    h = cfg.h
    Q = x + h * v - (0.5 * h * h) * grad_x
    m = M.constraint_dim
    if m == 0:
        return Q, 0, bool(np.all(np.isfinite(Q)))

    C_x = M.jacobian(x)
    for sweep in range(1, cfg.shake_max_iters + 1):
        for i in range(m):
            g_i = M.constraint_component(i, Q)
            denom = float(M.jacobian_row(i, Q) @ C_x[i])
            if not math.isfinite(g_i) or abs(denom) < DENOMINATOR_FLOOR:
                return Q, sweep, False
            Q = Q - C_x[i] * (g_i / denom)
        residual = constraint_violation(M, Q)
        if not math.isfinite(residual):
            return Q, sweep, False
        if residual < cfg.shake_tol:
            return Q, sweep, True
    return Q, cfg.shake_max_iters, False


def _rattle(
    M: ConstraintManifold,
    gradient: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    v: np.ndarray,
    grad_x: np.ndarray,
    cfg: RattleConfig,
) -> Tuple[Optional[PhasePoint], Optional[np.ndarray], int]:
    x_next, sweeps, converged = shake_solve(M, x, v, grad_x, cfg)
    if not converged:
        return None, None, sweeps
    # Recompute the half-step velocity from the solved position so the
    # position and velocity multipliers stay consistent
    v_half = (x_next - x) / cfg.h
    grad_next = gradient(x_next)
    v_next = M.project(
        x_next, v_half - (0.5 * cfg.h) * grad_next, cfg.gram_regularization
    )
    if not np.all(np.isfinite(v_next)):
        return None, None, sweeps
    return PhasePoint(x_next, v_next), grad_next, sweeps


def flow(
    M: ConstraintManifold,
    target: TargetDensity,
    state: PhasePoint,
    cfg: RattleConfig,
    L: int,
    grad_x: Optional[np.ndarray] = None,
    record_trajectory: bool = False,
) -> FlowResult:
    """Compose L RATTLE steps, stopping at the first SHAKE failure.

    grad_x may carry the already known gradient at state.x; it is then not
    re-evaluated (and not counted in grad_evals).
    """
    if L < 1:
        raise ValueError(f"number of steps must be positive, got {L}")

    grad_evals = 0
    trajectory = [] if record_trajectory else None
    try:
        energy_start = hamiltonian(target, state)
        if grad_x is None:
            grad_x = target.gradient(state.x)
            grad_evals += 1
    except TargetEvaluationError as e:
        logger.debug(f"Flow start not evaluable: {e}")
        return FlowResult(state, False, 0, math.nan, math.nan, grad_evals=grad_evals)

    current = state
    gradient = grad_x
    max_sweeps = 0
    converged = True
    steps = 0
    for _ in range(L):
        try:
            nxt, grad_next, sweeps = _rattle(
                M, target.gradient, current.x, current.v, gradient, cfg
            )
        except (TargetEvaluationError, SingularConstraintError) as e:
            logger.debug(f"RATTLE step failed: {e}")
            converged = False
            break
        max_sweeps = max(max_sweeps, sweeps)
        if nxt is None:
            converged = False
            break
        grad_evals += 1
        steps += 1
        current, gradient = nxt, grad_next
        if trajectory is not None:
            trajectory.append(current.x.copy())

    energy_end = math.nan
    end_potential = math.nan
    if converged:
        try:
            end_potential = target.potential(current.x)
            energy_end = end_potential + kinetic_energy(current.v)
        except TargetEvaluationError:
            converged = False

    return FlowResult(
        end_state=current,
        converged=converged,
        shake_iterations=max_sweeps,
        energy_start=energy_start,
        energy_end=energy_end,
        steps=steps,
        grad_evals=grad_evals,
        trajectory=trajectory,
        end_potential=end_potential,
        end_gradient=gradient if converged else None,
    )


def rattle_step(
    M: ConstraintManifold,
    target: TargetDensity,
    state: PhasePoint,
    cfg: RattleConfig,
) -> FlowResult:
    """One RATTLE step of size cfg.h."""
    return flow(M, target, state, cfg, 1)


def free_drift(
    M: ConstraintManifold, state: PhasePoint, cfg: RattleConfig
) -> Tuple[Optional[PhasePoint], int]:
    """RATTLE step with U = 0 (constrained geodesic drift)."""
    zero = np.zeros_like(state.x)
    nxt, _, sweeps = _rattle(M, lambda _x: zero, state.x, state.v, zero, cfg)
    return nxt, sweeps


def momentum_flip(state: PhasePoint) -> PhasePoint:
    """(x, v) -> (x, -v)."""
    return PhasePoint(state.x.copy(), -state.v)


def reversibility_error(
    M: ConstraintManifold,
    target: TargetDensity,
    start: PhasePoint,
    proposal: PhasePoint,
    cfg: RattleConfig,
    L: int,
    grad_x: Optional[np.ndarray] = None,
) -> Tuple[float, FlowResult]:
    """Joint infinity-norm distance between start and flip(flow(proposal))."""
    back = flow(M, target, proposal, cfg, L, grad_x=grad_x)
    if not back.converged:
        return math.inf, back
    returned = momentum_flip(back.end_state)
    error = max(
        float(np.max(np.abs(returned.x - start.x))),
        float(np.max(np.abs(returned.v - start.v))),
    )
    return error, back


def reversibility_check(
    M: ConstraintManifold,
    target: TargetDensity,
    start: PhasePoint,
    proposal: PhasePoint,
    cfg: RattleConfig,
    L: int,
    rev_tol: float = REV_TOL,
) -> bool:
    """True iff integrating back from the flipped proposal returns to start."""
    error, _ = reversibility_error(M, target, start, proposal, cfg, L)
    return error <= rev_tol


def sphere_geodesic_flow(x: np.ndarray, v: np.ndarray, t: float) -> PhasePoint:
    """Exact great-circle flow for U = 0 on the unit sphere."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    speed = float(np.linalg.norm(v))
    if abs(np.linalg.norm(x) - 1.0) > GEODESIC_TOL:
        raise OffManifoldError("geodesic flow needs a unit-norm position")
    if abs(x @ v) > GEODESIC_TOL * max(1.0, speed):
        raise OffManifoldError("geodesic flow needs a tangent velocity")
    if speed == 0.0 or t == 0.0:
        return PhasePoint(x.copy(), v.copy())

    angle = speed * t
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    return PhasePoint(
        x * cos_a + (v / speed) * sin_a,
        -x * (speed * sin_a) + v * cos_a,
    )
