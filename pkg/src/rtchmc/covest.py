"""Bayesian spiked-covariance estimation.

The covariance is modelled as Sigma = X diag(d1) X^T + diag(d2) with X on the
Stiefel manifold V_{p,m} and d1, d2 >= 0. Data are normalized column-wise
before sampling; all reported estimates are mapped back to data units.
"""

import csv
import dataclasses
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, svd

from .diagnostics import forstner_metric, rel_frobenius
from .errors import DataFormatError, RtchmcError, TargetEvaluationError
from .logger import get_logger
from .manifolds import (
    EuclideanBlock,
    ProductManifold,
    Stiefel,
    constraint_violation,
)
from .models import CovModel, CovReport, NormalizedData, SamplerConfig
from .samplers import rt_chmc_metropolis
from .targets import (
    pack_theta,
    spiked_cov_target,
    spiked_covariance,
    unpack_theta,
)

SCALE_FLOOR = 1e-12
CLAMP_EPS = 1e-6
MAP_DESCENT_TOL = 1e-8
MAX_HALVINGS = 50

logger = get_logger()


def ingest(
    csv_path: Path, p: Optional[int] = None, skip_header: bool = False
) -> np.ndarray:
    """Read an n x p numeric CSV. Row numbers in errors are file line numbers."""
    rows: List[List[float]] = []
    width = p
    with open(csv_path, newline="") as f:
        for row_number, row in enumerate(csv.reader(f), start=1):
            if skip_header and row_number == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise DataFormatError(
                    f"{csv_path}: row {row_number}: non-numeric entry in {row}",
                    row=row_number,
                )
            if not all(math.isfinite(value) for value in values):
                raise DataFormatError(
                    f"{csv_path}: row {row_number}: NaN or infinite entry",
                    row=row_number,
                )
            if width is None:
                width = len(values)
            if len(values) != width:
                raise DataFormatError(
                    f"{csv_path}: row {row_number}: expected {width} columns, "
                    f"got {len(values)}",
                    row=row_number,
                )
            rows.append(values)

    if not rows:
        raise DataFormatError(f"{csv_path}: no data rows")
    return np.array(rows, dtype=float)


def normalize(data: np.ndarray) -> NormalizedData:
    """Center each column and scale it to unit sample SD (ddof = 1)."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"need at least two data vectors, got shape {data.shape}")

    mean = data.mean(axis=0)
    scale = data.std(axis=0, ddof=1)
    constant = [int(j) for j in np.flatnonzero(scale < SCALE_FLOOR)]
    if constant:
        logger.warning(f"Columns {constant} are constant and left unscaled")
        scale[constant] = 1.0
    return NormalizedData(
        data=(data - mean) / scale, scale=scale, mean=mean, constant_columns=constant
    )


def rescale(cov: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Map a covariance of normalized data back to data units: cov * s s^T."""
    return cov * np.outer(scale, scale)


def rescale_inverse(precision: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return precision / np.outer(scale, scale)


def scatter_matrix(data: np.ndarray) -> np.ndarray:
    centered = data - data.mean(axis=0)
    return centered.T @ centered


def build_cov_model(
    normalized: NormalizedData,
    m: Optional[int] = None,
    sigma1: float = 2.0,
    sigma2: float = 2.0,
) -> CovModel:
    n, p = normalized.data.shape
    if m is None:
        m = math.ceil(p / 6)
    if not 1 <= m < p:
        raise ValueError(f"spike rank m must satisfy 1 <= m < p = {p}, got {m}")
    if not (sigma1 > 0 and sigma2 > 0):
        raise ValueError("prior scales must be positive")
    return CovModel(
        p=p,
        m=m,
        n=n,
        sigma1=sigma1,
        sigma2=sigma2,
        scatter=scatter_matrix(normalized.data),
        mean=normalized.mean,
        scale=normalized.scale,
    )


def covariance_manifold(model: CovModel) -> ProductManifold:
    """V_{p,m} x R^m_+ x R^p_+ in the layout of pack_theta."""
    return ProductManifold(
        [
            Stiefel(model.p, model.m),
            EuclideanBlock(model.m, nonneg=True),
            EuclideanBlock(model.p, nonneg=True),
        ]
    )


def polar(A: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal columns (orthogonal polar factor)."""
    U, _, Vt = svd(A, full_matrices=False)
    return U @ Vt


def _top_eigenpairs(matrix: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    try:
        values, vectors = eigh(0.5 * (matrix + matrix.T))
    except LinAlgError as e:
        raise RtchmcError(f"eigendecomposition failed during initialisation: {e}")
    order = np.argsort(values)[::-1][:m]
    return values[order], vectors[:, order]


def initialize(
    model: CovModel, eps: float = CLAMP_EPS, refine_iters: int = 0
) -> np.ndarray:
    """Eigen-initialisation of theta = (X, d1, d2) from Sigma_S = S / n.

    refine_iters > 0 alternates the diagonal and low-rank updates; zero keeps
    the plain single-pass initialisation.
    """
    sample_cov = model.scatter / model.n
    d2 = np.diag(sample_cov).copy()
    values, X = _top_eigenpairs(sample_cov - np.diag(d2), model.m)

    for _ in range(refine_iters):
        d2 = np.diag(sample_cov - (X * np.maximum(values, 0.0)) @ X.T).copy()
        d2 = np.maximum(d2, eps)
        values, X = _top_eigenpairs(sample_cov - np.diag(d2), model.m)

    return pack_theta(polar(X), np.maximum(values, eps), np.maximum(d2, eps))


def _riemannian_direction(model: CovModel, theta: np.ndarray, grad: np.ndarray):
    X, _, _ = unpack_theta(model, theta)
    gX, gd1, gd2 = unpack_theta(model, grad)
    XtG = X.T @ gX
    return gX - X @ (0.5 * (XtG + XtG.T)), gd1, gd2


def map_estimate(
    model: CovModel,
    theta0: np.ndarray,
    steps: int = 500,
    lr: float = 1e-3,
    eps: float = CLAMP_EPS,
) -> np.ndarray:
    """Projected gradient descent on U with polar retraction and backtracking."""
    target = spiked_cov_target(model)
    theta = np.array(theta0, dtype=float, copy=True)
    value = target.potential(theta)

    for step in range(steps):
        dX, dd1, dd2 = _riemannian_direction(model, theta, target.gradient(theta))
        if max(np.max(np.abs(dX)), np.max(np.abs(dd1)), np.max(np.abs(dd2))) == 0.0:
            break
        X, d1, d2 = unpack_theta(model, theta)
        rate = lr
        for _ in range(MAX_HALVINGS):
            candidate = pack_theta(
                polar(X - rate * dX),
                np.maximum(d1 - rate * dd1, eps),
                np.maximum(d2 - rate * dd2, eps),
            )
            try:
                candidate_value = target.potential(candidate)
            except TargetEvaluationError:
                candidate_value = math.inf
            if candidate_value <= value + MAP_DESCENT_TOL:
                break
            rate *= 0.5
        else:
            logger.debug(f"MAP descent stalled after {step} steps")
            break
        theta, value = candidate, candidate_value

    logger.debug(f"MAP estimate reached U = {value:.6g}")
    return theta


def _precision(sigma: np.ndarray) -> np.ndarray:
    return cho_solve(cho_factor(sigma, lower=True), np.eye(sigma.shape[0]))


def covariance_metrics(
    reference: np.ndarray,
    estimate: np.ndarray,
    inverse_estimate: Optional[np.ndarray] = None,
) -> Dict[str, float]:
    """rel_frobenius, rel_frobenius_inverse and forstner of estimate vs reference."""
    if inverse_estimate is None:
        inverse_estimate = _precision(estimate)
    return {
        "rel_frobenius": rel_frobenius(reference, estimate),
        "rel_frobenius_inverse": rel_frobenius(_precision(reference), inverse_estimate),
        "forstner": forstner_metric(reference, estimate),
    }


def chain_feasibility(model: CovModel, samples: np.ndarray) -> Tuple[float, float]:
    """(max |X^T X - I| entry, smallest d1/d2 entry) over a chain of states."""
    M = covariance_manifold(model)
    samples = np.atleast_2d(samples)
    violation = max(constraint_violation(M, theta) for theta in samples)
    offset = model.p * model.m
    return violation, float(np.min(samples[:, offset:]))


def posterior_estimate(
    model: CovModel,
    theta0: np.ndarray,
    cfg: SamplerConfig,
    reference: Optional[np.ndarray] = None,
    map_theta: Optional[np.ndarray] = None,
    burn_in: float = 0.1,
) -> CovReport:
    """Sample the posterior with RT-CHMC and summarise Sigma and Sigma^-1."""
    M = covariance_manifold(model)
    cfg = dataclasses.replace(cfg, nonneg_blocks=M.nonneg_ranges())
    record = rt_chmc_metropolis(M, spiked_cov_target(model), theta0, cfg)

    kept = record.samples[int(burn_in * record.n_samples) :]
    if kept.shape[0] == 0:
        kept = record.samples[-1:]

    # Welford running moments; repeated states reuse the previous factorisation
    p = model.p
    count = 0
    mean = np.zeros((p, p))
    m2 = np.zeros((p, p))
    inverse_mean = np.zeros((p, p))
    inverse_m2 = np.zeros((p, p))
    previous: Optional[np.ndarray] = None
    for theta in kept:
        if previous is None or not np.array_equal(theta, previous):
            sigma = spiked_covariance(model, theta)
            precision = _precision(sigma)
            previous = theta
        count += 1
        delta = sigma - mean
        mean += delta / count
        m2 += delta * (sigma - mean)
        inverse_delta = precision - inverse_mean
        inverse_mean += inverse_delta / count
        inverse_m2 += inverse_delta * (precision - inverse_mean)

    violation, min_d = chain_feasibility(model, record.samples)
    if violation > cfg.shake_tol:
        logger.warning(
            f"Sampled states violate X^T X = I by up to {violation:.3e} "
            f"(shake_tol {cfg.shake_tol:.1e})"
        )

    scale = model.scale
    report = CovReport(
        mean=rescale(0.5 * (mean + mean.T), scale),
        sd=rescale(np.sqrt(np.maximum(m2 / count, 0.0)), scale),
        inverse_mean=rescale_inverse(0.5 * (inverse_mean + inverse_mean.T), scale),
        map_estimate=(
            rescale(spiked_covariance(model, map_theta), scale)
            if map_theta is not None
            else None
        ),
        acceptance_rate=record.acceptance_rate,
        n_samples=count,
        inverse_sd=rescale_inverse(
            np.sqrt(np.maximum(inverse_m2 / count, 0.0)), scale
        ),
        max_constraint_violation=violation,
        min_d=min_d,
    )

    if reference is not None:
        report.metrics["posterior_mean"] = covariance_metrics(
            reference, report.mean, report.inverse_mean
        )
        if report.map_estimate is not None:
            report.metrics["map"] = covariance_metrics(reference, report.map_estimate)
    return report


def synthetic_spiked_data(
    p: int,
    m: int,
    count: int,
    rng: np.random.Generator,
    d1_range: Tuple[float, float] = (1.0, 20.0),
    d2_range: Tuple[float, float] = (0.1, 1.0),
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw count vectors from N(0, X D1 X^T + D2); returns (data, true covariance)."""
    Q, R = np.linalg.qr(rng.standard_normal((p, m)))
    X = Q * np.sign(np.diag(R))
    d1 = np.exp(rng.uniform(*np.log(d1_range), size=m))
    d2 = np.exp(rng.uniform(*np.log(d2_range), size=p))
    sigma = (X * d1) @ X.T + np.diag(d2)
    L = np.linalg.cholesky(sigma)
    return rng.standard_normal((count, p)) @ L.T, sigma


def loaded_sample_covariance(data: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Unbiased sample covariance plus eps on the diagonal."""
    cov = np.atleast_2d(np.cov(np.asarray(data, dtype=float), rowvar=False))
    return cov + eps * np.eye(cov.shape[0])


def estimate_covariance(
    data: np.ndarray,
    cfg: SamplerConfig,
    m: Optional[int] = None,
    sigma1: float = 2.0,
    sigma2: float = 2.0,
    map_steps: int = 500,
    map_lr: float = 1e-3,
    refine_iters: int = 0,
    reference: Optional[np.ndarray] = None,
    burn_in: float = 0.1,
) -> CovReport:
    """Full pipeline: normalize, initialise, MAP, posterior sampling, rescale."""
    normalized = normalize(data)
    model = build_cov_model(normalized, m, sigma1, sigma2)
    logger.info(
        f"Estimating covariance: p={model.p}, m={model.m}, n={model.n}, "
        f"{cfg.n_samples} samples"
    )
    theta0 = initialize(model, refine_iters=refine_iters)
    map_theta = map_estimate(model, theta0, steps=map_steps, lr=map_lr)
    return posterior_estimate(
        model, theta0, cfg, reference=reference, map_theta=map_theta, burn_in=burn_in
    )
