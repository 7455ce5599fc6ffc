"""Chain-quality and estimator-quality metrics."""

import math
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, eigvalsh, solve_triangular
from scipy.signal import fftconvolve

from .errors import DegenerateSeriesError
from .logger import get_logger
from .models import IacEstimate

TAU_FLOOR = 0.01
MAX_LAG_FRACTION = 1 / 50
MIN_SERIES_FOR_ERRORS = 100

logger = get_logger()


def _as_series(series) -> np.ndarray:
    f = np.asarray(series, dtype=float)
    if f.ndim != 1:
        raise ValueError(f"expected a one-dimensional series, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("series contains non-finite values")
    return f


def is_constant(series) -> bool:
    f = _as_series(series)
    return f.size == 0 or bool(np.all(f == f[0]))


def autocovariance(series, max_lag: int, method: str = "direct") -> np.ndarray:
    """c(i) = 1/(N-i) sum_n (f_n - mu)(f_{n+i} - mu) for i = 0..max_lag.

    mu is the mean of the full series. Raises DegenerateSeriesError for a
    constant series, whose autocorrelations are undefined.
    """
    f = _as_series(series)
    N = f.size
    if max_lag < 0:
        raise ValueError(f"max_lag must be nonnegative, got {max_lag}")
    if max_lag >= N:
        raise ValueError(f"max_lag {max_lag} must be smaller than series length {N}")
    if is_constant(f):
        raise DegenerateSeriesError("series is constant")

    centered = f - f.mean()
    lags = np.arange(max_lag + 1)
    if method == "direct":
        sums = np.array(
            [centered[: N - i] @ centered[i:] for i in range(max_lag + 1)]
        )
    elif method == "fft":
        full = fftconvolve(centered, centered[::-1], mode="full")
        sums = full[N - 1 : N + max_lag]
    else:
        raise ValueError(f"unknown autocovariance method: {method}")
    return sums / (N - lags)


def iac(
    series,
    max_lag: Optional[int] = None,
    floor: float = TAU_FLOOR,
    method: str = "direct",
) -> IacEstimate:
    """Integrated autocorrelation tau = 1 + 2 sum_{i=1}^M c(i)/c(0)."""
    f = _as_series(series)
    N = f.size
    if max_lag is None:
        max_lag = max(1, int(N * MAX_LAG_FRACTION))
    if max_lag >= N:
        raise ValueError(f"max_lag {max_lag} must be smaller than series length {N}")

    if is_constant(f):
        logger.warning("IAC requested for a constant series; reporting tau = floor")
        return IacEstimate(
            tau=floor,
            max_lag=max_lag,
            autocovariances=np.zeros(max_lag + 1),
            ess=N / floor,
            n=N,
            degenerate=True,
            clamped=True,
        )

    c = autocovariance(f, max_lag, method)
    tau = 1.0 + 2.0 * float(np.sum(c[1:]) / c[0])
    clamped = tau < floor
    if clamped:
        tau = floor
    return IacEstimate(
        tau=tau, max_lag=max_lag, autocovariances=c, ess=N / tau, n=N, clamped=clamped
    )


def effective_sample_size(series, max_lag: Optional[int] = None) -> float:
    return iac(series, max_lag).ess


def mc_average_with_error(
    series, max_lag: Optional[int] = None
) -> Tuple[float, float]:
    """Sample mean and its asymptotic standard error sqrt(tau var(f) / N)."""
    f = _as_series(series)
    N = f.size
    if N < MIN_SERIES_FOR_ERRORS:
        logger.warning(
            f"Error bar from only {N} samples (< {MIN_SERIES_FOR_ERRORS}) is unreliable"
        )
    mean = float(f.mean())
    if is_constant(f):
        return mean, 0.0
    estimate = iac(f, max_lag)
    return mean, math.sqrt(estimate.tau * estimate.autocovariances[0] / N)


def _spd_cholesky(A: np.ndarray, name: str) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(A))):
        raise ValueError(f"{name} must be symmetric")
    try:
        return cholesky(A, lower=True)
    except LinAlgError:
        raise ValueError(f"{name} is not positive definite")


def forstner_metric(A: np.ndarray, B: np.ndarray) -> float:
    """sqrt(sum ln^2 lambda_i) over the roots of det(lambda A - B) = 0."""
    if np.shape(A) != np.shape(B):
        raise ValueError(f"shape mismatch: {np.shape(A)} vs {np.shape(B)}")
    L = _spd_cholesky(A, "A")
    _spd_cholesky(B, "B")
    # eigenvalues of L^-1 B L^-T
    W = solve_triangular(L, np.asarray(B, dtype=float), lower=True)
    W = solve_triangular(L, W.T, lower=True)
    eigenvalues = eigvalsh(0.5 * (W + W.T))
    if np.any(eigenvalues <= 0):
        raise ValueError("generalized eigenvalues are not positive")
    return float(np.sqrt(np.sum(np.log(eigenvalues) ** 2)))


def rel_frobenius(A: np.ndarray, B: np.ndarray) -> float:
    """||A - B||_F / ||A||_F."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    norm = np.linalg.norm(A)
    if norm == 0.0:
        raise ValueError("reference matrix has zero norm")
    return float(np.linalg.norm(A - B) / norm)


def grad_evals_per_ess(grad_evals: int, ess: float) -> float:
    if not ess > 0:
        return math.inf
    return grad_evals / ess


def max_coordinate_iac(samples: np.ndarray, max_lag: Optional[int] = None) -> float:
    """Largest IAC over the ambient coordinates; constant coordinates are skipped."""
    samples = np.asarray(samples, dtype=float)
    taus = [
        iac(samples[:, i], max_lag).tau
        for i in range(samples.shape[1])
        if not is_constant(samples[:, i])
    ]
    return max(taus) if taus else TAU_FLOOR


def diagnostics_record(
    observable: str,
    series,
    max_lag: Optional[int] = None,
    grad_evals: Optional[int] = None,
) -> Dict[str, Any]:
    """JSON-ready summary {observable, tau, ess, mean, stderr, ...} of one series."""
    f = _as_series(series)
    estimate = iac(f, max_lag)
    mean, stderr = mc_average_with_error(f, max_lag)
    record: Dict[str, Any] = {
        "observable": observable,
        "tau": estimate.tau,
        "ess": estimate.ess,
        "mean": mean,
        "stderr": stderr,
        "n": estimate.n,
        "max_lag": estimate.max_lag,
        "degenerate": estimate.degenerate,
    }
    if grad_evals is not None:
        record["grad_evals_per_ess"] = grad_evals_per_ess(grad_evals, estimate.ess)
    return record
