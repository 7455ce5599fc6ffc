"""Target densities with respect to the Hausdorff measure of the manifold.

A target supplies the potential U(x) = -log pi(x) (normalisation dropped) and
its ambient gradient. Potentials are defined on all of R^n, not only on M,
so finite-difference checks in ambient coordinates are meaningful.
"""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DimensionMismatchError, TargetEvaluationError
from .models import BvmfParams, CovModel, VmfStiefelParams


@dataclass(frozen=True)
class TargetDensity:
    name: str
    dim: int
    potential: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]


def _check_length(x: np.ndarray, dim: int, name: str) -> None:
    if np.shape(x) != (dim,):
        raise DimensionMismatchError(
            f"{name}: expected vector of length {dim}, got shape {np.shape(x)}"
        )


# Bingham-von Mises-Fisher on S^n: pi(x) ~ exp(c.x + x^T A x)


def bvmf_potential(params: BvmfParams, x: np.ndarray) -> float:
    _check_length(x, params.dim, "bvmf")
    return -float(params.c @ x + x @ params.A @ x)


def bvmf_gradient(params: BvmfParams, x: np.ndarray) -> np.ndarray:
    _check_length(x, params.dim, "bvmf")
    return -(params.c + 2.0 * (params.A @ x))


def bvmf_target(params: BvmfParams) -> TargetDensity:
    return TargetDensity(
        name="bvmf",
        dim=params.dim,
        potential=lambda x: bvmf_potential(params, x),
        gradient=lambda x: bvmf_gradient(params, x),
    )


def uniform_target(dim: int) -> TargetDensity:
    return TargetDensity(
        name="uniform",
        dim=dim,
        potential=lambda x: 0.0,
        gradient=lambda x: np.zeros(dim),
    )


# von Mises-Fisher on V_{d,p}: pi(X) ~ exp(tr(F^T X))


def _as_matrix(params: VmfStiefelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    F = params.F
    if X.ndim == 1:
        if X.size != F.size:
            raise DimensionMismatchError(
                f"vmf-stiefel: expected {F.size} entries, got {X.size}"
            )
        return np.reshape(X, F.shape, order="F")
    if X.shape != F.shape:
        raise DimensionMismatchError(
            f"vmf-stiefel: expected shape {F.shape}, got {X.shape}"
        )
    return X


def vmf_stiefel_potential(params: VmfStiefelParams, X: np.ndarray) -> float:
    return -float(np.sum(params.F * _as_matrix(params, X)))


def vmf_stiefel_gradient(params: VmfStiefelParams, X: np.ndarray) -> np.ndarray:
    """Constant gradient -F, in the layout of the argument (flat or matrix)."""
    _as_matrix(params, X)
    if np.ndim(X) == 1:
        return -np.reshape(params.F, params.F.size, order="F")
    return -params.F.copy()


def vmf_stiefel_target(params: VmfStiefelParams) -> TargetDensity:
    return TargetDensity(
        name="vmf-stiefel",
        dim=params.F.size,
        potential=lambda x: vmf_stiefel_potential(params, x),
        gradient=lambda x: vmf_stiefel_gradient(params, x),
    )


def skew3(a: float, b: float, c: float) -> np.ndarray:
    """3x3 skew-symmetric matrix with upper-triangular entries a, b, c."""
    return np.array([[0.0, a, b], [-a, 0.0, c], [-b, -c, 0.0]])


# Spiked covariance posterior on V_{p,m} x R^m x R^p


def spiked_cov_dim(model: CovModel) -> int:
    return model.p * model.m + model.m + model.p


def pack_theta(X: np.ndarray, d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    return np.concatenate([np.reshape(X, X.size, order="F"), d1, d2])


def unpack_theta(
    model: CovModel, theta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_length(theta, spiked_cov_dim(model), "spiked-cov")
    p, m = model.p, model.m
    X = np.reshape(theta[: p * m], (p, m), order="F")
    d1 = theta[p * m : p * m + m]
    d2 = theta[p * m + m :]
    return X, d1, d2


def spiked_covariance(model: CovModel, theta: np.ndarray) -> np.ndarray:
    """Sigma = X diag(d1) X^T + diag(d2)."""
    X, d1, d2 = unpack_theta(model, theta)
    return (X * d1) @ X.T + np.diag(d2)


def _factorize(model: CovModel, theta: np.ndarray):
    X, d1, d2 = unpack_theta(model, theta)
    sigma = (X * d1) @ X.T + np.diag(d2)
    if not np.all(np.isfinite(sigma)):
        raise TargetEvaluationError("spiked-cov: non-finite covariance")
    try:
        factor = cho_factor(sigma, lower=True)
    except LinAlgError:
        raise TargetEvaluationError("spiked-cov: covariance is not positive definite")
    return X, d1, d2, factor


def spiked_cov_potential(model: CovModel, theta: np.ndarray) -> float:
    """U = n/2 log det Sigma + 1/2 tr(Sigma^-1 S) + half-normal prior terms."""
    X, d1, d2, factor = _factorize(model, theta)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    trace_term = np.trace(cho_solve(factor, model.scatter))
    prior = 0.5 * (d1 @ d1) / model.sigma1**2 + 0.5 * (d2 @ d2) / model.sigma2**2
    value = 0.5 * model.n * log_det + 0.5 * trace_term + prior
    if not np.isfinite(value):
        raise TargetEvaluationError("spiked-cov: non-finite potential")
    return float(value)


def spiked_cov_gradient(model: CovModel, theta: np.ndarray) -> np.ndarray:
    X, d1, d2, factor = _factorize(model, theta)
    sigma_inv = cho_solve(factor, np.eye(model.p))
    # dU/dSigma, symmetric
    G = 0.5 * (model.n * sigma_inv - sigma_inv @ model.scatter @ sigma_inv)
    GX = G @ X
    grad_X = 2.0 * GX * d1
    grad_d1 = np.sum(X * GX, axis=0) + d1 / model.sigma1**2
    grad_d2 = np.diag(G) + d2 / model.sigma2**2
    return pack_theta(grad_X, grad_d1, grad_d2)


def spiked_cov_target(model: CovModel) -> TargetDensity:
    return TargetDensity(
        name="spiked-cov",
        dim=spiked_cov_dim(model),
        potential=lambda theta: spiked_cov_potential(model, theta),
        gradient=lambda theta: spiked_cov_gradient(model, theta),
    )
