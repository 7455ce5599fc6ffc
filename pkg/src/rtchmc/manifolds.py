"""Algebraically constrained manifolds M = {x : c(x) = 0} embedded in R^n.

Every manifold works on flat ambient vectors. Matrix-valued manifolds
(Stiefel) flatten column-major, so column j of X occupies x[j*d:(j+1)*d].
"""

from abc import ABC, abstractmethod
from typing import List, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    ConfigError,
    DimensionMismatchError,
    OffManifoldError,
    SingularConstraintError,
)

FEASIBILITY_TOL = 1e-9
GRAM_CONDITION_LIMIT = 1e12


class ConstraintManifold(ABC):
    ambient_dim: int
    constraint_dim: int

    @property
    @abstractmethod
    def spec(self) -> str:
        """Config string that rebuilds this manifold via parse_manifold()."""

    @abstractmethod
    def constraints(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def jacobian(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def default_point(self) -> np.ndarray: ...

    @abstractmethod
    def random_point(self, rng: np.random.Generator) -> np.ndarray: ...

    def constraint_component(self, i: int, x: np.ndarray) -> float:
        return float(self.constraints(x)[i])

    def jacobian_row(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.jacobian(x)[i]

    def project(
        self, x: np.ndarray, v: np.ndarray, regularization: float = 0.0
    ) -> np.ndarray:
        """Orthogonal projection of v onto the tangent space at x."""
        C = self.jacobian(x)
        if C.shape[0] == 0:
            return np.array(v, dtype=float, copy=True)
        gram = C @ C.T
        if regularization:
            gram = gram + regularization * np.eye(gram.shape[0])
        try:
            factor = cho_factor(gram)
        except LinAlgError as e:
            raise SingularConstraintError(f"Gram matrix is not invertible: {e}")
        return v - C.T @ cho_solve(factor, C @ v)

    def nonneg_ranges(self) -> List[Tuple[int, int]]:
        return []

    def check_dim(self, x: np.ndarray) -> None:
        if np.shape(x) != (self.ambient_dim,):
            raise DimensionMismatchError(
                f"{self.spec}: expected ambient vector of length "
                f"{self.ambient_dim}, got shape {np.shape(x)}"
            )


class Sphere(ConstraintManifold):
    """Unit sphere S^dim in R^(dim+1), c(x) = x.x - 1."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"sphere dimension must be positive, got {dim}")
        self.dim = dim
        self.ambient_dim = dim + 1
        self.constraint_dim = 1

    @property
    def spec(self) -> str:
        return f"sphere:{self.dim}"

    def constraints(self, x: np.ndarray) -> np.ndarray:
        return np.array([x @ x - 1.0])

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return (2.0 * x)[np.newaxis, :]

    def constraint_component(self, i: int, x: np.ndarray) -> float:
        return float(x @ x - 1.0)

    def jacobian_row(self, i: int, x: np.ndarray) -> np.ndarray:
        return 2.0 * x

    def project(
        self, x: np.ndarray, v: np.ndarray, regularization: float = 0.0
    ) -> np.ndarray:
        gram = 4.0 * (x @ x) + regularization
        if gram <= 0.0:
            raise SingularConstraintError("sphere projection at the origin")
        return v - (2.0 * x) * ((2.0 * (x @ v)) / gram)

    def default_point(self) -> np.ndarray:
        x = np.zeros(self.ambient_dim)
        x[0] = 1.0
        return x

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        x = rng.standard_normal(self.ambient_dim)
        return x / np.linalg.norm(x)


class Stiefel(ConstraintManifold):
    """Stiefel manifold V_{d,p} of d x p matrices with orthonormal columns.

    The constraints are the upper triangle (diagonal included) of X^T X - I,
    ordered as numpy.triu_indices(p).
    """

    def __init__(self, d: int, p: int):
        if p < 1 or d < p:
            raise ValueError(f"Stiefel manifold needs 1 <= p <= d, got d={d}, p={p}")
        self.d = d
        self.p = p
        self.ambient_dim = d * p
        self.pairs = [(int(a), int(b)) for a, b in zip(*np.triu_indices(p))]
        self.constraint_dim = len(self.pairs)
        self._triu = np.triu_indices(p)

    @property
    def spec(self) -> str:
        return f"stiefel:{self.d},{self.p}"

    def matrix(self, x: np.ndarray) -> np.ndarray:
        return np.reshape(x, (self.d, self.p), order="F")

    def flatten(self, X: np.ndarray) -> np.ndarray:
        return np.reshape(X, self.ambient_dim, order="F")

    def _column(self, x: np.ndarray, j: int) -> np.ndarray:
        return x[j * self.d : (j + 1) * self.d]

    def constraints(self, x: np.ndarray) -> np.ndarray:
        X = self.matrix(x)
        return (X.T @ X - np.eye(self.p))[self._triu]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((self.constraint_dim, self.ambient_dim))
        for k in range(self.constraint_dim):
            J[k] = self.jacobian_row(k, x)
        return J

    def constraint_component(self, i: int, x: np.ndarray) -> float:
        a, b = self.pairs[i]
        value = self._column(x, a) @ self._column(x, b)
        return float(value - 1.0) if a == b else float(value)

    def jacobian_row(self, i: int, x: np.ndarray) -> np.ndarray:
        a, b = self.pairs[i]
        d = self.d
        row = np.zeros(self.ambient_dim)
        if a == b:
            row[a * d : (a + 1) * d] = 2.0 * self._column(x, a)
        else:
            row[a * d : (a + 1) * d] = self._column(x, b)
            row[b * d : (b + 1) * d] = self._column(x, a)
        return row

    def default_point(self) -> np.ndarray:
        return self.flatten(np.eye(self.d, self.p))

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        Q, R = np.linalg.qr(rng.standard_normal((self.d, self.p)))
        signs = np.sign(np.diag(R))
        signs[signs == 0] = 1.0
        return self.flatten(Q * signs)


class EuclideanBlock(ConstraintManifold):
    """Unconstrained block R^dim; nonneg marks it for x >= 0 rejection."""

    def __init__(self, dim: int, nonneg: bool = False):
        if dim < 1:
            raise ValueError(f"block dimension must be positive, got {dim}")
        self.dim = dim
        self.nonneg = nonneg
        self.ambient_dim = dim
        self.constraint_dim = 0

    @property
    def spec(self) -> str:
        return f"euclid{'+' if self.nonneg else ''}:{self.dim}"

    def constraints(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((0, self.dim))

    def project(
        self, x: np.ndarray, v: np.ndarray, regularization: float = 0.0
    ) -> np.ndarray:
        return np.array(v, dtype=float, copy=True)

    def default_point(self) -> np.ndarray:
        return np.ones(self.dim) if self.nonneg else np.zeros(self.dim)

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        x = rng.standard_normal(self.dim)
        return np.abs(x) if self.nonneg else x

    def nonneg_ranges(self) -> List[Tuple[int, int]]:
        return [(0, self.dim)] if self.nonneg else []


class ProductManifold(ConstraintManifold):
    """Ordered product of factors; constraints concatenate, Jacobian is block diagonal."""

    def __init__(self, factors: Sequence[ConstraintManifold]):
        if not factors:
            raise ValueError("product manifold needs at least one factor")
        self.factors = list(factors)
        self.offsets: List[int] = []
        self._constraint_map: List[Tuple[int, int]] = []
        offset = 0
        for index, factor in enumerate(self.factors):
            self.offsets.append(offset)
            offset += factor.ambient_dim
            self._constraint_map.extend(
                (index, k) for k in range(factor.constraint_dim)
            )
        self.ambient_dim = offset
        self.constraint_dim = len(self._constraint_map)

    @property
    def spec(self) -> str:
        return "product:[" + ";".join(f.spec for f in self.factors) + "]"

    def block(self, index: int) -> slice:
        start = self.offsets[index]
        return slice(start, start + self.factors[index].ambient_dim)

    def split(self, x: np.ndarray) -> List[np.ndarray]:
        return [x[self.block(i)] for i in range(len(self.factors))]

    def constraints(self, x: np.ndarray) -> np.ndarray:
        parts = [f.constraints(part) for f, part in zip(self.factors, self.split(x))]
        return np.concatenate(parts) if parts else np.zeros(0)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((self.constraint_dim, self.ambient_dim))
        row = 0
        for index, factor in enumerate(self.factors):
            sl = self.block(index)
            rows = factor.constraint_dim
            if rows:
                J[row : row + rows, sl] = factor.jacobian(x[sl])
            row += rows
        return J

    def constraint_component(self, i: int, x: np.ndarray) -> float:
        index, k = self._constraint_map[i]
        return self.factors[index].constraint_component(k, x[self.block(index)])

    def jacobian_row(self, i: int, x: np.ndarray) -> np.ndarray:
        index, k = self._constraint_map[i]
        sl = self.block(index)
        row = np.zeros(self.ambient_dim)
        row[sl] = self.factors[index].jacobian_row(k, x[sl])
        return row

    def project(
        self, x: np.ndarray, v: np.ndarray, regularization: float = 0.0
    ) -> np.ndarray:
        out = np.array(v, dtype=float, copy=True)
        for index, factor in enumerate(self.factors):
            sl = self.block(index)
            out[sl] = factor.project(x[sl], v[sl], regularization)
        return out

    def default_point(self) -> np.ndarray:
        return np.concatenate([f.default_point() for f in self.factors])

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([f.random_point(rng) for f in self.factors])

    def nonneg_ranges(self) -> List[Tuple[int, int]]:
        ranges = []
        for offset, factor in zip(self.offsets, self.factors):
            ranges.extend((offset + a, offset + b) for a, b in factor.nonneg_ranges())
        return ranges


def constraints(M: ConstraintManifold, x: np.ndarray) -> np.ndarray:
    """Constraint residual (g_1(x), ..., g_m(x))."""
    M.check_dim(x)
    return M.constraints(x)


def jacobian(M: ConstraintManifold, x: np.ndarray) -> np.ndarray:
    """Constraint Jacobian C(x); row i is the gradient of g_i."""
    M.check_dim(x)
    return M.jacobian(x)


def tangent_projector(
    M: ConstraintManifold, x: np.ndarray, regularization: float = 0.0
) -> np.ndarray:
    """Dense projector P(x) = I - C^T (C C^T)^{-1} C onto the tangent space."""
    C = jacobian(M, x)
    n = M.ambient_dim
    if C.shape[0] == 0:
        return np.eye(n)
    gram = C @ C.T + regularization * np.eye(C.shape[0])
    if np.linalg.cond(gram) > GRAM_CONDITION_LIMIT:
        raise SingularConstraintError(
            f"{M.spec}: constraint Jacobian is rank deficient at x"
        )
    try:
        factor = cho_factor(gram)
    except LinAlgError as e:
        raise SingularConstraintError(f"{M.spec}: {e}")
    P = np.eye(n) - C.T @ cho_solve(factor, C)
    return 0.5 * (P + P.T)


def project_tangent(
    M: ConstraintManifold, x: np.ndarray, v: np.ndarray, regularization: float = 0.0
) -> np.ndarray:
    """Apply P(x) to v without forming the projector."""
    return M.project(x, v, regularization)


def sample_tangent_gaussian(
    M: ConstraintManifold,
    x: np.ndarray,
    rng: np.random.Generator,
    regularization: float = 0.0,
) -> np.ndarray:
    """Draw v ~ N(0, I | C(x) v = 0) by projecting a standard normal vector."""
    return M.project(x, rng.standard_normal(M.ambient_dim), regularization)


def constraint_violation(M: ConstraintManifold, x: np.ndarray) -> float:
    c = M.constraints(x)
    return float(np.max(np.abs(c))) if c.size else 0.0


def is_on_manifold(
    M: ConstraintManifold, x: np.ndarray, tol: float = FEASIBILITY_TOL
) -> bool:
    if np.shape(x) != (M.ambient_dim,) or not np.all(np.isfinite(x)):
        return False
    return constraint_violation(M, x) <= tol


def check_on_manifold(
    M: ConstraintManifold, x: np.ndarray, tol: float = FEASIBILITY_TOL
) -> None:
    M.check_dim(x)
    if not is_on_manifold(M, x, tol):
        raise OffManifoldError(
            f"{M.spec}: point violates constraints by "
            f"{constraint_violation(M, x):.3e} (tolerance {tol:.1e})"
        )


def _parse_ints(text: str, count: int, spec: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"Invalid manifold spec '{spec}': expected integers")
    if len(values) != count:
        raise ConfigError(
            f"Invalid manifold spec '{spec}': expected {count} integer(s)"
        )
    return values


def parse_manifold(spec: str) -> ConstraintManifold:
    """Build a manifold from its config string.

    Grammar: "sphere:n" (S^n in R^(n+1)), "stiefel:d,p", "euclid:k",
    "euclid+:k" (nonnegative block) and "product:[f1;f2;...]".
    """
    spec = spec.strip()
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise ConfigError(f"Invalid manifold spec '{spec}': missing ':'")
    kind = kind.strip().lower()

    try:
        if kind == "sphere":
            (n,) = _parse_ints(rest, 1, spec)
            return Sphere(n)
        if kind == "stiefel":
            d, p = _parse_ints(rest, 2, spec)
            return Stiefel(d, p)
        if kind in ("euclid", "euclid+"):
            (k,) = _parse_ints(rest, 1, spec)
            return EuclideanBlock(k, nonneg=kind.endswith("+"))
        if kind == "product":
            body = rest.strip()
            if not (body.startswith("[") and body.endswith("]")):
                raise ConfigError(f"Invalid manifold spec '{spec}': expected [...]")
            parts = [part for part in body[1:-1].split(";") if part.strip()]
            return ProductManifold([parse_manifold(part) for part in parts])
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid manifold spec '{spec}': {e}")

    raise ConfigError(f"Unknown manifold kind '{kind}' in '{spec}'")
