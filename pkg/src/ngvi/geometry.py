"""Mean-field Gaussian parameterizations and the geometry of the log-partition dual.

Four coordinate systems describe the same diagonal Gaussian ``N(mu, diag(sigma2))``:

* standard     ``(mu, sigma2)``
* expectation  ``(xi, Xi)`` with ``xi = mu`` and ``Xi = sigma2 + mu**2``
* natural      ``(lam, Lam)`` with ``lam = mu / sigma2`` and ``Lam = -1 / (2 sigma2)``
* Cholesky     ``(mu, c)`` with ``c = sqrt(sigma2)``

Every matrix in the mean-field family is diagonal, so all of them are stored as
length-``d`` vectors. Flattened vectors and Hessians use the interleaved order
``(xi_1, Xi_1, ..., xi_d, Xi_d)`` so that the Hessian of ``A*`` is block diagonal
with 2x2 blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# variances at or below this are treated as the boundary of Omega
VARIANCE_FLOOR = 1e-14


class DomainError(ValueError):
    """A point lies outside the domain of the requested parameterization."""


def _vec(a) -> np.ndarray:
    out = np.atleast_1d(np.asarray(a, dtype=float))
    if out.ndim != 1:
        raise ValueError(f"expected a vector, got shape {out.shape}")
    return out


def _same_length(a: np.ndarray, b: np.ndarray, names: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names} must have equal length, got {a.shape} and {b.shape}")


@dataclass(frozen=True, eq=False)
class StandardParams:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _vec(self.mu))
        object.__setattr__(self, "sigma2", _vec(self.sigma2))
        _same_length(self.mu, self.sigma2, "mu and sigma2")
        if np.any(~(self.sigma2 > VARIANCE_FLOOR)):
            raise DomainError(f"variances must be positive, got {self.sigma2}")

    @property
    def d(self) -> int:
        return self.mu.size


@dataclass(frozen=True, eq=False)
class ExpectationParams:
    """Expectation parameters ``(xi, diag(Xi))``.

    Membership in Omega (``Xi - xi**2 > 0``) is not enforced on construction so
    that intermediate points can be represented; operations check it.
    """

    xi: np.ndarray
    Xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", _vec(self.xi))
        object.__setattr__(self, "Xi", _vec(self.Xi))
        _same_length(self.xi, self.Xi, "xi and Xi")

    @property
    def d(self) -> int:
        return self.xi.size

    def as_vector(self) -> np.ndarray:
        """Interleaved ``(xi_1, Xi_1, ..., xi_d, Xi_d)``."""
        return np.column_stack([self.xi, self.Xi]).ravel()

    @classmethod
    def from_vector(cls, v) -> "ExpectationParams":
        v = np.asarray(v, dtype=float).reshape(-1, 2)
        return cls(v[:, 0], v[:, 1])


@dataclass(frozen=True, eq=False)
class NaturalParams:
    lam: np.ndarray
    Lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", _vec(self.lam))
        object.__setattr__(self, "Lam", _vec(self.Lam))
        _same_length(self.lam, self.Lam, "lam and Lam")

    def as_vector(self) -> np.ndarray:
        return np.column_stack([self.lam, self.Lam]).ravel()


@dataclass(frozen=True, eq=False)
class CholeskyParams:
    mu: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _vec(self.mu))
        object.__setattr__(self, "c", _vec(self.c))
        _same_length(self.mu, self.c, "mu and c")
        if np.any(~(self.c > 0)):
            raise DomainError(f"Cholesky diagonal must be positive, got {self.c}")

    @property
    def d(self) -> int:
        return self.mu.size

    def as_vector(self) -> np.ndarray:
        return np.column_stack([self.mu, self.c]).ravel()


@dataclass(frozen=True)
class DomainBox:
    """The compact set ``|mu_i| <= U``, ``1/D <= sigma2_i <= D``.

    ``D = 1`` is accepted as the degenerate box with unit variances.
    """

    U: float
    D: float
    d: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.U) and self.U >= 1):
            raise ValueError(f"mean bound U must be >= 1, got {self.U}")
        if not (np.isfinite(self.D) and self.D >= 1):
            raise ValueError(f"variance bound D must be >= 1, got {self.D}")
        if self.d is not None and self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")

    def contains(self, w: ExpectationParams, tol: float = 1e-12) -> bool:
        p = to_standard(w)
        return bool(
            np.all(np.abs(p.mu) <= self.U * (1 + tol))
            and np.all(p.sigma2 >= (1 / self.D) * (1 - tol))
            and np.all(p.sigma2 <= self.D * (1 + tol))
        )

    def is_interior(self, w: ExpectationParams, margin: float = 1e-9) -> bool:
        p = to_standard(w)
        return bool(
            np.all(np.abs(p.mu) < self.U - margin)
            and np.all(p.sigma2 > 1 / self.D + margin)
            and np.all(p.sigma2 < self.D - margin)
        )


def variance(w: ExpectationParams) -> np.ndarray:
    """``Xi - xi**2``; raises :class:`DomainError` outside Omega."""
    s2 = w.Xi - w.xi**2
    if np.any(~(s2 > VARIANCE_FLOOR)):
        raise DomainError(f"point outside Omega: Xi - xi^2 = {s2}")
    return s2


def to_expectation(p: StandardParams) -> ExpectationParams:
    return ExpectationParams(p.mu.copy(), p.sigma2 + p.mu**2)


def to_standard(w: ExpectationParams) -> StandardParams:
    return StandardParams(w.xi.copy(), variance(w))


def to_cholesky(w: ExpectationParams) -> CholeskyParams:
    return CholeskyParams(w.xi.copy(), np.sqrt(variance(w)))


def from_cholesky(theta: CholeskyParams) -> ExpectationParams:
    return ExpectationParams(theta.mu.copy(), theta.c**2 + theta.mu**2)


def grad_A_star(w: ExpectationParams) -> NaturalParams:
    s2 = variance(w)
    return NaturalParams(w.xi / s2, -0.5 / s2)


def grad_A(n: NaturalParams) -> ExpectationParams:
    if np.any(~(n.Lam < 0)):
        raise DomainError(f"natural parameter outside D_A: Lam = {n.Lam}")
    s2 = -0.5 / n.Lam
    return to_expectation(StandardParams(s2 * n.lam, s2))


def conjugate_A_star(w: ExpectationParams) -> float:
    """Convex conjugate of the log-partition function, additive constant included."""
    s2 = variance(w)
    d = w.d
    return float(-0.5 * np.sum(np.log(s2)) + d + 0.5 * d * np.log(2.0))


def kl_standard(mu1, s1, mu2, s2) -> np.ndarray:
    """Per-coordinate KL between univariate Gaussians given by mean and variance."""
    # KL(N(mu1, s1) || N(mu2, s2)); r - 1 - log r with r = s1/s2 via log1p
    delta = (s1 - s2) / s2
    return 0.5 * ((delta - np.log1p(delta)) + (mu1 - mu2) ** 2 / s2)


def kl_gaussian(w1: ExpectationParams, w2: ExpectationParams) -> float:
    """``KL(q1 || q2)`` for diagonal Gaussians given in expectation coordinates."""
    _same_length(w1.xi, w2.xi, "both arguments")
    return float(np.sum(kl_standard(w1.xi, variance(w1), w2.xi, variance(w2))))


def bregman_A_star(w1: ExpectationParams, w2: ExpectationParams) -> float:
    """Bregman divergence of ``A*`` computed from its definition."""
    _same_length(w1.xi, w2.xi, "both arguments")
    g = grad_A_star(w2)
    inner = np.dot(g.lam, w1.xi - w2.xi) + np.dot(g.Lam, w1.Xi - w2.Xi)
    return conjugate_A_star(w1) - conjugate_A_star(w2) - float(inner)


def hessian_A_star(w: ExpectationParams) -> np.ndarray:
    """Diagonal 2x2 blocks of the Hessian of ``A*``, shape ``(d, 2, 2)``."""
    s2 = variance(w)
    mu = w.xi
    blocks = np.empty((w.d, 2, 2))
    blocks[:, 0, 0] = 2 * mu**2 + s2
    blocks[:, 0, 1] = blocks[:, 1, 0] = -mu
    blocks[:, 1, 1] = 0.5
    return blocks / (s2**2)[:, None, None]


def block_diag(blocks: np.ndarray) -> np.ndarray:
    """Dense interleaved matrix from ``(d, 2, 2)`` blocks."""
    d = blocks.shape[0]
    out = np.zeros((2 * d, 2 * d))
    for i in range(d):
        out[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = blocks[i]
    return out


def clip_standard(mu: np.ndarray, sigma2: np.ndarray, box: DomainBox):
    return np.clip(mu, -box.U, box.U), np.clip(sigma2, 1 / box.D, box.D)


def project_box(w: ExpectationParams, box: DomainBox) -> ExpectationParams:
    """KL projection onto the box, which is entrywise clipping in standard coordinates."""
    p = to_standard(w)
    mu, s2 = clip_standard(p.mu, p.sigma2, box)
    return to_expectation(StandardParams(mu, s2))
