"""Likelihood models, the negative ELBO and its gradients in expectation coordinates.

Every likelihood depends on ``z`` only through ``s_i = x_i . z``. Under a
mean-field Gaussian ``q`` each ``s_i`` is Gaussian with mean ``x_i . mu`` and
variance ``sum_j x_ij**2 sigma2_j``, so all expectations reduce to 1-D integrals
which are evaluated in closed form (linear, Poisson) or by Gauss-Hermite
quadrature (logistic).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, gammaln

from .geometry import CholeskyParams, ExpectationParams, from_cholesky, variance

KINDS = ("linear", "logistic", "poisson")
QUADRATURE_NODES = 100

# RNG stream purposes; streams are keyed by (seed, iteration, purpose)
STREAM_GRADIENT = 1
STREAM_NOISE = 2
STREAM_OUTPUT = 3
STREAM_INIT = 4
STREAM_DATA = 5
STREAM_ELBO = 6


def rng_stream(seed: int, iteration: int, purpose: int) -> np.random.Generator:
    """Counter-based generator for one (seed, iteration, purpose) triple."""
    ss = np.random.SeedSequence([int(seed), int(iteration), int(purpose)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if x.ndim != 2 or y.ndim != 1:
            raise ValueError(f"expected x of shape (n, d) and y of shape (n,), got {x.shape} and {y.shape}")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one point")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True, eq=False)
class LikelihoodModel:
    kind: str
    data: Dataset
    noise_variance: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        y = self.data.y
        if self.kind == "logistic" and not np.all(np.abs(y) == 1):
            raise ValueError("logistic labels must be +1 or -1")
        if self.kind == "poisson" and not np.all((y >= 0) & (y == np.round(y))):
            raise ValueError("Poisson labels must be nonnegative integers")
        if not self.noise_variance > 0:
            raise ValueError(f"noise variance must be positive, got {self.noise_variance}")

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def d(self) -> int:
        return self.data.d

    def derivative(self, s, order: int, y=None) -> np.ndarray:
        """Order-``order`` derivative of the per-point negative log-likelihood at ``s``.

        ``s`` broadcasts against the labels (last axis indexes data points)
        unless explicit labels ``y`` are passed.
        """
        return scalar_derivative(self.kind, s, self.data.y if y is None else y, order, self.noise_variance)


@dataclass(frozen=True)
class EstimatorConfig:
    batch_size: int
    mc_samples: int
    seed: int = 0

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if int(self.mc_samples) < 1:
            raise ValueError(f"number of Monte Carlo samples must be positive, got {self.mc_samples}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    g_xi: np.ndarray
    g_Xi: np.ndarray
    is_stochastic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "g_xi", np.atleast_1d(np.asarray(self.g_xi, dtype=float)))
        object.__setattr__(self, "g_Xi", np.atleast_1d(np.asarray(self.g_Xi, dtype=float)))
        if not (np.all(np.isfinite(self.g_xi)) and np.all(np.isfinite(self.g_Xi))):
            raise FloatingPointError("gradient has non-finite entries")

    def as_vector(self) -> np.ndarray:
        return np.column_stack([self.g_xi, self.g_Xi]).ravel()

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.g_xi**2) + np.sum(self.g_Xi**2)))


@dataclass(frozen=True, eq=False)
class CholeskyGradient:
    g_mu: np.ndarray
    g_c: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.g_mu**2) + np.sum(self.g_c**2)))


# --- scalar likelihood oracles ------------------------------------------------


def scalar_derivative(kind: str, s, y, order: int, noise_variance: float = 1.0) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind == "linear":
        if order == 0:
            return (y - s) ** 2 / (2 * noise_variance) + 0.5 * np.log(2 * np.pi * noise_variance)
        if order == 1:
            return (s - y) / noise_variance
        if order == 2:
            return np.broadcast_to(1.0 / noise_variance, np.broadcast(s, y).shape).copy()
        if order in (3, 4):
            return np.zeros(np.broadcast(s, y).shape)
    elif kind == "logistic":
        ys = y * s
        if order == 0:
            return np.logaddexp(0.0, -ys)
        p = expit(-ys)
        q = p * (1 - p)
        if order == 1:
            return -y * p
        if order == 2:
            return q
        if order == 3:
            return -y * q * (1 - 2 * p)
        if order == 4:
            return q * (1 - 6 * p + 6 * p**2)
    elif kind == "poisson":
        if order == 0:
            return np.exp(s) - y * s + gammaln(y + 1)
        if order == 1:
            return np.exp(s) - y
        if order in (2, 3, 4):
            return np.broadcast_to(np.exp(s), np.broadcast(s, y).shape).copy()
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    raise ValueError(f"derivative order must be 0..4, got {order}")


@lru_cache(maxsize=8)
def hermite_rule(nodes: int = QUADRATURE_NODES):
    t, wts = np.polynomial.hermite.hermgauss(nodes)
    return t, wts / np.sqrt(np.pi)


def gaussian_expectations(
    model: LikelihoodModel,
    m: np.ndarray,
    v: np.ndarray,
    orders=(0, 1, 2),
    method: str = "auto",
    nodes: int = QUADRATURE_NODES,
) -> dict:
    """``E[f_i^(k)(s)]`` for ``s ~ N(m_i, v_i)``; arrays of shape ``(..., n)``.

    ``method="auto"`` uses closed forms for linear and Poisson and quadrature
    for logistic; ``method="quadrature"`` forces Gauss-Hermite for every kind.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    y = model.data.y
    out = {}
    if method == "auto" and model.kind == "linear":
        nv = model.noise_variance
        for k in orders:
            if k == 0:
                out[k] = ((y - m) ** 2 + v) / (2 * nv) + 0.5 * np.log(2 * np.pi * nv)
            else:
                out[k] = scalar_derivative("linear", m, y, k, nv)
        return out
    if method == "auto" and model.kind == "poisson":
        lam = np.exp(m + 0.5 * v)
        for k in orders:
            if k == 0:
                out[k] = lam - y * m + gammaln(y + 1)
            elif k == 1:
                out[k] = lam - y
            else:
                out[k] = lam
        return out
    if method not in ("auto", "quadrature"):
        raise ValueError(f"unknown expectation method {method!r}")
    t, wts = hermite_rule(nodes)
    s = m[..., None] + np.sqrt(2 * v)[..., None] * t
    for k in orders:
        out[k] = scalar_derivative(model.kind, s, y[:, None], k, model.noise_variance) @ wts
    return out


def projected_moments(model: LikelihoodModel, mu: np.ndarray, sigma2: np.ndarray):
    """Mean and variance of every ``s_i = x_i . z``; leading axes of mu/sigma2 broadcast."""
    x = model.data.x
    return mu @ x.T, sigma2 @ (x**2).T


# --- objective ------------------------------------------------------------------


def neg_loglik(model: LikelihoodModel, z) -> float:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    return float(np.sum(model.derivative(model.data.x @ z, 0)))


def kl_to_prior(w: ExpectationParams) -> float:
    """``KL(q || N(0, I))``."""
    s2 = variance(w)
    return float(0.5 * np.sum(w.Xi - 1 - np.log(s2)))


def kl_term_grad(w: ExpectationParams) -> GradientEstimate:
    s2 = variance(w)
    return GradientEstimate(w.xi / s2, 0.5 * (1 - 1 / s2))


def elbo(
    w: ExpectationParams,
    model: LikelihoodModel,
    method: str = "quadrature",
    cfg: EstimatorConfig | None = None,
) -> float:
    """Negative ELBO ``E_q[-log p(D|z)] + KL(q || N(0, I))``.

    ``method`` is ``"closed_form"`` (linear and Poisson only), ``"quadrature"``
    (100-node Gauss-Hermite per data point) or ``"monte_carlo"`` (``cfg.mc_samples``
    draws of ``z``).
    """
    s2 = variance(w)
    if method == "closed_form":
        if model.kind == "logistic":
            raise ValueError("closed-form ELBO is available only for linear and Poisson models")
        m, v = projected_moments(model, w.xi, s2)
        data_term = float(np.sum(gaussian_expectations(model, m, v, orders=(0,), method="auto")[0]))
    elif method == "quadrature":
        m, v = projected_moments(model, w.xi, s2)
        data_term = float(np.sum(gaussian_expectations(model, m, v, orders=(0,), method="quadrature")[0]))
    elif method == "monte_carlo":
        if cfg is None:
            raise ValueError("Monte Carlo ELBO needs an EstimatorConfig")
        data_term = float(np.mean(mc_data_term_samples(w, model, cfg)))
    else:
        raise ValueError(f"unknown ELBO method {method!r}")
    return data_term + kl_to_prior(w)


def objective(w: ExpectationParams, model: LikelihoodModel) -> float:
    """Exact negative ELBO using the most accurate path for the model kind."""
    return elbo(w, model, "quadrature" if model.kind == "logistic" else "closed_form")


def mc_data_term_samples(w: ExpectationParams, model: LikelihoodModel, cfg: EstimatorConfig) -> np.ndarray:
    """Per-draw values of ``-log p(D|z)`` for ``cfg.mc_samples`` draws ``z ~ q``."""
    s2 = variance(w)
    rng = rng_stream(cfg.seed, 0, STREAM_ELBO)
    out = np.empty(cfg.mc_samples)
    chunk = max(1, 2**22 // max(model.n, 1))
    for start in range(0, cfg.mc_samples, chunk):
        k = min(chunk, cfg.mc_samples - start)
        z = w.xi + np.sqrt(s2) * rng.standard_normal((k, w.d))
        out[start : start + k] = model.derivative(z @ model.data.x.T, 0).sum(axis=1)
    return out


# --- gradients in expectation coordinates ---------------------------------------


def exact_grad(w: ExpectationParams, model: LikelihoodModel) -> GradientEstimate:
    s2 = variance(w)
    x = model.data.x
    m, v = projected_moments(model, w.xi, s2)
    e = gaussian_expectations(model, m, v, orders=(1, 2))
    h = (x**2).T @ e[2]
    kl = kl_term_grad(w)
    return GradientEstimate(x.T @ e[1] - h * w.xi + kl.g_xi, 0.5 * h + kl.g_Xi)


def _minibatch_sums(w_mu, s2, model: LikelihoodModel, cfg: EstimatorConfig, iteration: int):
    if cfg.batch_size > model.n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {model.n}")
    rng = rng_stream(cfg.seed, iteration, STREAM_GRADIENT)
    idx = rng.integers(0, model.n, size=cfg.batch_size)
    xb = model.data.x[idx]
    yb = model.data.y[idx]
    z = w_mu + np.sqrt(s2) * rng.standard_normal((cfg.mc_samples, w_mu.size))
    s = z @ xb.T
    f1 = model.derivative(s, 1, y=yb).sum(axis=0)
    f2 = model.derivative(s, 2, y=yb).sum(axis=0)
    scale = model.n / (cfg.batch_size * cfg.mc_samples)
    return scale * (xb.T @ f1), scale * ((xb**2).T @ f2)


def stoch_grad(
    w: ExpectationParams, model: LikelihoodModel, cfg: EstimatorConfig, iteration: int = 0
) -> GradientEstimate:
    """Unbiased minibatch estimate of :func:`exact_grad`.

    Indices are drawn uniformly with replacement and the same ``mc_samples``
    draws of ``z`` are shared across the batch.
    """
    s2 = variance(w)
    g1, h = _minibatch_sums(w.xi, s2, model, cfg, iteration)
    kl = kl_term_grad(w)
    return GradientEstimate(g1 - h * w.xi + kl.g_xi, 0.5 * h + kl.g_Xi, is_stochastic=True)


def variance_bound_logistic(data: Dataset, box, m: int = 1) -> float:
    """Closed-form bound on ``E||g_hat - g||^2`` for the logistic estimator.

    The bound does not shrink with the batch size ``m``; it holds for every
    ``m >= 1`` and any number of Monte Carlo samples.
    """
    if data.n < 1:
        raise ValueError("empty dataset")
    if m < 1:
        raise ValueError(f"batch size must be positive, got {m}")
    if not np.all(np.abs(data.y) == 1):
        raise ValueError("logistic labels must be +1 or -1")
    s1 = float(np.max(np.linalg.norm(data.x, axis=1)))
    s2 = float(np.max(np.linalg.norm(data.x**2, axis=1)))
    n = data.n
    return 16 * n**2 * ((s1 + box.U * s2 / 4) ** 2 + s2**2 / 64)


# --- gradients in Cholesky coordinates -------------------------------------------


def cholesky_grad(
    theta: CholeskyParams,
    model: LikelihoodModel,
    cfg: EstimatorConfig | None = None,
    iteration: int = 0,
    include_entropy: bool = False,
) -> CholeskyGradient:
    """Gradient of ``E_q[f] + 0.5 * sum(mu**2 + c**2)`` with respect to ``(mu, c)``.

    With ``include_entropy`` the ``-sum(log c)`` term is added, giving the
    gradient of the full negative ELBO. ``cfg=None`` means exact expectations.
    """
    mu, c = theta.mu, theta.c
    s2 = c**2
    if cfg is None:
        m, v = projected_moments(model, mu, s2)
        e = gaussian_expectations(model, m, v, orders=(1, 2))
        x = model.data.x
        g1, h = x.T @ e[1], (x**2).T @ e[2]
    else:
        g1, h = _minibatch_sums(mu, s2, model, cfg, iteration)
    g_mu = g1 + mu
    g_c = c * (h + 1)
    if include_entropy:
        g_c = g_c - 1 / c
    return CholeskyGradient(g_mu, g_c)


def cholesky_objective(theta: CholeskyParams, model: LikelihoodModel) -> float:
    """Negative ELBO written in Cholesky coordinates."""
    return objective(from_cholesky(theta), model)
