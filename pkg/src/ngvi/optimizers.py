"""SNGD, projected SNGD, proximal and projected SGD, step schedules and the run loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .geometry import (
    CholeskyParams,
    DomainBox,
    DomainError,
    ExpectationParams,
    NaturalParams,
    StandardParams,
    from_cholesky,
    grad_A,
    grad_A_star,
    to_cholesky,
    to_expectation,
)
from .models import (
    STREAM_NOISE,
    STREAM_OUTPUT,
    CholeskyGradient,
    EstimatorConfig,
    GradientEstimate,
    LikelihoodModel,
    cholesky_grad,
    exact_grad,
    objective,
    rng_stream,
    stoch_grad,
)

ALGORITHMS = ("sngd", "proj_sngd", "prox_sgd", "proj_sgd")
SCHEDULES = ("constant", "inv_sqrt", "theorem_constant", "fast_conv")


class BoundaryEscape(DomainError):
    """A dual step left the natural-parameter domain (some ``Lam >= 0``)."""

    def __init__(self, message: str, lam: np.ndarray | None = None, Lam: np.ndarray | None = None):
        super().__init__(message)
        self.lam = lam
        self.Lam = Lam


@dataclass(frozen=True)
class StepSchedule:
    kind: str
    gamma: float | None = None
    L: float | None = None
    V2: float | None = None
    lambda0: float | None = None
    T: int | None = None
    mu_B: float | None = None

    def __post_init__(self):
        need = {
            "constant": ("gamma",),
            "inv_sqrt": ("gamma",),
            "theorem_constant": ("L", "V2", "lambda0", "T"),
            "fast_conv": ("L", "mu_B", "T"),
        }
        if self.kind not in need:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        for name in need[self.kind]:
            val = getattr(self, name)
            if val is None:
                raise ValueError(f"{self.kind} schedule needs {name}")
            # a zero noise level is the noiseless case, everything else must be positive
            if not (np.isfinite(val) and (val > 0 or (name == "V2" and val == 0))):
                raise ValueError(f"{self.kind} schedule parameter {name} must be positive, got {val}")

    @classmethod
    def constant(cls, gamma: float) -> "StepSchedule":
        return cls("constant", gamma=gamma)

    @classmethod
    def inv_sqrt(cls, gamma0: float) -> "StepSchedule":
        return cls("inv_sqrt", gamma=gamma0)

    @classmethod
    def theorem_constant(cls, L: float, V2: float, lambda0: float, T: int) -> "StepSchedule":
        return cls("theorem_constant", L=L, V2=V2, lambda0=lambda0, T=T)

    @classmethod
    def fast_conv(cls, L: float, mu_B: float, T: int) -> "StepSchedule":
        return cls("fast_conv", L=L, mu_B=mu_B, T=T)


def step_size(s: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"iteration must be nonnegative, got {t}")
    if s.kind == "constant":
        return float(s.gamma)
    if s.kind == "inv_sqrt":
        return float(s.gamma / math.sqrt(max(t, 1)))
    cap = 1.0 / (2 * s.L)
    if s.kind == "theorem_constant":
        if s.V2 == 0:
            return cap
        return float(min(cap, math.sqrt(s.lambda0 / (s.V2 * s.L * s.T))))
    # fast_conv: a constant first half, then a decaying tail that starts at 1/(2L)
    if t <= s.T / 2 and s.T <= 6 * s.L / s.mu_B:
        return cap
    denom = s.mu_B * (t - math.ceil(s.T / 2)) + 12 * s.L
    return cap if denom <= 12 * s.L else float(6 / denom)


# --- single steps -----------------------------------------------------------------


def _dual_step(w: ExpectationParams, g: GradientEstimate, gamma: float):
    if not gamma > 0:
        raise ValueError(f"step size must be positive, got {gamma}")
    eta = grad_A_star(w)
    return eta.lam - gamma * g.g_xi, eta.Lam - gamma * g.g_Xi


def sngd_step(w: ExpectationParams, g: GradientEstimate, gamma: float) -> ExpectationParams:
    lam, Lam = _dual_step(w, g, gamma)
    if np.any(~(Lam < 0)):
        raise BoundaryEscape(f"dual step left the natural domain: Lam = {Lam}", lam, Lam)
    try:
        return grad_A(NaturalParams(lam, Lam))
    except DomainError as exc:
        raise BoundaryEscape(f"dual step collapsed a variance: {exc}", lam, Lam) from exc


def proj_sngd_step(w: ExpectationParams, g: GradientEstimate, gamma: float, box: DomainBox) -> ExpectationParams:
    """Dual step followed by the KL projection onto ``box``.

    The projected point is the exact minimizer over the box of
    ``gamma <g, w'> + KL(w' || w)``, which separates per coordinate into a
    quadratic in ``mu`` and a convex function of ``sigma2``. Coordinates whose
    dual step reaches ``Lam >= 0`` have no interior minimizer: the objective then
    decreases in ``sigma2`` and is concave in ``mu``, so the minimizer sits at
    ``sigma2 = D`` and ``mu = U * sign(lam)``.
    """
    lam, Lam = _dual_step(w, g, gamma)
    inside = Lam < 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        s2 = np.where(inside, -0.5 / np.where(inside, Lam, -1.0), box.D)
        mu = np.where(lam == 0, 0.0, s2 * lam)
    mu = np.clip(mu, -box.U, box.U)
    s2 = np.clip(s2, 1 / box.D, box.D)
    escaped = ~inside
    if np.any(escaped):
        # concave (or flat) in mu on the escaped coordinates: pick the better endpoint
        tie_side = np.where(w.xi >= 0, box.U, -box.U)
        flat = np.clip(w.xi, -box.U, box.U)
        at_end = np.where(lam > 0, box.U, np.where(lam < 0, -box.U, np.where(Lam > 0, tie_side, flat)))
        mu = np.where(escaped, at_end, mu)
    return to_expectation(StandardParams(mu, s2))


def prox_sgd_step(theta: CholeskyParams, g: CholeskyGradient, gamma: float) -> CholeskyParams:
    """Gradient step on the smooth part, then the exact prox of ``-gamma * sum(log c)``."""
    if not gamma > 0:
        raise ValueError(f"step size must be positive, got {gamma}")
    mu = theta.mu - gamma * g.g_mu
    c_star = theta.c - gamma * g.g_c
    return CholeskyParams(mu, 0.5 * (c_star + np.sqrt(c_star**2 + 4 * gamma)))


def proj_sgd_step(theta: CholeskyParams, g: CholeskyGradient, gamma: float, M: float) -> CholeskyParams:
    if not (gamma > 0 and M > 0):
        raise ValueError(f"step size and M must be positive, got {gamma} and {M}")
    mu = theta.mu - gamma * g.g_mu
    return CholeskyParams(mu, np.maximum(theta.c - gamma * g.g_c, 1 / math.sqrt(M)))


# --- run loop ----------------------------------------------------------------------


@dataclass
class TraceRecord:
    t: int
    gamma: float
    elbo: float
    grad_norm: float
    params: ExpectationParams | None
    elapsed: float
    extras: dict = field(default_factory=dict)


@dataclass
class OptimizerTrace:
    algorithm: str
    records: list
    gammas: np.ndarray
    sampled_index: int
    sampled_params: ExpectationParams | None
    final: ExpectationParams
    stochastic: bool
    diverged: bool = False
    divergence_t: int | None = None

    @property
    def t(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def objective(self) -> np.ndarray:
        return np.array([r.elbo for r in self.records])

    @property
    def grad_norm(self) -> np.ndarray:
        return np.array([r.grad_norm for r in self.records])


def sample_output_index(gammas: np.ndarray, rng: np.random.Generator) -> int:
    """Draw ``t`` with probability ``gamma_t / sum(gamma)``."""
    if len(gammas) == 0:
        return 0
    p = np.asarray(gammas, dtype=float)
    return int(rng.choice(len(p), p=p / p.sum()))


def _as_expectation(init) -> ExpectationParams:
    if isinstance(init, ExpectationParams):
        return init
    if isinstance(init, StandardParams):
        return to_expectation(init)
    if isinstance(init, CholeskyParams):
        return from_cholesky(init)
    raise TypeError(f"unsupported initial point type {type(init).__name__}")


def _gaussian_noise(seed: int, t: int, V2: float, d: int):
    rng = rng_stream(seed, t, STREAM_NOISE)
    return np.sqrt(V2 / (2 * d)) * rng.standard_normal((2, d))


def run(
    algorithm: str,
    model: LikelihoodModel,
    init,
    schedule: StepSchedule,
    T: int,
    seed: int = 0,
    box: DomainBox | None = None,
    estimator: EstimatorConfig | None = None,
    log_every: int = 1,
    M: float | None = None,
    grad_noise: float = 0.0,
    extra_metrics: Callable[[ExpectationParams], dict] | None = None,
) -> OptimizerTrace:
    """Run ``T`` iterations and record the exact objective every ``log_every`` steps.

    ``estimator=None`` uses exact gradients; otherwise the minibatch estimator
    with the run's ``seed``. ``grad_noise`` adds zero-mean Gaussian noise with
    total variance ``grad_noise`` to every gradient. Raw SNGD stops at the
    first dual-boundary escape and marks the trace as diverged.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    if T < 0 or log_every < 1:
        raise ValueError("T must be nonnegative and log_every positive")
    if algorithm == "proj_sngd" and box is None:
        raise ValueError("proj_sngd needs a DomainBox")
    if algorithm == "proj_sgd":
        if M is None:
            if box is None:
                raise ValueError("proj_sgd needs M or a DomainBox")
            M = box.D
    if estimator is not None:
        estimator = replace(estimator, seed=seed)

    w = _as_expectation(init)
    theta = to_cholesky(w) if algorithm in ("prox_sgd", "proj_sgd") else None
    if algorithm == "proj_sngd" and not box.contains(w):
        raise DomainError("initial point must lie in the box for proj_sngd")
    if algorithm == "proj_sgd" and np.any(theta.c < 1 / math.sqrt(M) * (1 - 1e-12)):
        raise DomainError("initial Cholesky factor violates the proj_sgd lower bound")

    gammas = np.array([step_size(schedule, t) for t in range(T)])
    sampled_index = sample_output_index(gammas, rng_stream(seed, 0, STREAM_OUTPUT))
    snapshot_every = 1 if w.d <= 4 else 10

    records: list[TraceRecord] = []
    sampled_params = None
    diverged, divergence_t = False, None
    start = time.perf_counter()

    def log(t: int, w: ExpectationParams) -> bool:
        try:
            value = objective(w, model)
            gnorm = exact_grad(w, model).norm()
        except (FloatingPointError, DomainError):
            value, gnorm = float("inf"), float("nan")
        extras = extra_metrics(w) if extra_metrics is not None else {}
        records.append(
            TraceRecord(
                t=t,
                gamma=step_size(schedule, t),
                elbo=value,
                grad_norm=gnorm,
                params=w if t % snapshot_every == 0 else None,
                elapsed=time.perf_counter() - start,
                extras=extras,
            )
        )
        return bool(np.isfinite(value))

    if not log(0, w):
        return OptimizerTrace(algorithm, records, gammas, sampled_index, None, w, estimator is not None, True, 0)

    for t in range(T):
        if t == sampled_index:
            sampled_params = w
        gamma = gammas[t]
        try:
            if algorithm in ("sngd", "proj_sngd"):
                g = exact_grad(w, model) if estimator is None else stoch_grad(w, model, estimator, iteration=t)
                if grad_noise > 0:
                    noise = _gaussian_noise(seed, t, grad_noise, w.d)
                    g = GradientEstimate(g.g_xi + noise[0], g.g_Xi + noise[1], True)
                w = sngd_step(w, g, gamma) if algorithm == "sngd" else proj_sngd_step(w, g, gamma, box)
            else:
                g = cholesky_grad(theta, model, estimator, iteration=t, include_entropy=algorithm == "proj_sgd")
                if grad_noise > 0:
                    noise = _gaussian_noise(seed, t, grad_noise, w.d)
                    g = CholeskyGradient(g.g_mu + noise[0], g.g_c + noise[1])
                if algorithm == "prox_sgd":
                    theta = prox_sgd_step(theta, g, gamma)
                else:
                    theta = proj_sgd_step(theta, g, gamma, M)
                w = from_cholesky(theta)
        except (BoundaryEscape, FloatingPointError, DomainError):
            diverged, divergence_t = True, t
            break
        if (t + 1) % log_every == 0 or t + 1 == T:
            if not log(t + 1, w):
                diverged, divergence_t = True, t
                break

    if T == 0:
        sampled_params = w
    return OptimizerTrace(
        algorithm=algorithm,
        records=records,
        gammas=gammas,
        sampled_index=sampled_index,
        sampled_params=sampled_params,
        final=w,
        stochastic=estimator is not None or grad_noise > 0,
        diverged=diverged,
        divergence_t=divergence_t,
    )
