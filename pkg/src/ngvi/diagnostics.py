"""Numerical certificates for the landscape of the negative ELBO.

Covers Hessians in expectation coordinates, relative smoothness against the
mirror map ``A*``, hidden-convexity and PL moduli, the Bregman forward-backward
envelope, and a few audits of optimizer traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CholeskyParams,
    DomainBox,
    DomainError,
    ExpectationParams,
    StandardParams,
    block_diag,
    hessian_A_star,
    kl_standard,
    project_box,
    to_cholesky,
    to_expectation,
    variance,
)
from .models import (
    LikelihoodModel,
    cholesky_objective,
    exact_grad,
    gaussian_expectations,
    objective,
    projected_moments,
)
from .optimizers import OptimizerTrace, proj_sngd_step

SLACK_TOL = 1e-9


class UnsupportedModelError(ValueError):
    """The requested bound is not available for this likelihood."""


# --- Hessians ---------------------------------------------------------------------


def _loglik_hessians(model: LikelihoodModel, mu: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Hessians of ``E_q[f]`` in interleaved (xi, Xi) order for a batch of points.

    ``mu`` and ``s2`` have shape ``(G, d)``; the result has shape ``(G, 2d, 2d)``.
    """
    x = model.data.x
    x2 = x**2
    m, v = projected_moments(model, mu, s2)
    e = gaussian_expectations(model, m, v, orders=(2, 3, 4))
    H = np.einsum("gi,ip,iq->gpq", e[2], x, x)
    B = np.einsum("gi,ip,iq->gpq", e[3], x, x2)
    C = np.einsum("gi,ip,iq->gpq", e[4], x2, x2)
    G, d = mu.shape
    mp = mu[:, :, None]
    mq = mu[:, None, :]
    Bt = np.swapaxes(B, 1, 2)
    xx = H - B * mq - Bt * mp + C * mp * mq
    idx = np.arange(d)
    xx[:, idx, idx] -= H[:, idx, idx]
    xX = 0.5 * (B - C * mp)
    XX = 0.25 * C
    out = np.empty((G, 2 * d, 2 * d))
    out[:, 0::2, 0::2] = xx
    out[:, 0::2, 1::2] = xX
    out[:, 1::2, 0::2] = np.swapaxes(xX, 1, 2)
    out[:, 1::2, 1::2] = XX
    return out


def _mirror_hessians(mu: np.ndarray, s2: np.ndarray) -> np.ndarray:
    G, d = mu.shape
    out = np.zeros((G, 2 * d, 2 * d))
    idx = np.arange(d)
    s4 = s2**2
    out[:, 2 * idx, 2 * idx] = (2 * mu**2 + s2) / s4
    out[:, 2 * idx, 2 * idx + 1] = -mu / s4
    out[:, 2 * idx + 1, 2 * idx] = -mu / s4
    out[:, 2 * idx + 1, 2 * idx + 1] = 0.5 / s4
    return out


def hessian_elbo(w: ExpectationParams, model: LikelihoodModel, part: str = "elbo") -> np.ndarray:
    """Hessian of the negative ELBO (``part="elbo"``) or of ``E_q[f]`` alone (``"loglik"``)."""
    if part not in ("elbo", "loglik"):
        raise ValueError(f"part must be 'elbo' or 'loglik', got {part!r}")
    s2 = variance(w)
    h = _loglik_hessians(model, w.xi[None, :], s2[None, :])[0]
    if part == "elbo":
        h = h + block_diag(hessian_A_star(w))
    return 0.5 * (h + h.T)


# --- relative smoothness ---------------------------------------------------------


@dataclass
class SmoothnessCertificate:
    alpha: float
    beta: float
    grid: np.ndarray  # (G, 2, d): standard (mu, sigma2) of every tested point
    min_slack: float
    part: str
    sampled: bool
    passed: bool
    iff_agreement: bool | None = None
    iff_disagreements: int | None = None
    warnings: list = field(default_factory=list)

    @property
    def points(self) -> list:
        """Tested points as :class:`ExpectationParams`."""
        return [to_expectation(StandardParams(g[0], g[1])) for g in self.grid]


def certificate_grid(box: DomainBox, d: int, points_per_axis: int = 15, max_points: int = 100_000,
                     n_samples: int = 10_000, seed: int = 0):
    """Tensor grid over ``(mu_i, sigma2_i)`` or, when too large, uniform random samples.

    Means are spaced linearly on ``[-U, U]`` and variances geometrically on
    ``[1/D, D]``. Returns ``(mu, sigma2, sampled)`` with arrays of shape ``(G, d)``.
    """
    k = points_per_axis
    if k ** (2 * d) <= max_points:
        mus = np.linspace(-box.U, box.U, k)
        s2s = np.geomspace(1 / box.D, box.D, k)
        axes = [mus] * d + [s2s] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        return flat[:, :d], flat[:, d:], False
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-box.U, box.U, size=(n_samples, d))
    s2 = np.exp(rng.uniform(-math.log(box.D), math.log(box.D), size=(n_samples, d)))
    return mu, s2, True


def _inv_sqrt_blocks(mu: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Block-diagonal inverse square roots of the mirror Hessians, shape (G, 2d, 2d)."""
    K = _mirror_hessians(mu, s2)
    G, d = mu.shape
    out = np.zeros_like(K)
    for i in range(d):
        sl = slice(2 * i, 2 * i + 2)
        vals, vecs = np.linalg.eigh(K[:, sl, sl])
        out[:, sl, sl] = np.einsum("gij,gj,gkj->gik", vecs, vals**-0.5, vecs)
    return out


def iff_margins_1d(mu, s2, B, C, b):
    """Left-minus-right margins of the three univariate upper-curvature conditions.

    All three are nonnegative exactly when ``b * hess(A*) - hess(E_q f)`` is
    positive semidefinite. ``B`` and ``C`` are the expected third and fourth
    derivatives of the negative log-likelihood at ``(mu, s2)``.
    """
    s4 = s2**2
    c1 = 2 * b - s4 * C
    c2 = b / s2 + 2 * mu**2 * b / s4 + 2 * mu * B - mu**2 * C
    c3 = b**2 / (2 * s2**3) - C * b / (4 * s2) - B**2 / 4
    return c1, c2, c3


def iff_lower_margins_1d(mu, s2, B, C, a):
    """Margins of the three univariate lower-curvature conditions (``hess E_q f - a hess A* >= 0``)."""
    s4 = s2**2
    c1 = s4 * C - 2 * a
    c2 = -2 * mu * B + mu**2 * C - a / s2 - 2 * mu**2 * a / s4
    c3 = a**2 / (2 * s2**3) - C * a / (4 * s2) - B**2 / 4
    return c1, c2, c3


def _third_fourth_1d(model: LikelihoodModel, mu: np.ndarray, s2: np.ndarray):
    x = model.data.x[:, 0]
    m, v = projected_moments(model, mu, s2)
    e = gaussian_expectations(model, m, v, orders=(3, 4))
    return e[3] @ x**3, e[4] @ x**4


def _chunks(G: int, size: int):
    for start in range(0, G, size):
        yield slice(start, min(start + size, G))


def certify_relative_smoothness(
    model: LikelihoodModel,
    box: DomainBox,
    points_per_axis: int = 15,
    alpha_beta: tuple | None = None,
    part: str = "elbo",
    max_points: int = 100_000,
    n_samples: int = 10_000,
    seed: int = 0,
    tol: float = SLACK_TOL,
) -> SmoothnessCertificate:
    """Relative smoothness constants of ``part`` with respect to ``A*`` on the box.

    Without ``alpha_beta`` the tightest constants over the grid are the extreme
    generalized eigenvalues of ``(hess l, hess A*)``, computed exactly at every
    point. With ``alpha_beta`` the given pair is checked. Either way the
    reported ``min_slack`` is the smallest eigenvalue of ``beta hess A* - hess l``
    and ``hess l - alpha hess A*`` over the grid.
    """
    if part not in ("elbo", "loglik"):
        raise ValueError(f"part must be 'elbo' or 'loglik', got {part!r}")
    d = model.d
    mu, s2, sampled = certificate_grid(box, d, points_per_axis, max_points, n_samples, seed)
    G = mu.shape[0]
    chunk = max(1, 2_000_000 // (model.n * 100 + 1))

    gen_lo = np.empty(G)
    gen_hi = np.empty(G)
    hess_ll = []
    for sl in _chunks(G, chunk):
        Hl = _loglik_hessians(model, mu[sl], s2[sl])
        hess_ll.append(Hl)
        R = _inv_sqrt_blocks(mu[sl], s2[sl])
        M = R @ Hl @ R
        ev = np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, 1, 2)))
        gen_lo[sl], gen_hi[sl] = ev[:, 0], ev[:, -1]
    shift = 1.0 if part == "elbo" else 0.0

    if alpha_beta is None:
        alpha, beta = float(gen_lo.min()) + shift, float(gen_hi.max()) + shift
    else:
        alpha, beta = map(float, alpha_beta)

    slack = np.inf
    a_ll, b_ll = alpha - shift, beta - shift
    for Hl, sl in zip(hess_ll, _chunks(G, chunk)):
        K = _mirror_hessians(mu[sl], s2[sl])
        upper = np.linalg.eigvalsh(b_ll * K - Hl)[:, 0]
        lower = np.linalg.eigvalsh(Hl - a_ll * K)[:, 0]
        slack = min(slack, float(upper.min()), float(lower.min()))

    warnings = []
    if points_per_axis < 5 and not sampled:
        warnings.append(f"grid has only {points_per_axis} points per axis; constants may be optimistic")

    agreement, disagreements = None, None
    if d == 1:
        B, C = _third_fourth_1d(model, mu, s2)
        K = _mirror_hessians(mu, s2)
        Hl = np.concatenate(hess_ll)
        disagreements = 0
        for b in (b_ll, 0.9 * b_ll, 1.1 * b_ll):
            eig_ok = np.linalg.eigvalsh(b * K - Hl)[:, 0] >= -1e-8
            iff_ok = np.min(np.stack(iff_margins_1d(mu[:, 0], s2[:, 0], B, C, b)), axis=0) >= -1e-8
            disagreements += int(np.sum(eig_ok != iff_ok))
        agreement = disagreements == 0

    return SmoothnessCertificate(
        alpha=alpha,
        beta=beta,
        grid=np.stack([mu, s2], axis=1),
        min_slack=slack,
        part=part,
        sampled=sampled,
        passed=slack >= -tol,
        iff_agreement=agreement,
        iff_disagreements=disagreements,
        warnings=warnings,
    )


@dataclass(frozen=True)
class SufficientConstants:
    L1: float
    L2: float
    beta: float
    heuristic: bool


def sufficient_constants(kind: str, data, box: DomainBox, noise_variance: float = 1.0) -> SufficientConstants:
    """Closed-form derivative bounds and a sufficient log-likelihood smoothness constant.

    For ``d = 1`` the constant is the univariate sufficient bound
    ``(D/2) L2 + (sqrt(2D)/2) L1``. For ``d > 1`` the scaling expression
    ``d D^2 (U + D)(L1 + U L2)`` is returned as a heuristic seed only.
    """
    x = np.asarray(data.x, dtype=float)
    sup = np.max(np.abs(x), axis=1)
    if kind == "logistic":
        L1 = float(np.sum(sup))
        L2 = float(np.sum(sup**2) / 4)
    elif kind == "linear":
        # unbounded first derivative, but all third and fourth derivatives vanish
        return SufficientConstants(math.inf, float(np.sum(sup**2) / noise_variance), 0.0, False)
    elif kind == "poisson":
        raise UnsupportedModelError("no closed-form smoothness bound for Poisson regression")
    else:
        raise UnsupportedModelError(f"unknown model kind {kind!r}")
    d, D, U = x.shape[1], box.D, box.U
    if d == 1:
        return SufficientConstants(L1, L2, D / 2 * L2 + math.sqrt(2 * D) / 2 * L1, False)
    return SufficientConstants(L1, L2, d * D**2 * (U + D) * (L1 + U * L2), True)


# --- moduli ----------------------------------------------------------------------


@dataclass(frozen=True)
class Moduli:
    mu_C: float
    mu_H: float
    C_S: float
    C_L: float
    mu_B: float
    box: DomainBox


def moduli(box: DomainBox) -> Moduli:
    U, D = box.U, box.D
    mu_C = (4 * U**2 + 4 * D + 1) ** -0.5
    return Moduli(
        mu_C=mu_C,
        mu_H=1.0,
        C_S=1 / (D * (4 * U**2 + 2 * D + 1)),
        C_L=9 * U**2 * D**2 / 2,
        mu_B=mu_C**2 / (9 * U**2 * D**2),
        box=box,
    )


def cholesky_vector(w: ExpectationParams) -> np.ndarray:
    """The reparameterization ``w -> (mu, c)`` flattened in interleaved order."""
    return to_cholesky(w).as_vector()


def midpoint_slack(model: LikelihoodModel, a: CholeskyParams, b: CholeskyParams, modulus: float = 1.0) -> float:
    """``(L(a) + L(b))/2 - L(mid) - modulus ||a - b||^2 / 8`` for the objective in Cholesky space."""
    mid = CholeskyParams(0.5 * (a.mu + b.mu), 0.5 * (a.c + b.c))
    dist2 = float(np.sum((a.mu - b.mu) ** 2) + np.sum((a.c - b.c) ** 2))
    la, lb, lm = cholesky_objective(a, model), cholesky_objective(b, model), cholesky_objective(mid, model)
    return 0.5 * (la + lb) - lm - modulus * dist2 / 8


# --- BFBE ------------------------------------------------------------------------


@dataclass
class BFBEResult:
    value: float
    rho: float
    minimizer: ExpectationParams


def bfbe(w: ExpectationParams, rho: float, model: LikelihoodModel, box: DomainBox, grad=None) -> BFBEResult:
    """Bregman forward-backward envelope at ``w``.

    The inner minimizer is one projected dual step of size ``1/rho``. The inner
    objective is evaluated in standard coordinates so that large ``rho`` does not
    lose the envelope to cancellation.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    s2 = variance(w)
    g = exact_grad(w, model) if grad is None else grad
    w_star = proj_sngd_step(w, g, 1.0 / rho, box)
    mu_s, s2_s = w_star.xi, variance(w_star)
    d_xi = mu_s - w.xi
    d_Xi = (s2_s - s2) + d_xi * (mu_s + w.xi)
    kl = float(np.sum(kl_standard(mu_s, s2_s, w.xi, s2)))
    inner = float(np.dot(g.g_xi, d_xi) + np.dot(g.g_Xi, d_Xi)) + rho * kl
    return BFBEResult(value=max(0.0, -2 * rho * inner), rho=rho, minimizer=w_star)


# --- PL, Assumption checks, audits -----------------------------------------------


def pl_residual(w: ExpectationParams, model: LikelihoodModel, box: DomainBox, ell_star: float,
                mu_C: float | None = None) -> float:
    """``||grad l(w)||^2 - 2 mu_C^2 (l(w) - l*)``; ``w`` must be interior to the box."""
    if not box.is_interior(w, margin=0.0):
        raise DomainError("PL residual is defined only in the interior of the box")
    if mu_C is None:
        mu_C = moduli(box).mu_C
    g = exact_grad(w, model).norm()
    return g**2 - 2 * mu_C**2 * (objective(w, model) - ell_star)


def assumption2_linear1d(x: float, y: float, U: float, D: float) -> bool:
    """Boundary condition for 1-D Bayesian linear regression with one data point."""
    a = x**2 + 1
    return bool(-U * a < x * y < U * a and 1 / D < a < D)


@dataclass
class BoundarySweep:
    worst: float
    fraction_ok: float
    n_points: int


def boundary_direction_sweep(model: LikelihoodModel, box: DomainBox, n_points: int = 1000,
                             seed: int = 0) -> BoundarySweep:
    """Sample boundary points and test whether the mirror-preconditioned descent direction points inward.

    At each sampled boundary point the inner product of ``-hess(A*)^{-1} grad l``
    with every active outward constraint normal should be negative. This is a
    numerical probe only; passing it on a sample proves nothing in general.
    """
    rng = np.random.default_rng(seed)
    d = model.d
    worst = -np.inf
    ok = 0
    for _ in range(n_points):
        mu = rng.uniform(-box.U, box.U, d)
        s2 = np.exp(rng.uniform(-math.log(box.D), math.log(box.D), d))
        j = rng.integers(d)
        face = rng.integers(4)
        if face == 0:
            mu[j] = box.U
        elif face == 1:
            mu[j] = -box.U
        elif face == 2:
            s2[j] = box.D
        else:
            s2[j] = 1 / box.D
        w = to_expectation(StandardParams(mu, s2))
        g = exact_grad(w, model)
        blocks = hessian_A_star(w)
        direction = -np.linalg.solve(blocks, np.stack([g.g_xi, g.g_Xi], axis=1)[..., None])[..., 0]
        vals = []
        for i in range(d):
            normals = []
            if np.isclose(mu[i], box.U):
                normals.append((1.0, 0.0))
            if np.isclose(mu[i], -box.U):
                normals.append((-1.0, 0.0))
            if np.isclose(s2[i], box.D):
                normals.append((-2 * mu[i], 1.0))
            if np.isclose(s2[i], 1 / box.D):
                normals.append((2 * mu[i], -1.0))
            for nv in normals:
                nv = np.asarray(nv) / np.linalg.norm(nv)
                vals.append(float(direction[i] @ nv))
        v = max(vals)
        worst = max(worst, v)
        ok += v < 0
    return BoundarySweep(worst=worst, fraction_ok=ok / n_points, n_points=n_points)


@dataclass
class DescentReport:
    violations: list  # (t, increase) pairs where the objective rose by more than tol
    passed: bool
    implied_smoothness_exceeds: float | None


def descent_audit(trace: OptimizerTrace, L: float | None = None, tol: float = 1e-10) -> DescentReport:
    """Every step at which the logged objective rose by more than ``tol``.

    A violation with step size ``gamma`` shows the relative smoothness constant
    along the run exceeds ``1/gamma``.
    """
    if trace.stochastic:
        raise ValueError("descent audit needs a trace produced with exact gradients")
    recs = trace.records
    violations = []
    for prev, cur in zip(recs, recs[1:]):
        rise = cur.elbo - prev.elbo
        if not (rise <= tol):
            violations.append((prev.t, float(rise)))
    implied = None
    if violations:
        implied = max(1.0 / float(trace.gammas[t]) for t, _ in violations)
    return DescentReport(violations=violations, passed=not violations, implied_smoothness_exceeds=implied)


@dataclass
class CoercivityReport:
    path: str
    scale: np.ndarray
    values: np.ndarray
    increasing_tail: bool


def coercivity_scan(model: LikelihoodModel, path: str, direction=None, points: int = 20) -> CoercivityReport:
    """Objective along a geometric sequence towards a boundary of the domain.

    ``mu_ray`` moves the mean out along ``direction`` (unit sum direction by
    default) with unit variances, ``sigma_to_zero`` and ``sigma_to_inf`` scale
    all variances at zero mean.
    """
    d = model.d
    if direction is None:
        direction = np.ones(d) / math.sqrt(d)
    direction = np.asarray(direction, dtype=float)
    if path == "mu_ray":
        scale = np.geomspace(1.0, 1e2, points)
        pts = [StandardParams(r * direction, np.ones(d)) for r in scale]
    elif path == "sigma_to_zero":
        scale = np.geomspace(1.0, 1e-10, points)
        pts = [StandardParams(np.zeros(d), np.full(d, s)) for s in scale]
    elif path == "sigma_to_inf":
        scale = np.geomspace(1.0, 1e3, points)
        pts = [StandardParams(np.zeros(d), np.full(d, s)) for s in scale]
    else:
        raise ValueError(f"unknown path {path!r}; expected mu_ray, sigma_to_zero or sigma_to_inf")
    with np.errstate(over="ignore"):
        values = np.array([objective(to_expectation(p), model) for p in pts])
    tail = values[-10:]
    return CoercivityReport(path, scale, values, bool(np.all(np.diff(tail) > 0)))


@dataclass
class SteinCheck:
    lhs: float
    rhs: float
    holds: bool


def stein_bound_check(model: LikelihoodModel, w: ExpectationParams, i: int, j: int) -> SteinCheck:
    """Check ``|E[d_i d_j d_j f]| <= sigma_j^-2 sup |d_i f|`` for a bounded-gradient likelihood.

    For logistic regression ``sup |d_i f|`` is bounded by ``sum_n |x_ni|``.
    """
    if model.kind != "logistic":
        raise UnsupportedModelError(f"{model.kind} likelihood has an unbounded first derivative")
    s2 = variance(w)
    x = model.data.x
    m, v = projected_moments(model, w.xi, s2)
    e3 = gaussian_expectations(model, m, v, orders=(3,))[3]
    lhs = abs(float(np.sum(e3 * x[:, i] * x[:, j] ** 2)))
    rhs = float(np.sum(np.abs(x[:, i]))) / s2[j]
    return SteinCheck(lhs, rhs, lhs <= rhs * (1 + 1e-12) + 1e-15)


# --- optimal value oracle --------------------------------------------------------


@dataclass
class OptimalValue:
    value: float
    params: ExpectationParams
    iterations: int
    step_norm: float
    converged: bool


def optimal_value(
    model: LikelihoodModel,
    box: DomainBox,
    gamma: float | None = None,
    init: ExpectationParams | None = None,
    T: int = 100_000,
    tol: float = 1e-12,
    beta: float | None = None,
) -> OptimalValue:
    """Minimum of the negative ELBO over the box by deterministic projected SNGD.

    The step defaults to ``1/(2 beta)`` with ``beta`` from the smoothness
    certificate. Iteration stops when the gradient mapping
    ``||w_{t+1} - w_t|| / gamma`` falls below ``tol`` or stops changing.
    """
    if gamma is None:
        if beta is None:
            beta = certify_relative_smoothness(model, box).beta
        gamma = 1 / (2 * beta)
    w = init if init is not None else to_expectation(StandardParams(np.zeros(model.d), np.ones(model.d)))
    if not box.contains(w):
        w = project_box(w, box)
    step = np.inf
    t = 0
    for t in range(1, T + 1):
        w_next = proj_sngd_step(w, exact_grad(w, model), gamma, box)
        step = float(np.linalg.norm(w_next.as_vector() - w.as_vector())) / gamma
        w = w_next
        if step <= tol or step == 0.0:
            break
    return OptimalValue(objective(w, model), w, t, step, bool(step <= tol))
