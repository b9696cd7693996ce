"""Lyapunov functions, non-local operators, generators and drift-inequality checks.

The stable operator is evaluated through the identity

    I f(x) = sum_i xi_i / (alpha (alpha-1)) * int_0^inf [f_ii(x + s e_i) + f_ii(x - s e_i)] s^(1-alpha) ds,

obtained by writing the second difference of f as an integral of f_ii and
exchanging the order of integration. Only second derivatives enter, so there
is no cancellation at large |x|, and for the Lyapunov functions the tail
beyond the last breakpoint of psi is a Gauss hypergeometric function.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .levy_sources import CPMeasureSpec
from .sde_model import DriftParams, Driver, effective_params, drift


class QuadratureError(ArithmeticError):
    def __init__(self, message, estimate=None, abserr=None):
        super().__init__(message)
        self.estimate = estimate
        self.abserr = abserr


# ---------------------------------------------------------------------------
# psi and its scaled version


def psi(t):
    """Convex C^2 ramp: -1/2 on t <= -1, t on t >= 0, quartic in between.

    Returns (value, first derivative, second derivative), elementwise.
    """
    t = np.asarray(t, dtype=float)
    s = np.clip(t + 1.0, 0.0, 1.0)
    mid_v = s**3 - 0.5 * s**4 - 0.5
    mid_1 = 3.0 * s**2 - 2.0 * s**3
    mid_2 = 6.0 * s - 6.0 * s**2
    pos = t >= 0.0
    v = np.where(pos, t, mid_v)
    d1 = np.where(pos, 1.0, mid_1)
    d2 = np.where(pos, 0.0, mid_2)
    return v, d1, d2


def psi_scaled(t, delta):
    v, d1, d2 = psi(delta * np.asarray(t, dtype=float))
    return v, delta * d1, delta * delta * d2


KNOTS = (-1.0, 0.0)


def _psi_scalar(t):
    if t >= 0.0:
        return t, 1.0, 0.0
    if t <= -1.0:
        return -0.5, 0.0, 0.0
    s = t + 1.0
    s2 = s * s
    return s2 * s - 0.5 * s2 * s2 - 0.5, 3.0 * s2 - 2.0 * s2 * s, 6.0 * s * (1.0 - s)


# ---------------------------------------------------------------------------
# Lyapunov functions


@dataclass(frozen=True)
class LyapunovSpec:
    """V_p (variant "Vp") or the scaled function (variant "Vp_scaled")."""

    p: float
    delta: float
    mu: np.ndarray
    variant: str = "Vp"

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        object.__setattr__(self, "mu", mu)
        if self.variant not in ("Vp", "Vp_scaled"):
            raise ValueError(f"unknown Lyapunov variant {self.variant!r}")
        if not self.p > 0:
            raise ValueError("p must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")

    @property
    def m(self):
        return self.mu.shape[0]

    @property
    def offset(self):
        return self.m / float(np.min(self.mu))

    @property
    def coefficients(self):
        # base = sum_i (c_neg psi(-x_i) + psi(k_pos x_i)) / mu_i + offset
        if self.variant == "Vp":
            return self.delta, 1.0
        return self.delta**2, self.delta

    def with_p(self, p):
        return LyapunovSpec(p, self.delta, self.mu, self.variant)


def admissibility(spec: LyapunovSpec, params: DriftParams, alpha: float | None = None,
                  pipeline: str = "thm2") -> list[str]:
    """Violated preconditions for the chosen proof pipeline (empty if admissible)."""
    issues = []
    beta = params.beta
    ratio = float(np.max(params.gamma / params.mu))
    if max(ratio - 1.0, 0.0) * spec.delta > 1.0:
        issues.append(f"(max gamma/mu - 1)^+ delta = {(ratio - 1) * spec.delta:.4g} > 1")
    if pipeline == "thm2":
        if not beta > 0:
            issues.append(f"spare capacity beta = {beta:.4g} is not positive")
        else:
            bound = beta / (2 * params.m * (2 * beta + params.m))
            if not spec.delta < bound:
                issues.append(f"delta = {spec.delta:.4g} violates delta < beta/(2m(2beta+m)) = {bound:.4g}")
        if alpha is not None and not 1.0 < spec.p < alpha:
            issues.append(f"p = {spec.p:.4g} outside (1, alpha) = (1, {alpha:.4g})")
    return issues


def default_delta(params: DriftParams, safety: float = 0.9) -> float:
    """Largest admissible delta for the polynomial pipeline, times ``safety``."""
    beta = params.beta
    if not beta > 0:
        raise ValueError("automatic delta needs positive spare capacity")
    bounds = [1.0, beta / (2 * params.m * (2 * beta + params.m))]
    excess = float(np.max(params.gamma / params.mu)) - 1.0
    if excess > 0:
        bounds.append(1.0 / excess)
    return safety * min(bounds)


class LyapunovFunction:
    """Analytic value / gradient / hessian of V_p or its scaled variant.

    The base function V_1 is separable, V_p = V_1^p.
    """

    def __init__(self, spec: LyapunovSpec):
        self.spec = spec
        self.c_neg, self.k_pos = spec.coefficients
        self.mu = spec.mu
        self.p = spec.p

    # per-coordinate pieces, shape-preserving
    def _phi(self, t):
        vn, dn, hn = psi(-t)
        vp, dp, hp = psi(self.k_pos * t)
        k = self.k_pos
        return (self.c_neg * vn + vp), (-self.c_neg * dn + k * dp), (self.c_neg * hn + k * k * hp)

    def base(self, x):
        x = np.asarray(x, dtype=float)
        v, d, h = self._phi(x)
        return np.sum(v / self.mu, axis=-1) + self.spec.offset, d / self.mu, h / self.mu

    def value(self, x):
        return self.base(x)[0] ** self.p

    def power(self, x, q):
        return self.base(x)[0] ** q

    def grad(self, x):
        v1, g, _ = self.base(x)
        return self.p * v1[..., None] ** (self.p - 1) * g

    def hess(self, x):
        v1, g, h = self.base(x)
        p = self.p
        out = p * (p - 1) * v1[..., None, None] ** (p - 2) * g[..., :, None] * g[..., None, :]
        diag = p * v1[..., None] ** (p - 1) * h
        idx = np.arange(self.spec.m)
        out[..., idx, idx] += diag
        return out

    def hess_diag(self, x):
        v1, g, h = self.base(x)
        p = self.p
        return p * v1[..., None] ** (p - 1) * h + p * (p - 1) * v1[..., None] ** (p - 2) * g * g

    def evaluate(self, x):
        """(value, gradient, hessian)."""
        return self.value(x), self.grad(x), self.hess(x)

    # --- axis restrictions used by the stable operator
    def axis_curvature(self, x, i, s):
        """d^2/ds^2 f(x + s e_i) for an array of signed offsets s."""
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=float)
        v1 = self.base(x)[0]
        vi = self._phi(np.array(x[i]))[0] / self.mu[i]
        v, d, h = self._phi(x[i] + s)
        w1 = v1 - vi + v / self.mu[i]
        g = d / self.mu[i]
        hh = h / self.mu[i]
        p = self.p
        return p * w1 ** (p - 1) * hh + p * (p - 1) * w1 ** (p - 2) * g * g

    def axis_curvature_fn(self, x, i):
        """Scalar closure s -> f_ii(x + s e_i) + f_ii(x - s e_i), pure float arithmetic."""
        x = np.asarray(x, dtype=float)
        xi, mu, cn, k, p = float(x[i]), float(self.mu[i]), self.c_neg, self.k_pos, self.p
        rest = float(self.base(x)[0]) - float(self._phi(np.array(xi))[0]) / mu

        def one(t):
            vn, dn, hn = _psi_scalar(-t)
            vp, dp, hp = _psi_scalar(k * t)
            w = rest + (cn * vn + vp) / mu
            g = (-cn * dn + k * dp) / mu
            h = (cn * hn + k * k * hp) / mu
            return p * w ** (p - 1.0) * h + p * (p - 1.0) * w ** (p - 2.0) * g * g

        return lambda s: one(xi + s) + one(xi - s)

    def axis_knots(self, x, i):
        xi = float(x[i])
        pts = [-1.0 / self.k_pos, 0.0, 1.0]  # knots of psi(k t) and psi(-t)
        return sorted({abs(k - xi) for k in pts if abs(k - xi) > 0})

    def axis_tail(self, x, i, s0, alpha):
        """int_{s0}^inf [f_ii(x + s e_i) + f_ii(x - s e_i)] s^(1-alpha) ds, exact.

        Requires s0 beyond every knot; returns None if s0 is too small for the
        series to converge (caller then extends the finite part).
        """
        p = self.p
        if p >= alpha:
            raise QuadratureError(f"stable operator of V_p diverges for p = {p} >= alpha = {alpha}")
        if p == 1.0:
            return 0.0
        x = np.asarray(x, dtype=float)
        v1 = float(self.base(x)[0])
        vi = float(self._phi(np.array(x[i]))[0]) / self.mu[i]
        total = 0.0
        for sign, slope in ((1.0, self.k_pos), (-1.0, self.c_neg)):
            g = slope / self.mu[i]
            a = v1 - vi + float(self._phi(np.array(x[i] + sign * s0))[0]) / self.mu[i] - g * s0
            c = a / g
            if abs(c) >= 0.5 * s0:
                return None
            b = alpha - p
            total += p * (p - 1) * g**p * s0**(-b) / b * special.hyp2f1(2.0 - p, b, b + 1.0, -c / s0)
        return total

    def tail_scale(self, x, i):
        """Offset |a/g| of the linear regime; s0 must exceed twice this."""
        x = np.asarray(x, dtype=float)
        v1 = float(self.base(x)[0])
        vi = float(self._phi(np.array(x[i]))[0]) / self.mu[i]
        out = 0.0
        for sign, slope in ((1.0, self.k_pos), (-1.0, self.c_neg)):
            g = slope / self.mu[i]
            far = max(self.axis_knots(x, i)) + 1.0
            a = v1 - vi + float(self._phi(np.array(x[i] + sign * far))[0]) / self.mu[i] - g * far
            out = max(out, abs(a / g))
        return out


def lyapunov_eval(spec: LyapunovSpec, x):
    """(value, gradient, hessian) of the function selected by ``spec``."""
    return LyapunovFunction(spec).evaluate(x)


class TestFunction:
    """Generic smooth test function given by value/gradient/hessian callables.

    Used for operator checks (linear, quadratic, cosine test functions).
    ``axis_tail`` may be supplied as a callable (x, i, s0, alpha) -> float;
    otherwise the axis integral is taken numerically out to infinity.
    """

    __test__ = False  # not a pytest class

    def __init__(self, value, grad, hess, knots=None, tail=None, name="test"):
        self._value, self._grad, self._hess = value, grad, hess
        self._knots = knots
        self._tail = tail
        self.name = name

    def value(self, x):
        return self._value(np.asarray(x, dtype=float))

    def grad(self, x):
        return self._grad(np.asarray(x, dtype=float))

    def hess(self, x):
        return self._hess(np.asarray(x, dtype=float))

    def hess_diag(self, x):
        return np.diagonal(self.hess(x), axis1=-2, axis2=-1)

    def axis_curvature(self, x, i, s):
        x = np.asarray(x, dtype=float)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pts = np.repeat(x[None, :], s.shape[0], axis=0)
        pts[:, i] += s
        return np.array([self._hess(q)[i, i] for q in pts])

    def axis_knots(self, x, i):
        return [] if self._knots is None else self._knots(x, i)

    def axis_tail(self, x, i, s0, alpha):
        return None if self._tail is None else self._tail(x, i, s0, alpha)

    def tail_scale(self, x, i):
        return 0.0


def linear_function(c):
    c = np.asarray(c, dtype=float)
    m = c.shape[0]
    return TestFunction(lambda x: x @ c, lambda x: np.broadcast_to(c, x.shape).copy(),
                        lambda x: np.zeros(x.shape[:-1] + (m, m)),
                        tail=lambda x, i, s0, a: 0.0, name="linear")


def quadratic_function(H, c=None):
    H = np.asarray(H, dtype=float)
    c = np.zeros(H.shape[0]) if c is None else np.asarray(c, dtype=float)
    return TestFunction(lambda x: 0.5 * np.einsum("...i,ij,...j", x, H, x) + x @ c,
                        lambda x: x @ H.T + c,
                        lambda x: np.broadcast_to(H, x.shape[:-1] + H.shape).copy(),
                        name="quadratic")


# ---------------------------------------------------------------------------
# non-local operators


@dataclass(frozen=True)
class QuadTolerance:
    rel: float = 1e-10
    inner: float = 1e-3   # first breakpoint; QAWS handles s^(1-alpha) on [0, inner]
    outer: float = 1e3    # generic functions: finite part stops here, tail to infinity
    budget_rel: float = 1e-6


def _quad(fn, a, b, tol, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err, *rest = integrate.quad(fn, a, b, epsabs=0.0, epsrel=tol.rel, limit=400,
                                         full_output=1, **kw)
    return val, err


def _axis_integral(f, x, i, alpha, tol):
    """int_0^inf [f_ii(x+s e_i) + f_ii(x-s e_i)] s^(1-alpha) ds and its error bound."""
    if hasattr(f, "axis_curvature_fn"):
        curv = f.axis_curvature_fn(x, i)
    else:
        curv = lambda s: float(f.axis_curvature(x, i, np.array([s]))[0] + f.axis_curvature(x, i, np.array([-s]))[0])
    knots = [k for k in f.axis_knots(x, i) if k > tol.inner]
    s0 = max([tol.inner] + [k * (1.0 + 1e-12) for k in knots])
    s0 = max(s0, 2.0 * f.tail_scale(x, i) + 1.0)
    tail = f.axis_tail(x, i, s0, alpha)
    if tail is None:
        s0 = max(s0, tol.outer)
    # finite part: breakpoints at the knots plus a geometric ladder
    pts = {tol.inner, s0}
    pts.update(k for k in knots if k < s0)
    ladder = tol.inner
    while ladder * 4.0 < s0:
        ladder *= 4.0
        pts.add(ladder)
    pts = sorted(pts)
    val, err = _quad(curv, 0.0, pts[0], tol, weight="alg", wvar=(1.0 - alpha, 0.0))
    w = lambda s: curv(s) * s ** (1.0 - alpha)
    for a, b in zip(pts[:-1], pts[1:]):
        v, e = _quad(w, a, b, tol)
        val += v
        err += e
    if tail is None:
        v, e = _quad(w, s0, np.inf, tol)
        tail, e_tail = v, e
    else:
        e_tail = 1e-15 * abs(tail)
    return val + tail, err + e_tail


def nonlocal_alpha(f, x, alpha, xi, tol: QuadTolerance = QuadTolerance(), return_error=False):
    """Anisotropic stable operator sum_i int df(x; y e_i) xi_i |y|^(-1-alpha) dy."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    total, err = 0.0, 0.0
    k = 1.0 / (alpha * (alpha - 1.0))
    for i in range(x.shape[0]):
        v, e = _axis_integral(f, x, i, alpha, tol)
        total += xi[i] * k * v
        err += xi[i] * k * e
    if not err <= max(tol.budget_rel * abs(total), 1e-13):
        raise QuadratureError(f"stable operator at {x}: error {err:.3g} exceeds budget", total, err)
    return (total, err) if return_error else total


def nonlocal_cp(f, x, cp: CPMeasureSpec, tol: QuadTolerance = QuadTolerance(), return_error=False):
    """Compound Poisson operator int df(x; y) eta(dy) for jumps r w.

    Swapping the order of integration gives
    nu * int_0^inf w'H(x + s w)w E[(R - s)^+] ds, a single integral.
    """
    x = np.asarray(x, dtype=float)
    if cp.nu == 0:
        return (0.0, 0.0) if return_error else 0.0
    w = cp.direction
    law = cp.radial
    if law.stop_loss(0.0) == math.inf:
        raise ValueError("jump law has an infinite mean")
    knots = {0.0}
    levels = (-1.0, 0.0, 1.0) + ((-1.0 / f.k_pos,) if isinstance(f, LyapunovFunction) else ())
    for i in range(x.shape[0]):
        if w[i] != 0:
            knots.update(t for t in ((kn - x[i]) / w[i] for kn in levels) if t > 0)
    if law.kind == "point":
        knots = {t for t in knots if t < law.r} | {law.r}
    elif law.kind == "pareto":
        knots.add(law.scale)
    knots = sorted(knots)
    g = lambda s: float(w @ f.hess(x + s * w) @ w) * law.stop_loss(s)
    v, e = 0.0, 0.0
    for a, b in zip(knots, knots[1:]):
        vi, ei = _quad(g, a, b, tol)
        v, e = v + vi, e + ei
    if law.kind != "point":
        vi, ei = _quad(g, knots[-1], np.inf, tol)
        v, e = v + vi, e + ei
    total, err = cp.nu * v, cp.nu * e
    if not err <= max(tol.budget_rel * abs(total), 1e-13):
        raise QuadratureError(f"jump operator at {x}: error {err:.3g} exceeds budget", total, err)
    return (total, err) if return_error else total


# ---------------------------------------------------------------------------
# generator


@dataclass
class GeneratorConfig:
    """params: the model (recentred for the stable case); the function f is either a
    LyapunovSpec or a ready-made function object."""

    params: DriftParams
    driver: Driver
    function: object
    tol: QuadTolerance = field(default_factory=QuadTolerance)

    def __post_init__(self):
        if isinstance(self.function, LyapunovSpec):
            self.function = LyapunovFunction(self.function)
        if self.driver.m != self.params.m:
            raise ValueError("driver and model dimensions differ")

    @property
    def drift_params(self) -> DriftParams:
        """Model with ell replaced by ell~ when a compound Poisson part is present."""
        if self.driver.has_cp:
            return self.params.with_ell(effective_params(self.params, self.driver.cp).ell_tilde)
        return self.params

    @property
    def beta(self) -> float:
        return self.drift_params.beta

    def nonlocal_part(self, x):
        """(value, abserr) of all control-independent second-order terms."""
        f, d, tol = self.function, self.driver, self.tol
        val, err = 0.0, 0.0
        if d.has_stable:
            v, e = nonlocal_alpha(f, x, d.alpha, d.xi, tol, return_error=True)
            val, err = val + v, err + e
        if d.has_cp:
            v, e = nonlocal_cp(f, x, d.cp, tol, return_error=True)
            val, err = val + v, err + e
        if d.variant == "brownian_cp":
            val += 0.5 * float(np.sum(d.sigma**2 * f.hess_diag(np.asarray(x, dtype=float))))
        return val, err

    def drift_part(self, x, u):
        return float(drift(x, u, self.drift_params) @ self.function.grad(np.asarray(x, dtype=float)))


def generator(config: GeneratorConfig, x, u, return_parts=False):
    x = np.asarray(x, dtype=float)
    nl, err = config.nonlocal_part(x)
    dr = config.drift_part(x, u)
    if return_parts:
        return dr + nl, {"drift": dr, "nonlocal": nl, "abserr": err}
    return dr + nl


# ---------------------------------------------------------------------------
# grids and reports


@dataclass(frozen=True)
class GridSpec:
    radii: tuple = tuple(0.5 * 2.0**k for k in range(15))
    n_random: int = 8
    band_offsets: tuple = tuple(np.linspace(-1.0, 1.0, 9))
    include_origin: bool = True
    seed: int = 20240519

    def points(self, m: int) -> np.ndarray:
        dirs = []
        eye = np.eye(m)
        for i in range(m):
            dirs += [eye[i], -eye[i]]
        e = np.ones(m) / math.sqrt(m)
        dirs += [e, -e]
        rng = np.random.default_rng(self.seed)
        g = rng.standard_normal((self.n_random, m))
        dirs += list(g / np.linalg.norm(g, axis=1, keepdims=True))
        pts = [r * d for r in self.radii for d in dirs]
        # band around the switching hyperplane <e,x> = 0
        perp = [eye[0] - e * e[0]]
        if m > 2:
            h = rng.standard_normal((m - 2, m))
            perp += list(h - np.outer(h @ e, e))
        perp = [q / np.linalg.norm(q) for q in perp]
        for r in self.radii:
            for q in perp:
                for sgn in (1.0, -1.0):
                    for s in self.band_offsets:
                        pts.append(sgn * r * q + (s / m) * np.ones(m))
        if self.include_origin:
            pts.append(np.zeros(m))
        return np.array(pts)


def grid_hash(points: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(points, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class DriftReport:
    inequality_id: str
    grid_hash: str
    points: np.ndarray
    margins: np.ndarray          # RHS - LHS with the fitted constants in place
    excess: np.ndarray           # LHS + decay term (generator forms) or -margin (drift forms)
    worst_margin: float
    fitted_constants: dict
    r0: float
    compact_radius: float
    violations: list
    quadrature_budget: float
    preconditions: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self):
        return {
            "inequality_id": self.inequality_id,
            "grid_hash": self.grid_hash,
            "n_points": int(self.points.shape[0]),
            "worst_margin": self.worst_margin,
            "fitted_constants": self.fitted_constants,
            "R0": self.r0,
            "compact_radius": self.compact_radius,
            "violations": self.violations,
            "quadrature_budget": self.quadrature_budget,
            "preconditions": self.preconditions,
            "passed": self.passed,
        }


INEQUALITIES = ("lemma1_Kminus", "lemma1_Kplus", "thm2_foster", "thm2_no_l1", "lemma2_gamma",
                "thm3_full", "thm5_cp", "e_dr_scaled", "remark_combined")


def _smallest_safe_radius(norms, excess):
    """Smallest grid radius beyond which every excess is <= 0."""
    bad = norms[excess > 0]
    if bad.size == 0:
        return 0.0
    worst = bad.max()
    beyond = norms[norms > worst]
    return float(beyond.min()) if beyond.size else math.inf


class _PointLhs:
    """max over simplex vertices of the inequality's left side at one point (picklable)."""

    def __init__(self, config, generator_form):
        self.config, self.generator_form = config, generator_form

    def __call__(self, x):
        cfg = self.config
        worst = max(cfg.drift_part(x, u) for u in np.eye(cfg.params.m))
        if not self.generator_form:
            return worst, 0.0
        nl, err = cfg.nonlocal_part(x)
        return worst + nl, err / max(abs(nl), 1e-300)


def verify_drift_inequality(config: GeneratorConfig, inequality_id: str, grid: GridSpec | None = None,
                            compact_radius: float = 20.0, points=None, map_fn=None) -> DriftReport:
    """Evaluate one inequality on a grid, at every simplex vertex.

    Drift-only inequalities are checked pointwise. Generator inequalities are
    checked as excess(x) = LHS + decay <= C, reporting the fitted C and the
    radius beyond which the excess is nonpositive. ``map_fn`` (an ordered map,
    e.g. a process pool's) spreads the point evaluations.
    """
    if inequality_id not in INEQUALITIES:
        raise ValueError(f"unknown inequality {inequality_id!r}")
    f = config.function
    if not isinstance(f, LyapunovFunction):
        raise TypeError("drift inequalities are stated for the Lyapunov functions")
    spec = f.spec
    params = config.drift_params
    m, p, delta, beta = params.m, spec.p, spec.delta, params.beta
    grid = grid or GridSpec()
    pts = grid.points(m) if points is None else np.asarray(points, dtype=float)
    alpha = config.driver.alpha

    pre = []
    want_variant = "Vp_scaled" if inequality_id in ("thm5_cp", "e_dr_scaled") else "Vp"
    if spec.variant != want_variant:
        pre.append(f"{inequality_id} is stated for variant {want_variant}, got {spec.variant}")
    if inequality_id in ("lemma1_Kminus", "lemma1_Kplus", "thm2_foster", "thm2_no_l1"):
        pre += admissibility(spec, params, alpha if inequality_id.startswith("thm2") else None)
    if inequality_id in ("lemma2_gamma", "thm3_full") and not np.all(params.gamma > 0):
        pre.append("abandonment rates must all be positive")
    if inequality_id in ("thm5_cp", "e_dr_scaled", "remark_combined"):
        if not config.driver.has_cp:
            pre.append("a compound Poisson driver is required")
        else:
            eff = effective_params(config.params, config.driver.cp)
            if not eff.beta_tilde > 0:
                pre.append(f"effective spare capacity {eff.beta_tilde:.4g} is not positive")
            if not eff.in_theta_c(max(p, 1.0)):
                pre.append(f"p = {p} is not in the moment set (theta_c = {eff.theta_c})")
    if inequality_id in ("thm2_foster", "thm2_no_l1", "remark_combined") and alpha is not None and not p < alpha:
        pre.append(f"p = {p} must be below alpha = {alpha}")

    generator_form = inequality_id in ("thm2_foster", "thm2_no_l1", "thm3_full", "thm5_cp", "remark_combined")
    n = pts.shape[0]
    evaluated = list((map_fn or map)(_PointLhs(config, generator_form), pts))
    lhs = np.array([e[0] for e in evaluated])
    budgets = np.array([e[1] for e in evaluated])

    norms = np.linalg.norm(pts, axis=1)
    s = pts.sum(axis=1)
    l1 = np.abs(pts).sum(axis=1)
    l1neg = np.maximum(-pts, 0.0).sum(axis=1)
    vpm1 = f.power(pts, p - 1.0)
    vp = f.power(pts, p)
    consts = {}

    if inequality_id == "lemma1_Kminus":
        sel = s <= 0
        rhs = p * (delta * beta + 0.5 * m * (1 + delta) - delta * l1) * vpm1
        margins = np.where(sel, rhs - lhs, np.inf)
    elif inequality_id == "lemma1_Kplus":
        sel = s > 0
        rhs = -p * (beta / m - delta * beta - delta * m / 2 + delta * l1neg) * vpm1
        margins = np.where(sel, rhs - lhs, np.inf)
    elif inequality_id == "e_dr_scaled":
        rhs_minus = p * delta * (delta * beta + m / (2 * delta) * (1 + delta**2) - delta * l1) * vpm1
        rhs_plus = -p * delta * (beta / m - delta * beta - delta * m / 2 + delta * l1neg) * vpm1
        margins = np.where(s <= 0, rhs_minus, rhs_plus) - lhs
    if inequality_id in ("lemma1_Kminus", "lemma1_Kplus", "e_dr_scaled"):
        scale = 1e-9 * (1.0 + np.abs(lhs))
        excess = np.where(np.isfinite(margins), -margins, -np.inf)
        violations = [_violation(pts[k], margins[k]) for k in range(n)
                      if np.isfinite(margins[k]) and margins[k] < -scale[k]]
        finite = margins[np.isfinite(margins)]
        worst_margin = float(finite.min()) if finite.size else math.inf
        r0 = 0.0 if not violations else math.inf
        return DriftReport(inequality_id, grid_hash(pts), pts, margins, excess, worst_margin, consts,
                           r0, compact_radius, violations, 0.0, pre)

    if inequality_id in ("lemma2_gamma", "thm3_full"):
        ratio = -lhs / vp
        outer = norms >= np.quantile(norms, 0.5)
        kappa1 = 0.5 * float(ratio[outer].min())
        excess = lhs + kappa1 * vp
        consts["kappa1"] = kappa1
        if not kappa1 > 0:
            pre.append("no positive decay rate: -LHS/V_p is not bounded below by a positive constant")
    elif inequality_id == "thm2_foster":
        excess = lhs + p * (beta / (2 * m) + delta * l1neg) * vpm1
        weak = lhs + p * beta / (2 * m) * vpm1
        consts["C0_no_l1"] = float(max(weak.max(), 0.0))
        consts["R0_no_l1"] = _smallest_safe_radius(norms, weak)
    elif inequality_id == "thm2_no_l1":
        # the form without the ||x^-||_1 term, which is what ergodicity needs
        excess = lhs + p * beta / (2 * m) * vpm1
    elif inequality_id == "thm5_cp":
        excess = lhs + p * delta * beta / (2 * m) * vpm1
    else:  # remark_combined
        excess = lhs + p * beta / (2 * m) * vpm1

    budget = float(budgets.max()) if generator_form else 0.0
    c_fit = float(max(excess.max(), 0.0)) * (1.0 + budget)
    key = {"thm2_foster": "C0", "thm2_no_l1": "C0", "lemma2_gamma": "c0", "thm3_full": "kappa0",
           "thm5_cp": "C0_tilde", "remark_combined": "C0_hat"}[inequality_id]
    consts[key] = c_fit
    r0 = _smallest_safe_radius(norms, excess)
    consts["R0"] = r0
    margins = np.where(norms <= max(r0, 0.0), c_fit, 0.0) - excess
    violations = [_violation(pts[k], -excess[k]) for k in range(n)
                  if norms[k] > compact_radius and excess[k] > 0]
    if inequality_id in ("lemma2_gamma", "thm3_full") and not consts["kappa1"] > 0:
        violations.append({"x": None, "margin": consts["kappa1"], "reason": "kappa1 <= 0"})
    return DriftReport(inequality_id, grid_hash(pts), pts, margins, excess, float(margins.min()), consts,
                       r0, compact_radius, violations, budget, pre)


def _violation(x, margin):
    return {"x": [float(v) for v in x], "norm": float(np.linalg.norm(x)), "margin": float(margin)}


def lemma3_probe(p, alpha, xi, mu, delta, radii, directions, function=None,
                 tol: QuadTolerance = QuadTolerance()):
    """Table of |x|^(alpha-p) I V_p(x) over radii x directions.

    Returns dict with "table" (len(radii), len(directions)), "max", "min" and
    "decade_ratio" (max over directions of the ratio between successive radii).
    """
    if not 0 < p < alpha:
        raise ValueError("the probe needs 0 < p < alpha")
    f = function or LyapunovFunction(LyapunovSpec(p, delta, mu))
    directions = np.asarray(directions, dtype=float)
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    table = np.empty((len(radii), len(directions)))
    for a, r in enumerate(radii):
        for b, d in enumerate(directions):
            table[a, b] = r ** (alpha - p) * nonlocal_alpha(f, r * d, alpha, xi, tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = np.maximum(np.abs(table[1:]), np.abs(table[:-1]))
        lo = np.minimum(np.abs(table[1:]), np.abs(table[:-1]))
        ratios = np.where(hi == 0, 1.0, hi / lo)
    return {"table": table, "max": float(table.max()), "min": float(table.min()),
            "decade_ratio": float(ratios.max()) if ratios.size else 1.0, "radii": list(radii)}
