"""Controlled SDE dX = b(X, v(X)) dt + dN with stable / Brownian+CP / combined noise."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .levy_sources import (
    CPMeasureSpec,
    ParameterError,
    RngStream,
    _as_generator,
    stable_scale_from_weight,
    standard_stable,
)

OVERFLOW_LIMIT = 1e12


class PolicyError(ValueError):
    pass


class SimulationOverflow(RuntimeError):
    """The state left the overflow guard ball; carries where and when."""

    def __init__(self, message, time=None, state=None, index=None):
        super().__init__(message)
        self.time = time
        self.state = state
        self.index = index


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class DriftParams:
    ell: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        ell = np.atleast_1d(np.asarray(self.ell, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if not (ell.shape == mu.shape == gamma.shape) or ell.ndim != 1:
            raise ParameterError("ell, mu, gamma must be vectors of equal length")
        if np.any(mu <= 0):
            raise ParameterError("service rates mu must be positive")
        if np.any(gamma < 0):
            raise ParameterError("abandonment rates gamma must be nonnegative")
        for name, arr in (("ell", ell), ("mu", mu), ("gamma", gamma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.ell.shape[0]

    @property
    def beta(self) -> float:
        return -float(np.sum(self.ell / self.mu))

    @classmethod
    def recentred(cls, beta: float, mu, gamma) -> "DriftParams":
        """Model whose constant drift term is -(beta/m) M e."""
        mu = np.asarray(mu, dtype=float)
        return cls(-(beta / mu.shape[0]) * mu, mu, gamma)

    def with_ell(self, ell) -> "DriftParams":
        return DriftParams(ell, self.mu, self.gamma)


def spare_capacity_and_recenter(params: DriftParams):
    """Return (beta, zeta, recentred params); X - zeta solves the recentred SDE."""
    beta = params.beta
    zeta = (beta / params.m) + params.ell / params.mu
    return beta, zeta, DriftParams.recentred(beta, params.mu, params.gamma)


def check_simplex(u, tol: float = 1e-12) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u < -tol) or abs(float(np.sum(u, axis=-1).max()) - 1.0) > tol \
            or abs(float(np.sum(u, axis=-1).min()) - 1.0) > tol:
        raise PolicyError(f"not a simplex point: {u}")
    return u


def drift(x, u, params: DriftParams) -> np.ndarray:
    """b(x,u) = ell - M(x - <e,x>^+ u) - <e,x>^+ Gamma u, batched over leading axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = np.sum(x, axis=-1, keepdims=True)
    # <e,x> = 0 takes the control-free branch
    sp = np.where(s > 0, s, 0.0)
    return params.ell - params.mu * (x - sp * u) - sp * params.gamma * u


# ---------------------------------------------------------------------------
# controls


@dataclass(frozen=True)
class ControlPolicy:
    """Stationary Markov control v: K_+ -> simplex.

    ``kind`` is "constant", "priority" or "custom". For "priority",
    ``order`` lists classes from first-served to last-served and the control
    parks all queue mass on the last class. A custom ``fn`` maps one state to a
    simplex point; set ``vectorized`` when it also accepts an (N, m) batch.
    """

    kind: str
    m: int
    u: np.ndarray | None = None
    order: tuple[int, ...] | None = None
    fn: Callable | None = None
    vectorized: bool = False
    locally_lipschitz: bool = True
    name: str = ""

    @classmethod
    def constant(cls, u):
        u = check_simplex(np.asarray(u, dtype=float))
        return cls("constant", u.shape[0], u=u, name="constant")

    @classmethod
    def static_priority(cls, order):
        order = tuple(int(i) for i in order)
        m = len(order)
        if sorted(order) != list(range(m)):
            raise PolicyError("priority order must be a permutation of 0..m-1")
        u = np.zeros(m)
        u[order[-1]] = 1.0
        return cls("priority", m, u=u, order=order, name="priority")

    @classmethod
    def custom(cls, fn, m, vectorized=False, locally_lipschitz=False, name="custom"):
        return cls("custom", m, fn=fn, vectorized=vectorized,
                   locally_lipschitz=locally_lipschitz, name=name)

    @classmethod
    def proportional(cls, m):
        """v(x) = x^+ / <e, x^+>; continuous on K_+."""
        return cls.custom(proportional_map, m, vectorized=True, locally_lipschitz=True,
                          name="proportional")

    def __call__(self, x):
        return evaluate_policy(self, x)


def proportional_map(x):
    xp = np.maximum(np.asarray(x, dtype=float), 0.0)
    tot = np.sum(xp, axis=-1, keepdims=True)
    m = xp.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, xp / np.where(tot > 0, tot, 1.0), 1.0 / m)


def evaluate_policy(policy: ControlPolicy, x) -> np.ndarray:
    """Control value at x (or at each row of a batch)."""
    x = np.asarray(x, dtype=float)
    if policy.kind in ("constant", "priority"):
        return np.broadcast_to(policy.u, x.shape)
    if policy.vectorized or x.ndim == 1:
        out = np.asarray(policy.fn(x), dtype=float)
    else:
        out = np.array([policy.fn(row) for row in x], dtype=float)
    if out.shape != x.shape:
        raise PolicyError(f"policy returned shape {out.shape}, expected {x.shape}")
    try:
        check_simplex(out, tol=1e-9)
    except PolicyError as err:
        raise PolicyError(f"policy {policy.name!r} left the simplex") from err
    return out


# ---------------------------------------------------------------------------
# drivers


@dataclass(frozen=True)
class Driver:
    """Noise specification.

    variant: "stable" (alpha, xi), "brownian_cp" (sigma, cp),
    "stable_cp" (alpha, xi, cp) or "none" (deterministic test mode).
    xi are weights of the Levy density xi_i |y|^(-1-alpha).
    """

    variant: str
    m: int
    alpha: float | None = None
    xi: np.ndarray | None = None
    sigma: np.ndarray | None = None
    cp: CPMeasureSpec | None = None

    def __post_init__(self):
        v = self.variant
        if v not in ("stable", "brownian_cp", "stable_cp", "none"):
            raise ParameterError(f"unknown driver variant {v!r}")
        if v in ("stable", "stable_cp"):
            if self.alpha is None or not 1.0 < self.alpha < 2.0:
                raise ParameterError("stable driver needs alpha in (1, 2)")
            xi = np.asarray(self.xi, dtype=float)
            if xi.shape != (self.m,) or np.any(xi <= 0):
                raise ParameterError("xi must be a vector of positive weights")
            object.__setattr__(self, "xi", xi)
        if v == "brownian_cp":
            sig = np.asarray(self.sigma, dtype=float)
            if sig.shape != (self.m,) or np.any(sig <= 0):
                raise ParameterError("sigma must be a vector of positive diagonal entries")
            object.__setattr__(self, "sigma", sig)
        if v in ("brownian_cp", "stable_cp"):
            if self.cp is None or self.cp.m != self.m:
                raise ParameterError("compound Poisson part missing or of wrong dimension")

    @classmethod
    def stable(cls, alpha, xi):
        xi = np.asarray(xi, dtype=float)
        return cls("stable", xi.shape[0], alpha=alpha, xi=xi)

    @classmethod
    def brownian_cp(cls, sigma, cp):
        sigma = np.asarray(sigma, dtype=float)
        return cls("brownian_cp", sigma.shape[0], sigma=sigma, cp=cp)

    @classmethod
    def stable_cp(cls, alpha, xi, cp):
        xi = np.asarray(xi, dtype=float)
        return cls("stable_cp", xi.shape[0], alpha=alpha, xi=xi, cp=cp)

    @classmethod
    def none(cls, m):
        return cls("none", m)

    @property
    def has_stable(self):
        return self.variant in ("stable", "stable_cp")

    @property
    def has_cp(self):
        return self.variant in ("brownian_cp", "stable_cp")

    @property
    def stable_scale(self) -> np.ndarray | None:
        return stable_scale_from_weight(self.xi, self.alpha) if self.has_stable else None

    def path_drift(self) -> np.ndarray:
        """Constant added to b along simulated paths.

        The generator uses the Levy triplet (vartheta, eta) with small jumps
        compensated, so the raw-jump path carries vartheta - int_B y eta(dy).
        """
        if not self.has_cp:
            return np.zeros(self.m)
        return self.cp.vartheta - self.cp.small_jump_mean()


# ---------------------------------------------------------------------------
# effective parameters for the compound Poisson case


@dataclass(frozen=True)
class EffectiveParams:
    ell_tilde: np.ndarray
    beta_tilde: float
    theta_c: float
    large_jump_mean_finite: bool

    def in_theta_c(self, theta: float) -> bool:
        return 0 < theta < self.theta_c


def effective_params(params: DriftParams, cp: CPMeasureSpec) -> EffectiveParams:
    theta_c = cp.radial.moment_cutoff
    big = cp.radial.partial_mean(1.0, math.inf)  # |y| = radius since |w| = 1
    finite = math.isfinite(big)
    ell_t = params.ell + cp.vartheta + (cp.nu * big * cp.direction if finite else 0.0)
    beta_t = -float(np.sum(ell_t / params.mu))
    return EffectiveParams(np.asarray(ell_t, dtype=float), beta_t, theta_c, finite)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SdePath:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    dt: float
    seed: tuple

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")


class _NoiseSource:
    """Per-step driver increments for a batch of paths."""

    def __init__(self, driver: Driver, gen: np.random.Generator):
        self.driver = driver
        self.gen = gen
        self.scale = driver.stable_scale

    def continuous(self, h: np.ndarray, n: int) -> np.ndarray:
        """Increment of the jump-free-in-law part over intervals h, shape (n, m)."""
        d = self.driver
        m = d.m
        h = np.asarray(h, dtype=float).reshape(-1, 1) if np.ndim(h) else float(h)
        if d.variant == "none":
            return np.zeros((n, m))
        if d.variant == "brownian_cp":
            return d.sigma * np.sqrt(h) * self.gen.standard_normal((n, m))
        return self.scale * np.power(h, 1.0 / d.alpha) * standard_stable(d.alpha, (n, m), self.gen)


def _guard(x, t, idx=None):
    bad = ~np.all(np.abs(x) <= OVERFLOW_LIMIT, axis=-1)
    return bad


def euler_ensemble(params, policy, driver, x0, horizon, dt, rng, checkpoints=None,
                   drift_free=False, abort_on_overflow=False):
    """Advance N paths to each checkpoint time; returns (states (K,N,m), aborted mask).

    Stable noise uses exact increments on the fixed grid. With a compound
    Poisson part the grid is jump-adapted: every step is split at its jump
    epochs with Euler substeps in between.
    """
    if not dt > 0:
        raise ParameterError("dt must be positive")
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[None, :]
    n, m = x.shape
    if checkpoints is None:
        checkpoints = [horizon]
    checkpoints = np.asarray(checkpoints, dtype=float)
    if np.any(np.diff(checkpoints) < 0) or checkpoints[0] < 0:
        raise ParameterError("checkpoints must be nondecreasing and nonnegative")
    gen = _as_generator(rng)
    noise = _NoiseSource(driver, gen)
    extra = driver.path_drift()
    aborted = np.zeros(n, dtype=bool)
    out = np.empty((len(checkpoints), n, m))

    def b(xs):
        if drift_free:
            return np.zeros_like(xs)
        return drift(xs, evaluate_policy(policy, xs), params) + extra

    t = 0.0
    for k, tk in enumerate(checkpoints):
        steps = int(round((tk - t) / dt))
        grid = t + dt * np.arange(1, steps + 1)
        if steps == 0 or abs(grid[-1] - tk) > 1e-9 * max(1.0, tk):
            grid = np.append(grid[grid < tk - 1e-12], tk) if tk > t else grid[:0]
        for t_next in grid:
            h = t_next - t
            if driver.has_cp:
                x = _cp_step(x, h, b, noise, driver.cp, gen)
            else:
                x = x + b(x) * h + noise.continuous(h, n)
            bad = _guard(x, t_next)
            if bad.any():
                if abort_on_overflow:
                    i = int(np.flatnonzero(bad)[0])
                    raise SimulationOverflow(
                        f"path {i} exceeded |X| > {OVERFLOW_LIMIT:g} at t={t_next:.6g}",
                        time=t_next, state=x[i].copy(), index=i)
                aborted |= bad
                x[bad] = 0.0  # parked; excluded by the caller via the mask
            t = t_next
        out[k] = x
    return out, aborted


def _cp_step(x, h, b, noise, cp, gen):
    n, m = x.shape
    counts = gen.poisson(cp.nu * h, size=n) if cp.nu > 0 else np.zeros(n, dtype=int)
    kmax = int(counts.max()) if n else 0
    if kmax == 0:
        return x + b(x) * h + noise.continuous(h, n)
    # epochs within the step: sorted jump times padded with h
    u = np.sort(gen.uniform(0.0, h, size=(n, kmax)), axis=1)
    u = np.where(np.arange(kmax)[None, :] < counts[:, None], u, h)
    epochs = np.concatenate([u, np.full((n, 1), h)], axis=1)
    radii = cp.radial.sample((n, kmax), gen)
    cur = np.zeros(n)
    for j in range(kmax + 1):
        sub = epochs[:, j] - cur
        x = x + b(x) * sub[:, None] + noise.continuous(sub, n)
        if j < kmax:
            jumped = j < counts
            x = x + np.where(jumped[:, None], radii[:, j, None] * cp.direction[None, :], 0.0)
        cur = epochs[:, j]
    return x


def simulate_path(params: DriftParams, policy: ControlPolicy, driver: Driver, x0, horizon: float,
                  dt: float, rng, drift_free: bool = False) -> SdePath:
    """One path on a fixed grid (jump epochs inserted for CP drivers)."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    if horizon < dt:
        raise ParameterError("horizon must be at least dt")
    gen = _as_generator(rng)
    noise = _NoiseSource(driver, gen)
    extra = driver.path_drift()
    x = np.asarray(x0, dtype=float).copy()
    m = x.shape[0]
    steps = int(round(horizon / dt))
    grid = dt * np.arange(steps + 1)
    if driver.has_cp:
        from .levy_sources import sample_compound_poisson_path
        sched = sample_compound_poisson_path(driver.cp, grid[-1], gen)
    else:
        sched = None
    times, states, controls = [0.0], [x.copy()], [evaluate_policy(policy, x).copy()]
    jt, js = [], []
    ji = 0
    xs = x[None, :]
    for k in range(1, steps + 1):
        t0, t1 = grid[k - 1], grid[k]
        cur = t0
        while sched is not None and ji < len(sched) and sched.times[ji] <= t1:
            tau = sched.times[ji]
            xs = _euler_sub(xs, tau - cur, params, policy, extra, noise, drift_free)
            xs = xs + sched.jumps[ji]
            times.append(tau)
            states.append(xs[0].copy())
            controls.append(evaluate_policy(policy, xs[0]).copy())
            jt.append(tau)
            js.append(sched.jumps[ji])
            cur = tau
            ji += 1
        if t1 > cur:
            xs = _euler_sub(xs, t1 - cur, params, policy, extra, noise, drift_free)
            times.append(t1)
            states.append(xs[0].copy())
            controls.append(evaluate_policy(policy, xs[0]).copy())
        if not np.all(np.isfinite(xs)) or np.any(np.abs(xs) > OVERFLOW_LIMIT):
            raise SimulationOverflow(f"state {xs[0]} left the overflow guard at t={t1:.6g}",
                                     time=t1, state=xs[0].copy())
    times = np.asarray(times)
    # a jump landing exactly on a grid node would duplicate the node
    keep = np.concatenate([[True], np.diff(times) > 0])
    seed = (rng.seed, rng.stream_id) if isinstance(rng, RngStream) else ()
    return SdePath(times[keep], np.asarray(states)[keep], np.asarray(controls)[keep],
                   np.asarray(jt), np.asarray(js).reshape(-1, m), dt, seed)


def _euler_sub(xs, h, params, policy, extra, noise, drift_free):
    if h <= 0:
        return xs
    bx = 0.0 if drift_free else drift(xs, evaluate_policy(policy, xs), params) + extra
    return xs + bx * h + noise.continuous(h, 1)
