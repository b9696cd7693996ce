"""Multiclass G/M/n+M queue in the modified Halfin-Whitt regime.

The event engine advances a batch of independent replications in lockstep,
one event per replication per step, so statistics over 10^4 replications are
cheap. Scheduling is fully preemptive: after every event the queue vector is
re-solved from the target (<e,x> - n) v(x^) by :func:`schedule_action`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from .levy_sources import RenewalSpec, RngStream, _as_generator, stable_levy_constant, standard_stable
from .sde_model import ControlPolicy, DriftParams, Driver, euler_ensemble, evaluate_policy


class QueueInvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueueParams:
    """lam: first-order rates with <e, lam/mu> = 1; lam^n = n lam + n^(1/alpha) ell."""

    n: int
    lam: np.ndarray
    ell: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    alpha: float = 1.5
    family: tuple = ("pareto_batch",)
    no_arrivals: bool = False  # test mode: lam^n = 0

    def __post_init__(self):
        for name in ("lam", "ell", "mu", "gamma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        m = self.lam.shape[0]
        if any(getattr(self, k).shape != (m,) for k in ("ell", "mu", "gamma")):
            raise ValueError("lam, ell, mu, gamma must share one dimension")
        fam = tuple(self.family)
        if len(fam) == 1:
            fam = fam * m
        if len(fam) != m:
            raise ValueError("one interarrival family per class")
        object.__setattr__(self, "family", fam)
        if self.n < 1:
            raise ValueError("need at least one server")
        if not 1.0 < self.alpha < 2.0:
            raise ValueError("alpha must lie in (1, 2)")
        if np.any(self.mu <= 0) or np.any(self.gamma < 0) or np.any(self.lam <= 0):
            raise ValueError("need lam > 0, mu > 0, gamma >= 0")
        if not math.isclose(float(np.sum(self.rho)), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"<e, rho> must equal 1, got {np.sum(self.rho):.6g}")
        if not self.no_arrivals and np.any(self.lam_n <= 0):
            raise ValueError("scaled arrival rates lam^n must be positive")

    @property
    def m(self):
        return self.lam.shape[0]

    @property
    def rho(self):
        return self.lam / self.mu

    @property
    def scale(self):
        return self.n ** (1.0 / self.alpha)

    @property
    def lam_n(self):
        return self.n * self.lam + self.scale * self.ell

    def renewal(self, i) -> RenewalSpec:
        tail = self.alpha if self.family[i] in ("pareto", "pareto_batch") else None
        return RenewalSpec(self.family[i], float(self.lam_n[i]), tail)

    def with_n(self, n):
        return QueueParams(n, self.lam, self.ell, self.mu, self.gamma, self.alpha, self.family, self.no_arrivals)

    def limit_drift(self) -> DriftParams:
        return DriftParams(self.ell, self.mu, self.gamma)

    def hat(self, x):
        """Diffusion scaling n^(-1/alpha) (x - rho n)."""
        return (np.asarray(x, dtype=float) - self.rho * self.n) / self.scale

    def unhat(self, xhat):
        """Nearest lattice state to rho n + n^(1/alpha) xhat (nonnegative)."""
        return np.maximum(np.rint(self.rho * self.n + self.scale * np.asarray(xhat, dtype=float)), 0).astype(np.int64)


# ---------------------------------------------------------------------------
# scheduling


@dataclass(frozen=True)
class _Lattice:
    n: int
    rho: np.ndarray
    alpha: float

    @classmethod
    def of(cls, n, m, params=None, rho=None, alpha=1.5):
        if params is not None:
            return cls(n, params.rho, params.alpha)
        return cls(n, np.full(m, 1.0 / m) if rho is None else np.asarray(rho, dtype=float), alpha)

    def hat(self, x):
        return (np.asarray(x, dtype=float) - self.rho * self.n) / self.n ** (1.0 / self.alpha)


def _targets(x, lat, policy: ControlPolicy):
    x = np.asarray(x, dtype=np.int64)
    total = x.sum(axis=-1)
    qtot = np.maximum(total - lat.n, 0)
    v = evaluate_policy(policy, lat.hat(x))
    return qtot, qtot[..., None] * v


def _round_queue(x, qtot, target, tie_tol=1e-9):
    """argmin |q - target| over integer 0 <= q <= x with sum q = qtot, lexicographically smallest.

    Batched over leading axis. Water-filling finds the continuous shift c with
    sum min(target + c, x) = qtot; flooring gives a feasible lower bound that the
    unit-by-unit greedy completes (marginal cost 2(q - t) + 1, ties to the
    largest index so that earlier coordinates stay small).
    """
    x = np.atleast_2d(x).astype(np.int64)
    t = np.atleast_2d(target).astype(float)
    qtot = np.atleast_1d(qtot).astype(np.int64)
    lo = np.zeros(x.shape[0])
    hi = np.maximum((x - t).max(axis=1), 0.0) + 1.0
    for _ in range(64):
        c = 0.5 * (lo + hi)
        s = np.minimum(t + c[:, None], x).sum(axis=1)
        big = s > qtot
        hi = np.where(big, c, hi)
        lo = np.where(big, lo, c)
    q = np.clip(np.floor(t + lo[:, None] - 1e-9), 0, x).astype(np.int64)
    rem = qtot - q.sum(axis=1)
    m = x.shape[1]
    rev = np.arange(m)[::-1]
    while np.any(rem > 0):
        rows = np.nonzero(rem > 0)[0]
        cost = 2.0 * (q[rows] - t[rows]) + 1.0
        cost = np.where(q[rows] < x[rows], cost, np.inf)
        best = cost.min(axis=1, keepdims=True)
        tie = cost <= best + tie_tol
        # largest tied index
        pick = m - 1 - np.argmax(tie[:, rev], axis=1)
        q[rows, pick] += 1
        rem[rows] -= 1
    if np.any(rem < 0):
        raise QueueInvariantError("queue rounding overshot")
    return q


def schedule_action(x, n: int, policy: ControlPolicy, params: QueueParams | None = None, rho=None,
                    alpha: float = 1.5):
    """(Z, Q) for state x: no queue when <e,x> <= n, else the rounded target queue.

    The policy is evaluated at the scaled state, which needs rho and alpha
    (taken from ``params`` when given; rho defaults to e/m).
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    if np.any(x < 0):
        raise ValueError("state must be nonnegative")
    lat = _Lattice.of(n, x.shape[1], params, rho, alpha)
    qtot, target = _targets(x, lat, policy)
    q = _round_queue(x, qtot, target)
    z = x - q
    return (z[0], q[0]) if single else (z, q)


def schedule_brute_force(x, n, policy: ControlPolicy, params: QueueParams | None = None, rho=None,
                         alpha: float = 1.5, tie_tol=1e-9):
    """Enumeration oracle for schedule_action (small queue totals only)."""
    x = np.asarray(x, dtype=np.int64)
    m = x.shape[0]
    qtot, target = _targets(x[None, :], _Lattice.of(n, m, params, rho, alpha), policy)
    qtot, target = int(qtot[0]), target[0]
    if qtot == 0:
        return x.copy(), np.zeros(m, dtype=np.int64)
    best, best_q = math.inf, None
    ranges = [range(0, min(int(x[i]), qtot) + 1) for i in range(m - 1)]
    for head in itertools.product(*ranges):  # lexicographic order
        last = qtot - sum(head)
        if last < 0 or last > x[-1]:
            continue
        q = np.array(head + (last,), dtype=np.int64)
        d = float(np.sum((q - target) ** 2))
        if d < best - tie_tol:
            best, best_q = d, q
    return x - best_q, best_q


def approx_bound_check(n: int, policy: ControlPolicy, params: QueueParams, samples: int = 1000,
                       radius_factor: float = 0.5, rng=None, states=None):
    """Max over lattice states of |<e,x^> U^n(x^) - <e,x^> v(x^)| (queue part), against n^(-1/alpha).

    States are uniform in the ball of radius radius_factor * n^(1 - 1/alpha)
    around rho n in scaled units, rounded to the lattice.
    """
    params = params.with_n(n)
    lat = _Lattice.of(n, params.m, params)
    if states is None:
        gen = _as_generator(rng if rng is not None else RngStream(0, n))
        r = radius_factor * n ** (1.0 - 1.0 / params.alpha)
        d = gen.standard_normal((samples, params.m))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = d * (r * gen.random(samples) ** (1.0 / params.m))[:, None]
        states = params.unhat(pts)
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    qtot, target = _targets(states, lat, policy)
    q = _round_queue(states, qtot, target)
    dev = np.linalg.norm(q - target, axis=1) / params.scale
    bound = n ** (-1.0 / params.alpha)
    return {"n": n, "max_deviation": float(dev.max()), "median_deviation": float(np.median(dev)),
            "bound": bound, "holds": bool(dev.max() <= bound * (1 + 1e-12)), "samples": int(states.shape[0])}


# ---------------------------------------------------------------------------
# event simulation

EVENT_ARRIVAL, EVENT_SERVICE, EVENT_ABANDON = 0, 1, 2


@dataclass
class QueueState:
    X: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    clock: np.ndarray

    def check(self, n):
        """Balance, work conservation and nonnegativity; raises on failure."""
        if np.any(self.X != self.Q + self.Z):
            raise QueueInvariantError("X != Q + Z")
        if np.any(self.Q < 0) or np.any(self.Z < 0):
            raise QueueInvariantError("negative queue or service count")
        if np.any(self.Z.sum(axis=-1) != np.minimum(self.X.sum(axis=-1), n)):
            raise QueueInvariantError("work conservation violated")


@dataclass
class ScaledPath:
    times: np.ndarray
    xhat: np.ndarray          # (len(times), m) for one replication

    def __post_init__(self):
        if not np.all(np.isfinite(self.xhat)):
            raise ValueError("scaled path must be finite")


@dataclass
class QueueRun:
    params: QueueParams
    checkpoints: np.ndarray
    X: np.ndarray             # (len(checkpoints), R, m) unscaled states at checkpoints
    events: int
    invariant_checks: int
    arrivals_after: np.ndarray
    waits_after: np.ndarray
    log: list | None = None

    @property
    def xhat(self):
        return self.params.hat(self.X)

    def scaled_path(self, replication=0):
        if self.log is None:
            raise ValueError("run was not recorded; pass record=True")
        t = np.array([e[0] for e in self.log if e[5] == replication])
        x = np.array([e[3] for e in self.log if e[5] == replication])
        return ScaledPath(t, self.params.hat(x))


class _Gaps:
    """Pre-drawn interarrival blocks, one column per (replication, class)."""

    def __init__(self, params, reps, gen, block=64):
        self.specs = [params.renewal(i) for i in range(params.m)]
        self.gen, self.block, self.reps = gen, block, reps
        self._refill()

    def _refill(self):
        self.buf = np.stack([s.gaps((self.block, self.reps), self.gen) for s in self.specs], axis=-1)
        self.batch = np.stack([s.batch_sizes((self.block, self.reps), self.gen) for s in self.specs], axis=-1)
        self.pos = np.zeros((self.reps, len(self.specs)), dtype=np.int64)

    def first(self):
        return np.stack([s.first_gap(self.reps, self.gen) for s in self.specs], axis=1)

    def take(self, rows, cls):
        """(gap, batch size) for each (row, class) pair."""
        p = self.pos[rows, cls]
        if np.any(p >= self.block):
            # rare: refill everything; keeps the draw order deterministic
            self._refill()
            p = self.pos[rows, cls]
        out = self.buf[p, rows, cls], self.batch[p, rows, cls]
        self.pos[rows, cls] += 1
        return out


def simulate_queue(params: QueueParams, policy: ControlPolicy, horizon: float, rng, x0=None,
                   replications: int = 1, checkpoints=None, record: bool = False, check: bool = True,
                   burn_in: float = 0.0, max_events: int | None = None) -> QueueRun:
    """Exact event simulation of ``replications`` independent systems on [0, horizon].

    x0: unscaled initial state (default rho n rounded). Checkpoints default to
    [horizon]. ``record`` keeps an event log (t, type, class, X, Q/Z, replication)
    in memory; use it for short runs only. Arrivals after ``burn_in`` are counted
    together with how many of them found all servers busy.
    """
    m, n, R = params.m, params.n, replications
    gen = _as_generator(rng)
    cps = np.array([horizon] if checkpoints is None else sorted(checkpoints), dtype=float)
    if cps.size == 0 or cps[-1] > horizon:
        raise ValueError("checkpoints must lie in [0, horizon]")
    x_init = params.unhat(np.zeros(m)) if x0 is None else np.asarray(x0, dtype=np.int64)
    X = np.tile(x_init, (R, 1)).astype(np.int64)
    clock = np.zeros(R)
    gaps = _Gaps(params, R, gen)
    rows_all = np.arange(R)
    if params.no_arrivals:
        next_arr = np.full((R, m), np.inf)
    else:
        next_arr = gaps.first()
    out = np.empty((cps.size, R, m), dtype=np.int64)
    cp_idx = np.zeros(R, dtype=np.int64)
    active = np.ones(R, dtype=bool)
    arrivals_after = np.zeros(R, dtype=np.int64)
    waits_after = np.zeros(R, dtype=np.int64)
    events = checks = 0
    log = [] if record else None
    mu, gamma = params.mu, params.gamma

    while np.any(active):
        rows = np.nonzero(active)[0]
        x = X[rows]
        z, q = schedule_action(x, n, policy, params)
        if check:
            QueueState(x, q, z, clock[rows]).check(n)
            checks += rows.size
        rates = np.concatenate([mu * z, gamma * q], axis=1)
        total = rates.sum(axis=1)
        with np.errstate(divide="ignore"):
            t_exp = clock[rows] + gen.standard_exponential(rows.size) / total
        ia = np.argmin(next_arr[rows], axis=1)
        t_arr = next_arr[rows, ia]
        t_next = np.minimum(t_exp, t_arr)
        # checkpoints passed before the next event see the current state
        while True:
            pend = cp_idx[rows] < cps.size
            hit = pend & (t_next > cps[np.minimum(cp_idx[rows], cps.size - 1)])
            if not np.any(hit):
                break
            r_hit = rows[hit]
            out[cp_idx[r_hit], r_hit] = X[r_hit]
            cp_idx[r_hit] += 1
        done = t_next > horizon
        active[rows[done]] = False
        go = ~done
        if max_events is not None and events >= max_events:
            # leave the rest at their current state
            for r in rows[go]:
                out[cp_idx[r]:, r] = X[r]
            break
        rows, t_next, t_exp, t_arr, ia = rows[go], t_next[go], t_exp[go], t_arr[go], ia[go]
        rates, total, x = rates[go], total[go], X[rows]
        if rows.size == 0:
            continue
        events += rows.size
        clock[rows] = t_next
        is_arr = t_arr <= t_exp
        etype = np.full(rows.size, EVENT_ARRIVAL)
        ecls = ia.copy()
        if np.any(is_arr):
            ra, ca = rows[is_arr], ia[is_arr]
            late = t_next[is_arr] > burn_in
            arrivals_after[ra] += late
            waits_after[ra] += late & (x[is_arr].sum(axis=1) >= n)
            gap, size = gaps.take(ra, ca)
            X[ra, ca] += size
            next_arr[ra, ca] += gap
        ex = ~is_arr
        if np.any(ex):
            re = rows[ex]
            u = gen.random(re.size) * total[ex]
            ch = np.minimum((np.cumsum(rates[ex], axis=1) < u[:, None]).sum(axis=1), 2 * m - 1)
            X[re, ch % m] -= 1
            etype[ex] = np.where(ch < m, EVENT_SERVICE, EVENT_ABANDON)
            ecls[ex] = ch % m
        if record:
            for k, r in enumerate(rows):
                log.append((float(t_next[k]), int(etype[k]), int(ecls[k]), X[r].copy(), None, int(r)))
    return QueueRun(params, cps, out, events, checks, arrivals_after, waits_after, log)


def erlang_c(n: int, lam: float, mu: float) -> float:
    """Probability that an arrival waits in M/M/n."""
    a = lam / mu
    if not a < n:
        raise ValueError("Erlang C needs lam < n mu")
    terms = [a**k / math.factorial(k) for k in range(n)]
    tail = a**n / math.factorial(n) * n / (n - a)
    return tail / (sum(terms) + tail)


# ---------------------------------------------------------------------------
# integral map


@dataclass
class JumpPath:
    """x(t) = x0 + drift t + sum of jumps at times <= t."""

    x0: np.ndarray
    drift: np.ndarray
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jump_sizes: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.drift = np.broadcast_to(np.asarray(self.drift, dtype=float), self.x0.shape).copy()
        self.jump_times = np.asarray(self.jump_times, dtype=float)
        if self.jump_sizes is None:
            self.jump_sizes = np.zeros((self.jump_times.size, self.x0.size))
        self.jump_sizes = np.asarray(self.jump_sizes, dtype=float).reshape(self.jump_times.size, self.x0.size)
        order = np.argsort(self.jump_times, kind="stable")
        self.jump_times, self.jump_sizes = self.jump_times[order], self.jump_sizes[order]

    def __call__(self, t):
        k = np.searchsorted(self.jump_times, t, side="right")
        return self.x0 + self.drift * t + self.jump_sizes[:k].sum(axis=0)


class DivergenceError(ArithmeticError):
    pass


def integral_map(x: JumpPath, h, dt: float, horizon: float, tol: float = 1e-10, limit: float = 1e12):
    """Solve y(t) = x(t) + int_0^t h(y(s)) ds on a grid of spacing dt.

    Writes y = x + w with w' = h(x + w), integrated by RK4 with step doubling
    between the jumps of x. Returns (times, y) with y right-continuous at jumps.
    """
    grid = np.arange(0.0, horizon + 0.5 * dt, dt)
    grid[-1] = min(grid[-1], horizon)
    breaks = np.unique(np.concatenate([grid, x.jump_times[(x.jump_times > 0) & (x.jump_times < horizon)]]))
    w = np.zeros_like(x.x0)
    ys = {0.0: x(0.0) + w}
    f = lambda t, w: np.asarray(h(x(t) + w), dtype=float)

    def rk4(t, w, s):
        # x is continuous on [t, t+s) once jumps are breakpoints; evaluate just inside
        k1 = f(t, w)
        k2 = f(t + s / 2, w + s / 2 * k1)
        k3 = f(t + s / 2, w + s / 2 * k2)
        tt = np.nextafter(t + s, t) if s > 0 else t
        k4 = f(tt, w + s * k3)
        return w + s / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    for a, b in zip(breaks[:-1], breaks[1:]):
        t, s = a, b - a
        while t < b:
            s = min(s, b - t)
            one = rk4(t, w, s)
            two = rk4(t + s / 2, rk4(t, w, s / 2), s / 2)
            err = float(np.max(np.abs(one - two)))
            if err > tol * (1.0 + float(np.max(np.abs(two)))) and s > 1e-12 * max(1.0, b):
                s /= 2
                continue
            w = two + (two - one) / 15.0
            t = t + s
            if not np.all(np.isfinite(w)) or float(np.max(np.abs(w))) > limit:
                raise DivergenceError(f"integral map diverged near t = {t}")
            s *= 2
        ys[float(b)] = x(b) + w
    times = grid
    return times, np.array([ys[float(t)] for t in times])


# ---------------------------------------------------------------------------
# FCLT comparison


@lru_cache(maxsize=8)
def _stable_iqr(alpha: float) -> float:
    gen = np.random.Generator(np.random.Philox(key=12345))
    z = standard_stable(alpha, 2_000_000, gen)
    q1, q3 = np.quantile(z, [0.25, 0.75])
    return float(q3 - q1)


def calibrate_xi(params: QueueParams, reps: int = 20000, rng=None) -> np.ndarray:
    """Stable weights xi_i matching the spread of n^(-1/alpha)(A^n_i(1) - lam^n_i).

    The spread is the interquartile range; the weight maps to the stable scale
    by scale = (xi c_alpha)^(1/alpha).
    """
    gen = _as_generator(rng if rng is not None else RngStream(0, 99))
    out = np.empty(params.m)
    for i in range(params.m):
        spec = params.renewal(i)
        counts = np.zeros(reps, dtype=np.int64)
        t = spec.first_gap(reps, gen)
        alive = t <= 1.0
        counts[alive] += spec.batch_sizes(int(alive.sum()), gen)
        while np.any(alive):
            idx = np.nonzero(alive)[0]
            t[idx] += spec.gaps(idx.size, gen)
            arrived = t[idx] <= 1.0
            counts[idx[arrived]] += spec.batch_sizes(int(arrived.sum()), gen)
            alive[idx[~arrived]] = False
        a = (counts - spec.rate) / params.scale
        q1, q3 = np.quantile(a, [0.25, 0.75])
        sigma = (q3 - q1) / _stable_iqr(params.alpha)
        out[i] = sigma**params.alpha / stable_levy_constant(params.alpha)
    return out


def energy_distance(a, b, max_points=2000, seed=0):
    """Multivariate energy distance on (sub)samples."""
    gen = np.random.default_rng(seed)
    a = a[gen.permutation(len(a))[:max_points]]
    b = b[gen.permutation(len(b))[:max_points]]
    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def fclt_compare(base: QueueParams, ns, policy: ControlPolicy, horizon: float, replications: int, rng: RngStream,
                 x0=None, xi=None, sde_dt: float = 1e-3, chunk: int = 2000):
    """Per-n KS and energy distances between X^n(T) (scaled) and the limit SDE X(T).

    The SDE uses the same ell, mu, gamma, alpha, symmetric stable noise with
    weights xi (calibrated at the largest n unless given), and starts at the
    scaled lattice initial state of each n.
    """
    x0 = np.zeros(base.m) if x0 is None else np.asarray(x0, dtype=float)
    ns = list(ns)
    if xi is None:
        xi = calibrate_xi(base.with_n(max(ns)), rng=rng.child(10_000))
    xi = np.asarray(xi, dtype=float)
    driver = Driver.stable(base.alpha, xi)
    results = []
    for k, n in enumerate(ns):
        p = base.with_n(n)
        init = p.unhat(x0)
        xs = []
        for c0 in range(0, replications, chunk):
            run = simulate_queue(p, policy, horizon, rng.child(2 * k * 1000 + c0 // chunk), x0=init,
                                 replications=min(chunk, replications - c0), check=False)
            xs.append(run.xhat[-1])
        qh = np.concatenate(xs)
        start = np.tile(p.hat(init), (replications, 1))
        sde, aborted = euler_ensemble(p.limit_drift(), policy, driver, start, None, sde_dt,
                                      rng.child(2 * k * 1000 + 999), checkpoints=[horizon],
                                      abort_on_overflow=True)
        sde = sde[0][~aborted]
        ks = [float(stats.ks_2samp(qh[:, i], sde[:, i]).statistic) for i in range(p.m)]
        results.append({"n": n, "ks": ks, "median_ks": float(np.median(ks)),
                        "energy": energy_distance(qh, sde), "replications": replications})
    return {"xi": xi.tolist(), "per_n": results}
