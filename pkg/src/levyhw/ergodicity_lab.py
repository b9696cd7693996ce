"""Empirical ergodicity measurements: stationary ensembles, histogram TV, rate fits, tail indices."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .levy_sources import RngStream, _as_generator
from .lyapunov_cert import psi
from .sde_model import ControlPolicy, DriftParams, Driver, EffectiveParams, euler_ensemble, evaluate_policy


class FitError(ValueError):
    pass


@dataclass
class ModelConfig:
    params: DriftParams
    policy: ControlPolicy
    driver: Driver
    dt: float = 0.02
    x0: np.ndarray | None = None

    @property
    def m(self):
        return self.params.m

    def start(self, n):
        x0 = np.zeros(self.m) if self.x0 is None else np.asarray(self.x0, dtype=float)
        return np.tile(x0, (n, 1))


@dataclass
class EnsembleSnapshot:
    times: np.ndarray
    states: np.ndarray        # (len(times), N, m)
    config_hash: str = ""
    seed: tuple = ()
    aborted: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.states.ndim != 3 or self.states.shape[0] != self.times.shape[0]:
            raise ValueError("states must have shape (len(times), N, m)")

    @property
    def n(self):
        return self.states.shape[1]

    def pooled(self):
        return self.states.reshape(-1, self.states.shape[-1])


def simulate_ensemble(config: ModelConfig, times, n, rng, x0=None, abort_on_overflow=True):
    """Independent Euler paths from x0 sampled at ``times``; overflowing paths are dropped."""
    start = config.start(n) if x0 is None else np.tile(np.asarray(x0, dtype=float), (n, 1))
    out, aborted = euler_ensemble(config.params, config.policy, config.driver, start, None, config.dt,
                                  rng, checkpoints=list(times), abort_on_overflow=abort_on_overflow)
    keep = ~aborted
    seed = (rng.seed, rng.stream_id) if isinstance(rng, RngStream) else ()
    return EnsembleSnapshot(np.asarray(times, dtype=float), out[:, keep], seed=seed, aborted=int(aborted.sum()))


def stationary_sample(config: ModelConfig, burn_in: float, n: int, thinning: float, rng,
                      per_replication: int = 2, verified: bool | None = None,
                      consistency_threshold: float = 0.05) -> EnsembleSnapshot:
    """About ``n`` approximately stationary states.

    Each replication contributes ``per_replication`` states spaced ``thinning``
    apart after ``burn_in``. The states from the earliest and latest checkpoints
    are compared by histogram TV; if they differ by more than
    max(threshold, 2 * floor) the snapshot is flagged as non-stationary.
    """
    if per_replication < 1:
        raise ValueError("per_replication must be at least 1")
    reps = max(2, -(-n // per_replication))
    times = burn_in + thinning * np.arange(per_replication)
    snap = simulate_ensemble(config, times, reps, rng)
    flat = snap.pooled()
    # self-consistency: first vs last checkpoint of independent replications (or halves)
    if per_replication >= 2:
        a, b = snap.states[0], snap.states[-1]
    else:
        half = snap.n // 2
        a, b = snap.states[0, :half], snap.states[0, half:]
    floor = estimator_floor(a, n_split=min(len(a), len(b)))
    tv, _ = empirical_tv(a, b)
    warn = []
    if verified is False:
        warn.append("no verified drift condition for this configuration")
    if snap.aborted:
        warn.append(f"{snap.aborted} replications aborted on overflow")
    ok = tv <= max(consistency_threshold, 2.0 * floor)
    if not ok:
        warn.append(f"self-consistency TV {tv:.3f} above threshold; sample may not be stationary")
    out = EnsembleSnapshot(times[:1], flat[None, :n], seed=snap.seed, aborted=snap.aborted,
                           diagnostics={"self_tv": tv, "floor": floor, "stationary_ok": bool(ok),
                                        "warnings": warn, "checkpoints": times.tolist()})
    return out


# ---------------------------------------------------------------------------
# total variation


@dataclass(frozen=True)
class Binning:
    """Shared histogram grid; widths=None means Scott's rule on the pooled sample."""

    clip: float = 50.0
    widths: tuple | None = None
    scott_factor: float = 3.49

    def resolve(self, pooled):
        if self.widths is not None:
            return np.asarray(self.widths, dtype=float)
        c = np.clip(pooled, -self.clip, self.clip)
        sd = c.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return self.scott_factor * sd * pooled.shape[0] ** (-1.0 / 3.0)

    def describe(self, widths):
        return {"clip": self.clip, "widths": [float(w) for w in widths], "rule": "scott" if self.widths is None else "fixed"}


def _cell_index(s, widths, clip):
    nb = np.ceil(2 * clip / widths).astype(np.int64)
    idx = np.zeros(s.shape[0], dtype=np.int64)
    for j in range(s.shape[1]):
        k = np.floor((s[:, j] + clip) / widths[j]).astype(np.int64) + 1
        k = np.clip(k, 0, nb[j] + 1)  # 0 and nb+1 are the overflow cells
        idx = idx * (nb[j] + 2) + k
    return idx


def _tv_hist(a, b, widths, clip):
    ia, ib = _cell_index(a, widths, clip), _cell_index(b, widths, clip)
    cells, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
    pa = np.bincount(inv[:ia.size], minlength=cells.size) / ia.size
    pb = np.bincount(inv[ia.size:], minlength=cells.size) / ib.size
    return 0.5 * float(np.abs(pa - pb).sum())


def _as_samples(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("empty sample")
    return x


def empirical_tv(a, b, binning: Binning | None = None, return_binning=False):
    """Histogram total variation between two samples, with a split-half error estimate.

    This is a lower bound on the TV of the underlying laws up to sampling noise,
    since binning merges mass.
    """
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples have different dimensions")
    binning = binning or Binning()
    widths = binning.resolve(np.concatenate([a, b]))
    tv = _tv_hist(a, b, widths, binning.clip)
    if a.shape[0] >= 4:
        h = a.shape[0] // 2
        halves = [_tv_hist(a[:h], b, widths, binning.clip), _tv_hist(a[h:], b, widths, binning.clip)]
        err = abs(halves[0] - halves[1]) / 2.0
    else:
        err = math.nan
    if return_binning:
        return tv, err, binning.describe(widths)
    return tv, err


def estimator_floor(reference, n_split=None, binning: Binning | None = None, seed=0):
    """TV between two disjoint random halves of a sample from one law."""
    ref = _as_samples(reference)
    perm = np.random.default_rng(seed).permutation(ref.shape[0])
    half = ref.shape[0] // 2 if n_split is None else min(n_split, ref.shape[0] // 2)
    return empirical_tv(ref[perm[:half]], ref[perm[half:2 * half]], binning)[0]


@dataclass
class TvCurve:
    times: np.ndarray
    tv: np.ndarray
    err: np.ndarray
    floor: float = 0.0
    binning: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.tv = np.asarray(self.tv, dtype=float)
        self.err = np.asarray(self.err, dtype=float) if self.err is not None else np.zeros_like(self.tv)
        if np.any((self.tv < 0) | (self.tv > 1)):
            raise ValueError("TV values must lie in [0, 1]")


def tv_decay_curve(config: ModelConfig, x0, times, n, rng, reference, binning: Binning | None = None) -> TvCurve:
    """TV(P_t(x0, .), reference) at each time; the floor uses reference halves of size n."""
    ref = reference.pooled() if isinstance(reference, EnsembleSnapshot) else _as_samples(reference)
    snap = simulate_ensemble(config, times, n, rng, x0=x0)
    binning = binning or Binning()
    tvs, errs, desc = [], [], {}
    for s in snap.states:
        tv, err, desc = empirical_tv(s, ref, binning, return_binning=True)
        tvs.append(tv)
        errs.append(err)
    floor = estimator_floor(ref, n_split=min(n, ref.shape[0] // 2), binning=binning)
    return TvCurve(snap.times, np.array(tvs), np.array(errs), floor, desc)


# ---------------------------------------------------------------------------
# rate fits


@dataclass
class RateFit:
    slope: float
    intercept: float
    r2: float
    used_times: list
    excluded_times: list
    stderr: float
    flags: list = field(default_factory=list)

    @property
    def exponent(self):
        return self.slope

    @property
    def rate(self):
        return -self.slope

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2, "stderr": self.stderr,
                "used_times": self.used_times, "excluded_times": self.excluded_times, "flags": self.flags}


def _line_fit(x, y):
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise FitError("fit needs at least two distinct times")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    syy = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / syy if syy > 0 else 1.0
    dof = x.size - 2
    se = math.sqrt(float(np.sum(resid**2)) / dof / sxx) if dof > 0 else math.nan
    return slope, intercept, r2, se


def _censor(curve: TvCurve, floor_factor, min_points):
    keep = (curve.tv > floor_factor * curve.floor) & (curve.tv > 0)
    if keep.sum() < min_points:
        raise FitError(f"only {int(keep.sum())} curve points above {floor_factor} x floor; need {min_points}")
    return keep


def fit_polynomial_rate(curve: TvCurve, floor_factor: float = 2.0, min_points: int = 2) -> RateFit:
    """Least-squares log TV = c + slope log t over points clear of the estimator floor."""
    keep = _censor(curve, floor_factor, min_points)
    slope, icpt, r2, se = _line_fit(np.log(curve.times[keep]), np.log(curve.tv[keep]))
    flags = [] if keep.sum() >= 4 else ["fewer than 4 points above the floor"]
    return RateFit(slope, icpt, r2, curve.times[keep].tolist(), curve.times[~keep].tolist(), se, flags)


def fit_exponential_rate(curve: TvCurve, floor_factor: float = 2.0, min_points: int = 2,
                         min_r2: float = 0.9) -> RateFit:
    """Semilog fit log TV = c - gamma t; a poor R^2 is flagged as model mismatch."""
    keep = _censor(curve, floor_factor, min_points)
    slope, icpt, r2, se = _line_fit(curve.times[keep], np.log(curve.tv[keep]))
    flags = [] if r2 >= min_r2 else [f"poor semilog fit (R^2 = {r2:.3f})"]
    return RateFit(slope, icpt, r2, curve.times[keep].tolist(), curve.times[~keep].tolist(), se, flags)


# ---------------------------------------------------------------------------
# tails


@dataclass
class HillResult:
    index: float
    ci: tuple
    asymptotic_se: float
    k: int
    sweep: dict
    stable: bool
    flags: list

    def to_dict(self):
        return {"index": self.index, "ci": list(self.ci), "asymptotic_se": self.asymptotic_se, "k": self.k,
                "sweep": {str(k): v for k, v in self.sweep.items()}, "stable": self.stable, "flags": self.flags}


def _hill(x, k):
    top = -np.partition(-x, k)[:k + 1]
    top = np.sort(top)[::-1]
    logs = np.log(top[:k]) - math.log(top[k])
    mean = float(logs.mean())
    if mean <= 0:
        raise FitError("degenerate sample: top order statistics coincide")
    return 1.0 / mean


def hill_tail_index(values, k: int | None = None, n_boot: int = 100, rng=None,
                    level: float = 0.95, ratio_limit: float = 1.25) -> HillResult:
    """Hill estimator of the tail index from the top k order statistics.

    Also returns a bootstrap CI and a k-sweep {k/4, k/2, k, 2k}; if the
    estimates across the sweep differ by more than ``ratio_limit`` the result
    is flagged as having no stable tail index.
    """
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 10:
        raise FitError("insufficient data for a tail index")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("Hill estimator needs finite positive values")
    if k is None:
        k = int(x.size ** (2.0 / 3.0))
    if not 1 <= k < x.size / 2:
        raise ValueError("k must satisfy 1 <= k < n/2")
    est = _hill(x, k)
    gen = np.random.default_rng(0) if rng is None else _as_generator(rng)
    boots = np.array([_hill(x[gen.integers(0, x.size, x.size)], k) for _ in range(n_boot)]) if n_boot else np.array([est])
    q = (1.0 - level) / 2.0
    ci = (float(np.quantile(boots, q)), float(np.quantile(boots, 1 - q)))
    sweep = {}
    for kk in sorted({max(1, k // 4), max(1, k // 2), k, min(2 * k, (x.size - 1) // 2)}):
        sweep[kk] = _hill(x, kk)
    vals = np.array(list(sweep.values()))
    stable = bool(vals.max() / vals.min() <= ratio_limit)
    flags = [] if stable else ["no stable tail index: estimate drifts with k"]
    return HillResult(est, ci, est / math.sqrt(k), k, sweep, stable, flags)


def survival_slope(values, lo_count: int = 100, hi_count: int = 1000):
    """Log-log slope of the empirical survival over one decade of exceedance counts."""
    x = np.sort(np.asarray(values, dtype=float).ravel())[::-1]
    if x.size < hi_count + 1:
        raise FitError("not enough values for the survival slope")
    ranks = np.arange(lo_count, hi_count + 1)
    s = ranks / x.size
    vals = x[ranks - 1]
    if np.any(vals <= 0):
        raise FitError("survival slope needs positive values in the fitted range")
    return _line_fit(np.log(vals), np.log(s))[0]


@dataclass
class TailStatistic:
    projection: np.ndarray
    smooth: np.ndarray

    @classmethod
    def from_states(cls, states, mu):
        proj = np.asarray(states, dtype=float) @ (1.0 / np.asarray(mu, dtype=float))
        if not np.all(np.isfinite(proj)):
            raise ValueError("non-finite projection values")
        return cls(proj, 1.0 + psi(proj)[0])

    @property
    def positive_part(self):
        return self.projection[self.projection > 0]

    def hill(self, k=None, **kw) -> HillResult:
        """Hill index of the plus-part sample.

        Zeros count toward the sample size, so the default k is N^(2/3) with N
        the full sample; only the top k+1 values need to be positive.
        """
        pos = self.positive_part
        if k is None:
            k = int(self.projection.size ** (2.0 / 3.0))
        if pos.size <= 2 * k:
            raise FitError(f"only {pos.size} positive values for k={k}")
        return hill_tail_index(pos, k=k, **kw)


# ---------------------------------------------------------------------------
# stationary identity


class PreconditionError(ValueError):
    pass


@dataclass
class IdentityReport:
    beta_tilde: float
    sample_mean: float
    ci: tuple
    n: int
    passed: bool

    def to_dict(self):
        return {"beta_tilde": self.beta_tilde, "sample_mean": self.sample_mean, "ci": list(self.ci),
                "n": self.n, "within_ci": self.passed}


def stationary_identity_check(sample, effective: EffectiveParams, params: DriftParams,
                              policy: ControlPolicy, n_batches: int = 20) -> IdentityReport:
    """Compare beta~ with the sample mean of <e,X>^- under the stationary law."""
    x = sample.pooled() if isinstance(sample, EnsembleSnapshot) else _as_samples(sample)
    if not effective.beta_tilde > 0:
        raise PreconditionError("effective spare capacity is not positive: no invariant measure expected")
    if not effective.large_jump_mean_finite:
        raise PreconditionError("the jump law has no finite first moment: no invariant measure expected")
    u = evaluate_policy(policy, x)
    if np.any(np.abs(params.gamma[None, :] * u) > 0):
        raise PreconditionError("identity needs Gamma v(x) = 0 on the sample")
    neg = np.maximum(-x.sum(axis=1), 0.0)
    batches = np.array_split(neg, n_batches)
    means = np.array([b.mean() for b in batches])
    mean = float(neg.mean())
    se = float(means.std(ddof=1) / math.sqrt(n_batches))
    ci = (mean - 1.96 * se, mean + 1.96 * se)
    return IdentityReport(effective.beta_tilde, mean, ci, int(neg.size),
                          bool(ci[0] <= effective.beta_tilde <= ci[1]))
