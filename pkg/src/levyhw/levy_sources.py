"""Random-variate generation for the noise sources.

Every sampler takes an :class:`RngStream`, a (seed, stream_id) address into a
counter-based Philox generator, so replications can be generated in any order
or on any worker and still reproduce bit-for-bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special


class ParameterError(ValueError):
    """Raised when a distribution is given parameters outside its domain."""


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ParameterError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self, substream: int = 0) -> np.random.Generator:
        """Fresh generator positioned at the start of ``substream``.

        The Philox key is (seed, stream_id); the substream index occupies the
        top word of the 256-bit counter, so substreams never overlap.
        """
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([0, 0, 0, substream], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def child(self, index: int) -> "RngStream":
        # distinct replications of the same experiment
        return RngStream(self.seed, (self.stream_id * 1_000_003 + index + 1) & _MASK64)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# ---------------------------------------------------------------------------
# symmetric alpha-stable


@lru_cache(maxsize=64)
def stable_levy_constant(alpha: float) -> float:
    """c_alpha = integral over R of (1 - cos s) |s|^(-1-alpha) ds.

    Computed by adaptive quadrature and checked against the closed form
    -2 Gamma(-alpha) cos(pi alpha / 2).
    """
    if not 0.0 < alpha < 2.0:
        raise ParameterError("c_alpha requires 0 < alpha < 2")
    # (1 - cos s)/s^2 is smooth; the weight s^(1-alpha) is handled by QAWS
    g = lambda s: 0.5 * np.sinc(s / (2.0 * np.pi)) ** 2
    head, _ = integrate.quad(g, 0.0, 1.0, weight="alg", wvar=(1.0 - alpha, 0.0),
                             epsabs=1e-14, epsrel=1e-12, limit=200)
    # tail: int_1^inf s^(-1-alpha) ds - int_1^inf cos(s) s^(-1-alpha) ds
    osc, _ = integrate.quad(lambda s: s ** (-1.0 - alpha), 1.0, np.inf, weight="cos", wvar=1.0,
                            epsabs=1e-13, limlst=100)
    numeric = 2.0 * (head + 1.0 / alpha - osc)
    closed = -2.0 * special.gamma(-alpha) * math.cos(math.pi * alpha / 2.0)
    if not math.isclose(numeric, closed, rel_tol=1e-8):
        raise ArithmeticError(f"c_alpha quadrature {numeric!r} disagrees with closed form {closed!r}")
    return numeric


def stable_scale_from_weight(xi, alpha: float) -> np.ndarray:
    """Map Levy-density weights xi (density xi |y|^(-1-alpha)) to stable scales."""
    xi = np.asarray(xi, dtype=float)
    return (xi * stable_levy_constant(alpha)) ** (1.0 / alpha)


@dataclass(frozen=True)
class StableSpec:
    alpha: float
    scale: float = 1.0
    gaussian_test_mode: bool = False  # permits alpha == 2 for Gaussian cross-checks

    def __post_init__(self):
        upper_ok = self.alpha < 2.0 or (self.gaussian_test_mode and self.alpha == 2.0)
        if not (self.alpha > 1.0 and upper_ok):
            raise ParameterError(f"stable index must lie in (1, 2), got {self.alpha}")
        if not self.scale > 0.0:
            raise ParameterError(f"stable scale must be positive, got {self.scale}")


def standard_stable(alpha: float, size, gen: np.random.Generator) -> np.ndarray:
    """Chambers-Mallows-Stuck draws with characteristic function exp(-|u|^alpha)."""
    v = gen.uniform(-0.5 * np.pi, 0.5 * np.pi, size=size)
    w = gen.standard_exponential(size=size)
    cv = np.cos(v)
    return (np.sin(alpha * v) / cv ** (1.0 / alpha)) * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha)


def sample_stable(spec: StableSpec, count: int, rng) -> np.ndarray:
    if count < 0:
        raise ParameterError("count must be nonnegative")
    gen = _as_generator(rng)
    return spec.scale * standard_stable(spec.alpha, count, gen)


# ---------------------------------------------------------------------------
# renewal arrival streams

RENEWAL_FAMILIES = ("pareto", "pareto_batch", "exponential", "deterministic")


@dataclass(frozen=True)
class RenewalSpec:
    """Renewal arrival stream with mean rate ``rate``.

    "pareto_batch" has Pareto(tail_index) gaps between epochs and an integer
    batch at every epoch: the stochastic rounding of a Pareto variable with the
    same index, scale (a-1)/a and mean 1. The right tail of the batches then
    balances the left tail that long gaps put on the centred counts, so the
    centred count process has a symmetric stable limit; the plain "pareto"
    family gives a totally skewed one.
    """

    family: str
    rate: float
    tail_index: float | None = None  # pareto only

    def __post_init__(self):
        if self.family not in RENEWAL_FAMILIES:
            raise ParameterError(f"unknown renewal family {self.family!r}")
        if not self.rate > 0.0:
            raise ParameterError("renewal rate must be positive")
        if self.family in ("pareto", "pareto_batch"):
            if self.tail_index is None or not self.tail_index > 1.0:
                raise ParameterError("pareto gaps need tail index > 1 (finite mean)")

    @property
    def pareto_floor(self) -> float:
        # survival (x0/x)^a on x >= x0 has mean a x0/(a-1) = 1/rate
        a = self.tail_index
        return (a - 1.0) / (a * self.rate)

    def gaps(self, size, gen: np.random.Generator) -> np.ndarray:
        if self.family == "deterministic":
            return np.full(size, 1.0 / self.rate)
        if self.family == "exponential":
            return gen.exponential(1.0 / self.rate, size=size)
        u = gen.random(size)
        return self.pareto_floor * (1.0 - u) ** (-1.0 / self.tail_index)

    def first_gap(self, size, gen: np.random.Generator) -> np.ndarray:
        """Delay with the equilibrium law, making the stream stationary from time 0."""
        if self.family == "deterministic":
            return gen.random(size) / self.rate
        if self.family == "exponential":
            return gen.exponential(1.0 / self.rate, size=size)
        a, x0 = self.tail_index, self.pareto_floor
        # density P(G > u)/E[G]: uniform on [0, x0] w.p. (a-1)/a, else Pareto(a-1) beyond x0
        low = gen.random(size) < (a - 1.0) / a
        u = gen.random(size)
        return np.where(low, x0 * u, x0 * (1.0 - u) ** (-1.0 / (a - 1.0)))

    def batch_sizes(self, size, gen: np.random.Generator) -> np.ndarray:
        if self.family != "pareto_batch":
            return np.ones(size, dtype=np.int64)
        a = self.tail_index
        y = (a - 1.0) / a * (1.0 - gen.random(size)) ** (-1.0 / a)
        base = np.floor(y)
        return (base + (gen.random(size) < y - base)).astype(np.int64)


def sample_renewal_arrivals(spec: RenewalSpec, horizon: float, rng, stationary: bool = False) -> np.ndarray:
    """Arrival epochs in (0, horizon], repeated by batch size for batch families.

    ``stationary`` draws the first gap from the equilibrium law.
    """
    if horizon < 0:
        raise ParameterError("horizon must be nonnegative")
    if spec.family == "deterministic" and not stationary:
        count = int(math.floor(horizon * spec.rate * (1.0 + 1e-12)))
        return np.arange(1, count + 1) / spec.rate
    gen = _as_generator(rng)
    chunks = []
    t = 0.0
    block = max(16, int(1.2 * horizon * spec.rate) + 16)
    first = True
    while True:
        g = spec.gaps(block, gen)
        if first and stationary:
            g[0] = spec.first_gap(1, gen)[0]
        first = False
        times = t + np.cumsum(g)
        chunks.append(times)
        if times[-1] > horizon:
            break
        t = times[-1]
    out = np.concatenate(chunks)
    out = out[out <= horizon]
    if spec.family == "pareto_batch":
        out = np.repeat(out, spec.batch_sizes(out.size, gen))
    return out


# ---------------------------------------------------------------------------
# compound Poisson


@dataclass(frozen=True)
class RadialLaw:
    """Law of the jump length along the support ray.

    kind: "point" (mass at ``r``), "exponential" (``mean``) or
    "pareto" (survival (scale/r)^theta on r >= scale).
    """

    kind: str
    r: float | None = None
    mean: float | None = None
    theta: float | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.kind == "point":
            if self.r is None or not self.r > 0:
                raise ParameterError("point radial law needs r > 0")
        elif self.kind == "exponential":
            if self.mean is None or not self.mean > 0:
                raise ParameterError("exponential radial law needs mean > 0")
        elif self.kind == "pareto":
            if self.theta is None or not self.theta > 0 or self.scale is None or not self.scale > 0:
                raise ParameterError("pareto radial law needs theta > 0 and scale > 0")
        else:
            raise ParameterError(f"unknown radial law {self.kind!r}")

    def sample(self, size, gen: np.random.Generator) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, float(self.r))
        if self.kind == "exponential":
            return gen.exponential(self.mean, size=size)
        return self.scale * (1.0 - gen.random(size)) ** (-1.0 / self.theta)

    @property
    def moment_cutoff(self) -> float:
        """sup of theta with a finite theta-th moment beyond the unit ball."""
        return float(self.theta) if self.kind == "pareto" else math.inf

    def partial_mean(self, lo: float, hi: float) -> float:
        """E[R; lo < R <= hi]; may be +inf."""
        if self.kind == "point":
            return self.r if lo < self.r <= hi else 0.0
        if self.kind == "exponential":
            m = self.mean
            f = lambda x: -(x + m) * math.exp(-x / m) if math.isfinite(x) else 0.0
            return f(hi) - f(max(lo, 0.0))
        a, s = self.theta, self.scale
        lo = max(lo, s)
        if hi <= lo:
            return 0.0
        if math.isinf(hi):
            if a <= 1.0:
                return math.inf
            return a * s**a * lo ** (1.0 - a) / (a - 1.0)
        if a == 1.0:
            return s * math.log(hi / lo)
        return a * s**a * (lo ** (1.0 - a) - hi ** (1.0 - a)) / (a - 1.0)

    def stop_loss(self, s: float) -> float:
        """E[(R - s)^+] for s >= 0; infinite when the mean is."""
        if self.kind == "point":
            return max(self.r - s, 0.0)
        if self.kind == "exponential":
            return self.mean * math.exp(-s / self.mean)
        a, c = self.theta, self.scale
        if a <= 1.0:
            return math.inf
        if s < c:
            return a * c / (a - 1.0) - s
        return c**a * s ** (1.0 - a) / (a - 1.0)

    def pdf(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "exponential":
            return np.where(r >= 0, np.exp(-r / self.mean) / self.mean, 0.0)
        if self.kind == "pareto":
            a, s = self.theta, self.scale
            return np.where(r >= s, a * s**a * r ** (-a - 1.0), 0.0)
        raise ValueError("point law has no density")


@dataclass(frozen=True)
class CPMeasureSpec:
    nu: float
    direction: np.ndarray
    radial: RadialLaw
    vartheta: np.ndarray = field(default=None)

    def __post_init__(self):
        w = np.asarray(self.direction, dtype=float)
        if self.nu < 0:
            raise ParameterError("jump rate nu must be nonnegative")
        if w.ndim != 1 or not math.isclose(float(np.linalg.norm(w)), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ParameterError("jump direction must be a unit vector")
        object.__setattr__(self, "direction", w)
        th = np.zeros_like(w) if self.vartheta is None else np.asarray(self.vartheta, dtype=float)
        if th.shape != w.shape:
            raise ParameterError("vartheta must have the same dimension as the direction")
        object.__setattr__(self, "vartheta", th)

    @property
    def m(self) -> int:
        return self.direction.shape[0]

    def validate_ray_support(self, mu) -> float:
        """Return <e, M^-1 w>; raise if it is not positive."""
        val = float(np.sum(self.direction / np.asarray(mu, dtype=float)))
        if not val > 0:
            raise ParameterError(f"ray-support condition <e, M^-1 w> > 0 fails ({val:.4g})")
        return val

    def small_jump_mean(self) -> np.ndarray:
        """Integral of y over the unit ball under the Levy measure."""
        return self.nu * self.radial.partial_mean(-math.inf, 1.0) * self.direction


@dataclass
class JumpSchedule:
    times: np.ndarray
    jumps: np.ndarray  # (count, m)

    def __len__(self):
        return self.times.shape[0]


def sample_compound_poisson_path(spec: CPMeasureSpec, horizon: float, rng) -> JumpSchedule:
    """Jump epochs and jump vectors on [0, horizon]; the drift is not included."""
    if horizon < 0:
        raise ParameterError("horizon must be nonnegative")
    gen = _as_generator(rng)
    count = int(gen.poisson(spec.nu * horizon)) if spec.nu > 0 else 0
    times = np.sort(gen.uniform(0.0, horizon, size=count))
    radii = spec.radial.sample(count, gen)
    return JumpSchedule(times, radii[:, None] * spec.direction[None, :])
