"""Independent reference estimators built only on concrete ``forward`` calls.

* ``grid_probability``: midpoint-rule estimate on a regular grid of the path.
* ``refined_grid_probability``: the same grid plus bisection on every cell
  where the outcome flips, which locates the boundaries to ~1e-13.
* ``sample_probability``: uniform sampling with Clopper-Pearson intervals.

Clopper-Pearson endpoints are found by bisection on exact binomial tail
sums (log-space terms, summed outward from the tail boundary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .certify import OutputProperty
from .network import Network
from .tensor import ShapeError, as_tensor

CHUNK = 1 << 16


@dataclass(frozen=True, eq=False)
class Path:
    """A polygonal input path parameterised by probability mass in [0, 1]."""

    nodes: np.ndarray
    params: np.ndarray

    @classmethod
    def segment(cls, a, b) -> "Path":
        a, b = as_tensor(a), as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(a.shape, b.shape, "segment endpoint")
        return cls(np.stack([a, b]), np.array([0.0, 1.0]))

    @classmethod
    def chain(cls, nodes: Sequence, weights: Sequence[float]) -> "Path":
        w = np.asarray(weights, dtype=np.float64)
        params = np.concatenate([[0.0], np.cumsum(w) / w.sum()])
        params[-1] = 1.0
        return cls(np.stack([as_tensor(n) for n in nodes]), params)

    def points(self, alphas: np.ndarray) -> np.ndarray:
        alphas = np.asarray(alphas, dtype=np.float64)
        m = self.nodes.shape[0] - 1
        j = np.clip(np.searchsorted(self.params, alphas, side="right") - 1, 0, m - 1)
        span = self.params[j + 1] - self.params[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(span > 0, (alphas - self.params[j]) / span, 0.0)
        shape = (-1,) + (1,) * (self.nodes.ndim - 1)
        start, end = self.nodes[j], self.nodes[j + 1]
        return start + local.reshape(shape) * (end - start)


def _as_path(path) -> Path:
    if isinstance(path, Path):
        return path
    a, b = path
    return Path.segment(a, b)


def indicator(path, net: Network, prop: OutputProperty, alphas: np.ndarray) -> np.ndarray:
    path = _as_path(path)
    out = np.empty(len(alphas), dtype=bool)
    for s in range(0, len(alphas), CHUNK):
        ys = net.forward_batch(path.points(alphas[s:s + CHUNK]))
        out[s:s + CHUNK] = prop.holds_batch(ys)
    return out


def grid_probability(path, net: Network, prop: OutputProperty, resolution: int) -> float:
    """Fraction of midpoints ``(i + 0.5) / resolution`` whose output satisfies ``prop``."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    alphas = (np.arange(resolution) + 0.5) / resolution
    return float(np.count_nonzero(indicator(path, net, prop, alphas))) / resolution


def refined_grid_probability(path, net: Network, prop: OutputProperty, resolution: int = 10_000,
                             iterations: int = 60) -> float:
    """Grid estimate with each observed boundary located by bisection.

    Assumes at most one boundary inside any grid cell; a cell whose two
    ends agree is taken to be constant.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    edges = np.arange(resolution + 1) / resolution
    sat = indicator(path, net, prop, edges)
    cell = 1.0 / resolution
    flips = np.flatnonzero(sat[:-1] != sat[1:])
    total = cell * np.count_nonzero(sat[:-1] & sat[1:])
    if flips.size:
        lo, hi = edges[flips].copy(), edges[flips + 1].copy()
        left = sat[flips]
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            same = indicator(path, net, prop, mid) == left
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        boundary = 0.5 * (lo + hi)
        total += np.sum(np.where(left, boundary - edges[flips], edges[flips + 1] - boundary))
    return float(total)


# --- Clopper-Pearson ---------------------------------------------------------------

@lru_cache(maxsize=64)
def _log_choose(n: int, k0: int, k1: int) -> np.ndarray:
    """log C(n, k) for k in [k0, k1]."""
    base = math.lgamma(n + 1)
    return np.array([base - math.lgamma(k + 1) - math.lgamma(n - k + 1) for k in range(k0, k1 + 1)])


def _pmf_sum(n: int, k0: int, k1: int, p: float) -> float:
    if k0 > k1:
        return 0.0
    if p <= 0.0:
        return 1.0 if k0 == 0 else 0.0
    if p >= 1.0:
        return 1.0 if k1 == n else 0.0
    ks = np.arange(k0, k1 + 1)
    logs = _log_choose(n, k0, k1) + ks * math.log(p) + (n - ks) * math.log1p(-p)
    return float(np.sum(np.exp(logs)))


def _window(n: int) -> int:
    # terms past ~20 standard deviations from the boundary are below 1e-80
    return int(10 * math.sqrt(n)) + 100


def binom_sf(n: int, s: int, p: float) -> float:
    """P(X >= s) for X ~ Binomial(n, p)."""
    if s <= 0:
        return 1.0
    if s > n:
        return 0.0
    w = _window(n)
    if s >= n * p:
        return min(_pmf_sum(n, s, min(n, s + w), p), 1.0)
    return max(1.0 - _pmf_sum(n, max(0, s - 1 - w), s - 1, p), 0.0)


def binom_cdf(n: int, s: int, p: float) -> float:
    """P(X <= s) for X ~ Binomial(n, p)."""
    if s < 0:
        return 0.0
    if s >= n:
        return 1.0
    if s < n * p:
        return min(_pmf_sum(n, max(0, s - _window(n)), s, p), 1.0)
    return max(1.0 - binom_sf(n, s + 1, p), 0.0)


def _bisect(fn, lo: float, hi: float, target: float, increasing: bool, tol: float = 1e-15) -> float:
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if (fn(mid) < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clopper_pearson(n: int, s: int, confidence: float = 0.9999) -> tuple[float, float]:
    """Two-sided exact binomial interval for ``s`` successes out of ``n``.

    ``lo`` solves P(X >= s; lo) = tail and ``hi`` solves P(X <= s; hi) = tail,
    with tail = (1 - confidence) / 2.
    """
    if n < 1 or not 0 <= s <= n:
        raise ValueError(f"need n >= 1 and 0 <= s <= n, got n={n}, s={s}")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    tail = 0.5 * (1.0 - confidence)
    lo = 0.0 if s == 0 else _bisect(lambda p: binom_sf(n, s, p), 0.0, s / n, tail, increasing=True)
    hi = 1.0 if s == n else _bisect(lambda p: binom_cdf(n, s, p), s / n, 1.0, tail, increasing=False)
    return lo, hi


@dataclass(frozen=True)
class SamplingReport:
    samples: int
    successes: int
    confidence: float
    interval: tuple[float, float]
    target_width: float
    seed: int = 0

    @property
    def estimate(self) -> float:
        return self.successes / self.samples

    @property
    def width(self) -> float:
        return self.interval[1] - self.interval[0]


def sample_probability(path, net: Network, prop: OutputProperty, confidence: float = 0.9999,
                       target_width: float = 0.002, seed: int = 0, initial: int = 64,
                       max_samples: int = 1 << 24) -> SamplingReport:
    """Two-phase sampling estimate.

    Phase one doubles the sample count from ``initial`` until the interval is
    narrower than ``target_width``.  That result is discarded and ``n`` fresh
    samples are drawn for the reported interval.
    """
    if target_width <= 0:
        raise ValueError("target_width must be positive")
    path = _as_path(path)
    first, second = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    n, hits = 0, 0
    grow = initial
    while True:
        hits += int(np.count_nonzero(indicator(path, net, prop, first.random(grow))))
        n += grow
        lo, hi = clopper_pearson(n, hits, confidence)
        if hi - lo < target_width or n >= max_samples:
            break
        grow = n
    fresh = int(np.count_nonzero(indicator(path, net, prop, second.random(n))))
    return SamplingReport(n, fresh, confidence, clopper_pearson(n, fresh, confidence), target_width, seed)
