"""Output properties, deterministic certification and probability bounds.

Every property is a conjunction of strict linear constraints ``c . y + d > 0``;
a point exactly on a constraint boundary does not satisfy it.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .domain import (AbstractState, AnalysisTimeout, BoxRegion, BudgetExceeded, Mode, RelaxConfig,
                     Segment, bounding_box_state, init_segment, propagate_network)
from .network import Network, forward, read_json, vector_from_json
from .tensor import ShapeError, as_tensor

EXACT_MASS = "exact-mass"
COARSE = "coarse-indicator"
METHODS = (EXACT_MASS, COARSE)
DEFAULT_TIMEOUT = 60.0


# --- properties ---------------------------------------------------------------

class OutputProperty:
    """Base class; subclasses describe the safe output set as linear constraints."""

    def constraints(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(C, d)`` with the property equivalent to ``C @ y + d > 0``."""
        raise NotImplementedError

    def holds(self, y) -> bool:
        y = np.asarray(y, dtype=np.float64).ravel()
        C, d = self.constraints(y.size)
        return bool(np.all(C @ y + d > 0))

    def holds_batch(self, ys: np.ndarray) -> np.ndarray:
        ys = ys.reshape(ys.shape[0], -1)
        C, d = self.constraints(ys.shape[1])
        return np.all(ys @ C.T + d > 0, axis=1)


def _check_index(i: int, n: int) -> None:
    if not 0 <= i < n:
        raise ShapeError((f"index < {n}",), (i,), "property output index")


@dataclass(frozen=True)
class ArgmaxIs(OutputProperty):
    target: int

    def constraints(self, n):
        _check_index(self.target, n)
        others = [j for j in range(n) if j != self.target]
        C = np.zeros((len(others), n))
        C[:, self.target] = 1.0
        C[np.arange(len(others)), others] = -1.0
        return C, np.zeros(len(others))

    def __str__(self):
        return f"argmax:{self.target}"


@dataclass(frozen=True)
class SignIs(OutputProperty):
    index: int
    sign: int = 1

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    def constraints(self, n):
        _check_index(self.index, n)
        C = np.zeros((1, n))
        C[0, self.index] = float(self.sign)
        return C, np.zeros(1)

    def __str__(self):
        return f"sign:{self.index}:{'+' if self.sign > 0 else '-'}"


@dataclass(frozen=True, eq=False)
class LinearAnd(OutputProperty):
    """``coeffs[j] . y + offsets[j] > 0`` for every conjunct ``j``."""

    coeffs: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.coeffs, dtype=np.float64))
        d = np.asarray(self.offsets, dtype=np.float64).reshape(-1)
        if C.shape[0] != d.size:
            raise ValueError("need one offset per conjunct")
        object.__setattr__(self, "coeffs", C.reshape(C.shape[0], -1))
        object.__setattr__(self, "offsets", d)

    def constraints(self, n):
        if self.coeffs.shape[1] != n:
            raise ShapeError((self.coeffs.shape[1],), (n,), "property dimension")
        return self.coeffs, self.offsets

    def __str__(self):
        return f"linear[{self.coeffs.shape[0]}]"


def as_linear(prop: OutputProperty, n: int) -> LinearAnd:
    return LinearAnd(*prop.constraints(n))


def parse_property(text: str) -> OutputProperty:
    """Parse ``argmax:<t>``, ``sign:<i>:<+|->`` or ``linear:<file>``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "argmax":
            return ArgmaxIs(int(rest))
        if kind == "sign":
            idx, _, sgn = rest.partition(":")
            if sgn not in ("+", "-"):
                raise ValueError("sign must be '+' or '-'")
            return SignIs(int(idx), 1 if sgn == "+" else -1)
    except ValueError as exc:
        raise ValueError(f"bad property {text!r}: {exc}") from None
    if kind == "linear":
        return load_linear_property(rest)
    raise ValueError(f"unknown property {text!r}; expected argmax:<t>, sign:<i>:<+|->, linear:<file>")


def load_linear_property(path) -> LinearAnd:
    doc = read_json(path)
    items = doc.get("conjuncts") if isinstance(doc, dict) else None
    if not items:
        raise ValueError(f"{path}: expected a non-empty 'conjuncts' list")
    coeffs = [vector_from_json(item["c"]).ravel() for item in items]
    return LinearAnd(np.stack(coeffs), [float(item.get("d", 0.0)) for item in items])


# --- region tests ---------------------------------------------------------------

def _box_margins(box: BoxRegion, C, d) -> tuple[np.ndarray, np.ndarray]:
    """Per-conjunct min and max of ``C y + d`` over the box."""
    c, r = box.box.center.ravel(), box.box.radius.ravel()
    mid = C @ c + d
    spread = np.abs(C) @ r
    return mid - spread, mid + spread


def _box_inside(box, C, d) -> bool:
    return bool(np.all(_box_margins(box, C, d)[0] > 0))


def _box_may_intersect(box, C, d) -> bool:
    return not bool(np.any(_box_margins(box, C, d)[1] <= 0))


def _satisfying_intervals(starts: np.ndarray, ends: np.ndarray, C, d) -> tuple[np.ndarray, np.ndarray]:
    """For each segment, the open alpha-interval (lo, hi) where all conjuncts hold.

    Each conjunct is affine in alpha, so the satisfying set is an interval;
    this equals splitting at every conjunct crossing and classifying each
    piece by its midpoint.
    """
    f0 = starts @ C.T + d                       # (m, q) value at alpha = 0
    slope = (ends - starts) @ C.T               # (m, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = -f0 / slope
    lo = np.where(slope > 0, root, -np.inf)
    hi = np.where(slope < 0, root, np.inf)
    dead = (slope == 0) & (f0 <= 0)
    lo = np.where(dead, np.inf, lo).max(axis=1)
    hi = np.where(dead, -np.inf, hi).min(axis=1)
    return lo, hi


def _chain_arrays(state: AbstractState):
    for chain in state.chains:
        flat = chain.nodes.reshape(chain.node_count, -1)
        yield chain, flat[:-1], flat[1:]


@dataclass
class Verdict:
    verified: bool
    witness: Segment | BoxRegion | None = None

    def __bool__(self):
        return self.verified


def _output_dim(state: AbstractState) -> int:
    shape = state.shape
    return int(np.prod(shape)) if shape is not None else 0


def certify_deterministic(state: AbstractState, prop: OutputProperty) -> Verdict:
    """Check that every region lies in the (open) safe set."""
    n = _output_dim(state)
    C, d = prop.constraints(n)
    for chain, starts, ends in _chain_arrays(state):
        vals = np.concatenate([starts, ends[-1:]]) @ C.T + d
        bad = ~np.all(vals > 0, axis=1)
        if np.any(bad):
            # node j closes segment j - 1 (node 0 opens segment 0)
            j = max(int(np.argmax(bad)) - 1, 0)
            return Verdict(False, Segment(chain.nodes[j], chain.nodes[j + 1], chain.weights[j]))
    for box in state.boxes:
        if not _box_inside(box, C, d):
            return Verdict(False, box)
    return Verdict(True)


@dataclass
class ProbBound:
    lower: float
    upper: float
    method: str = EXACT_MASS
    region_count: int = 0
    runtime: float = 0.0
    status: str = "ok"
    attempts: int = 1

    def __post_init__(self):
        # clamp float noise of order 1e-16 into [0, 1]
        self.lower = min(max(float(self.lower), 0.0), 1.0)
        self.upper = min(max(float(self.upper), 0.0), 1.0)
        if self.lower > self.upper:
            if self.lower - self.upper > 1e-9:
                raise ValueError(f"lower bound {self.lower} above upper bound {self.upper}")
            self.lower = self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @classmethod
    def unknown(cls, status: str, method: str = EXACT_MASS, runtime: float = 0.0, **kw) -> "ProbBound":
        return cls(0.0, 1.0, method, runtime=runtime, status=status, **kw)


def prob_bounds(state: AbstractState, prop: OutputProperty, method: str = EXACT_MASS) -> ProbBound:
    """Guaranteed bounds on the probability that the output satisfies ``prop``.

    ``exact-mass`` counts the satisfying fraction of every segment exactly
    and uses subset / possible-intersection tests for boxes.  ``coarse-indicator``
    treats segments all-or-nothing like boxes.
    """
    if state.mode is not Mode.PROBABILISTIC:
        raise ValueError("probability bounds need a probabilistic-mode state")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    t0 = time.perf_counter()
    C, d = prop.constraints(_output_dim(state))
    lower_terms, upper_terms = [], []
    for chain, starts, ends in _chain_arrays(state):
        lo, hi = _satisfying_intervals(starts, ends, C, d)
        if method == EXACT_MASS:
            frac = np.clip(np.minimum(hi, 1.0) - np.maximum(lo, 0.0), 0.0, 1.0)
            mass = chain.weights * frac
            lower_terms.append(mass)
            upper_terms.append(mass)
        else:
            inside = (lo < 0.0) & (hi > 1.0)
            meets = (lo < hi) & (lo < 1.0) & (hi > 0.0)
            lower_terms.append(chain.weights[inside])
            upper_terms.append(chain.weights[meets])
    for box in state.boxes:
        if _box_inside(box, C, d):
            lower_terms.append([box.weight])
        if _box_may_intersect(box, C, d):
            upper_terms.append([box.weight])
    lower = math.fsum(np.concatenate(lower_terms)) if lower_terms else 0.0
    upper = math.fsum(np.concatenate(upper_terms)) if upper_terms else 0.0
    return ProbBound(lower, upper, method, state.region_count, time.perf_counter() - t0)


# --- end-to-end analyses --------------------------------------------------------

def box_baseline(state: AbstractState, net: Network, prop: OutputProperty) -> ProbBound:
    """Pure interval arithmetic from the bounding box of ``state``."""
    t0 = time.perf_counter()
    out = propagate_network(bounding_box_state(state), net)
    pb = prob_bounds(out.replace(mode=Mode.PROBABILISTIC), prop, COARSE)
    return replace(pb, method="interval", runtime=time.perf_counter() - t0)


def interval_baseline(a, b, net: Network, prop: OutputProperty) -> ProbBound:
    return box_baseline(init_segment(a, b), net, prop)


def analyze(state: AbstractState, net: Network, prop: OutputProperty, cfg: RelaxConfig,
            method: str = EXACT_MASS, deadline: float | None = None) -> ProbBound:
    t0 = time.perf_counter()
    out = propagate_network(state, net, cfg, deadline=deadline)
    pb = prob_bounds(out, prop, method)
    return replace(pb, runtime=time.perf_counter() - t0)


def sign_target(y: float) -> int:
    """Sign used for the consistency target; zero counts as negative."""
    return 1 if y > 0 else -1


def consistency_job(e1, e2, decoder: Network, detector: Network, i: int, method: str = EXACT_MASS):
    """Return ``job(cfg, deadline) -> ProbBound`` for one (pair, attribute) item."""
    net = decoder.then(detector)
    e1, e2 = as_tensor(e1), as_tensor(e2)
    n_out = int(np.prod(net.output_shape))
    if not 0 <= i < n_out:
        raise ShapeError((f"index < {n_out}",), (i,), "attribute index")
    target = sign_target(float(forward(net, e1).ravel()[i]))
    prop = SignIs(i, target)
    state = init_segment(e1, e2)

    def job(cfg: RelaxConfig, deadline: float | None = None) -> ProbBound:
        return analyze(state, net, prop, cfg, method, deadline)

    job.network, job.prop = net, prop
    return job


def attribute_consistency(e1, e2, decoder: Network, detector: Network, i: int, cfg: RelaxConfig,
                          method: str = EXACT_MASS, deadline: float | None = None) -> ProbBound:
    """Bounds on Pr[sign detector(decoder(e))_i == sign at e1] for e uniform on [e1, e2]."""
    return consistency_job(e1, e2, decoder, detector, i, method)(cfg, deadline)


# --- refinement schedules ---------------------------------------------------------

SCHEDULE_P_FACTOR = {"A": 1.5, "B": 3.0}


def coarsen(cfg: RelaxConfig, schedule: str) -> RelaxConfig:
    """Next configuration after a budget failure under schedule A or B."""
    factor = SCHEDULE_P_FACTOR[schedule.upper()]
    return replace(cfg, p=min(factor * cfg.p, 1.0), k=max(math.ceil(0.95 * cfg.k), 5))


def schedule_sequence(cfg: RelaxConfig, schedule: str, n: int) -> list[RelaxConfig]:
    out = [cfg]
    for _ in range(n - 1):
        out.append(coarsen(out[-1], schedule))
    return out


def refine_with_schedule(job: Callable[[RelaxConfig, float | None], ProbBound], schedule: str | None,
                         cfg0: RelaxConfig, timeout: float | None = DEFAULT_TIMEOUT,
                         clock: Callable[[], float] = time.monotonic) -> ProbBound:
    """Run ``job`` and coarsen ``(p, k)`` after each budget failure.

    The timeout covers all attempts.  Failures come back as the bound
    ``[0, 1]`` with status ``"timeout"`` or ``"budget"``; the budget status
    is also returned once the schedule stops changing the configuration.
    """
    start = clock()
    deadline = None if timeout is None else start + timeout
    cfg, attempts = cfg0, 0
    while True:
        attempts += 1
        try:
            pb = job(cfg, deadline)
            if deadline is not None and clock() > deadline:
                return ProbBound.unknown("timeout", pb.method, clock() - start, attempts=attempts)
            return replace(pb, runtime=clock() - start, attempts=attempts)
        except AnalysisTimeout:
            return ProbBound.unknown("timeout", runtime=clock() - start, attempts=attempts)
        except BudgetExceeded as exc:
            nxt = coarsen(cfg, schedule) if schedule else cfg
            if nxt == cfg:
                return ProbBound.unknown("budget", runtime=clock() - start, attempts=attempts,
                                         region_count=exc.region_count)
            cfg = nxt
            if deadline is not None and clock() > deadline:
                return ProbBound.unknown("timeout", runtime=clock() - start, attempts=attempts)


def average_consistency(pairs: Sequence[tuple], attrs: Sequence[int], decoder: Network, detector: Network,
                        cfg: RelaxConfig, *, method: str = EXACT_MASS, schedule: str | None = None,
                        timeout: float | None = DEFAULT_TIMEOUT, workers: int = 1) -> ProbBound:
    """Mean of per-(pair, attribute) bounds; failed items count as ``[0, 1]``."""
    if not pairs or not attrs:
        raise ValueError("need at least one pair and one attribute")
    items = [(e1, e2, i) for e1, e2 in pairs for i in attrs]

    def run(item):
        e1, e2, i = item
        return refine_with_schedule(consistency_job(e1, e2, decoder, detector, i, method), schedule, cfg, timeout)

    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]
    return ProbBound(math.fsum(r.lower for r in results) / len(results),
                     math.fsum(r.upper for r in results) / len(results),
                     method, sum(r.region_count for r in results), time.perf_counter() - t0,
                     "ok" if all(r.status == "ok" for r in results) else "partial")
