"""The ApproxLine abstract domain.

A state is a weighted union of line segments and boxes.  Segments are kept
in *chains*: a chain stores its ``m + 1`` nodes once and its ``m`` segment
weights, so consecutive segments share their endpoint exactly and every
shared node is transformed a single time.

Segments are propagated exactly (split at every ReLU sign change, then
mapped node-wise); boxes are propagated with interval arithmetic.  In
probabilistic mode a segment of weight ``w`` stands for ``w`` times the
uniform distribution on it and a box of weight ``w`` for *any* distribution
of mass ``w`` supported in the box.

Each chain node also carries ``params``, the input-path parameter it is the
image of.  It is bookkeeping only (used for exactness checks and reports);
no transformer reads it.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .network import Network, Reshape, Flatten
from .tensor import IntervalTensor, ShapeError, as_tensor, relu_box_arrays

SPLIT_EPS = 1e-12
WEIGHT_TOL = 1e-9
DEFAULT_REGION_BUDGET = 2_000_000


class Mode(enum.Enum):
    DETERMINISTIC = "deterministic"
    PROBABILISTIC = "probabilistic"


class BudgetExceeded(RuntimeError):
    """Region count went over ``RelaxConfig.region_budget``."""

    def __init__(self, layer_index: int, region_count: int, budget: int):
        self.layer_index = layer_index
        self.region_count = region_count
        self.budget = budget
        super().__init__(f"region budget {budget} exceeded at layer {layer_index}: {region_count} regions")


class AnalysisTimeout(RuntimeError):
    def __init__(self, layer_index: int):
        self.layer_index = layer_index
        super().__init__(f"deadline passed before layer {layer_index}")


@dataclass(frozen=True, eq=False)
class Segment:
    a: np.ndarray
    b: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        a, b = np.asarray(self.a, dtype=np.float64), np.asarray(self.b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(a.shape, b.shape, "segment endpoint")
        if self.weight < 0:
            raise ValueError("segment weight must be non-negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def length(self) -> float:
        return float(np.linalg.norm((self.b - self.a).ravel()))

    def point(self, alpha: float) -> np.ndarray:
        return self.a + alpha * (self.b - self.a)


@dataclass(frozen=True, eq=False)
class BoxRegion:
    box: IntervalTensor
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("box weight must be non-negative")
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def lower(self) -> np.ndarray:
        return self.box.lower

    @property
    def upper(self) -> np.ndarray:
        return self.box.upper


@dataclass(frozen=True, eq=False)
class Chain:
    """A polygonal chain: ``nodes[j]`` -> ``nodes[j + 1]`` is segment ``j``."""

    nodes: np.ndarray
    weights: np.ndarray
    params: np.ndarray | None = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if nodes.shape[0] < 2:
            raise ValueError("a chain needs at least two nodes")
        if weights.shape[0] != nodes.shape[0] - 1:
            raise ValueError(f"a chain of {nodes.shape[0]} nodes needs {nodes.shape[0] - 1} weights, "
                             f"got {weights.shape[0]}")
        params = self.params
        if params is None:
            params = np.linspace(0.0, 1.0, nodes.shape[0])
        params = np.asarray(params, dtype=np.float64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "params", params)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes.shape[1:]

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def segment_count(self) -> int:
        return self.nodes.shape[0] - 1

    def segments(self) -> list[Segment]:
        return [Segment(self.nodes[j], self.nodes[j + 1], self.weights[j]) for j in range(self.segment_count)]

    def lengths(self) -> np.ndarray:
        flat = self.nodes.reshape(self.node_count, -1)
        return np.linalg.norm(np.diff(flat, axis=0), axis=1)

    def map_nodes(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Chain":
        return Chain(fn(self.nodes), self.weights, self.params)

    def sub(self, start: int, stop: int) -> "Chain":
        """Segments ``start .. stop - 1`` as a chain of their own."""
        return Chain(self.nodes[start:stop + 1], self.weights[start:stop], self.params[start:stop + 1])


@dataclass(frozen=True, eq=False)
class AbstractState:
    chains: tuple[Chain, ...]
    boxes: tuple[BoxRegion, ...] = ()
    mode: Mode = Mode.PROBABILISTIC

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(self.chains))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        shapes = {c.shape for c in self.chains} | {b.box.shape for b in self.boxes}
        if len(shapes) > 1:
            raise ShapeError(next(iter(shapes)), sorted(shapes)[-1], "region")

    @property
    def shape(self) -> tuple[int, ...] | None:
        for c in self.chains:
            return c.shape
        for b in self.boxes:
            return b.box.shape
        return None

    @property
    def segment_count(self) -> int:
        return sum(c.segment_count for c in self.chains)

    @property
    def region_count(self) -> int:
        return self.segment_count + len(self.boxes)

    @property
    def total_weight(self) -> float:
        w = math.fsum(float(b.weight) for b in self.boxes)
        return w + math.fsum(math.fsum(c.weights) for c in self.chains)

    def segments(self) -> list[Segment]:
        return [s for c in self.chains for s in c.segments()]

    @property
    def regions(self) -> list[Segment | BoxRegion]:
        """Canonical order: chain segments in chain order, then boxes."""
        return [*self.segments(), *self.boxes]

    def replace(self, **changes) -> "AbstractState":
        return replace(self, **changes)


@dataclass(frozen=True)
class RelaxConfig:
    """Parameters of the relaxation heuristic.

    ``p`` is the length percentile above which a segment is never boxed,
    ``k`` the clustering parameter (a run covers at most ``t / k`` nodes of a
    ``t``-node chain), ``chain_threshold`` the chain size that triggers
    relaxation.  ``relax_before`` is ``"conv"`` (before convolutional layers)
    or ``"affine"`` (before every affine layer).
    """

    p: float = 0.0
    k: int = 100
    chain_threshold: int = 1000
    region_budget: int = DEFAULT_REGION_BUDGET
    relax_before: str = "conv"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.chain_threshold < 2:
            raise ValueError("chain_threshold must be at least 2")
        if self.region_budget < 1:
            raise ValueError("region_budget must be positive")
        if self.relax_before not in ("conv", "affine"):
            raise ValueError("relax_before must be 'conv' or 'affine'")
        object.__setattr__(self, "k", int(self.k))


EXACT = RelaxConfig(p=0.0)


# --- construction -----------------------------------------------------------

def init_segment(a, b, mode: Mode = Mode.PROBABILISTIC) -> AbstractState:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(a.shape, b.shape, "segment endpoint")
    return AbstractState((Chain(np.stack([a, b]), np.ones(1), np.array([0.0, 1.0])),), (), mode)


def init_chain(nodes: Sequence, weights: Sequence[float], mode: Mode = Mode.PROBABILISTIC) -> AbstractState:
    """Start from a weighted polygonal chain (e.g. a decoder's exact output)."""
    arrs = [as_tensor(n) for n in nodes]
    if len(arrs) < 2:
        raise ValueError("a chain needs at least two nodes")
    for n in arrs[1:]:
        if n.shape != arrs[0].shape:
            raise ShapeError(arrs[0].shape, n.shape, "chain node")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arrs) - 1,):
        raise ValueError(f"expected {len(arrs) - 1} weights, got {w.size}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = math.fsum(w)
    if mode is Mode.PROBABILISTIC and abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights must sum to 1 in probabilistic mode, got {total!r}")
    if total > 0:
        params = np.concatenate([[0.0], np.cumsum(w) / total])
        params[-1] = 1.0
    else:
        params = np.linspace(0.0, 1.0, len(arrs))
    return AbstractState((Chain(np.stack(arrs), w, params),), (), mode)


# --- segment-level operations -------------------------------------------------

def relu_crossings(seg: Segment) -> list[float]:
    """Sorted alphas in (0, 1) where some coordinate of ``seg`` changes sign.

    A coordinate equal to zero counts as non-negative, so touching the ReLU
    boundary at an endpoint produces no split.
    """
    a, b = seg.a.ravel(), seg.b.ravel()
    mask = (a < 0) != (b < 0)
    alphas = np.sort(a[mask] / (a[mask] - b[mask]))
    out: list[float] = []
    for alpha in alphas:
        if alpha <= SPLIT_EPS or alpha >= 1.0 - SPLIT_EPS:
            continue
        if out and alpha - out[-1] <= SPLIT_EPS:
            continue
        out.append(float(alpha))
    return out


def split_segment(seg: Segment, alphas: Sequence[float]) -> list[Segment]:
    """Cut ``seg`` at ``alphas``; each piece keeps its share of the weight."""
    alphas = [float(a) for a in alphas]
    if any(not 0.0 < a < 1.0 for a in alphas):
        raise ValueError("split points must lie strictly inside (0, 1)")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("split points must be strictly increasing")
    cuts = [0.0, *alphas, 1.0]
    points = [seg.a, *(seg.point(a) for a in alphas), seg.b]
    return [Segment(points[i], points[i + 1], seg.weight * (cuts[i + 1] - cuts[i]))
            for i in range(len(cuts) - 1)]


def relax_segment_to_box(seg: Segment) -> BoxRegion:
    return BoxRegion(IntervalTensor.from_bounds(np.minimum(seg.a, seg.b), np.maximum(seg.a, seg.b)), seg.weight)


def merge_boxes(boxes: Sequence[BoxRegion]) -> BoxRegion:
    if not boxes:
        raise ValueError("cannot merge an empty list of boxes")
    lo = np.min(np.stack([b.lower for b in boxes]), axis=0)
    hi = np.max(np.stack([b.upper for b in boxes]), axis=0)
    return BoxRegion(IntervalTensor.from_bounds(lo, hi), math.fsum(b.weight for b in boxes))


# --- transformers -------------------------------------------------------------

def _map_boxes(boxes: tuple[BoxRegion, ...], fn_center, fn_radius) -> tuple[BoxRegion, ...]:
    if not boxes:
        return ()
    c = fn_center(np.stack([b.box.center for b in boxes]))
    r = fn_radius(np.stack([b.box.radius for b in boxes]))
    return tuple(BoxRegion(IntervalTensor(ci, ri), b.weight) for ci, ri, b in zip(c, r, boxes))


def _check_input(state: AbstractState, shape) -> None:
    if state.shape is not None and tuple(state.shape) != tuple(shape):
        raise ShapeError(shape, state.shape, "state")


def propagate_affine(state: AbstractState, layer) -> AbstractState:
    """Map segment endpoints through the layer and boxes by interval arithmetic."""
    _check_input(state, layer.input_shape)
    chains = tuple(c.map_nodes(layer.apply) for c in state.chains)
    boxes = _map_boxes(state.boxes, layer.apply, layer.apply_abs)
    return state.replace(chains=chains, boxes=boxes)


def _reindex(state: AbstractState, layer) -> AbstractState:
    chains = tuple(c.map_nodes(layer.apply) for c in state.chains)
    boxes = _map_boxes(state.boxes, layer.apply, layer.apply)
    return state.replace(chains=chains, boxes=boxes)


def split_chain_at_relu(chain: Chain) -> Chain:
    """Insert a node wherever a segment crosses a ReLU boundary (no ReLU applied)."""
    m = chain.segment_count
    flat = chain.nodes.reshape(m + 1, -1)
    starts, ends = flat[:-1], flat[1:]
    seg, dim = np.nonzero((starts < 0) != (ends < 0))
    if seg.size == 0:
        return chain
    lo, hi = starts[seg, dim], ends[seg, dim]
    alpha = lo / (lo - hi)
    keep = (alpha > SPLIT_EPS) & (alpha < 1.0 - SPLIT_EPS)
    seg, alpha = seg[keep], alpha[keep]
    if seg.size == 0:
        return chain
    order = np.lexsort((alpha, seg))
    seg, alpha = seg[order], alpha[order]
    dup = np.zeros(seg.size, dtype=bool)
    dup[1:] = (seg[1:] == seg[:-1]) & (alpha[1:] - alpha[:-1] <= SPLIT_EPS)
    seg, alpha = seg[~dup], alpha[~dup]

    # every original segment contributes its start node (alpha = 0)
    all_seg = np.concatenate([np.arange(m), seg])
    all_alpha = np.concatenate([np.zeros(m), alpha])
    order = np.lexsort((all_alpha, all_seg))
    all_seg, all_alpha = all_seg[order], all_alpha[order]

    nxt = np.ones_like(all_alpha)
    same = all_seg[1:] == all_seg[:-1]
    nxt[:-1][same] = all_alpha[1:][same]
    frac = nxt - all_alpha

    step = ends - starts
    pts = starts[all_seg] + all_alpha[:, None] * step[all_seg]
    nodes = np.concatenate([pts, flat[-1:]]).reshape(-1, *chain.shape)
    p = chain.params
    params = np.concatenate([p[all_seg] + all_alpha * (p[all_seg + 1] - p[all_seg]), p[-1:]])
    return Chain(nodes, chain.weights[all_seg] * frac, params)


def propagate_relu(state: AbstractState) -> AbstractState:
    chains = tuple(split_chain_at_relu(c).map_nodes(lambda x: np.maximum(x, 0.0)) for c in state.chains)
    boxes = tuple(BoxRegion(IntervalTensor(*relu_box_arrays(b.box.center, b.box.radius)), b.weight)
                  for b in state.boxes)
    return state.replace(chains=chains, boxes=boxes)


def apply_layer(state: AbstractState, layer) -> AbstractState:
    if layer.affine:
        return propagate_affine(state, layer)
    if layer.kind == "relu":
        return propagate_relu(state)
    if isinstance(layer, (Reshape, Flatten)):
        return _reindex(state, layer)
    raise TypeError(f"unsupported layer kind {layer.kind!r}")


# --- relaxation ---------------------------------------------------------------

def relax_run(chain: Chain, start: int, stop: int) -> BoxRegion:
    """Bounding box of segments ``start .. stop - 1`` with their summed weight.

    Equal to boxing each segment and merging the boxes.
    """
    pts = chain.nodes[start:stop + 1]
    return BoxRegion(IntervalTensor.from_bounds(pts.min(axis=0), pts.max(axis=0)),
                     math.fsum(chain.weights[start:stop]))


def _relax_chain(chain: Chain, cfg: RelaxConfig) -> tuple[list[Chain], list[BoxRegion]]:
    lengths = chain.lengths()
    m = lengths.size
    cutoff = np.percentile(lengths, 100.0 * cfg.p)
    max_nodes = chain.node_count / cfg.k
    kept = np.zeros(m, dtype=bool)
    boxes: list[BoxRegion] = []
    i = 0
    while i < m:
        j = i
        # a run of r segments visits r + 1 distinct nodes
        while j < m and lengths[j] <= cutoff and (j - i + 2) <= max_nodes:
            j += 1
        if j > i:
            boxes.append(relax_run(chain, i, j))
        if j < m:
            kept[j] = True
        i = j + 1
    pieces = []
    idx = np.flatnonzero(kept)
    if idx.size:
        breaks = np.flatnonzero(np.diff(idx) > 1)
        for s, e in zip(np.concatenate([[0], breaks + 1]), np.concatenate([breaks, [idx.size - 1]])):
            pieces.append(chain.sub(int(idx[s]), int(idx[e]) + 1))
    return pieces, boxes


def relax_heuristic(state: AbstractState, cfg: RelaxConfig) -> AbstractState:
    """Box runs of short, adjacent segments in long chains.

    Chains with more than ``cfg.chain_threshold`` nodes are walked in order.
    A run boxes consecutive segments until the chain ends, the run would
    cover more than ``t / k`` nodes, or the next segment is strictly longer
    than the ``p``-th percentile of the chain's segment lengths.  The run is
    merged into a single box, the next segment is kept as a segment, and the
    walk restarts after it.  ``p == 0`` leaves the state untouched.
    """
    if cfg.p == 0.0:
        return state
    chains: list[Chain] = []
    boxes = list(state.boxes)
    for chain in state.chains:
        if chain.node_count <= cfg.chain_threshold:
            chains.append(chain)
            continue
        pieces, new_boxes = _relax_chain(chain, cfg)
        chains.extend(pieces)
        boxes.extend(new_boxes)
    return state.replace(chains=tuple(chains), boxes=tuple(boxes))


def _relax_here(layer, cfg: RelaxConfig) -> bool:
    if not getattr(layer, "affine", False):
        return False
    return cfg.relax_before == "affine" or layer.kind in ("conv2d", "conv_transpose2d")


def propagate_network(state: AbstractState, net: Network, cfg: RelaxConfig = EXACT, *,
                      deadline: float | None = None,
                      on_layer: Callable[[int, AbstractState], None] | None = None) -> AbstractState:
    """Push ``state`` through every layer of ``net``.

    The heuristic runs before each convolution (or each affine layer, per
    ``cfg.relax_before``).  ``deadline`` is a ``time.monotonic()`` value;
    ``on_layer(i, state)`` sees the state after layer ``i``.
    """
    _check_input(state, net.input_shape)
    if state.region_count > cfg.region_budget:
        raise BudgetExceeded(-1, state.region_count, cfg.region_budget)
    for i, layer in enumerate(net.layers):
        if deadline is not None and time.monotonic() > deadline:
            raise AnalysisTimeout(i)
        if cfg.p > 0.0 and _relax_here(layer, cfg):
            state = relax_heuristic(state, cfg)
        state = apply_layer(state, layer)
        if state.region_count > cfg.region_budget:
            raise BudgetExceeded(i, state.region_count, cfg.region_budget)
        if on_layer is not None:
            on_layer(i, state)
    return state


def bounding_box_state(state: AbstractState) -> AbstractState:
    """Relax a whole state into one box carrying the total weight."""
    boxes = [relax_run(c, 0, c.segment_count) for c in state.chains] + list(state.boxes)
    return state.replace(chains=(), boxes=(merge_boxes(boxes),))
