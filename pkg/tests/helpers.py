"""Random fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from approxline.certify import ArgmaxIs
from approxline.domain import AbstractState
from approxline.network import Dense, Network, ReLU


def random_mlp(rng: np.random.Generator, dims: list[int], scale: float = 1.0) -> Network:
    """Dense/ReLU stack with the given widths; no ReLU after the last layer."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, scale / np.sqrt(n_in), size=(n_out, n_in))
        layers.append(Dense(w, rng.normal(0.0, 0.3, size=n_out)))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return Network((dims[0],), tuple(layers))


def random_instance(seed: int):
    """Small network (2-4 affine layers, widths 2-16), a segment and an argmax property."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(2, 5))
    dims = [int(d) for d in rng.integers(2, 17, size=depth + 1)]
    net = random_mlp(rng, dims)
    a = rng.normal(0.0, 2.0, size=dims[0])
    b = rng.normal(0.0, 2.0, size=dims[0])
    prop = ArgmaxIs(int(rng.integers(0, dims[-1])))
    return net, a, b, prop


def point_covered(state: AbstractState, y: np.ndarray, tol: float = 1e-7) -> bool:
    """True if ``y`` lies within ``tol`` of some segment or inside some box (slack ``tol``)."""
    y = np.ravel(y)
    for chain in state.chains:
        flat = chain.nodes.reshape(chain.node_count, -1)
        a, b = flat[:-1], flat[1:]
        d = b - a
        dd = np.einsum("ij,ij->i", d, d)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dd > 0, np.einsum("ij,ij->i", y - a, d) / dd, 0.0)
        t = np.clip(t, 0.0, 1.0)
        dist = np.linalg.norm(a + t[:, None] * d - y, axis=1)
        if np.any(dist <= tol):
            return True
    for box in state.boxes:
        if np.all(y >= box.lower.ravel() - tol) and np.all(y <= box.upper.ravel() + tol):
            return True
    return False
