"""The two-neuron worked example: a decoded chain, ReLU, then a 2x2 matrix.

The decoder's weights are not part of the example, so the analysis starts
from its exact output chain.  The relaxation that boxes the first five
post-ReLU segments is reproduced by the regular heuristic with
``p=0.8, k=1, chain_threshold=4``: the 80th length percentile equals the
length of the two diagonal short segments, so only the final long segment
stays un-boxed.
"""

from __future__ import annotations

import numpy as np

from .certify import ArgmaxIs
from .domain import RelaxConfig, init_chain
from .network import Dense, Network, ReLU

CHAIN_NODES = [(1.0, 2.0), (-1.0, 3.0), (-1.0, 3.5), (1.0, 4.5), (3.5, 2.0)]
CHAIN_WEIGHTS = [0.2, 0.2, 0.2, 0.4]
MATRIX = [[0.5, 0.5], [1.0, -0.25]]

# class "1" of the example is output index 0: y0 > y1
PROPERTY = ArgmaxIs(0)
RELAXATION = RelaxConfig(p=0.8, k=1, chain_threshold=4, relax_before="affine")

GOLDEN = {
    "relu_nodes": [(1, 2), (0, 2.5), (0, 3), (0, 3.5), (0, 4), (1, 4.5), (3.5, 2)],
    "relu_weights": [0.1, 0.1, 0.2, 0.1, 0.1, 0.4],
    "relaxed_box": ((0, 2), (1, 4.5)),
    "relaxed_box_weight": 0.6,
    "exact_output_nodes": [(1.5, 0.5), (1.25, -0.625), (1.5, -0.75), (1.75, -0.875), (2.0, -1.0),
                           (2.75, -0.125), (2.75, 3)],
    "output_box": ((1, -1.125), (2.75, 0.5)),
    "output_segment": ((2.75, -0.125), (2.75, 3)),
    "output_segment_weight": 0.4,
    "coarse_lower": 0.6,
    "coarse_upper": 1.0,
    "exact_mass": 0.968,
}


def classifier() -> Network:
    return Network((2,), (ReLU(), Dense(np.array(MATRIX), np.zeros(2))))


def model_json() -> dict:
    return classifier().to_json()


def input_state(mode=None):
    if mode is None:
        return init_chain(CHAIN_NODES, CHAIN_WEIGHTS)
    return init_chain(CHAIN_NODES, CHAIN_WEIGHTS, mode)
