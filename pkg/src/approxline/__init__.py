"""Certified output analysis of neural networks along input line segments."""

from .certify import (COARSE, EXACT_MASS, ArgmaxIs, LinearAnd, OutputProperty, ProbBound, SignIs, Verdict,
                      attribute_consistency, average_consistency, box_baseline, certify_deterministic,
                      interval_baseline, parse_property, prob_bounds, refine_with_schedule)
from .domain import (EXACT, AbstractState, AnalysisTimeout, BoxRegion, BudgetExceeded, Chain, Mode, RelaxConfig,
                     Segment, apply_layer, init_chain, init_segment, propagate_network, relax_heuristic)
from .network import (Conv2d, ConvTranspose2d, Dense, Flatten, ModelFormatError, Network, ReLU, Reshape,
                      ShapeCompositionError, forward, load_model, save_model)
from .oracle import Path, clopper_pearson, grid_probability, refined_grid_probability, sample_probability
from .tensor import IntervalTensor, ShapeError

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
