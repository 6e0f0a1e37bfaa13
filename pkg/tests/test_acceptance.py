"""Acceptance criteria, one test (or group) per criterion at its stated tolerance."""

from __future__ import annotations

import io
import itertools
import math
import time

import numpy as np
import pytest

from approxline import cli, fig2
from approxline.certify import (COARSE, EXACT_MASS, LinearAnd, box_baseline, coarsen, prob_bounds,
                                refine_with_schedule, ProbBound)
from approxline.domain import BudgetExceeded, RelaxConfig, init_segment, propagate_network
from approxline.oracle import (Path, binom_cdf, binom_sf, clopper_pearson, grid_probability,
                               refined_grid_probability, sample_probability)

from .helpers import point_covered, random_instance, random_mlp

SUITE_SEEDS = range(100)
SUITE_CONFIGS = [RelaxConfig(p, k, chain_threshold=2, relax_before="affine")
                 for p, k in itertools.product((0.0, 0.5, 1.0), (5, 25))]
BRACKET_SLACK = 1e-6
WEIGHT_SLACK = 1e-9


def _weights_ok(state) -> bool:
    return abs(state.total_weight - 1.0) <= WEIGHT_SLACK


def _propagate_checked(state, net, cfg, log):
    """Propagate and record whether weights were conserved after every layer."""
    def hook(i, s):
        log.append(_weights_ok(s))
    log.append(_weights_ok(state))
    return propagate_network(state, net, cfg, on_layer=hook)


# --- 1 & 2: the worked example ------------------------------------------------------------

@pytest.mark.criterion("1. worked-example golden run")
def test_fig2_golden_run(capsys):
    t0 = time.perf_counter()
    rc = cli.main(["fig2"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    assert rc == 0, out
    assert "MISMATCH" not in out
    assert "0.1, 0.1, 0.2, 0.1, 0.1, 0.4" in out
    assert "box (0, 2) .. (1, 4.5) weight 0.6" in out
    assert elapsed < 1.0


@pytest.mark.criterion("1. worked-example golden run")
def test_fig2_golden_values_direct():
    checks = dict(cli.run_fig2(out=io.StringIO()))
    assert all(checks.values()), [k for k, v in checks.items() if not v]


@pytest.mark.criterion("2. exact-mass 0.968 and grid agreement")
def test_fig2_exact_mass_and_grid():
    t0 = time.perf_counter()
    state = fig2.input_state()
    net = fig2.classifier()
    for cfg in (RelaxConfig(p=0.0), fig2.RELAXATION):
        pb = prob_bounds(propagate_network(state, net, cfg), fig2.PROPERTY, EXACT_MASS)
        assert abs(pb.lower - 0.968) <= 1e-9 and abs(pb.upper - 0.968) <= 1e-9
        assert pb.width <= 1e-9
    path = Path.chain(fig2.CHAIN_NODES, fig2.CHAIN_WEIGHTS)
    assert abs(grid_probability(path, net, fig2.PROPERTY, 10**6) - 0.968) <= 2e-5
    assert time.perf_counter() - t0 < 10.0


# --- 3, 4, 5: random-network suite --------------------------------------------------------

@pytest.fixture(scope="module")
def suite_results():
    """Run the whole random suite once; individual criteria inspect the records."""
    t0 = time.perf_counter()
    records = []
    for seed in SUITE_SEEDS:
        net, a, b, prop = random_instance(seed)
        rng = np.random.default_rng(10_000 + seed)
        alphas = rng.random(1000)
        ys = net.forward_batch(Path.segment(a, b).points(alphas))
        oracle = refined_grid_probability((a, b), net, prop)
        rec = {"seed": seed, "net": net, "a": a, "b": b, "contain": [], "bracket": [], "weights": [],
               "exact_state": None, "boxes": 0}
        for cfg in SUITE_CONFIGS:
            out = _propagate_checked(init_segment(a, b), net, cfg, rec["weights"])
            if cfg.p == 0.0 and rec["exact_state"] is None:
                rec["exact_state"] = out
            rec["boxes"] += len(out.boxes)
            rec["contain"].append(all(point_covered(out, y) for y in ys))
            for method in (EXACT_MASS, COARSE):
                pb = prob_bounds(out, prop, method)
                rec["bracket"].append(pb.lower - BRACKET_SLACK <= oracle <= pb.upper + BRACKET_SLACK)
        records.append(rec)
    return records, time.perf_counter() - t0


@pytest.mark.criterion("3. soundness suite")
def test_soundness_containment(suite_results):
    records, _ = suite_results
    assert len(records) >= 100
    bad = [r["seed"] for r in records if not all(r["contain"])]
    assert bad == []


@pytest.mark.criterion("3. soundness suite")
def test_soundness_bracketing(suite_results):
    records, _ = suite_results
    bad = [r["seed"] for r in records if not all(r["bracket"])]
    assert bad == []


@pytest.mark.criterion("3. soundness suite")
def test_soundness_runtime(suite_results):
    _, elapsed = suite_results
    assert elapsed < 120.0


@pytest.mark.criterion("3. soundness suite")
def test_suite_actually_relaxes(suite_results):
    # guard against a vacuous suite: relaxation must fire on a good share of instances
    records, _ = suite_results
    assert sum(r["boxes"] > 0 for r in records) >= 25


@pytest.mark.criterion("4. exactness at p=0")
def test_exactness_midpoints(suite_results):
    records, _ = suite_results
    worst = 0.0
    for r in records:
        out = r["exact_state"]
        assert not out.boxes
        for chain in out.chains:
            mids = 0.5 * (chain.params[:-1] + chain.params[1:])
            ys = r["net"].forward_batch(Path.segment(r["a"], r["b"]).points(mids))
            seg_mid = 0.5 * (chain.nodes[:-1] + chain.nodes[1:])
            worst = max(worst, float(np.max(np.abs(ys - seg_mid))))
    assert worst <= 1e-7


@pytest.mark.criterion("5. weight conservation")
def test_weight_conservation_suite(suite_results):
    records, _ = suite_results
    assert all(all(r["weights"]) for r in records)


@pytest.mark.criterion("5. weight conservation")
def test_weight_conservation_worked_example():
    log = []
    for cfg in (RelaxConfig(p=0.0), fig2.RELAXATION):
        _propagate_checked(fig2.input_state(), fig2.classifier(), cfg, log)
    assert all(log)


# --- 6: relaxation effectiveness ----------------------------------------------------------

DEEP_SEEDS = (101, 102)
DEEP_CFG = RelaxConfig(p=0.5, k=25, chain_threshold=100, relax_before="affine")


def _deep_instance(seed):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, [2] + [256] * 16 + [2], scale=1.4)
    a, b = rng.normal(0, 30, 2), rng.normal(0, 30, 2)
    # centre the property on the median output along the path so the probability is non-trivial
    ys = net.forward_batch(Path.segment(a, b).points(np.linspace(0, 1, 1001)))
    d = -float(np.median(ys[:, 0] - ys[:, 1]))
    return net, a, b, LinearAnd([[1.0, -1.0]], [d])


@pytest.mark.criterion("6. relaxation effectiveness")
@pytest.mark.parametrize("seed", DEEP_SEEDS)
def test_relaxation_effectiveness(seed):
    net, a, b, prop = _deep_instance(seed)
    longest = []
    exact = propagate_network(init_segment(a, b), net,
                              on_layer=lambda i, s: longest.append(max(c.node_count for c in s.chains)))
    assert max(longest) >= 2000
    relaxed = propagate_network(init_segment(a, b), net, DEEP_CFG)
    assert relaxed.region_count < exact.region_count

    oracle = refined_grid_probability((a, b), net, prop)
    pe = prob_bounds(exact, prop, EXACT_MASS)
    pr = prob_bounds(relaxed, prop, EXACT_MASS)
    for pb in (pe, pr):
        assert pb.lower - BRACKET_SLACK <= oracle <= pb.upper + BRACKET_SLACK
    assert pr.lower <= pe.lower + 1e-9 and pe.upper <= pr.upper + 1e-9

    assert 0.0 < pe.lower and pe.upper < 1.0
    ib = box_baseline(init_segment(a, b), net, prop)
    assert (ib.lower, ib.upper) == (0.0, 1.0)


# --- 7: Clopper-Pearson and sampling ------------------------------------------------------

CP_GRID = [(n, s) for n in (1, 10, 64, 1000, 4096, 100_000) for s in sorted({0, 1, n // 3, n // 2, n - 1, n})
           if 0 <= s <= n]


@pytest.mark.criterion("7. Clopper-Pearson and sampling coverage")
@pytest.mark.parametrize("confidence", [0.9, 0.99, 0.9999])
def test_clopper_pearson_tail_equations(confidence):
    tail = 0.5 * (1 - confidence)
    for n, s in CP_GRID:
        lo, hi = clopper_pearson(n, s, confidence)
        assert 0.0 <= lo <= s / n <= hi <= 1.0
        if s > 0:
            assert abs(binom_sf(n, s, lo) - tail) <= 1e-9, (n, s)
        else:
            assert lo == 0.0
        if s < n:
            assert abs(binom_cdf(n, s, hi) - tail) <= 1e-9, (n, s)
        else:
            assert hi == 1.0


@pytest.mark.criterion("7. Clopper-Pearson and sampling coverage")
def test_sampling_covers_worked_example():
    path = Path.chain(fig2.CHAIN_NODES, fig2.CHAIN_WEIGHTS)
    net = fig2.classifier()
    covered = 0
    for seed in range(100):
        rep = sample_probability(path, net, fig2.PROPERTY, confidence=0.9999, target_width=0.002, seed=seed)
        assert rep.width < 0.002
        covered += rep.interval[0] <= 0.968 <= rep.interval[1]
    assert covered == 100


# --- 8: refinement schedules --------------------------------------------------------------

def _hand_sequence(p, k, factor, n):
    out = [(p, k)]
    for _ in range(n - 1):
        p, k = min(factor * p, 1.0), max(math.ceil(0.95 * k), 5)
        out.append((p, k))
    return out


@pytest.mark.criterion("8. refinement schedules")
@pytest.mark.parametrize("schedule,factor,expected_p", [
    ("A", 1.5, [0.02, 0.03, 0.045, 0.0675, 0.10125, 0.151875]),
    ("B", 3.0, [0.02, 0.06, 0.18, 0.54, 1.0, 1.0]),
])
def test_schedule_retry_sequence(schedule, factor, expected_p):
    seen = []

    def job(cfg, deadline):
        seen.append((cfg.p, cfg.k))
        if len(seen) < 6:
            raise BudgetExceeded(0, 10, 1)
        return ProbBound(0.25, 0.75)

    pb = refine_with_schedule(job, schedule, RelaxConfig(0.02, 100), timeout=None)
    assert pb.status == "ok" and pb.attempts == 6
    assert (pb.lower, pb.upper) == (0.25, 0.75)
    hand = _hand_sequence(0.02, 100, factor, 6)
    assert [k for _, k in seen] == [k for _, k in hand] == [100, 95, 91, 87, 83, 79]
    assert np.allclose([p for p, _ in seen], [p for p, _ in hand], rtol=0, atol=1e-15)
    assert np.allclose([p for p, _ in seen], expected_p, rtol=0, atol=1e-12)


@pytest.mark.criterion("8. refinement schedules")
def test_schedule_k_floor_and_real_budget_failure():
    assert coarsen(RelaxConfig(0.5, 5), "A").k == 5
    assert coarsen(RelaxConfig(0.5, 6), "A").k == 6  # ceil(5.7) = 6 is a fixed point above the floor
    net, a, b, prop = random_instance(3)
    state = init_segment(a, b)
    seen = []

    def job(cfg, deadline):
        seen.append(cfg)
        return prob_bounds(propagate_network(state, net, cfg, deadline=deadline), prop)

    pb = refine_with_schedule(job, "B", RelaxConfig(0.02, 100, chain_threshold=2, region_budget=1,
                                                    relax_before="affine"), timeout=30)
    assert pb.status == "budget" and (pb.lower, pb.upper) == (0.0, 1.0)
    assert [c.p for c in seen[:5]] == pytest.approx([0.02, 0.06, 0.18, 0.54, 1.0], abs=1e-12)
    assert [c.k for c in seen[:5]] == [100, 95, 91, 87, 83]
