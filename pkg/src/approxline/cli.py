"""Command line front end.

Exit codes: 0 success / verified, 1 property not verified (or golden-table
mismatch for ``fig2``), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import fig2
from .certify import (COARSE, EXACT_MASS, analyze, box_baseline, certify_deterministic, consistency_job,
                      parse_property, prob_bounds, refine_with_schedule)
from .domain import (AbstractState, BudgetExceeded, Mode, RelaxConfig, DEFAULT_REGION_BUDGET, init_chain,
                     init_segment, propagate_network, propagate_relu, relax_heuristic)
from .network import (ModelFormatError, Network, forward, load_model, load_vector, read_json, save_model, save_vector,
                       vector_from_json, vector_to_json)
from .oracle import Path as InputPath, sample_probability
from .tensor import ShapeError

BUDGET_ENV = "APPROXLINE_REGION_BUDGET"
CSV_COLUMNS = ("item_id", "attribute", "method", "p", "k", "lower", "upper", "width", "regions", "millis",
               "status")
GOLDEN_TOL = 1e-9


@dataclass
class RunRecord:
    item_id: str
    attribute: str
    method: str
    p: str
    k: str
    lower: float
    upper: float
    regions: float
    millis: float
    status: str = "ok"

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_row(self) -> dict:
        row = {f.name: getattr(self, f.name) for f in fields(self)}
        row["width"] = self.width
        for key in ("lower", "upper", "width"):
            row[key] = repr(float(row[key]))
        row["regions"] = format(self.regions, "g")
        row["millis"] = f"{self.millis:.3f}"
        return {c: row[c] for c in CSV_COLUMNS}

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        return cls(row["item_id"], row["attribute"], row["method"], row["p"], row["k"], float(row["lower"]),
                   float(row["upper"]), float(row["regions"]), float(row["millis"]), row["status"])


def write_csv(records, stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec.to_row())


def read_csv(stream) -> list[RunRecord]:
    return [RunRecord.from_row(row) for row in csv.DictReader(stream)]


# --- argument helpers -------------------------------------------------------------

def _default_budget() -> int:
    return int(os.environ.get(BUDGET_ENV, DEFAULT_REGION_BUDGET))


def _add_relax_flags(p: argparse.ArgumentParser, default_p: float = 0.02, default_k: int = 100) -> None:
    p.add_argument("--p", type=float, default=default_p, help="relaxation percentile in [0, 1] (0 = exact)")
    p.add_argument("--k", type=int, default=default_k, help="clustering parameter")
    p.add_argument("--chain-threshold", type=int, default=1000, help="relax chains with more nodes than this")
    p.add_argument("--budget", type=int, default=None, help=f"region budget (default ${BUDGET_ENV} or "
                                                            f"{DEFAULT_REGION_BUDGET})")
    p.add_argument("--relax-before", choices=("conv", "affine"), default="conv")


def _config(args) -> RelaxConfig:
    budget = args.budget if args.budget is not None else _default_budget()
    return RelaxConfig(args.p, args.k, args.chain_threshold, budget, args.relax_before)


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("model", help="model JSON file")
    p.add_argument("a", nargs="?", help="start vector file")
    p.add_argument("b", nargs="?", help="end vector file")
    p.add_argument("--chain", help="chain file with 'nodes' (vectors) and 'weights' instead of A B")
    p.add_argument("--property", required=True, help="argmax:<t> | sign:<i>:<+|-> | linear:<file>")


def load_chain(path):
    doc = read_json(path)
    if not isinstance(doc, dict) or "nodes" not in doc or "weights" not in doc:
        raise ModelFormatError(f"{path}: chain file needs 'nodes' and 'weights'")
    return [vector_from_json(n) for n in doc["nodes"]], [float(w) for w in doc["weights"]]


def save_chain(nodes, weights, path) -> None:
    doc = {"nodes": [vector_to_json(n) for n in nodes], "weights": [float(w) for w in weights]}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def _initial_state(args, mode: Mode) -> AbstractState:
    if args.chain:
        nodes, weights = load_chain(args.chain)
        return init_chain(nodes, weights, mode)
    if not (args.a and args.b):
        raise ValueError("give two input vectors A B or --chain FILE")
    return init_segment(load_vector(args.a), load_vector(args.b), mode)


def _fmt(x) -> str:
    return "(" + ", ".join(format(float(v), "g") for v in np.ravel(x)) + ")"


def describe_region(region) -> str:
    if hasattr(region, "box"):
        return f"box {_fmt(region.lower)} .. {_fmt(region.upper)} weight {region.weight:g}"
    return f"segment {_fmt(region.a)} -> {_fmt(region.b)} weight {region.weight:g}"


# --- subcommands --------------------------------------------------------------------

def cmd_certify(args) -> int:
    net = load_model(args.model)
    prop = parse_property(args.property)
    state = _initial_state(args, Mode.DETERMINISTIC)
    try:
        out = propagate_network(state, net, _config(args))
    except BudgetExceeded as exc:
        print(f"Unknown: {exc}")
        return 1
    verdict = certify_deterministic(out, prop)
    if verdict.verified:
        print(f"Verified: {prop} holds on all {out.region_count} output regions")
        return 0
    print(f"Unknown: {prop} not established; witness {describe_region(verdict.witness)}")
    return 1


def cmd_bounds(args) -> int:
    net = load_model(args.model)
    prop = parse_property(args.property)
    state = _initial_state(args, Mode.PROBABILISTIC)
    method = COARSE if args.method in ("coarse", COARSE) else EXACT_MASS
    cfg = _config(args)

    def job(c, deadline):
        return analyze(state, net, prop, c, method, deadline)

    pb = refine_with_schedule(job, args.schedule, cfg, args.timeout)
    if args.csv:
        rec = RunRecord("input", str(prop), "approxline" if cfg.p > 0 else "exact", repr(cfg.p), str(cfg.k),
                        pb.lower, pb.upper, pb.region_count, 1000 * pb.runtime, pb.status)
        write_csv([rec], sys.stdout)
    else:
        print(f"method   {method}")
        print(f"lower    {pb.lower!r}")
        print(f"upper    {pb.upper!r}")
        print(f"width    {pb.width!r}")
        print(f"regions  {pb.region_count}")
        print(f"runtime  {pb.runtime:.4f}s")
        print(f"status   {pb.status}")
    return 0


def cmd_eval(args) -> int:
    net = load_model(args.model)
    y = forward(net, load_vector(args.input))
    print(json.dumps(vector_to_json(y)))
    return 0


def _parse_list(text: str, cast):
    return [cast(t) for t in text.split(",") if t.strip()]


def load_pairs(path):
    doc = read_json(path)
    items = doc.get("pairs") if isinstance(doc, dict) else doc
    if not isinstance(items, list) or not items:
        raise ModelFormatError(f"{path}: expected a non-empty 'pairs' list")
    out = []
    for idx, item in enumerate(items):
        out.append((str(item.get("id", idx)), vector_from_json(item["e1"]), vector_from_json(item["e2"])))
    return out


def _compare_tasks(args):
    methods = _parse_list(args.methods, str)
    unknown = set(methods) - {"exact", "approxline", "interval", "sampling"}
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    grid = list(itertools.product(_parse_list(args.grid_p, float), _parse_list(args.grid_k, int)))
    tasks = []
    for m in methods:
        if m == "approxline":
            tasks.extend(("approxline", p, k) for p, k in grid)
        else:
            tasks.append((m, None, None))
    return tasks


def _run_item(args, decoder, detector, item_id, e1, e2, attr, task) -> RunRecord:
    name, p, k = task
    budget = args.budget if args.budget is not None else _default_budget()
    t0 = time.perf_counter()
    status, regions, label = "ok", 0, name
    try:
        job = consistency_job(e1, e2, decoder, detector, attr, EXACT_MASS)
        if name == "exact":
            pb = refine_with_schedule(job, None, RelaxConfig(0.0, 1, args.chain_threshold, budget),
                                      args.timeout)
            lower, upper, regions, status = pb.lower, pb.upper, pb.region_count, pb.status
        elif name == "approxline":
            cfg = RelaxConfig(p, k, args.chain_threshold, budget, args.relax_before)
            pb = refine_with_schedule(job, args.schedule, cfg, args.timeout)
            lower, upper, regions, status = pb.lower, pb.upper, pb.region_count, pb.status
        elif name == "interval":
            pb = box_baseline(init_segment(e1, e2), job.network, job.prop)
            lower, upper, regions = pb.lower, pb.upper, pb.region_count
        else:
            label = f"sampling[{args.confidence:g},{args.width:g}]"
            rep = sample_probability(InputPath.segment(e1, e2), job.network, job.prop, args.confidence,
                                     args.width, seed=args.seed)
            lower, upper = rep.interval
            if args.timeout is not None and time.perf_counter() - t0 > args.timeout:
                lower, upper, status = 0.0, 1.0, "timeout"
    except (ValueError, ShapeError) as exc:
        lower, upper, status = 0.0, 1.0, f"error:{type(exc).__name__}"
    millis = 1000 * (time.perf_counter() - t0)
    return RunRecord(item_id, str(attr), label, "" if p is None else repr(p), "" if k is None else str(k),
                     lower, upper, regions, millis, status)


def aggregate(records: list[RunRecord]) -> list[RunRecord]:
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.p, r.k), []).append(r)
    out = []
    for (method, p, k), rs in groups.items():
        n = len(rs)
        out.append(RunRecord("mean", "*", method, p, k, sum(r.lower for r in rs) / n,
                             sum(r.upper for r in rs) / n, sum(r.regions for r in rs) / n,
                             sum(r.millis for r in rs) / n, "aggregate"))
    return out


def cmd_compare(args) -> int:
    decoder = load_model(args.model)
    detector = load_model(args.detector) if args.detector else None
    if detector is None:
        # single composed model: the decoder is the identity
        detector, decoder = decoder, Network(decoder.input_shape, ())
    pairs = load_pairs(args.pairs)
    attrs = _parse_list(args.attrs, int)
    tasks = _compare_tasks(args)
    work = [(pid, e1, e2, a, t) for pid, e1, e2 in pairs for a in attrs for t in tasks]

    def run(w):
        return _run_item(args, decoder, detector, *w)

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            records = list(pool.map(run, work))
    else:
        records = [run(w) for w in work]
    records += aggregate(records)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_csv(records, fh)
    else:
        write_csv(records, sys.stdout)
    if args.plot_data:
        with open(args.plot_data, "w", encoding="utf-8") as fh:
            fh.write("# method p k mean_width mean_millis\n")
            for r in records:
                if r.status == "aggregate":
                    fh.write(f"{r.method} {r.p or '-'} {r.k or '-'} {r.width!r} {r.millis:.3f}\n")
    return 0


# --- fig2 -----------------------------------------------------------------------------

def _close(actual, expected) -> bool:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return actual.shape == expected.shape and bool(np.all(np.abs(actual - expected) <= GOLDEN_TOL))


def run_fig2(out=None) -> list[tuple[str, bool]]:
    """Replay the worked example; return (check name, passed) pairs."""
    out = sys.stdout if out is None else out
    g = fig2.GOLDEN
    net = fig2.classifier()
    checks: list[tuple[str, bool]] = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        print(f"  [{'ok' if ok else 'MISMATCH'}] {name}", file=out)

    state = fig2.input_state()
    chain = state.chains[0]
    print("input chain:", file=out)
    print("  nodes   " + " ".join(_fmt(n) for n in chain.nodes), file=out)
    print("  weights " + ", ".join(f"{w:g}" for w in chain.weights), file=out)

    relu = propagate_relu(state)
    rc = relu.chains[0]
    print("after ReLU:", file=out)
    print("  nodes   " + " ".join(_fmt(n) for n in rc.nodes), file=out)
    print("  weights " + ", ".join(f"{w:.10g}" for w in rc.weights), file=out)
    check("post-ReLU nodes", _close(rc.nodes, g["relu_nodes"]))
    check("post-ReLU weights", _close(rc.weights, g["relu_weights"]))

    relaxed = relax_heuristic(relu, fig2.RELAXATION)
    print(f"relaxed with p={fig2.RELAXATION.p}, k={fig2.RELAXATION.k}, "
          f"chain_threshold={fig2.RELAXATION.chain_threshold}:", file=out)
    for region in relaxed.regions:
        print("  " + describe_region(region), file=out)
    box = relaxed.boxes[0] if len(relaxed.boxes) == 1 else None
    check("relaxed box [0,1]x[2,4.5]", box is not None and _close([box.lower, box.upper], g["relaxed_box"]))
    check("relaxed box weight 0.6", box is not None and abs(box.weight - g["relaxed_box_weight"]) <= GOLDEN_TOL)

    exact = propagate_network(state, net)
    print("exact output:", file=out)
    print("  nodes   " + " ".join(_fmt(n) for n in exact.chains[0].nodes), file=out)
    check("exact output nodes", _close(exact.chains[0].nodes, g["exact_output_nodes"]))

    approx = propagate_network(state, net, fig2.RELAXATION)
    print("relaxed output:", file=out)
    for region in approx.regions:
        print("  " + describe_region(region), file=out)
    segs, boxes = approx.segments(), approx.boxes
    check("output box [1,2.75]x[-1.125,0.5]",
          len(boxes) == 1 and _close([boxes[0].lower, boxes[0].upper], g["output_box"]))
    check("output segment (2.75,-0.125)-(2.75,3)",
          len(segs) == 1 and _close([segs[0].a, segs[0].b], g["output_segment"])
          and abs(segs[0].weight - g["output_segment_weight"]) <= GOLDEN_TOL)

    coarse = prob_bounds(approx, fig2.PROPERTY, COARSE)
    exact_relaxed = prob_bounds(approx, fig2.PROPERTY, EXACT_MASS)
    exact_full = prob_bounds(exact, fig2.PROPERTY, EXACT_MASS)
    print(f"bounds for {fig2.PROPERTY} (y0 > y1):", file=out)
    print(f"  coarse-indicator, relaxed: [{coarse.lower:.10g}, {coarse.upper:.10g}]", file=out)
    print(f"  exact-mass, relaxed:       [{exact_relaxed.lower:.10g}, {exact_relaxed.upper:.10g}]", file=out)
    print(f"  exact-mass, exact:         [{exact_full.lower:.10g}, {exact_full.upper:.10g}]", file=out)
    check("coarse lower bound 0.6", abs(coarse.lower - g["coarse_lower"]) <= GOLDEN_TOL)
    check("coarse upper bound 1.0", abs(coarse.upper - g["coarse_upper"]) <= GOLDEN_TOL)
    check("exact-mass bound 0.968 (relaxed)",
          _close([exact_relaxed.lower, exact_relaxed.upper], [g["exact_mass"]] * 2))
    check("exact-mass bound 0.968 (exact)", _close([exact_full.lower, exact_full.upper], [g["exact_mass"]] * 2))
    return checks


def write_fig2_fixtures(directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(fig2.classifier(), d / "model.json")
    save_chain(fig2.CHAIN_NODES, fig2.CHAIN_WEIGHTS, d / "chain.json")
    save_vector(np.array(fig2.CHAIN_NODES[0]), d / "start.json")
    save_vector(np.array(fig2.CHAIN_NODES[-1]), d / "end.json")


def cmd_fig2(args) -> int:
    if args.write_fixtures:
        write_fig2_fixtures(args.write_fixtures)
    t0 = time.perf_counter()
    checks = run_fig2()
    failed = [name for name, ok in checks if not ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} golden checks passed in {time.perf_counter() - t0:.3f}s")
    return 1 if failed else 0


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="approxline", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="deterministic certification")
    _add_inputs(p)
    _add_relax_flags(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("bounds", help="guaranteed probability bounds")
    _add_inputs(p)
    _add_relax_flags(p)
    p.add_argument("--method", choices=(EXACT_MASS, COARSE, "coarse"), default=EXACT_MASS)
    p.add_argument("--schedule", choices=("A", "B"), default=None, help="refinement schedule on budget failure")
    p.add_argument("--timeout", type=float, default=60.0, help="seconds across all attempts")
    p.add_argument("--csv", action="store_true", help="print one CSV record instead of a report")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("compare", help="compare methods on attribute consistency, CSV output")
    p.add_argument("model", help="decoder model (or decoder+detector if --detector is omitted)")
    p.add_argument("pairs", help="pair list JSON: {'pairs': [{'id', 'e1', 'e2'}, ...]}")
    p.add_argument("--detector", help="attribute detector model applied after the decoder")
    p.add_argument("--attrs", default="0", help="comma-separated attribute indices")
    p.add_argument("--methods", default="exact,approxline,interval,sampling")
    p.add_argument("--grid-p", default="0.02", help="comma-separated p values for approxline")
    p.add_argument("--grid-k", default="100", help="comma-separated k values for approxline")
    p.add_argument("--chain-threshold", type=int, default=1000)
    p.add_argument("--relax-before", choices=("conv", "affine"), default="conv")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--schedule", choices=("A", "B"), default="A")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--confidence", type=float, default=0.9999)
    p.add_argument("--width", type=float, default=0.002, help="sampling interval width target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--plot-data", help="write a gnuplot-style table of the aggregate rows")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fig2", help="replay the built-in two-neuron worked example")
    p.add_argument("--write-fixtures", metavar="DIR", help="also write model/chain/vector files to DIR")
    p.set_defaults(func=cmd_fig2)

    p = sub.add_parser("eval", help="concrete forward evaluation")
    p.add_argument("model")
    p.add_argument("input")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
