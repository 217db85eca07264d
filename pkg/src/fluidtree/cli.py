"""Command-line interface: ``fluidtree <command> ...``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, GenerationConfig, LabelBook, default_jobs, generate
from .exceptions import FluidTreeError
from .fluid_solver import (
    DiscretizationConfig, costate_scale, initial_control, solve_fluid, verify_pontryagin,
)
from .network import load_spec, make_crisscross, make_rybko_stolyar, random_reentrant, save_spec
from .octree import TrainConfig, export, train
from .policy import PartitionedPolicy, evaluate, inference_seconds, simulate

log = logging.getLogger("fluidtree")

PHASES = {"network": 0, "generate": 1, "train": 2, "evaluate": 3, "bench": 4}


def phase_seed(seed: int, phase: str) -> int:
    """Independent 32-bit seed for ``phase``, derived from the run seed."""
    return int(np.random.SeedSequence([seed, PHASES[phase]]).generate_state(1)[0])


class RunManifest:
    """Config, seeds, timings and output digests of one command."""

    def __init__(self, command: str, argv: list[str], args: argparse.Namespace):
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "seeds": {},
            "version": __version__,
            "timings": {},
            "outputs": {},
        }

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        yield
        self.data["timings"][name] = time.perf_counter() - t0

    def add_outputs(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            for f in files:
                if f.name != "manifest.json":
                    self.data["outputs"][str(f)] = hashlib.sha256(f.read_bytes()).hexdigest()

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.data, fh, indent=2, default=str)
            fh.write("\n")
        os.replace(tmp, path)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _horizon(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None


def _depth(text: str):
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or an integer, got {text!r}") from None


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _scfg(args) -> DiscretizationConfig:
    return DiscretizationConfig(T=args.T, N_intervals=args.N, refine=getattr(args, "refine", False))


# ---------------------------------------------------------------- commands

def cmd_network(args, man: RunManifest) -> None:
    seed = phase_seed(args.seed, "network")
    man.data["seeds"]["network"] = seed
    if args.make == "crisscross":
        spec = make_crisscross()
    elif args.make == "rybko":
        spec = make_rybko_stolyar()
    else:
        spec = random_reentrant(args.m, np.random.default_rng(seed), load=args.load)
    save_spec(spec, args.out)
    man.add_outputs(args.out)


def cmd_solve(args, man: RunManifest) -> None:
    spec = load_spec(args.spec)
    with man.phase("solve"):
        sol = solve_fluid(spec, args.x0, _scfg(args))
    report = verify_pontryagin(spec, sol, 1e-4 * costate_scale(spec, sol))
    _write_json(args.out, sol.to_dict(report))
    outputs = [args.out]
    if args.csv:
        sol.write_trajectory_csv(args.csv)
        outputs.append(args.csv)
    man.add_outputs(*outputs)
    print(f"objective {sol.objective:.10g}  u(0) {np.round(initial_control(sol), 6).tolist()}")


def _load_patterns(text: str):
    if text in ("all", "interior"):
        return text
    raw = json.loads(Path(text).read_text())
    return tuple(tuple(int(i) - 1 for i in p) for p in raw)


def cmd_generate(args, man: RunManifest) -> None:
    spec = load_spec(args.spec)
    seed = phase_seed(args.seed, "generate")
    man.data["seeds"]["generate"] = seed
    gcfg = GenerationConfig(patterns=_load_patterns(args.patterns), M=args.M,
                            times=tuple(args.times), alphas=tuple(args.alphas),
                            filter_ambiguous=not args.no_filter, seed=seed, jobs=args.jobs)
    book = LabelBook.load(args.labels) if args.labels else None
    with man.phase("generate"):
        ds, book, stats = generate(spec, gcfg, _scfg(args), book)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out / "dataset.csv")
    book.save(out / "labels.json")
    summary = stats.to_dict()
    man.data["timings"]["median_solve"] = summary.pop("median_solve_seconds")
    _write_json(out / "stats.json", summary)
    man.add_outputs(out)
    print(f"{len(ds)} samples, {len(book)} labels, {stats.filtered} filtered, {stats.failed} failed")


def _train_one(item):
    ds, config = item
    return train(ds, None, config)


def cmd_train(args, man: RunManifest) -> None:
    data = Path(args.data)
    ds = Dataset.from_csv(data / "dataset.csv")
    book = LabelBook.load(data / "labels.json")
    seed = phase_seed(args.seed, "train")
    man.data["seeds"]["train"] = seed
    config = TrainConfig(max_depth=args.max_depth, min_leaf=args.min_leaf, restarts=args.restarts,
                         sparsity=args.sparsity, seed=seed)
    if args.partition == "single":
        cells, parts = [None], [ds]
    else:
        pats = ds.patterns()
        cells = sorted(set(pats), key=lambda p: (len(p), p))
        parts = [ds.subset(np.array([q == p for q in pats])) for p in cells]
        cells = [[p] for p in cells]
    with man.phase("train"):
        items = [(p, config) for p in parts]
        if args.jobs > 1 and len(items) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                trees = list(pool.map(_train_one, items))
        else:
            trees = [_train_one(it) for it in items]
    policy = PartitionedPolicy(cells=cells, trees=trees, book=book)
    policy.save(args.out)
    man.add_outputs(args.out)
    print(f"trained {len(trees)} tree(s); depths {[t.depth for t in trees]}")


def cmd_evaluate(args, man: RunManifest) -> None:
    spec = load_spec(args.spec)
    policy = PartitionedPolicy.load(args.model)
    test_dir = Path(args.test)
    test = Dataset.from_csv(test_dir / "dataset.csv")
    test_book = LabelBook.load(test_dir / "labels.json")
    rng = np.random.default_rng(phase_seed(args.seed, "evaluate"))
    n_cost = min(args.cost_samples, len(test))
    states = [test.X[i] for i in rng.choice(len(test), size=n_cost, replace=False)] if n_cost else []
    with man.phase("evaluate"):
        report = evaluate(spec, policy, test, test_book, _scfg(args), cost_states=states,
                          solve_samples=args.solve_samples)
    _write_json(args.report, report)
    man.add_outputs(args.report)
    print(f"accuracy {report['accuracy']:.4f}  speed-up {report['speedup']}")


def cmd_simulate(args, man: RunManifest) -> None:
    spec = load_spec(args.spec)
    policy = PartitionedPolicy.load(args.model)
    if args.horizon == "auto":
        horizon = solve_fluid(spec, args.x0, DiscretizationConfig(N_intervals=args.N)).T
    else:
        horizon = args.horizon
    h = None if args.h == "auto" else float(args.h)
    with man.phase("simulate"):
        res = simulate(spec, policy, args.x0, horizon, h)
    res.write_csv(args.out)
    man.add_outputs(args.out)
    print(f"cost {res.cost:.10g}  terminal |x| {res.terminal_norm:.3g}  fallbacks {res.fallback_events}")


def cmd_export_tree(args, man: RunManifest) -> None:
    policy = PartitionedPolicy.load(args.model)
    if not 0 <= args.tree < len(policy.trees):
        raise FluidTreeError(f"model has {len(policy.trees)} tree(s); no index {args.tree}")
    doc = export(policy.trees[args.tree], policy.book, args.format)
    if args.out:
        Path(args.out).write_text(doc)
        man.add_outputs(args.out)
    else:
        sys.stdout.write(doc)


def cmd_bench(args, man: RunManifest) -> None:
    spec = load_spec(args.spec)
    policy = PartitionedPolicy.load(args.model)
    rng = np.random.default_rng(phase_seed(args.seed, "bench"))
    X = np.abs(rng.standard_normal((args.samples, spec.n)))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    cfg = DiscretizationConfig(N_intervals=args.N)
    solve_t = []
    with man.phase("bench"):
        for x in X:
            t0 = time.perf_counter()
            solve_fluid(spec, x, cfg)
            solve_t.append(time.perf_counter() - t0)
        infer_t = inference_seconds(policy, X)
    result = {
        "samples": args.samples,
        "median_solve_seconds": float(np.median(solve_t)),
        "median_inference_seconds": float(np.median(infer_t)),
    }
    result["speedup"] = result["median_solve_seconds"] / result["median_inference_seconds"]
    if args.out:
        _write_json(args.out, result)
        man.add_outputs(args.out)
    print(json.dumps(result))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="fluidtree", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    def grid_flags(sp):
        sp.add_argument("--T", type=_horizon, default="auto", help="horizon, or auto")
        sp.add_argument("--N", type=int, default=400, help="grid intervals")

    sp = add("network", cmd_network, "write a network spec JSON")
    sp.add_argument("--make", choices=["crisscross", "rybko", "reentrant"], required=True,
                    help="network family")
    sp.add_argument("--m", type=int, default=3, help="servers (reentrant only)")
    sp.add_argument("--load", type=float, default=0.8, help="busiest-server workload (reentrant only)")
    sp.add_argument("--seed", type=int, default=0, help="run seed (reentrant rates and costs)")
    sp.add_argument("--out", required=True, help="output spec path")

    sp = add("solve", cmd_solve, "solve the fluid control problem for one initial state")
    sp.add_argument("--spec", required=True, help="network spec JSON")
    sp.add_argument("--x0", type=_floats, required=True, help='initial state, e.g. "1,1,1"')
    grid_flags(sp)
    sp.add_argument("--refine", action="store_true", help="refine the grid around control changes")
    sp.add_argument("--out", required=True, help="solution JSON")
    sp.add_argument("--csv", default=None, help="optional trajectory CSV")

    sp = add("generate", cmd_generate, "generate a labeled dataset")
    sp.add_argument("--spec", required=True, help="network spec JSON")
    sp.add_argument("--patterns", default="interior",
                    help="all, interior, or a JSON file with a list of 1-based class lists")
    sp.add_argument("--M", type=int, default=1000, help="initial states per pattern")
    sp.add_argument("--alphas", type=_floats, default=[], help="augmentation scales, e.g. 0.5,1.5")
    sp.add_argument("--times", type=_floats, default=[0.0], help="label times as fractions of T")
    sp.add_argument("--no-filter", action="store_true", help="skip the grid-doubling filter")
    sp.add_argument("--labels", default=None, help="existing labels.json to share label ids")
    sp.add_argument("--seed", type=int, default=0, help="run seed")
    sp.add_argument("--jobs", type=int, default=default_jobs(), help="concurrent solves")
    grid_flags(sp)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("train", cmd_train, "train oblique trees and assemble a policy")
    sp.add_argument("--data", required=True, help="directory written by generate")
    sp.add_argument("--max-depth", type=_depth, default="auto", help="tree depth, or auto")
    sp.add_argument("--min-leaf", type=int, default=5, help="minimum samples per leaf")
    sp.add_argument("--restarts", type=int, default=10, help="local-search restarts per node")
    sp.add_argument("--sparsity", type=float, default=None,
                    help="fraction of features a split may use (default: no cap)")
    sp.add_argument("--partition", choices=["single", "pattern"], default="single",
                    help="one tree for all states, or one per support pattern")
    sp.add_argument("--seed", type=int, default=0, help="run seed")
    sp.add_argument("--jobs", type=int, default=default_jobs(), help="concurrent tree trainings")
    sp.add_argument("--out", required=True, help="model directory")

    sp = add("evaluate", cmd_evaluate, "score a policy on a test set")
    sp.add_argument("--spec", required=True, help="network spec JSON")
    sp.add_argument("--model", required=True, help="model directory")
    sp.add_argument("--test", required=True, help="test data directory")
    sp.add_argument("--report", required=True, help="report JSON")
    sp.add_argument("--cost-samples", type=int, default=20, help="closed-loop cost comparisons")
    sp.add_argument("--solve-samples", type=int, default=20, help="solves timed for the speed-up")
    sp.add_argument("--seed", type=int, default=0, help="run seed")
    grid_flags(sp)

    sp = add("simulate", cmd_simulate, "simulate the closed loop under a policy")
    sp.add_argument("--spec", required=True, help="network spec JSON")
    sp.add_argument("--model", required=True, help="model directory")
    sp.add_argument("--x0", type=_floats, required=True, help="initial state")
    sp.add_argument("--horizon", type=_horizon, default="auto", help="simulated time, or auto")
    sp.add_argument("--h", default="auto", help="Euler step, or auto (horizon / 2000)")
    sp.add_argument("--N", type=int, default=400, help="grid intervals for the auto horizon")
    sp.add_argument("--out", required=True, help="trajectory CSV")

    sp = add("export-tree", cmd_export_tree, "print a trained tree")
    sp.add_argument("--model", required=True, help="model directory")
    sp.add_argument("--format", choices=["text", "dot", "json"], default="text", help="output format")
    sp.add_argument("--tree", type=int, default=0, help="tree index within the policy")
    sp.add_argument("--out", default=None, help="write to a file instead of stdout")

    sp = add("bench", cmd_bench, "time solver against policy inference")
    sp.add_argument("--spec", required=True, help="network spec JSON")
    sp.add_argument("--model", required=True, help="model directory")
    sp.add_argument("--samples", type=int, default=20, help="random interior states")
    sp.add_argument("--N", type=int, default=400, help="grid intervals")
    sp.add_argument("--seed", type=int, default=0, help="run seed")
    sp.add_argument("--out", default=None, help="optional result JSON")
    return p


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(args.command, argv, args)
    try:
        with man.phase("total"):
            args.func(args, man)
    except (FluidTreeError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"fluidtree {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out = getattr(args, "out", None) or getattr(args, "report", None)
    if out:
        man.write(_manifest_path(out))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
