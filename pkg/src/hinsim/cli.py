"""``hinsim`` command line: exact PathSim, dataset building, training, evaluation, search and tooling.

Every command that writes files writes them into ``--out`` together with
``run_manifest.json``. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric. Errors
are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .gradcheck import gradcheck_case
from .hin import GraphError, HinGraph, NetworkSchema, load_graph, load_schema, parse_metapath, save_graph, synth_graph, write_id_map
from .metrics import (
    ConstantBackend,
    EvalReport,
    ExactBackend,
    ModelBackend,
    RandomBackend,
    evaluate_approximation,
    evaluate_search,
    linear_fit_r2,
    mean_train_label,
    timing_report,
)
from .model import forward_all, init_params, load_checkpoint, save_checkpoint
from .pathsim import CountOverflowError, PathSimEngine, rank_scores
from .training import SplitSpec, TrainConfig, TrainingDiverged, build_dataset, config_dict, load_dataset, save_dataset, train, write_log

log = logging.getLogger("hinsim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PRESETS = {
    "acm": (["A", "P", "C", "F"], [("AP", "A", "P"), ("AF", "A", "F"), ("PC", "P", "C")]),
    "imdb": (["M", "A", "D"], [("MA", "M", "A"), ("MD", "M", "D")]),
    "apc": (["A", "P", "C"], [("AP", "A", "P"), ("PC", "P", "C")]),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _counts(text: str) -> dict[str, int]:
    out = {}
    for part in filter(None, text.split(",")):
        name, sep, value = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected NAME=COUNT, got {part!r}")
        out[name.strip()] = int(value)
    return out


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


# ---- shared plumbing


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, args, started: float, extra: dict | None = None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", 1),
        "versions": {
            "hinsim": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "seconds": round(time.perf_counter() - started, 6),
    }
    if extra:
        doc.update(extra)
    with open(out / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _graph(args) -> HinGraph:
    d = Path(args.graph)
    return load_graph(args.nodes or d / "nodes.tsv", args.edges or d / "edges.tsv", args.schema or d / "schema.json")


def _node(g: HinGraph, name: str) -> int:
    try:
        return g.node_id(name)
    except KeyError:
        raise GraphError(f"unknown node id {name!r}") from None


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _default_T(metapath) -> int:
    return 3 if len(metapath.node_types) == 5 else 2


def _write_ranked(path: Path, g: HinGraph, nodes: np.ndarray, scores: np.ndarray, k: int | None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rank, i in enumerate(rank_scores(nodes, scores, k), 1):
            fh.write(f"{rank}\t{g.node_names[nodes[i]]}\t{scores[i]:.12g}\n")


# ---- commands


def cmd_synth(args) -> int:
    started = time.perf_counter()
    if args.preset:
        schema = NetworkSchema.from_names(*PRESETS[args.preset])
    elif args.schema_file:
        schema = load_schema(args.schema_file)
    else:
        raise UsageError("synth needs --preset or --schema-file")
    g = synth_graph(schema, args.sizes, args.edge_counts, seed=args.seed)
    out = _prepare_out(args)
    save_graph(g, out)
    _manifest(out, args, started, {"nodes": g.num_nodes, "edges": g.num_edges})
    return EXIT_OK


def cmd_exact(args) -> int:
    started = time.perf_counter()
    g = _graph(args)
    p = parse_metapath(args.metapath, g.schema)
    engine = PathSimEngine(g, p)
    if args.queries == "all":
        queries = engine.nodes.tolist()
    elif args.queries:
        with open(args.queries, encoding="utf-8") as fh:
            queries = [_node(g, line.strip()) for line in fh if line.strip() and not line.startswith("#")]
    elif args.query:
        queries = [_node(g, q) for q in args.query]
    else:
        raise UsageError("exact needs --query or --queries")
    for q in queries:
        if g.node_types[q] != p.anchor:
            raise GraphError(f"query {g.node_names[q]!r} is not of the meta-path's anchor type")
    out = _prepare_out(args)
    (out / "rows").mkdir(exist_ok=True)
    (out / "topk").mkdir(exist_ok=True)
    write_id_map(g, out / "id_map.tsv")

    def one(q):
        return q, engine.dense_row(q)

    for q, row in _pmap(one, queries, args.threads):
        name = g.node_names[q]
        with open(out / "rows" / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for t, s in zip(engine.nodes, row):
                if s > 0:
                    fh.write(f"{g.node_names[t]}\t{s:.12g}\n")
        keep = engine.nodes != q if not args.include_self else np.ones(len(row), dtype=bool)
        _write_ranked(out / "topk" / f"{name}.tsv", g, engine.nodes[keep], row[keep], args.k)
    _manifest(out, args, started, {"metapath": str(p), "queries": len(queries)})
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    started = time.perf_counter()
    g = _graph(args)
    p = parse_metapath(args.metapath, g.schema)
    split = SplitSpec(args.n_train, args.n_val, args.n_test, args.pairs, args.seed)
    ds = build_dataset(g, p, split)
    out = _prepare_out(args)
    save_dataset(ds, out, g)
    _manifest(
        out,
        args,
        started,
        {"metapath": str(p), "train_samples": len(ds.train), "val_samples": len(ds.val), "test_queries": len(ds.test_queries)},
    )
    return EXIT_OK


def _load_ds(args, g):
    with open(Path(args.dataset) / "dataset.json", encoding="utf-8") as fh:
        p = parse_metapath(json.load(fh)["metapath"], g.schema)
    return p, load_dataset(args.dataset, g, g.nodes_of_type(p.anchor))


def cmd_train(args) -> int:
    started = time.perf_counter()
    g = _graph(args)
    p, ds = _load_ds(args, g)
    if args.train_fraction < 1.0:
        ds = ds.subsample_train(args.train_fraction)
    d = 256 if args.paper_scale else args.d
    T = args.T if args.T is not None else _default_T(p)
    config = TrainConfig(
        epochs=args.epochs,
        lr_max=args.lr_max,
        lr_min=args.lr_min,
        weight_decay=args.weight_decay,
        d=d,
        T=T,
        L=args.L,
        aggregator=args.aggregator,
        use_node_type=not args.no_node_type,
        use_edge_type=not args.no_edge_type,
        use_bias=args.bias,
        selection=args.selection,
        seed=args.seed,
    )
    out = _prepare_out(args)
    try:
        result = train(g, p, ds, config)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.json", {"metapath": str(p), "diverged": True})
        raise
    save_checkpoint(result.params, out / "checkpoint.json", {"metapath": str(p), "best_epoch": result.best_epoch})
    write_log(result.log, out / "train_log.jsonl")
    _manifest(out, args, started, {"train_config": config_dict(config), "best_epoch": result.best_epoch})
    return EXIT_OK


def _prefetched(backend, queries, candidates, threads):
    """Score every query up front (in parallel when asked) and replay the results."""
    scores = dict(zip(queries, _pmap(lambda q: backend.scores(q, candidates), queries, threads)))

    class Cached:
        name = backend.name

        def scores(self, query, cands):
            return scores[query]

    return Cached()


def cmd_eval(args) -> int:
    started = time.perf_counter()
    g = _graph(args)
    p, ds = _load_ds(args, g)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint, g.schema, args.allow_schema_mismatch)
        backend = ModelBackend(g, params, clamp=args.clamp)
    elif args.backend == "exact":
        backend = ExactBackend(g, p)
    elif args.backend == "mean":
        backend = ConstantBackend(mean_train_label(ds))
    elif args.backend == "random":
        backend = RandomBackend(args.seed)
    else:
        raise UsageError("eval needs --checkpoint or --backend")
    backend = _prefetched(backend, ds.test_queries, ds.candidates, args.threads)
    report = evaluate_approximation(backend, ds, EvalReport(str(p), backend.name))
    evaluate_search(backend, ds, args.k, args.include_self, report)
    out = _prepare_out(args)
    report.write(out, g)
    _manifest(out, args, started, {"rmse": report.rmse, "ndcg": report.ndcg, "eval_seconds": report.seconds})
    print(json.dumps({"rmse": report.rmse, f"ndcg@{args.k}": report.ndcg}))
    return EXIT_OK


def cmd_search(args) -> int:
    started = time.perf_counter()
    g = _graph(args)
    params = load_checkpoint(args.checkpoint, g.schema, args.allow_schema_mismatch)
    q = _node(g, args.query)
    scores = forward_all(g, q, params, clamp=args.clamp)
    nodes = np.array(sorted(t for t in scores if args.include_self or t != q), dtype=np.int64)
    vals = np.array([scores[int(t)] for t in nodes])
    out = _prepare_out(args)
    _write_ranked(out / f"search_{g.node_names[q]}.tsv", g, nodes, vals, args.k)
    _manifest(out, args, started)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    report = gradcheck_case(args.seed, args.d, args.T, args.L, args.graph_nodes)
    summary = report.to_json()
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        out = _prepare_out(args)
        with open(out / "gradcheck.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _manifest(out, args, started)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def bench_graph(n: int, degree: float, seed: int) -> HinGraph:
    """A-P-C graph with ``n`` nodes (40/50/10 split) and average degree ``degree``."""
    schema = NetworkSchema.from_names(*PRESETS["apc"])
    n_a, n_p = int(0.4 * n), int(0.5 * n)
    n_c = n - n_a - n_p
    edges = int(round(degree * n / 2))
    return synth_graph(schema, {"A": n_a, "P": n_p, "C": n_c}, {"AP": 2 * edges // 3, "PC": edges - 2 * edges // 3}, seed=seed)


def bench_inference(sizes, degree=4.0, queries=3, repeats=3, d=32, T=2, L=2, seed=0) -> list[tuple[int, float]]:
    """Best-of-``repeats`` wall-clock of ``queries`` forward passes per graph size."""
    points = []
    for n in sizes:
        g = bench_graph(n, degree, seed)
        params = init_params(g.schema, d=d, T=T, L=L, seed=seed)
        qs = g.nodes_of_type(0)[:queries]
        forward_all(g, int(qs[0]), params)  # build cached index arrays outside the timer
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            for q in qs:
                forward_all(g, int(q), params)
            best = min(best, time.perf_counter() - t0)
        points.append((n, best))
    return points


def cmd_bench(args) -> int:
    started = time.perf_counter()
    out = _prepare_out(args)
    points = bench_inference(args.sizes, args.degree, args.queries, args.repeats, args.d, args.T, args.L, args.seed)
    path, r2 = timing_report(points, out)
    slope = intercept = None
    if len(points) >= 2:
        slope, intercept, _ = linear_fit_r2([n for n, _ in points], [t for _, t in points])
    _manifest(out, args, started, {"r2": r2, "slope_seconds_per_node": slope, "intercept_seconds": intercept})
    print(json.dumps({"timing": str(path), "r2": r2}))
    return EXIT_OK


# ---- argument parsing


def _graph_args(p):
    p.add_argument("--graph", type=Path, required=True, help="directory holding nodes.tsv, edges.tsv, schema.json")
    p.add_argument("--nodes", type=Path, help="override nodes file")
    p.add_argument("--edges", type=Path, help="override edges file")
    p.add_argument("--schema", type=Path, help="override schema file")


def _out_args(p, required=True):
    p.add_argument("--out", type=Path, required=required, help="output directory")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hinsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hinsim {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads for read-only per-query work")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    p = sub.add_parser("synth", help="generate a seeded random typed graph")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--schema-file", type=Path)
    p.add_argument("--sizes", type=_counts, required=True, help="nodes per type, e.g. A=120,P=150,C=30")
    p.add_argument("--edge-counts", type=_counts, default={}, help="edges per edge type, e.g. AP=300,PC=150")
    p.add_argument("--seed", type=int, default=0)
    _out_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("exact", help="exact PathSim rows and top-k lists")
    _graph_args(p)
    p.add_argument("--metapath", required=True, help="e.g. A-P-A or A[AP]P[AP]A")
    p.add_argument("--query", action="append", help="query node id (repeatable)")
    p.add_argument("--queries", help="'all' or a file with one node id per line")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--include-self", action="store_true")
    _out_args(p)
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("make-dataset", help="sample train/val triplets and exact test rows")
    _graph_args(p)
    p.add_argument("--metapath", required=True)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--pairs", type=int, default=10, help="sampled targets per train/val query")
    p.add_argument("--seed", type=int, default=0)
    _out_args(p)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="fit the path encoder on a dataset")
    _graph_args(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr-max", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--paper-scale", action="store_true", help="use d=256")
    p.add_argument("--T", type=int, help="slots; default 3 for five-type meta-paths, else 2")
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--aggregator", choices=["topT", "mean", "max", "sum"], default="topT")
    p.add_argument("--selection", choices=["elementwise", "vector"], default="elementwise")
    p.add_argument("--no-node-type", action="store_true", help="share one projection across node types")
    p.add_argument("--no-edge-type", action="store_true", help="drop edge-type embeddings from messages")
    p.add_argument("--bias", action="store_true")
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _out_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE and nDCG@k on the dataset's test queries")
    _graph_args(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--backend", choices=["exact", "mean", "random"])
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--clamp", action="store_true", help="clip model scores to [0, 1]")
    p.add_argument("--allow-schema-mismatch", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="seed for the random backend")
    _out_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="top-k similar nodes from a trained checkpoint")
    _graph_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--clamp", action="store_true")
    p.add_argument("--allow-schema-mismatch", action="store_true")
    _out_args(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--T", type=int, default=2)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--graph-nodes", type=int, default=30)
    _out_args(p, required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="inference wall-clock against graph size")
    p.add_argument("--sizes", type=_int_list, default=[1000, 2000, 4000, 8000])
    p.add_argument("--degree", type=float, default=4.0)
    p.add_argument("--queries", type=int, default=3)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--T", type=int, default=2)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _out_args(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        level = os.environ.get("METAPATH_SIM_LOG", "WARNING").upper()
        if not isinstance(logging.getLevelName(level), int):
            raise UsageError(f"METAPATH_SIM_LOG={level!r} is not a log level")
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (TrainingDiverged, CountOverflowError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (GraphError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
