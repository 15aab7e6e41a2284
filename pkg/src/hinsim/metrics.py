"""RMSE / nDCG@k, evaluation harnesses over scoring backends, and sweep tables."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .hin import HinGraph, MetaPath
from .model import ModelParams, predict
from .pathsim import PathSimEngine, rank_scores
from .training import Dataset


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("rmse of empty input")
    diff = pred - truth
    return math.sqrt(float(diff @ diff) / diff.size)


def dcg(gains: np.ndarray) -> float:
    gains = np.asarray(gains, dtype=np.float64)
    return float(np.sum(gains / np.log2(np.arange(2, len(gains) + 2))))


def ndcg_at_k(predicted_ranking: Sequence, relevance: Mapping, k: int) -> float:
    """DCG of the first k predicted items over the ideal DCG; 0 when the ideal is 0."""
    if k < 1:
        raise ValueError("k must be at least 1")
    gains = [float(relevance.get(v, 0.0)) for v in list(predicted_ranking)[:k]]
    ideal = sorted((float(r) for r in relevance.values()), reverse=True)[:k]
    idcg = dcg(ideal)
    return dcg(gains) / idcg if idcg > 0 else 0.0


class Backend(Protocol):
    name: str

    def scores(self, query: int, candidates: np.ndarray) -> np.ndarray: ...


class ExactBackend:
    name = "exact"

    def __init__(self, g: HinGraph, p: MetaPath):
        self.engine = PathSimEngine(g, p)

    def scores(self, query, candidates):
        row = self.engine.dense_row(query)
        return row[self.engine._local[candidates]]


class ModelBackend:
    name = "neupath"

    def __init__(self, g: HinGraph, params: ModelParams, clamp: bool = False):
        self.graph, self.params, self.clamp = g, params, clamp

    def scores(self, query, candidates):
        _, y = predict(self.graph, query, self.params, targets=candidates)
        s = y.value[:, 0]
        return np.clip(s, 0.0, 1.0) if self.clamp else s


class ConstantBackend:
    name = "constant"

    def __init__(self, value: float):
        self.value = float(value)

    def scores(self, query, candidates):
        return np.full(len(candidates), self.value)


class RandomBackend:
    name = "random"

    def __init__(self, seed: int):
        self.seed = seed

    def scores(self, query, candidates):
        return np.random.default_rng([self.seed, int(query)]).random(len(candidates))


@dataclass
class EvalReport:
    metapath: str
    backend: str
    k: int | None = None
    rmse: float | None = None
    per_query_rmse: dict[int, float] = field(default_factory=dict)
    ndcg: float | None = None
    per_query_ndcg: dict[int, float] = field(default_factory=dict)
    zero_idcg_queries: list[int] = field(default_factory=list)
    n_queries: int = 0
    n_pairs: int = 0
    config_fingerprint: str = ""
    seconds: float = 0.0

    def to_json(self) -> dict:
        # wall-clock time lives in the run manifest so reports stay byte-reproducible
        doc = asdict(self)
        del doc["seconds"]
        doc["per_query_rmse"] = {str(k): v for k, v in self.per_query_rmse.items()}
        doc["per_query_ndcg"] = {str(k): v for k, v in self.per_query_ndcg.items()}
        return doc

    def write(self, directory: str | Path, g: HinGraph | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "eval_report.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        name = (lambda q: g.node_names[q]) if g is not None else str
        with open(directory / "eval_per_query.tsv", "w", encoding="utf-8") as fh:
            fh.write("query\trmse\tndcg\n")
            for q in sorted(set(self.per_query_rmse) | set(self.per_query_ndcg)):
                r, n = self.per_query_rmse.get(q), self.per_query_ndcg.get(q)
                fh.write(f"{name(q)}\t{'' if r is None else f'{r:.12g}'}\t{'' if n is None else f'{n:.12g}'}\n")


def _rows(dataset: Dataset) -> dict[int, np.ndarray]:
    for q in dataset.test_queries:
        if q not in dataset.test_rows:
            raise KeyError(f"missing exact row for test query {q}")
    return {q: dataset.test_rows[q] for q in dataset.test_queries}


def evaluate_approximation(backend: Backend, dataset: Dataset, report: EvalReport | None = None) -> EvalReport:
    """RMSE over every (test query, anchor-type node) pair, self pairs included."""
    t0 = time.perf_counter()
    report = report or EvalReport(dataset.metapath, backend.name)
    sq, n = 0.0, 0
    for q, truth in _rows(dataset).items():
        pred = backend.scores(q, dataset.candidates)
        report.per_query_rmse[q] = rmse(pred, truth)
        diff = pred - truth
        sq += float(diff @ diff)
        n += len(diff)
    report.rmse = math.sqrt(sq / n) if n else float("nan")
    report.n_queries, report.n_pairs = len(dataset.test_queries), n
    report.seconds += time.perf_counter() - t0
    return report


def evaluate_search(
    backend: Backend, dataset: Dataset, k: int = 10, include_self: bool = False, report: EvalReport | None = None
) -> EvalReport:
    """Mean nDCG@k of each test query's predicted ranking against exact PathSim relevance."""
    if k < 1:
        raise ValueError("k must be at least 1")
    t0 = time.perf_counter()
    report = report or EvalReport(dataset.metapath, backend.name)
    report.k = k
    vals = []
    for q, truth in _rows(dataset).items():
        cands, rel = dataset.candidates, truth
        pred = backend.scores(q, cands)
        if not include_self:
            keep = cands != q
            cands, rel, pred = cands[keep], rel[keep], pred[keep]
        top = rank_scores(cands, pred, k)
        idcg = dcg(np.sort(rel)[::-1][:k])
        val = dcg(rel[top]) / idcg if idcg > 0 else 0.0
        if idcg <= 0:
            report.zero_idcg_queries.append(q)
        report.per_query_ndcg[q] = val
        vals.append(val)
    report.ndcg = float(np.mean(vals)) if vals else float("nan")
    report.n_queries = len(dataset.test_queries)
    report.seconds += time.perf_counter() - t0
    return report


def mean_train_label(dataset: Dataset) -> float:
    return float(np.mean([s.label for s in dataset.train])) if dataset.train else 0.0


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line ys ~ a*xs + b; returns (slope, intercept, R^2)."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tot if tot > 0 else 1.0
    return float(a), float(b), r2


def sweep_report(results: Sequence[tuple[Mapping, EvalReport]], variable: str, out_dir: str | Path) -> list[Path]:
    """Table plus one two-column series per metric for a swept config variable."""
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / f"sweep_{variable}.tsv"
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(f"{variable}\tmetapath\tbackend\trmse\tndcg\tk\tn_queries\tseconds\n")
        for cfg, rep in results:
            fh.write(
                f"{cfg[variable]}\t{rep.metapath}\t{rep.backend}\t{_fmt(rep.rmse)}\t{_fmt(rep.ndcg)}\t"
                f"{'' if rep.k is None else rep.k}\t{rep.n_queries}\t{rep.seconds:.6f}\n"
            )
    paths = [table]
    for metric in ("rmse", "ndcg"):
        if all(getattr(rep, metric) is None for _, rep in results):
            continue
        series = out_dir / f"series_{variable}_{metric}.tsv"
        with open(series, "w", encoding="utf-8") as fh:
            for cfg, rep in results:
                fh.write(f"{cfg[variable]}\t{_fmt(getattr(rep, metric))}\n")
        paths.append(series)
    return paths


def timing_report(points: Sequence[tuple[int, float]], out_dir: str | Path) -> tuple[Path, float]:
    """Write (node count, seconds) pairs and return the path with the linear-fit R^2."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "timing.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("nodes\tseconds\n")
        for n, s in points:
            fh.write(f"{n}\t{s:.6f}\n")
    r2 = linear_fit_r2([n for n, _ in points], [s for _, s in points])[2] if len(points) >= 2 else float("nan")
    return path, r2


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.12g}"
