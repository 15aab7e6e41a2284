"""Ground-truth dataset construction, AdamW with cosine annealing, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .hin import GraphError, HinGraph, MetaPath
from .model import ModelParams, init_params, predict, weight_tensors
from .pathsim import PathSimEngine

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: ModelParams | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainingSample:
    query: int
    target: int
    label: float


@dataclass(frozen=True)
class SplitSpec:
    n_train_queries: int = 400
    n_val_queries: int = 100
    n_test_queries: int = 400
    pairs_per_query: int = 10
    seed: int = 0


@dataclass
class Dataset:
    """Training/validation triplets plus full exact rows for the test queries.

    ``test_rows[q]`` is a dense score vector aligned with ``candidates``
    (all anchor-type nodes, ascending id).
    """

    metapath: str
    candidates: np.ndarray
    train: list[TrainingSample]
    val: list[TrainingSample]
    train_queries: list[int]
    val_queries: list[int]
    test_queries: list[int]
    test_rows: dict[int, np.ndarray] = field(repr=False)
    zero_support_queries: list[int] = field(default_factory=list)

    def subsample_train(self, fraction: float) -> "Dataset":
        """Keep the first ``fraction`` of train queries (they are already in random order)."""
        if not 0 < fraction <= 1:
            raise ValueError("train fraction must be in (0, 1]")
        keep_n = max(1, int(round(fraction * len(self.train_queries))))
        keep = set(self.train_queries[:keep_n])
        return Dataset(
            self.metapath,
            self.candidates,
            [s for s in self.train if s.query in keep],
            self.val,
            self.train_queries[:keep_n],
            self.val_queries,
            self.test_queries,
            self.test_rows,
            self.zero_support_queries,
        )


def _sample_targets(rng: np.random.Generator, candidates: np.ndarray, support: np.ndarray, k: int) -> list[int]:
    """Half of the targets from the non-zero support, the rest uniformly; no repeats."""
    k = min(k, len(candidates))
    n_support = min(len(support), k // 2 + k % 2) if len(support) else 0
    chosen = [int(v) for v in rng.choice(support, size=n_support, replace=False)] if n_support else []
    taken = set(chosen)
    while len(chosen) < k:
        v = int(candidates[rng.integers(len(candidates))])
        if v not in taken:
            taken.add(v)
            chosen.append(v)
    return chosen


def build_dataset(g: HinGraph, p: MetaPath, split: SplitSpec) -> Dataset:
    engine = PathSimEngine(g, p)
    candidates = engine.nodes
    need = split.n_train_queries + split.n_val_queries + split.n_test_queries
    if need > len(candidates):
        raise GraphError(f"split needs {need} query nodes but only {len(candidates)} anchor-type nodes exist")
    rng = np.random.default_rng(split.seed)
    queries = [int(v) for v in rng.permutation(candidates)[:need]]
    a, b = split.n_train_queries, split.n_train_queries + split.n_val_queries
    train_q, val_q, test_q = queries[:a], queries[a:b], queries[b:]

    zero_support = []

    def samples(qs):
        out = []
        for q in qs:
            row = engine.dense_row(q)
            support = candidates[row > 0]
            if not len(support):
                zero_support.append(q)
            for t in _sample_targets(rng, candidates, support, split.pairs_per_query):
                out.append(TrainingSample(q, t, float(row[engine._local[t]])))
        return out

    train, val = samples(train_q), samples(val_q)
    test_rows = {q: engine.dense_row(q) for q in test_q}
    if zero_support:
        warnings.warn(f"{len(zero_support)} train/val queries have no path instances; their labels are all zero")
    return Dataset(str(p), candidates, train, val, train_q, val_q, test_q, test_rows, zero_support)


def save_dataset(ds: Dataset, directory: str | Path, g: HinGraph) -> None:
    directory = Path(directory)
    (directory / "rows").mkdir(parents=True, exist_ok=True)
    names = g.node_names
    for fname, samples in (("train.tsv", ds.train), ("val.tsv", ds.val)):
        with open(directory / fname, "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(f"{names[s.query]}\t{names[s.target]}\t{s.label:.17g}\n")
    with open(directory / "test_queries.txt", "w", encoding="utf-8") as fh:
        for q in ds.test_queries:
            fh.write(f"{names[q]}\n")
    for q in ds.test_queries:
        row = ds.test_rows[q]
        with open(directory / "rows" / f"{q}.tsv", "w", encoding="utf-8") as fh:
            for t, s in zip(ds.candidates, row):
                if s > 0:
                    fh.write(f"{names[q]}\t{names[t]}\t{s:.17g}\n")
    meta = {
        "metapath": ds.metapath,
        "train_queries": [names[q] for q in ds.train_queries],
        "val_queries": [names[q] for q in ds.val_queries],
        "zero_support_queries": [names[q] for q in ds.zero_support_queries],
    }
    with open(directory / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_dataset(directory: str | Path, g: HinGraph, candidates: np.ndarray) -> Dataset:
    directory = Path(directory)
    with open(directory / "dataset.json", encoding="utf-8") as fh:
        meta = json.load(fh)

    def read(fname):
        out = []
        with open(directory / fname, encoding="utf-8") as fh:
            for line in fh:
                q, t, s = line.rstrip("\n").split("\t")
                out.append(TrainingSample(g.node_id(q), g.node_id(t), float(s)))
        return out

    with open(directory / "test_queries.txt", encoding="utf-8") as fh:
        test_q = [g.node_id(line.strip()) for line in fh if line.strip()]
    local = {int(v): i for i, v in enumerate(candidates)}
    rows = {}
    for q in test_q:
        row = np.zeros(len(candidates))
        path = directory / "rows" / f"{q}.tsv"
        if not path.exists():
            raise FileNotFoundError(f"missing exact row for test query {g.node_names[q]!r}: {path}")
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                _, t, s = line.rstrip("\n").split("\t")
                row[local[g.node_id(t)]] = float(s)
        rows[q] = row
    return Dataset(
        meta["metapath"],
        np.asarray(candidates),
        read("train.tsv"),
        read("val.tsv"),
        [g.node_id(q) for q in meta["train_queries"]],
        [g.node_id(q) for q in meta["val_queries"]],
        test_q,
        rows,
        [g.node_id(q) for q in meta.get("zero_support_queries", [])],
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d: int = 32
    T: int = 2
    L: int = 2
    aggregator: str = "topT"
    use_node_type: bool = True
    use_edge_type: bool = True
    use_bias: bool = False
    selection: str = "elementwise"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError("need lr_max >= lr_min > 0")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps and total_steps >= 1")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    weights: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingDiverged(f"non-finite gradient for {name!r} ({bad} entries) at step {state.step + 1}", None)
        if g.shape != weights[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {weights[name].shape}")
    state.step += 1
    b1, b2 = betas
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name in sorted(grads):
        g, p = grads[name], weights[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _group(samples: list[TrainingSample]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    by_q: dict[int, list[TrainingSample]] = {}
    for s in samples:
        by_q.setdefault(s.query, []).append(s)
    return {
        q: (np.array([s.target for s in ss], dtype=np.int64), np.array([s.label for s in ss]))
        for q, ss in by_q.items()
    }


def query_loss(g: HinGraph, params: ModelParams, q: int, targets: np.ndarray, labels: np.ndarray, tape=None):
    w = weight_tensors(params, tape)
    _, y = predict(g, q, params, targets=targets, tape=tape, w=w)
    return ad.mse(y, labels)


def evaluate_mse(g: HinGraph, params: ModelParams, samples: list[TrainingSample]) -> float:
    """MSE pooled over all samples (not averaged per query)."""
    if not samples:
        return float("nan")
    total, count = 0.0, 0
    for q, (targets, labels) in _group(samples).items():
        _, y = predict(g, q, params, targets=targets)
        diff = y.value[:, 0] - labels
        total += float(diff @ diff)
        count += len(labels)
    return total / count


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    log: list[dict]


def train(
    g: HinGraph,
    p: MetaPath,
    dataset: Dataset,
    config: TrainConfig,
    init: ModelParams | None = None,
) -> TrainResult:
    """One optimizer step per training query; keeps the epoch with the lowest validation MSE."""
    params = init.copy() if init is not None else init_params(
        g.schema,
        config.d,
        config.T,
        config.L,
        aggregator=config.aggregator,
        use_node_type=config.use_node_type,
        use_edge_type=config.use_edge_type,
        use_bias=config.use_bias,
        selection=config.selection,
        seed=config.seed,
    )
    groups = _group(dataset.train)
    queries = [q for q in dataset.train_queries if q in groups]
    if not queries:
        raise ValueError("no training samples")
    total_steps = config.epochs * len(queries)
    rng = np.random.default_rng(config.seed + 1)
    state = AdamWState()
    best, best_val, best_epoch = params.copy(), math.inf, 0
    records = []
    step = 0
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="parameter .* does not reach the loss")
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(queries))
            losses = []
            lr = config.lr_max
            for qi in order:
                q = queries[qi]
                targets, labels = groups[q]
                tape = Tape()
                loss = query_loss(g, params, q, targets, labels, tape)
                value = float(loss.value[0, 0])
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", best)
                grads = ad.backward(tape, loss)
                lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min)
                try:
                    adamw_step(params.weights, grads, state, lr, config.weight_decay, (config.beta1, config.beta2), config.eps)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(str(exc), best) from None
                losses.append(value)
                step += 1
            val = evaluate_mse(g, params, dataset.val) if dataset.val else float(np.mean(losses))
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": lr}
            records.append(rec)
            log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, rec["train_loss"], val, lr)
            if val < best_val:
                best, best_val, best_epoch = params.copy(), val, epoch
    return TrainResult(best, best_epoch, records)


def write_log(records: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
