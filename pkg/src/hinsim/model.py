"""NeuPath encoder/decoder: learns to approximate PathSim rows for a query node.

States are kept slot-major: a (T * N, d) matrix whose row ``i*N + v`` is the
slot-``i`` embedding of node ``v``. One encoder layer is

    projected  = W_type(v) @ h_v                       (per node type)
    message    = W_m @ [projected_s | e_edge_type | projected_t]
    pooled_t   = top-T per dimension over all incoming messages of all slots
    h_t        = W_u @ [h_t | pooled_t]

and the decoder maps ``[h_t[1] | ... | h_t[T]]`` through ``W1 @ relu(W2 @ .)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .hin import GraphError, HinGraph, NetworkSchema

FORMAT_VERSION = 1
AGGREGATORS = ("topT", "mean", "max", "sum")
SHARED_TYPE = "*"


@dataclass
class ModelParams:
    d: int
    T: int
    L: int
    node_type_names: tuple[str, ...]
    edge_type_names: tuple[str, ...]
    weights: dict[str, np.ndarray]
    aggregator: str = "topT"
    use_node_type: bool = True
    use_edge_type: bool = True
    use_bias: bool = False
    selection: str = "elementwise"
    schema_fingerprint: str = ""

    def copy(self) -> "ModelParams":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()})

    def type_key(self, type_name: str) -> str:
        return f"W_tau/{type_name}" if self.use_node_type else f"W_tau/{SHARED_TYPE}"

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_params(
    schema: NetworkSchema,
    d: int = 32,
    T: int = 2,
    L: int = 2,
    *,
    aggregator: str = "topT",
    use_node_type: bool = True,
    use_edge_type: bool = True,
    use_bias: bool = False,
    selection: str = "elementwise",
    seed: int = 0,
) -> ModelParams:
    """Fresh parameters. Pooling ablations (mean/max/sum) keep a single slot."""
    if aggregator not in AGGREGATORS:
        raise ValueError(f"aggregator must be one of {AGGREGATORS}")
    if d < 2 or T < 1 or L < 1:
        raise ValueError("need d >= 2, T >= 1, L >= 1")
    if aggregator != "topT":
        T = 1
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    type_names = schema.node_type_names if use_node_type else (SHARED_TYPE,)
    for name in type_names:
        w[f"W_tau/{name}"] = _glorot(rng, d, d)
    if use_edge_type:
        for et in schema.edge_types:
            w[f"e_phi/{et.name}"] = rng.uniform(-0.1, 0.1, size=(1, d))
    w["W_m"] = _glorot(rng, d, 3 * d if use_edge_type else 2 * d)
    w["W_u"] = _glorot(rng, d, 2 * d)
    w["W2"] = _glorot(rng, d, d * T)
    w["W1"] = _glorot(rng, 1, d)
    if use_bias:
        for name in ("b_m", "b_u", "b_2"):
            w[name] = np.zeros((1, d))
    return ModelParams(
        d=d,
        T=T,
        L=L,
        node_type_names=tuple(schema.node_type_names),
        edge_type_names=tuple(e.name for e in schema.edge_types),
        weights=w,
        aggregator=aggregator,
        use_node_type=use_node_type,
        use_edge_type=use_edge_type,
        use_bias=use_bias,
        selection=selection,
        schema_fingerprint=schema.fingerprint(),
    )


@dataclass(frozen=True)
class GraphPlan:
    """Index arrays for running the encoder on one graph with a given slot count."""

    n: int
    T: int
    row_type: np.ndarray  # param type key per stacked row
    type_groups: tuple[tuple[str, np.ndarray], ...]
    type_inverse: np.ndarray
    src_rows: np.ndarray
    dst_rows: np.ndarray
    edge_rows: np.ndarray
    dst_nodes: np.ndarray
    edge_keys: tuple[str, ...] = field(default=())


def make_plan(g: HinGraph, params: ModelParams) -> GraphPlan:
    key = ("neupath_plan", params.T, params.use_node_type, params.node_type_names, params.edge_type_names)
    if key in g._cache:
        return g._cache[key]
    names = g.schema.node_type_names
    for t in set(g.node_types.tolist()):
        if names[t] not in params.node_type_names:
            raise GraphError(f"node type {names[t]!r} is unknown to the model")
    edge_names = [e.name for e in g.schema.edge_types]
    for r in set(g.adj_etype.tolist()):
        if edge_names[r] not in params.edge_type_names:
            raise GraphError(f"edge type {edge_names[r]!r} is unknown to the model")

    n, T = g.num_nodes, params.T
    node_keys = np.array([params.type_key(names[t]) for t in range(len(names))], dtype=object)
    row_type = np.tile(node_keys[g.node_types] if n else np.array([], dtype=object), T)
    groups, order = [], []
    for k in sorted(set(row_type.tolist())):
        rows = np.flatnonzero(row_type == k)
        groups.append((k, rows))
        order.append(rows)
    perm = np.concatenate(order) if order else np.zeros(0, dtype=np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))

    src, dst, ety = g.directed_edges()
    offs = (np.arange(T) * n)[:, None]
    used_edges = sorted(set(ety.tolist()))
    edge_keys = tuple(edge_names[r] for r in used_edges)
    remap = np.full(len(edge_names), -1, dtype=np.int64)
    remap[used_edges] = np.arange(len(used_edges))
    plan = GraphPlan(
        n=n,
        T=T,
        row_type=row_type,
        type_groups=tuple(groups),
        type_inverse=inverse,
        src_rows=(offs + src[None, :]).ravel(),
        dst_rows=(offs + dst[None, :]).ravel(),
        edge_rows=np.tile(remap[ety], T),
        dst_nodes=np.tile(dst, T),
        edge_keys=edge_keys,
    )
    g._cache[key] = plan
    return plan


def init_features(g: HinGraph, c: int, d: int) -> np.ndarray:
    """Layer-0 features: ``e1`` for the query node, ``e2`` for every other node."""
    if d < 2:
        raise ValueError("feature width must be at least 2")
    x = np.zeros((g.num_nodes, d))
    x[:, 1] = 1.0
    x[c] = 0.0
    x[c, 0] = 1.0
    return x


def weight_tensors(params: ModelParams, tape: Tape | None = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: Tensor(v) for k, v in params.weights.items()}
    return {k: tape.param(v, k) for k, v in params.weights.items()}


def _bias(x: Tensor, w: dict[str, Tensor], name: str) -> Tensor:
    return ad.add_row(x, w[name]) if name in w else x


def _project(plan: GraphPlan, states: Tensor, wt: dict[str, Tensor]) -> Tensor:
    if len(plan.type_groups) == 1:
        return states @ wt[plan.type_groups[0][0]]
    parts = [ad.gather_rows(states, rows) @ wt[k] for k, rows in plan.type_groups]
    return ad.gather_rows(ad.concat(parts, axis=0), plan.type_inverse)


def _transposed(params: ModelParams, w: dict[str, Tensor]) -> dict[str, Tensor]:
    wt = {k: ad.transpose(v) for k, v in w.items() if k.startswith("W")}
    # W_m @ [a | e | b] == W_m[:, :d] @ a + W_m[:, d:2d] @ e + W_m[:, -d:] @ b; the blocks let
    # the products run per node (or per edge type) before being gathered onto edges
    d = params.d
    blocks = ("src", "edge", "dst") if params.use_edge_type else ("src", "dst")
    for i, name in enumerate(blocks):
        wt[f"W_m/{name}"] = ad.gather_rows(wt["W_m"], np.arange(i * d, (i + 1) * d))
    return wt


def encoder_layer(plan: GraphPlan, states: Tensor, params: ModelParams, w: dict[str, Tensor], wt=None) -> Tensor:
    """One Extract/Compare/Update round over the whole graph."""
    if wt is None:
        wt = _transposed(params, w)
    projected = _project(plan, states, wt)
    messages = ad.add(
        ad.gather_rows(projected @ wt["W_m/src"], plan.src_rows),
        ad.gather_rows(projected @ wt["W_m/dst"], plan.dst_rows),
    )
    if params.use_edge_type and plan.edge_keys:
        table = ad.concat([w[f"e_phi/{k}"] for k in plan.edge_keys], axis=0)
        messages = ad.add(messages, ad.gather_rows(table @ wt["W_m/edge"], plan.edge_rows))
    messages = _bias(messages, w, "b_m")
    if params.aggregator == "topT":
        pooled, _ = ad.segment_topT(messages, plan.dst_nodes, plan.n, params.T, params.selection)
    else:
        pooled = ad.segment_reduce(messages, plan.dst_nodes, plan.n, params.aggregator)
    return _bias(ad.concat([states, pooled], axis=1) @ wt["W_u"], w, "b_u")


def encode(g: HinGraph, c: int, params: ModelParams, w: dict[str, Tensor]) -> Tensor:
    plan = make_plan(g, params)
    wt = _transposed(params, w)
    states = Tensor(np.tile(init_features(g, c, params.d), (params.T, 1)))
    for _ in range(params.L):
        states = encoder_layer(plan, states, params, w, wt)
    return states


def decode(states: Tensor, targets, params: ModelParams, w: dict[str, Tensor], n: int) -> Tensor:
    """Scores (len(targets) x 1) from the final-layer slot embeddings of ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    slots = [ad.gather_rows(states, i * n + targets) for i in range(params.T)]
    hidden = ad.relu(_bias(ad.concat(slots, axis=1) @ ad.transpose(w["W2"]), w, "b_2"))
    return hidden @ ad.transpose(w["W1"])


def predict(g: HinGraph, c: int, params: ModelParams, targets=None, tape: Tape | None = None, w=None) -> tuple[np.ndarray, Tensor]:
    """Run the model for query ``c``; default targets are all nodes of c's type."""
    if targets is None:
        targets = g.nodes_of_type(int(g.node_types[c]))
    if w is None:
        w = weight_tensors(params, tape)
    states = encode(g, c, params, w)
    y = decode(states, targets, params, w, g.num_nodes)
    return np.asarray(targets), y


def forward_all(g: HinGraph, c: int, params: ModelParams, clamp: bool = False) -> dict[int, float]:
    targets, y = predict(g, c, params)
    scores = y.value[:, 0]
    if clamp:
        scores = np.clip(scores, 0.0, 1.0)
    return dict(zip(targets.tolist(), scores.tolist()))


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "schema_fingerprint": params.schema_fingerprint,
        "node_types": list(params.node_type_names),
        "edge_types": list(params.edge_type_names),
        "d": params.d,
        "T": params.T,
        "L": params.L,
        "flags": {
            "aggregator": params.aggregator,
            "use_node_type": params.use_node_type,
            "use_edge_type": params.use_edge_type,
            "use_bias": params.use_bias,
            "selection": params.selection,
        },
        "weights": {k: v.tolist() for k, v in params.weights.items()},
    }
    if extra:
        doc["meta"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path: str | Path, schema: NetworkSchema | None = None, allow_schema_mismatch: bool = False) -> ModelParams:
    """Read a checkpoint; with ``schema`` given, refuse a different schema unless allowed.

    With ``allow_schema_mismatch`` types are matched by name, and running on a
    graph with a type the checkpoint has never seen still fails.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    if schema is not None and doc["schema_fingerprint"] != schema.fingerprint() and not allow_schema_mismatch:
        raise GraphError(
            f"{path}: checkpoint schema fingerprint {doc['schema_fingerprint']} does not match graph schema "
            f"{schema.fingerprint()} (use --allow-schema-mismatch to map types by name)"
        )
    flags = doc["flags"]
    return ModelParams(
        d=int(doc["d"]),
        T=int(doc["T"]),
        L=int(doc["L"]),
        node_type_names=tuple(doc["node_types"]),
        edge_type_names=tuple(doc["edge_types"]),
        weights={k: np.asarray(v, dtype=np.float64) for k, v in doc["weights"].items()},
        aggregator=flags["aggregator"],
        use_node_type=flags["use_node_type"],
        use_edge_type=flags["use_edge_type"],
        use_bias=flags.get("use_bias", False),
        selection=flags.get("selection", "elementwise"),
        schema_fingerprint=doc["schema_fingerprint"],
    )
