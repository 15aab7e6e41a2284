"""Typed heterogeneous graph model: schema, graph, meta-paths, I/O and synthesis."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for schema violations and malformed graph input."""


@dataclass(frozen=True)
class EdgeType:
    name: str
    a: int
    b: int


@dataclass(frozen=True)
class NetworkSchema:
    node_type_names: tuple[str, ...]
    edge_types: tuple[EdgeType, ...]

    def __post_init__(self):
        if len(set(self.node_type_names)) != len(self.node_type_names):
            raise GraphError("duplicate node type name in schema")
        names = [e.name for e in self.edge_types]
        if len(set(names)) != len(names):
            raise GraphError("duplicate edge type name in schema")
        n = len(self.node_type_names)
        for e in self.edge_types:
            if not (0 <= e.a < n and 0 <= e.b < n):
                raise GraphError(f"edge type {e.name!r} references an unknown node type")
        if n <= 1 and len(self.edge_types) <= 1:
            raise GraphError("a heterogeneous network needs more than one node type or edge type")

    @classmethod
    def from_names(cls, node_types: Sequence[str], edge_types: Iterable[tuple[str, str, str]]) -> "NetworkSchema":
        index = {name: i for i, name in enumerate(node_types)}
        edges = []
        for name, a, b in edge_types:
            if a not in index or b not in index:
                raise GraphError(f"edge type {name!r} references an unknown node type")
            edges.append(EdgeType(name, index[a], index[b]))
        return cls(tuple(node_types), tuple(edges))

    @classmethod
    def from_json(cls, doc: Mapping) -> "NetworkSchema":
        try:
            return cls.from_names(doc["node_types"], [(e["name"], e["a"], e["b"]) for e in doc["edge_types"]])
        except KeyError as exc:
            raise GraphError(f"schema document missing key {exc}") from None

    def to_json(self) -> dict:
        return {
            "node_types": list(self.node_type_names),
            "edge_types": [
                {"name": e.name, "a": self.node_type_names[e.a], "b": self.node_type_names[e.b]}
                for e in self.edge_types
            ],
        }

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def node_type_id(self, name: str) -> int:
        try:
            return self.node_type_names.index(name)
        except ValueError:
            raise GraphError(f"unknown node type {name!r}") from None

    def edge_type_id(self, name: str) -> int:
        for i, e in enumerate(self.edge_types):
            if e.name == name:
                return i
        raise GraphError(f"unknown edge type {name!r}")

    def edge_types_between(self, a: int, b: int) -> list[int]:
        return [i for i, e in enumerate(self.edge_types) if {e.a, e.b} == {a, b}]


@dataclass(frozen=True, eq=False)
class HinGraph:
    """Immutable undirected typed graph with dense integer node ids.

    Adjacency is CSR-shaped: neighbours of ``v`` are
    ``adj_nbr[adj_ptr[v]:adj_ptr[v+1]]`` with matching ``adj_etype``, sorted by
    (neighbour, edge type). Every undirected edge appears in both endpoint lists.
    """

    schema: NetworkSchema
    node_types: np.ndarray
    adj_ptr: np.ndarray
    adj_nbr: np.ndarray
    adj_etype: np.ndarray
    node_names: tuple[str, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    @property
    def num_edges(self) -> int:
        return len(self.adj_nbr) // 2

    def neighbors(self, v: int, edge_type: int | None = None) -> np.ndarray:
        lo, hi = self.adj_ptr[v], self.adj_ptr[v + 1]
        nbr = self.adj_nbr[lo:hi]
        if edge_type is None:
            return nbr
        return nbr[self.adj_etype[lo:hi] == edge_type]

    def degree(self, v: int) -> int:
        return int(self.adj_ptr[v + 1] - self.adj_ptr[v])

    def nodes_of_type(self, t: int) -> np.ndarray:
        key = ("type_index", t)
        if key not in self._cache:
            arr = np.flatnonzero(self.node_types == t)
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def local_index(self, t: int) -> np.ndarray:
        """Map global node id -> position within its type's node list (-1 for other types)."""
        key = ("local_index", t)
        if key not in self._cache:
            out = np.full(self.num_nodes, -1, dtype=np.int64)
            nodes = self.nodes_of_type(t)
            out[nodes] = np.arange(len(nodes))
            self._cache[key] = out
        return self._cache[key]

    def edges(self) -> np.ndarray:
        """Undirected edge list (src < dst) as an (E, 3) array of (src, dst, edge type)."""
        src = np.repeat(np.arange(self.num_nodes), np.diff(self.adj_ptr))
        keep = src < self.adj_nbr
        return np.stack([src[keep], self.adj_nbr[keep], self.adj_etype[keep]], axis=1)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Both directions of every edge, as (src, dst, edge type) arrays ordered by dst."""
        dst = np.repeat(np.arange(self.num_nodes), np.diff(self.adj_ptr))
        return self.adj_nbr, dst, self.adj_etype

    def biadjacency(self, edge_type: int, row_type: int) -> sp.csr_matrix:
        """0/1 matrix of ``edge_type`` with rows indexed by ``row_type`` nodes.

        Rows and columns use per-type local indices (see :meth:`local_index`).
        """
        key = ("biadj", edge_type, row_type)
        if key in self._cache:
            return self._cache[key]
        et = self.schema.edge_types[edge_type]
        if row_type not in (et.a, et.b):
            raise GraphError(f"node type {row_type} is not an endpoint of edge type {et.name!r}")
        col_type = et.b if row_type == et.a else et.a
        src, dst, ety = self.directed_edges()
        sel = (ety == edge_type) & (self.node_types[src] == row_type) & (self.node_types[dst] == col_type)
        rows = self.local_index(row_type)[src[sel]]
        cols = self.local_index(col_type)[dst[sel]]
        shape = (len(self.nodes_of_type(row_type)), len(self.nodes_of_type(col_type)))
        mat = sp.csr_matrix((np.ones(len(rows), dtype=np.uint64), (rows, cols)), shape=shape)
        mat.sort_indices()
        self._cache[key] = mat
        return mat

    def node_id(self, name: str) -> int:
        lookup = self._cache.get("name_index")
        if lookup is None:
            lookup = {n: i for i, n in enumerate(self.node_names)}
            self._cache["name_index"] = lookup
        try:
            return lookup[name]
        except KeyError:
            raise GraphError(f"unknown node id {name!r}") from None

    def type_name(self, v: int) -> str:
        return self.schema.node_type_names[self.node_types[v]]


def build_graph(
    schema: NetworkSchema,
    node_types: Sequence[int],
    edges: Iterable[tuple[int, int, int]],
    node_names: Sequence[str] | None = None,
) -> HinGraph:
    """Validate and freeze a graph from dense node types and an undirected edge list."""
    node_types = np.asarray(node_types, dtype=np.int64)
    n = len(node_types)
    if n and (node_types.min() < 0 or node_types.max() >= len(schema.node_type_names)):
        raise GraphError("node type id out of range")
    e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 3)
    if len(e):
        if e[:, :2].min() < 0 or e[:, :2].max() >= n:
            raise GraphError("dangling edge endpoint")
        if e[:, 2].min() < 0 or e[:, 2].max() >= len(schema.edge_types):
            raise GraphError("edge type id out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphError("self-loops are not allowed")
        ea = np.array([schema.edge_types[r].a for r in e[:, 2]])
        eb = np.array([schema.edge_types[r].b for r in e[:, 2]])
        ts, tt = node_types[e[:, 0]], node_types[e[:, 1]]
        ok = ((ts == ea) & (tt == eb)) | ((ts == eb) & (tt == ea))
        if not ok.all():
            bad = e[np.argmin(ok)]
            raise GraphError(f"edge {tuple(bad)} endpoint types do not match its edge type")
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    ety = np.concatenate([e[:, 2], e[:, 2]])
    order = np.lexsort((ety, dst, src))
    src, dst, ety = src[order], dst[order], ety[order]
    if len(src) > 1:
        dup = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1]) & (ety[1:] == ety[:-1])
        if dup.any():
            i = int(np.argmax(dup))
            raise GraphError(f"parallel edge ({src[i]}, {dst[i]}, type {ety[i]})")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=ptr[1:])
    if node_names is None:
        node_names = [str(i) for i in range(n)]
    if len(node_names) != n:
        raise GraphError("node_names length mismatch")
    for arr in (node_types, ptr, dst, ety):
        arr.setflags(write=False)
    return HinGraph(schema, node_types, ptr, dst, ety, tuple(node_names))


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_schema(path: str | Path) -> NetworkSchema:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: invalid JSON ({exc})") from None
    try:
        return NetworkSchema.from_json(doc)
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from None


def load_graph(nodes_path: str | Path, edges_path: str | Path, schema_path: str | Path) -> HinGraph:
    """Read ``nodes.tsv``/``edges.tsv``/``schema.json`` into a validated graph.

    Node ids are remapped to dense integers in file order; the original ids are
    kept in ``graph.node_names``.
    """
    schema = load_schema(schema_path)
    type_index = {name: i for i, name in enumerate(schema.node_type_names)}
    edge_index = {e.name: i for i, e in enumerate(schema.edge_types)}

    names: list[str] = []
    types: list[int] = []
    dense: dict[str, int] = {}
    for lineno, cols in _data_lines(Path(nodes_path)):
        where = f"{nodes_path}:{lineno}"
        if len(cols) != 2:
            raise GraphError(f"{where}: expected 2 tab-separated columns, got {len(cols)}")
        node, tname = cols
        if node in dense:
            raise GraphError(f"{where}: duplicate node id {node!r}")
        if tname not in type_index:
            raise GraphError(f"{where}: unknown node type {tname!r}")
        dense[node] = len(names)
        names.append(node)
        types.append(type_index[tname])

    edges: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    for lineno, cols in _data_lines(Path(edges_path)):
        where = f"{edges_path}:{lineno}"
        if len(cols) != 3:
            raise GraphError(f"{where}: expected 3 tab-separated columns, got {len(cols)}")
        s, t, ename = cols
        for end in (s, t):
            if end not in dense:
                raise GraphError(f"{where}: dangling edge endpoint {end!r}")
        if ename not in edge_index:
            raise GraphError(f"{where}: unknown edge type {ename!r}")
        si, ti, r = dense[s], dense[t], edge_index[ename]
        if si == ti:
            raise GraphError(f"{where}: self-loop on {s!r}")
        et = schema.edge_types[r]
        if {types[si], types[ti]} != {et.a, et.b} or (et.a != et.b and types[si] == types[ti]):
            raise GraphError(
                f"{where}: edge type {ename!r} expects "
                f"{schema.node_type_names[et.a]}-{schema.node_type_names[et.b]}, got "
                f"{schema.node_type_names[types[si]]}-{schema.node_type_names[types[ti]]}"
            )
        key = (min(si, ti), max(si, ti), r)
        if key in seen:
            raise GraphError(f"{where}: parallel edge {s!r}-{t!r} of type {ename!r}")
        seen.add(key)
        edges.append((si, ti, r))
    return build_graph(schema, types, edges, names)


def save_graph(g: HinGraph, directory: str | Path) -> tuple[Path, Path, Path]:
    """Write ``nodes.tsv``, ``edges.tsv`` and ``schema.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path, edges_path, schema_path = directory / "nodes.tsv", directory / "edges.tsv", directory / "schema.json"
    names = g.schema.node_type_names
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for v in range(g.num_nodes):
            fh.write(f"{g.node_names[v]}\t{names[g.node_types[v]]}\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for s, t, r in g.edges():
            fh.write(f"{g.node_names[s]}\t{g.node_names[t]}\t{g.schema.edge_types[r].name}\n")
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(g.schema.to_json(), fh, indent=2)
        fh.write("\n")
    return nodes_path, edges_path, schema_path


def write_id_map(g: HinGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(g.node_names):
            fh.write(f"{i}\t{name}\n")


@dataclass(frozen=True)
class MetaPath:
    node_types: tuple[int, ...]
    edge_types: tuple[int, ...]
    schema: NetworkSchema = field(repr=False, compare=False)

    def __post_init__(self):
        if len(self.node_types) < 2:
            raise GraphError("a meta-path needs at least two node types")
        if len(self.edge_types) != len(self.node_types) - 1:
            raise GraphError("a meta-path needs exactly one edge type per step")
        for i, r in enumerate(self.edge_types):
            et = self.schema.edge_types[r]
            if {et.a, et.b} != {self.node_types[i], self.node_types[i + 1]}:
                raise GraphError(f"edge type {et.name!r} does not connect step {i} of the meta-path")

    @property
    def length(self) -> int:
        return len(self.edge_types)

    def is_symmetric(self) -> bool:
        return self.node_types == self.node_types[::-1] and self.edge_types == self.edge_types[::-1]

    @property
    def anchor(self) -> int:
        return self.node_types[0]

    def __str__(self) -> str:
        names = self.schema.node_type_names
        parts = [names[self.node_types[0]]]
        for r, t in zip(self.edge_types, self.node_types[1:]):
            parts.append(f"[{self.schema.edge_types[r].name}]{names[t]}")
        return "".join(parts)

    def short_name(self) -> str:
        return "".join(self.schema.node_type_names[t] for t in self.node_types)


_EXPLICIT = re.compile(r"\[([^\]]+)\]")


def parse_metapath(spec: str, schema: NetworkSchema) -> MetaPath:
    """Parse ``"A-P-A"`` (edge types inferred) or ``"A[AP]P[PA]A"`` (explicit)."""
    spec = spec.strip()
    if "[" in spec:
        type_names = _EXPLICIT.split(spec)
        # split yields node, edge, node, edge, ..., node
        nodes = [s.strip(" -") for s in type_names[0::2]]
        edges = [s.strip() for s in type_names[1::2]]
        node_ids = [schema.node_type_id(n) for n in nodes]
        edge_ids = [schema.edge_type_id(e) for e in edges]
    else:
        nodes = [s.strip() for s in spec.split("-")]
        node_ids = [schema.node_type_id(n) for n in nodes]
        edge_ids = []
        for a, b in zip(node_ids, node_ids[1:]):
            cands = schema.edge_types_between(a, b)
            names = schema.node_type_names
            if not cands:
                raise GraphError(f"no edge type connects {names[a]} and {names[b]}")
            if len(cands) > 1:
                opts = ", ".join(schema.edge_types[c].name for c in cands)
                raise GraphError(
                    f"ambiguous edge type between {names[a]} and {names[b]} ({opts}); use explicit syntax like A[R]B"
                )
            edge_ids.append(cands[0])
    return MetaPath(tuple(node_ids), tuple(edge_ids), schema)


def synth_graph(
    schema: NetworkSchema,
    nodes_per_type: Mapping[str, int],
    edges_per_type: Mapping[str, int],
    seed: int,
) -> HinGraph:
    """Random typed graph; each edge type's edges are drawn uniformly without replacement."""
    rng = np.random.default_rng(seed)
    counts = [int(nodes_per_type.get(name, 0)) for name in schema.node_type_names]
    types = np.repeat(np.arange(len(counts)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    names = [f"{schema.node_type_names[t]}{i - offsets[t]}" for i, t in enumerate(types)]

    edges = []
    for r, et in enumerate(schema.edge_types):
        k = int(edges_per_type.get(et.name, 0))
        na, nb = counts[et.a], counts[et.b]
        pool = na * (na - 1) // 2 if et.a == et.b else na * nb
        if k > pool:
            raise GraphError(f"edge type {et.name!r}: {k} edges requested but only {pool} pairs exist")
        if k == 0:
            continue
        picks = np.sort(rng.choice(pool, size=k, replace=False))
        if et.a == et.b:
            # unrank pairs i < j in row-major order of the strict upper triangle
            i = (na - 2 - np.floor(np.sqrt(-8 * picks + 4 * na * (na - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
            j = picks + i + 1 - na * (na - 1) // 2 + (na - i) * ((na - i) - 1) // 2
            s, t = offsets[et.a] + i, offsets[et.a] + j
        else:
            s, t = offsets[et.a] + picks // nb, offsets[et.b] + picks % nb
        edges.append(np.stack([s, t, np.full(k, r)], axis=1))
    e = np.concatenate(edges) if edges else np.zeros((0, 3), dtype=np.int64)
    return build_graph(schema, types, e, names)
