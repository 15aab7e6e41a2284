"""Exact meta-path counting, PathSim scores and Top-K similarity search."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .hin import GraphError, HinGraph, MetaPath

_U64_LIMIT = 2**64
# float64 shadow products have relative error far below this; anything above is re-checked exactly
_SUSPECT = float(_U64_LIMIT) * (1.0 - 1e-9)
_FLOAT_EXACT = float(2**53)


class CountOverflowError(ArithmeticError):
    """Path counts exceeded the unsigned 64-bit range."""


@dataclass(frozen=True)
class SparseCountMatrix:
    """Path counts between ``row_nodes`` and ``col_nodes`` in CSR layout.

    Rows/columns are positions in ``row_nodes``/``col_nodes`` (global node ids).
    Stored values are strictly positive and column indices are sorted per row.
    """

    row_type: int
    col_type: int
    row_nodes: np.ndarray
    col_nodes: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_csr(cls, m: sp.csr_matrix, row_type, col_type, row_nodes, col_nodes) -> "SparseCountMatrix":
        m = m.tocsr()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(
            row_type,
            col_type,
            np.asarray(row_nodes),
            np.asarray(col_nodes),
            m.indptr.astype(np.int64),
            m.indices.astype(np.int64),
            m.data.astype(np.uint64),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.row_nodes), len(self.col_nodes)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def get(self, i: int, j: int) -> int:
        cols, vals = self.row(i)
        k = np.searchsorted(cols, j)
        if k < len(cols) and cols[k] == j:
            return int(vals[k])
        return 0


def _exact_entry(a: sp.csr_matrix, b: sp.csc_matrix, i: int, j: int) -> int:
    ra, rb = a.indptr[i], a.indptr[i + 1]
    cb, ce = b.indptr[j], b.indptr[j + 1]
    left = dict(zip(a.indices[ra:rb].tolist(), a.data[ra:rb].tolist()))
    return sum(int(left[k]) * int(v) for k, v in zip(b.indices[cb:ce].tolist(), b.data[cb:ce].tolist()) if k in left)


def checked_matmul(a: sp.csr_matrix, b: sp.csr_matrix) -> sp.csr_matrix:
    """uint64 sparse product that raises instead of wrapping on overflow."""
    out = (a @ b).tocsr()
    shadow = (a.astype(np.float64) @ b.astype(np.float64)).tocoo()
    if shadow.nnz and shadow.data.max() >= _SUSPECT:
        bc = b.tocsc()
        for i, j in zip(*(x[shadow.data >= _SUSPECT] for x in (shadow.row, shadow.col))):
            if _exact_entry(a, bc, int(i), int(j)) >= _U64_LIMIT:
                raise CountOverflowError(f"path count at ({i}, {j}) exceeds 2^64 - 1")
    return out


def _checked_rowsum_product(a: sp.csr_matrix, b: sp.csr_matrix) -> np.ndarray:
    """Row sums of the elementwise product a*b, in uint64 with overflow detection."""
    prod = a.multiply(b).tocsr()
    shadow = np.asarray(a.astype(np.float64).multiply(b.astype(np.float64)).sum(axis=1)).ravel()
    if shadow.size and shadow.max() >= _SUSPECT:
        for i in np.flatnonzero(shadow >= _SUSPECT):
            ra, rb = a.getrow(i), b.getrow(i)
            left = dict(zip(ra.indices.tolist(), ra.data.tolist()))
            exact = sum(int(left.get(k, 0)) * int(v) for k, v in zip(rb.indices.tolist(), rb.data.tolist()))
            if exact >= _U64_LIMIT:
                raise CountOverflowError(f"self path count of row {i} exceeds 2^64 - 1")
    return np.asarray(prod.sum(axis=1, dtype=np.uint64)).ravel().astype(np.uint64)


def _factor(g: HinGraph, p: MetaPath, step: int) -> sp.csr_matrix:
    return g.biadjacency(p.edge_types[step], p.node_types[step])


def _chain(g: HinGraph, p: MetaPath, start: sp.csr_matrix, steps: range) -> sp.csr_matrix:
    out = start
    for step in steps:
        out = checked_matmul(out, _factor(g, p, step))
    return out


def count_paths_bruteforce_row(g: HinGraph, p: MetaPath, x: int) -> Counter:
    """Enumerate every walk from ``x`` matching ``p``; returns end node -> count."""
    if g.node_types[x] != p.node_types[0]:
        raise GraphError(f"node {g.node_names[x]!r} is not of the meta-path's start type")
    ends: Counter = Counter()
    stack = [(x, 0)]
    while stack:
        v, step = stack.pop()
        if step == p.length:
            ends[v] += 1
            continue
        lo, hi = g.adj_ptr[v], g.adj_ptr[v + 1]
        want_r, want_t = p.edge_types[step], p.node_types[step + 1]
        for nb, r in zip(g.adj_nbr[lo:hi].tolist(), g.adj_etype[lo:hi].tolist()):
            if r == want_r and g.node_types[nb] == want_t:
                stack.append((nb, step + 1))
    return ends


def count_paths_bruteforce(g: HinGraph, p: MetaPath, x: int, y: int) -> int:
    if g.node_types[y] != p.node_types[-1]:
        raise GraphError(f"node {g.node_names[y]!r} is not of the meta-path's end type")
    return count_paths_bruteforce_row(g, p, x)[y]


def commuting_matrix(g: HinGraph, p: MetaPath, restrict_rows=None) -> SparseCountMatrix:
    """Path-count matrix W_R1 @ ... @ W_Rl, optionally only for some start nodes.

    Symmetric meta-paths are evaluated as L @ B.T where B is the half-path
    product, which keeps the result exactly symmetric.
    """
    first, last = p.node_types[0], p.node_types[-1]
    row_nodes = g.nodes_of_type(first)
    col_nodes = g.nodes_of_type(last)
    w1 = _factor(g, p, 0)
    if restrict_rows is not None:
        restrict_rows = np.asarray(sorted(set(int(v) for v in restrict_rows)), dtype=np.int64)
        local = g.local_index(first)[restrict_rows] if len(restrict_rows) else restrict_rows
        if np.any(local < 0):
            raise GraphError("restricted rows must be of the meta-path's start type")
        row_nodes = restrict_rows
        w1 = w1[local]
    if p.is_symmetric() and p.length >= 2:
        engine = PathSimEngine(g, p)
        left = engine.left_half
        if restrict_rows is not None:
            left = left[g.local_index(first)[restrict_rows]]
        m = checked_matmul(left, engine.half.T.tocsr())
    else:
        m = _chain(g, p, w1, range(1, p.length))
    return SparseCountMatrix.from_csr(m, first, last, row_nodes, col_nodes)


class PathSimEngine:
    """PathSim for one (graph, symmetric meta-path), caching the half-path product.

    For a meta-path of even length ``2h`` the commuting matrix is ``B @ B.T``
    with ``B`` the product of the first ``h`` factors; for odd length the middle
    same-type factor ``W`` sits between, ``B @ W @ B.T``.
    """

    def __init__(self, g: HinGraph, p: MetaPath):
        if not p.is_symmetric():
            raise GraphError(f"PathSim needs a symmetric meta-path, got {p}")
        self.graph, self.metapath = g, p
        h = p.length // 2
        anchor_rows = g.nodes_of_type(p.anchor)
        ident = sp.identity(len(anchor_rows), dtype=np.uint64, format="csr")
        self.half = _chain(g, p, ident, range(h)) if h else ident
        if p.length % 2:
            self.left_half = checked_matmul(self.half, _factor(g, p, h))
        else:
            self.left_half = self.half
        self.nodes = anchor_rows
        self._local = g.local_index(p.anchor)
        self.diagonal = _checked_rowsum_product(self.left_half, self.half)
        self._half_t = self.half.T.tocsr()

    def _check(self, *nodes: int) -> np.ndarray:
        local = self._local[np.asarray(nodes, dtype=np.int64)]
        if np.any(local < 0):
            raise GraphError("PathSim is only defined between nodes of the meta-path's anchor type")
        return local

    def self_count(self, x: int) -> int:
        return int(self.diagonal[self._check(x)[0]])

    def count_row(self, x: int) -> tuple[np.ndarray, np.ndarray]:
        """Non-zero path counts from ``x``: (global target ids, uint64 counts)."""
        (lx,) = self._check(x)
        row = checked_matmul(self.left_half[[lx]], self._half_t)
        row.sort_indices()
        keep = row.data > 0
        return self.nodes[row.indices[keep]], row.data[keep].astype(np.uint64)

    def count(self, x: int, y: int) -> int:
        targets, counts = self.count_row(x)
        k = np.searchsorted(targets, y)
        return int(counts[k]) if k < len(targets) and targets[k] == y else 0

    def score(self, x: int, y: int) -> float:
        lx, ly = self._check(x, y)
        num = 2 * self.count(x, y)
        den = int(self.diagonal[lx]) + int(self.diagonal[ly])
        return num / den if den else 0.0

    def row(self, x: int) -> tuple[np.ndarray, np.ndarray]:
        """Scores for targets with a non-zero count, as (global ids, float64 scores)."""
        targets, counts = self.count_row(x)
        dx = int(self.diagonal[self._local[x]])
        dy = self.diagonal[self._local[targets]]
        if len(counts) and 2 * int(counts.max()) < _FLOAT_EXACT and dx + int(dy.max()) < _FLOAT_EXACT:
            den = dx + dy.astype(np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                scores = np.where(den > 0, 2.0 * counts.astype(np.float64) / den, 0.0)
        else:
            scores = np.array(
                [2 * int(c) / (dx + int(d)) if dx + int(d) else 0.0 for c, d in zip(counts, dy)],
                dtype=np.float64,
            )
        keep = scores > 0
        return targets[keep], scores[keep]

    def dense_row(self, x: int) -> np.ndarray:
        """Scores against every anchor-type node, in ``self.nodes`` order."""
        out = np.zeros(len(self.nodes))
        targets, scores = self.row(x)
        out[self._local[targets]] = scores
        return out

    def zero_visibility(self, x: int) -> bool:
        return self.self_count(x) == 0


def _engine(g: HinGraph, p: MetaPath) -> PathSimEngine:
    key = ("pathsim_engine", p.node_types, p.edge_types)
    eng = g._cache.get(key)
    if eng is None:
        eng = g._cache[key] = PathSimEngine(g, p)
    return eng


def pathsim(g: HinGraph, p: MetaPath, x: int, y: int) -> float:
    """2 * count(x, y) / (count(x, x) + count(y, y)); 0 when both self counts are 0."""
    return _engine(g, p).score(x, y)


def pathsim_row(g: HinGraph, p: MetaPath, x: int) -> dict[int, float]:
    targets, scores = _engine(g, p).row(x)
    return dict(zip(targets.tolist(), scores.tolist()))


@dataclass(frozen=True)
class RankedList:
    query: int
    entries: tuple[tuple[int, float], ...]
    k: int

    def __len__(self):
        return len(self.entries)

    def nodes(self) -> list[int]:
        return [n for n, _ in self.entries]


def rank_scores(nodes: np.ndarray, scores: np.ndarray, k: int | None = None) -> np.ndarray:
    """Indices ordering ``scores`` descending with ties by ascending node id."""
    order = np.lexsort((nodes, -scores))
    return order if k is None else order[:k]


def topk_search(g: HinGraph, p: MetaPath, x: int, k: int, include_self: bool = False) -> RankedList:
    if k < 1:
        raise ValueError("k must be at least 1")
    eng = _engine(g, p)
    scores = eng.dense_row(x)
    nodes = eng.nodes
    if not include_self:
        keep = nodes != x
        nodes, scores = nodes[keep], scores[keep]
    top = rank_scores(nodes, scores, k)
    return RankedList(x, tuple((int(nodes[i]), float(scores[i])) for i in top), k)
