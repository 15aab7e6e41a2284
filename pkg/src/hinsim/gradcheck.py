"""Finite-difference verification of the full encoder/decoder gradient."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hin import HinGraph, NetworkSchema, parse_metapath, synth_graph
from .model import ModelParams, init_params, predict
from .pathsim import PathSimEngine


@dataclass
class GradcheckReport:
    coordinates: int
    within_tol: int
    certified: int
    max_rel_error: float
    failures: list[tuple[str, tuple[int, ...], float, bool]] = field(default_factory=list)

    @property
    def fraction_within(self) -> float:
        return self.within_tol / self.coordinates if self.coordinates else 1.0

    @property
    def passed(self) -> bool:
        uncertified = any(not cert for *_, cert in self.failures)
        return self.fraction_within >= 0.95 and not uncertified

    def to_json(self) -> dict:
        return {
            "coordinates": self.coordinates,
            "within_tol": self.within_tol,
            "fraction_within": self.fraction_within,
            "certified_failures": self.certified,
            "uncertified_failures": sum(1 for *_, c in self.failures if not c),
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
        }


def _loss(g, params, query, targets, labels, weights):
    tape = ad.Tape()
    w = {k: tape.param(v, k) for k, v in weights.items()}
    _, y = predict(g, query, params, targets, w=w)
    return tape, ad.mse(y, labels.reshape(-1, 1))


def gradcheck(
    g: HinGraph,
    params: ModelParams,
    query: int,
    targets,
    labels,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients of the query MSE loss.

    A coordinate outside ``tol`` is certified when the pooling winners or ReLU
    masks change somewhere within 2h of the current value, i.e. the loss is
    not smooth there and finite differences are meaningless.
    """
    targets = np.asarray(targets, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = {k: v.copy() for k, v in params.weights.items()}
    tape, loss = _loss(g, params, query, targets, labels, weights)
    base_sig = tape.selection_signature()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grads = ad.backward(tape, loss)

    def probe(name, idx, delta):
        old = weights[name][idx]
        weights[name][idx] = old + delta
        t, l = _loss(g, params, query, targets, labels, weights)
        weights[name][idx] = old
        return l.value[0, 0], t.selection_signature()

    total = ok = certified = 0
    worst = 0.0
    failures = []
    for name in sorted(weights):
        for idx in np.ndindex(*weights[name].shape):
            total += 1
            up, sig_up = probe(name, idx, h)
            down, sig_down = probe(name, idx, -h)
            fd = (up - down) / (2 * h)
            err = abs(grads[name][idx] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, err)
            if err < tol:
                ok += 1
                continue
            sigs = {sig_up, sig_down, probe(name, idx, 2 * h)[1], probe(name, idx, -2 * h)[1]}
            cert = sigs != {base_sig}
            certified += cert
            failures.append((name, idx, float(err), cert))
    return GradcheckReport(total, ok, certified, float(worst), failures)


def gradcheck_case(seed: int, d: int = 8, T: int = 2, L: int = 2, nodes: int = 30) -> GradcheckReport:
    """Gradcheck a fresh model on a seeded A-P-C graph of about ``nodes`` nodes, query loss on A-P-A."""
    schema = NetworkSchema.from_names(["A", "P", "C"], [("AP", "A", "P"), ("PC", "P", "C")])
    n_a, n_c = max(2, nodes // 3), max(1, nodes // 5)
    n_p = max(1, nodes - n_a - n_c)
    g = synth_graph(schema, {"A": n_a, "P": n_p, "C": n_c}, {"AP": min(n_a * n_p, 2 * n_p), "PC": n_p}, seed=seed)
    params = init_params(schema, d=d, T=T, L=L, seed=seed)
    engine = PathSimEngine(g, parse_metapath("A-P-A", schema))
    targets = engine.nodes
    query = int(targets[np.random.default_rng(seed).integers(len(targets))])
    return gradcheck(g, params, query, targets, engine.dense_row(query))
