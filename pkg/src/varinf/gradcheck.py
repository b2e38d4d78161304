"""Finite-difference checks of every registered operation and of random composite graphs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from .ndgraph import OP_TAGS, Graph, NodeId, grad_check


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    passed: bool
    n_checked: int
    n_skipped: int


def _weighted_sum(g: Graph, out: NodeId, rng: np.random.Generator) -> NodeId:
    if g.shape(out) == (1,):
        return out
    w = g.add_constant(rng.normal(size=g.shape(out)))
    return g.apply("sum", g.apply("mul", out, w))


def _away_from_zero(rng, shape, low=0.2):
    x = rng.uniform(low, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_case(tag: str, rng: np.random.Generator) -> Tuple[Graph, NodeId, List[NodeId]]:
    g = Graph()
    p = lambda shape, x=None: g.add_parameter(shape, rng.normal(size=shape) if x is None else x)
    if tag in ("add", "sub", "mul"):
        a, b = p((4, 3)), p((3,))
        out = g.apply("add", g.apply(tag, a, b), g.apply(tag, a, p((4, 3))))
        params = [a, b]
    elif tag == "matmul":
        a, b = p((2, 3)), p((3, 4))
        out, params = g.apply("matmul", a, b), [a, b]
    elif tag == "affine":
        x, w, b = p((5, 3)), p((4, 3)), p((4,))
        out, params = g.apply("affine", x, w, b), [x, w, b]
    elif tag == "scalar_mul":
        a = p((3, 2))
        out, params = g.apply("scalar_mul", a, c=-2.5), [a]
    elif tag == "relu":
        a = p((4, 3), _away_from_zero(rng, (4, 3)))
        out, params = g.apply("relu", a), [a]
    elif tag == "log":
        a = p((3, 3), rng.uniform(0.5, 3.0, size=(3, 3)))
        out, params = g.apply("log", a), [a]
    elif tag == "transpose":
        a = p((2, 5))
        out, params = g.apply("transpose", a), [a]
    elif tag in ("exp", "square", "neg", "sum", "mean"):
        a = p((3, 4))
        out, params = g.apply(tag, a), [a]
    else:
        raise KeyError(tag)
    return g, _weighted_sum(g, out, rng), params


def _composite(rng: np.random.Generator) -> Tuple[Graph, NodeId, List[NodeId]]:
    """Random 3-layer relu network with a squared-error or log-density style head."""
    g = Graph()
    widths = [int(w) for w in rng.integers(2, 6, size=4)]
    batch = int(rng.integers(2, 6))
    x = g.add_constant(rng.normal(size=(batch, widths[0])))
    params = []
    h = x
    for i in range(3):
        w = g.add_parameter((widths[i + 1], widths[i]), rng.normal(size=(widths[i + 1], widths[i])))
        b = g.add_parameter((widths[i + 1],), rng.normal(size=widths[i + 1]))
        params += [w, b]
        h = g.apply("affine", h, w, b)
        if i < 2:
            h = g.apply("relu", h)
    y = g.add_constant(rng.normal(size=(batch, widths[3])))
    head = int(rng.integers(0, 3))
    if head == 0:
        out = g.apply("sum", g.apply("square", g.apply("sub", h, y)))
    elif head == 1:
        ls = g.add_parameter((widths[3],), 0.3 * rng.normal(size=widths[3]))
        params.append(ls)
        z = g.apply("mul", g.apply("sub", y, h), g.apply("exp", g.apply("neg", ls)))
        out = g.apply("mean", g.apply("sub", g.apply("scalar_mul", g.apply("square", z), c=-0.5), ls))
    else:
        m = g.apply("matmul", g.apply("transpose", h), h)
        out = g.apply("log", g.apply("add", g.apply("sum", m), g.add_constant([1.0 + 1e-3])))
        out = g.apply("add", out, g.apply("sum", g.apply("square", h)))
    return g, out, params


def _check(name: str, g: Graph, out: NodeId, params: List[NodeId], step: float, tol: float) -> CaseResult:
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        rep = grad_check(g, out, p, step=step, tol=tol)
        worst = max(worst, rep.max_rel_error)
        checked += rep.n_checked
        skipped += len(rep.skipped)
    return CaseResult(name, worst, worst < tol, checked, skipped)


def run_suite(seed: int = 0, n_composites: int = 20, step: float = 1e-5, tol: float = 1e-5) -> List[CaseResult]:
    rng = np.random.default_rng(seed)
    results = []
    for tag in OP_TAGS:
        g, out, params = _op_case(tag, rng)
        results.append(_check(tag, g, out, params, step, tol))
    for i in range(n_composites):
        g, out, params = _composite(rng)
        results.append(_check(f"composite_{i:02d}", g, out, params, step, tol))
    return results
