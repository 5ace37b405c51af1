"""Recorded operation graphs (a flat tape) and reverse-mode differentiation.

A :class:`Graph` is an append-only sequence of op records.  Ops from
:mod:`reduceformer.ops` append a node whenever one of their inputs is bound
to a graph, so recording is opt-in: wrap the tensors you want gradients for
with :meth:`Graph.leaf` and run the same functions you would run eagerly.
Node inputs always precede the node itself, so the tape order is already a
topological order and the backward sweep is a single reverse pass.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .tensor import ShapeError, Tensor


class GraphError(RuntimeError):
    """Graph construction or traversal error."""


class UnregisteredOpError(GraphError):
    """backward() met a node kind with no registered adjoint."""


class Node:
    """One op record: kind, input node ids (None = constant input), and the
    saved arrays/attributes its adjoint needs."""

    __slots__ = ("kind", "inputs", "saved", "shape", "dtype")

    def __init__(self, kind, inputs, saved, shape, dtype):
        self.kind = kind
        self.inputs = inputs
        self.saved = saved
        self.shape = shape
        self.dtype = dtype


class Graph:
    """Append-only tape of :class:`Node` records."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self.leaf_ids: list[int] = []
        self._leaf_names: Dict[str, int] = {}

    def add(self, kind: str, inputs: tuple, saved: dict, shape, dtype) -> int:
        nid = len(self.nodes)
        for i in inputs:
            if i is not None and not (0 <= i < nid):
                raise GraphError(f"node input id {i} does not precede node {nid}")
        self.nodes.append(Node(kind, inputs, saved, shape, dtype))
        return nid

    def leaf(self, t: Tensor, name: Optional[str] = None) -> Tensor:
        """Register ``t`` as a differentiable input and return the bound tensor."""
        nid = self.add("leaf", (), {"name": name}, t.shape, t.dtype)
        self.leaf_ids.append(nid)
        if name is not None:
            if name in self._leaf_names:
                raise GraphError(f"duplicate leaf name {name!r}")
            self._leaf_names[name] = nid
        return Tensor(t.data, self, nid)

    def leaf_id(self, name: str) -> int:
        return self._leaf_names[name]

    def mark_output(self, t: Tensor) -> None:
        if t.graph is not self:
            raise GraphError("output tensor is not bound to this graph")
        self.outputs.append(t.nid)

    def kinds(self) -> list[str]:
        """Node kinds in tape order (for structural scans)."""
        return [n.kind for n in self.nodes]


# kind -> adjoint(node, grad_out) -> list of (input_position, grad_array)
_ADJOINTS: Dict[str, Callable] = {}


def register_adjoint(kind: str):
    def deco(fn):
        _ADJOINTS[kind] = fn
        return fn
    return deco


def adjoint_registry() -> Dict[str, Callable]:
    """Live adjoint table (exposed so tests can install broken fixtures)."""
    return _ADJOINTS


def backward(g: Graph, seed: Tensor, output: Optional[Tensor] = None) -> Dict[int, np.ndarray]:
    """Reverse-mode sweep: d(output)/d(leaf) for every leaf, seeded with ``seed``.

    ``output`` defaults to the last node marked via :meth:`Graph.mark_output`,
    falling back to the final node of the tape.  Gradients accumulate over
    every use of a node.  Returns {leaf node id: gradient array}; leaves the
    output does not depend on get zero gradients.
    """
    if not g.nodes:
        raise GraphError("empty graph")
    if output is not None:
        if output.graph is not g:
            raise GraphError("output tensor is not bound to this graph")
        out_id = output.nid
    elif g.outputs:
        out_id = g.outputs[-1]
    else:
        out_id = len(g.nodes) - 1
    out_node = g.nodes[out_id]
    if tuple(seed.shape) != tuple(out_node.shape):
        raise ShapeError(
            f"seed shape {seed.shape} does not match output shape {out_node.shape}")

    grads: Dict[int, np.ndarray] = {out_id: seed.data.astype(out_node.dtype, copy=True)}
    for nid in range(out_id, -1, -1):
        gout = grads.pop(nid, None)
        if gout is None:
            continue
        node = g.nodes[nid]
        if node.kind == "leaf":
            grads[nid] = gout  # keep: it is a result
            continue
        fn = _ADJOINTS.get(node.kind)
        if fn is None:
            raise UnregisteredOpError(f"no adjoint registered for op kind {node.kind!r}")
        for pos, contrib in fn(node, gout):
            iid = node.inputs[pos]
            if iid is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + contrib
            else:
                grads[iid] = contrib
    result: Dict[int, np.ndarray] = {}
    for lid in g.leaf_ids:
        if lid in grads:
            result[lid] = grads[lid]
        else:
            n = g.nodes[lid]
            result[lid] = np.zeros(n.shape, dtype=n.dtype)
    return result


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` must build a scalar-output graph from its (bound or unbound)
    argument.  The numeric side perturbs one coordinate at a time:
    ``(f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps)``.  Error metric per
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if x.dtype != np.float64:
        raise ValueError("finite_diff_check requires a float64 tensor")
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")

    g = Graph()
    xt = g.leaf(x)
    out = f(xt)
    if out.graph is not g:
        raise GraphError("f() did not record onto the probe graph")
    if tuple(out.shape) != (1, 1, 1, 1):
        raise ShapeError(f"f() must return a scalar tensor, got shape {out.shape}")
    g.mark_output(out)
    analytic = backward(g, Tensor.from_values((1, 1, 1, 1), [1.0], np.float64))[xt.nid]

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        fp = float(f(Tensor(bumped.reshape(x.shape))).data.reshape(()))
        bumped[i] = flat[i] - eps
        fm = float(f(Tensor(bumped.reshape(x.shape))).data.reshape(()))
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return worst
