"""Conditional sum-product networks: structure, validation and exact inference.

A circuit is an id-indexed table of nodes. Evaluation walks a precomputed
children-first order, so no recursion is involved and every query touches each
node once. All values are log-probabilities of shape ``(n,)`` for a batch of
``n`` evidence rows. Marginalized target values are encoded as ``NaN``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from . import leaves as lv
from ._rng import make_rng

LEAF, PRODUCT, GATING = "leaf", "product", "gating"
FORMAT_VERSION = 1
WEIGHT_FLOOR = 1e-300
_LOG_WEIGHT_FLOOR = np.log(WEIGHT_FLOOR)


class NumericError(ArithmeticError):
    def __init__(self, node_id, message="non-finite value"):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class InvalidCircuitError(ValueError):
    def __init__(self, report):
        super().__init__("; ".join(str(v) for v in report))
        self.report = report


class ModelParseError(ValueError):
    """Malformed model file; carries the byte offset and node id when known."""

    def __init__(self, message, offset=None, node_id=None):
        where = []
        if offset is not None:
            where.append(f"byte {offset}")
        if node_id is not None:
            where.append(f"node {node_id}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.node_id = node_id


@dataclass(frozen=True, eq=False)
class GatingFunction:
    """Normalized nonnegative map from x to K mixing weights.

    ``constant`` stores K weights summing to one; ``softmax`` stores a
    ``(K, d + 1)`` coefficient matrix applied to ``[x; 1]``.
    """

    kind: str
    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=float)
        if self.kind == "constant":
            if p.ndim != 1 or p.size < 1:
                raise ValueError("constant gate needs a weight vector")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("constant gate weights must be nonnegative and sum to 1")
        elif self.kind == "softmax":
            if p.ndim != 2 or p.shape[0] < 1:
                raise ValueError("softmax gate needs a (K, d+1) coefficient matrix")
        else:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if not np.all(np.isfinite(p)):
            raise ValueError("gate parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @classmethod
    def constant(cls, weights):
        w = np.asarray(weights, dtype=float)
        return cls("constant", w / w.sum())

    @property
    def num_children(self) -> int:
        return self.params.shape[0]

    @property
    def num_features(self) -> int | None:
        return self.params.shape[1] - 1 if self.kind == "softmax" else None

    def log_weights(self, x) -> np.ndarray:
        """(n, K) log-weights, floored at log(1e-300)."""
        x = np.asarray(x, dtype=float)
        n = x.shape[0] if x.ndim == 2 else 1
        if self.kind == "constant":
            lw = np.log(np.maximum(self.params, WEIGHT_FLOOR))
            return np.broadcast_to(lw, (n, lw.size))
        lw = log_softmax(lv.design(lv.as_rows(x, self.num_features)) @ self.params.T, axis=1)
        return np.maximum(lw, _LOG_WEIGHT_FLOOR)

    def weights(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            n = x.shape[0] if x.ndim == 2 else 1
            return np.broadcast_to(self.params, (n, self.params.size))
        return softmax(lv.design(lv.as_rows(x, self.num_features)) @ self.params.T, axis=1)


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    kind: str
    scope: tuple
    children: tuple = ()
    leaf: lv.GlmLeaf | None = None
    gate: GatingFunction | None = None

    @property
    def var(self) -> int:
        return self.scope[0]


@dataclass(frozen=True)
class Violation:
    node_id: int | None
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind} at node {self.node_id}: {self.message}"


class Circuit:
    """Rooted DAG over targets ``0..num_y-1`` conditioned on ``num_x`` features."""

    def __init__(self, nodes: Iterable[Node], root: int, num_y: int, num_x: int):
        self.nodes = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ValueError(f"duplicate node id {node.id}")
            self.nodes[node.id] = node
        self.root = root
        self.num_y = int(num_y)
        self.num_x = int(num_x)

    def __len__(self):
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return sum(len(n.children) for n in self.nodes.values())

    def reachable(self) -> list:
        seen, stack = set(), [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen or nid not in self.nodes:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].children)
        return sorted(seen)

    def _topological(self):
        # iterative DFS; returns (children-first order, cycle node or None)
        state, order = {}, []
        stack = [(self.root, iter(self.nodes[self.root].children))] if self.root in self.nodes else []
        if stack:
            state[self.root] = 1
        while stack:
            nid, it = stack[-1]
            for child in it:
                if child not in self.nodes:
                    continue
                s = state.get(child, 0)
                if s == 1:
                    return order, child
                if s == 0:
                    state[child] = 1
                    stack.append((child, iter(self.nodes[child].children)))
                    break
            else:
                stack.pop()
                state[nid] = 2
                order.append(nid)
        return order, None

    @cached_property
    def order(self) -> tuple:
        """Node ids, children before parents; raises on an invalid circuit."""
        report = validate(self)
        if report:
            raise InvalidCircuitError(report)
        order, _ = self._topological()
        return tuple(order)

    @cached_property
    def _index(self):
        return {nid: i for i, nid in enumerate(self.order)}

    def node(self, nid) -> Node:
        return self.nodes[nid]


def validate(circuit: Circuit) -> list:
    """Return every structural violation; an empty list means the circuit is valid."""
    report = []
    nodes = circuit.nodes
    if circuit.root not in nodes:
        return [Violation(circuit.root, "root", "root id not in node table")]
    for node in nodes.values():
        for c in node.children:
            if c not in nodes:
                report.append(Violation(node.id, "dangling-child", f"child {c} does not exist"))
    order, cyc = circuit._topological()
    if cyc is not None:
        report.append(Violation(cyc, "acyclicity", "cycle through this node"))
        return report
    for nid in order:
        node = nodes[nid]
        scope = set(node.scope)
        if not scope:
            report.append(Violation(nid, "empty-scope", "scope is empty"))
        if any(v < 0 or v >= circuit.num_y for v in scope):
            report.append(Violation(nid, "scope-range", f"scope {sorted(scope)} outside 0..{circuit.num_y - 1}"))
        if node.kind == LEAF:
            if node.leaf is None or len(scope) != 1:
                report.append(Violation(nid, "leaf", "leaf needs a distribution and a single-variable scope"))
            elif node.leaf.num_features != circuit.num_x:
                report.append(Violation(nid, "features", f"leaf expects {node.leaf.num_features} features"))
            continue
        if node.kind not in (PRODUCT, GATING):
            report.append(Violation(nid, "kind", f"unknown node kind {node.kind!r}"))
            continue
        kids = [nodes[c] for c in node.children if c in nodes]
        if not kids:
            report.append(Violation(nid, "arity", "inner node without children"))
            continue
        union = set().union(*(set(k.scope) for k in kids))
        if union != scope:
            report.append(Violation(nid, "scope-union", f"scope {sorted(scope)} != union of children {sorted(union)}"))
        if node.kind == PRODUCT:
            seen = set()
            for k in kids:
                overlap = seen & set(k.scope)
                if overlap:
                    report.append(Violation(nid, "decomposability", f"children overlap on {sorted(overlap)}"))
                    break
                seen |= set(k.scope)
        else:
            for k in kids:
                if set(k.scope) != set(kids[0].scope):
                    report.append(Violation(nid, "completeness", "children scopes differ"))
                    break
            gate = node.gate
            if gate is None or gate.num_children != len(node.children):
                report.append(Violation(nid, "gate-arity", "gate output count != number of children"))
            elif gate.kind == "softmax" and gate.num_features != circuit.num_x:
                report.append(Violation(nid, "features", f"gate expects {gate.num_features} features"))
    root = nodes[circuit.root]
    if set(root.scope) != set(range(circuit.num_y)):
        report.append(Violation(circuit.root, "root-scope", "root scope is not all of Y"))
    return report


class CircuitBuilder:
    """Incremental construction; scopes of inner nodes are derived from children."""

    def __init__(self, num_y: int, num_x: int):
        self.num_y = num_y
        self.num_x = num_x
        self._nodes = {}
        self._next = 0

    def _add(self, **kw):
        nid = self._next
        self._next += 1
        self._nodes[nid] = Node(id=nid, **kw)
        return nid

    def scope(self, nid) -> tuple:
        return self._nodes[nid].scope

    def leaf(self, var: int, leaf: lv.GlmLeaf) -> int:
        return self._add(kind=LEAF, scope=(int(var),), leaf=leaf)

    def product(self, children: Sequence[int]) -> int:
        scope = tuple(sorted(set().union(*(self._nodes[c].scope for c in children))))
        return self._add(kind=PRODUCT, scope=scope, children=tuple(children))

    def gating(self, children: Sequence[int], gate: GatingFunction) -> int:
        scope = tuple(sorted(set().union(*(self._nodes[c].scope for c in children))))
        return self._add(kind=GATING, scope=scope, children=tuple(children), gate=gate)

    def build(self, root: int) -> Circuit:
        return Circuit(self._nodes.values(), root, self.num_y, self.num_x)


@dataclass
class Evidence:
    """One query: fully observed features and per-target observed values.

    ``y`` entries that are ``None`` (or NaN) are marginalized.
    """

    x: Sequence[float]
    y: Sequence

    def arrays(self):
        y = np.array([np.nan if v is None else float(v) for v in self.y], dtype=float)
        return y, np.asarray(self.x, dtype=float)


@dataclass
class ForwardPass:
    order: tuple
    values: np.ndarray  # (num_nodes, n) in `order`
    node_visits: int = 0
    edge_visits: int = 0
    log_weights: dict = field(default_factory=dict)

    def value(self, nid):
        return self.values[self.order.index(nid)]


def _batch(circuit, y, x):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != circuit.num_y:
        raise ValueError(f"expected {circuit.num_y} target slots, got {y.shape[1]}")
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        x = lv.as_rows(x, circuit.num_x)
    if x.shape[1] != circuit.num_x:
        raise ValueError(f"expected {circuit.num_x} features, got {x.shape[1]}")
    if x.shape[0] == 1 and y.shape[0] > 1:
        x = np.repeat(x, y.shape[0], axis=0)
    if y.shape[0] == 1 and x.shape[0] > 1:
        y = np.repeat(y, x.shape[0], axis=0)
    if x.shape[0] != y.shape[0]:
        raise ValueError("y and x row counts differ")
    return y, x, single and x.shape[0] == 1


def _leaf_values(node, y, x, mode):
    col = y[:, node.var]
    obs = ~np.isnan(col)
    out = np.zeros(len(col))
    if obs.any():
        out[obs] = lv.leaf_log_density(node.leaf, col[obs], x[obs])
    if mode == "max" and not obs.all():
        xm = x[~obs]
        out[~obs] = lv.leaf_log_density(node.leaf, lv.leaf_mode(node.leaf, xm), xm)
    return out


def forward(circuit: Circuit, y, x, mode: str = "sum") -> ForwardPass:
    """Bottom-up pass. ``mode='max'`` replaces gating log-sum-exp by max."""
    y, x, _ = _batch(circuit, y, x)
    order = circuit.order
    index = circuit._index
    vals = np.empty((len(order), y.shape[0]))
    fp = ForwardPass(order=order, values=vals)
    for i, nid in enumerate(order):
        node = circuit.nodes[nid]
        fp.node_visits += 1
        if node.kind == LEAF:
            with np.errstate(over="ignore", invalid="ignore"):
                v = _leaf_values(node, y, x, mode)
        else:
            fp.edge_visits += len(node.children)
            kids = vals[[index[c] for c in node.children]]
            if node.kind == PRODUCT:
                v = kids.sum(axis=0)
            else:
                lw = node.gate.log_weights(x)
                if not np.all(np.isfinite(lw)):
                    raise NumericError(nid, "non-finite gating weight")
                fp.log_weights[nid] = lw
                terms = lw.T + kids
                v = logsumexp(terms, axis=0) if mode == "sum" else terms.max(axis=0)
        if np.any(np.isnan(v)) or np.any(np.isposinf(v)) or (node.kind == LEAF and not np.all(np.isfinite(v))):
            raise NumericError(nid)
        vals[i] = v
    return fp


def _root_value(circuit, y, x, mode="sum"):
    yy, xx, single = _batch(circuit, y, x)
    fp = forward(circuit, yy, xx, mode)
    out = fp.values[-1]
    return float(out[0]) if single else out


def log_density(circuit: Circuit, y, x):
    """log P(y | x) for fully observed ``y``; scalar for one row, (n,) for a batch."""
    if np.any(np.isnan(np.asarray(y, dtype=float))):
        raise ValueError("log_density needs every target observed; use log_marginal")
    return _root_value(circuit, y, x)


def log_marginal(circuit: Circuit, y, x):
    """log P(y_obs | x) with NaN entries of ``y`` summed/integrated out."""
    return _root_value(circuit, y, x)


def evaluate(circuit: Circuit, ev: Evidence):
    y, x = ev.arrays()
    return log_marginal(circuit, y, x)


def _top_down(circuit, x, choose, leaf_value):
    """Shared top-down decoder for MPE and sampling (batched over rows of x)."""
    n = x.shape[0]
    out = np.full((n, circuit.num_y), np.nan)
    active = {circuit.root: np.ones(n, dtype=bool)}
    for nid in reversed(circuit.order):
        rows = active.pop(nid, None)
        if rows is None or not rows.any():
            continue
        node = circuit.nodes[nid]
        if node.kind == LEAF:
            out[rows, node.var] = leaf_value(node, x[rows])
        elif node.kind == PRODUCT:
            for c in node.children:
                active[c] = active.get(c, np.zeros(n, dtype=bool)) | rows
        else:
            pick = np.full(n, -1)
            pick[rows] = choose(node, rows)
            for k, c in enumerate(node.children):
                active[c] = active.get(c, np.zeros(n, dtype=bool)) | (pick == k)
    return out


def mpe(circuit: Circuit, x):
    """Max-product decoding of the most probable y given x.

    Ties pick the lowest child index at gating nodes and the lowest value at
    leaves.
    """
    xb = np.asarray(x, dtype=float)
    single = xb.ndim < 2
    xb = lv.as_rows(xb, circuit.num_x)
    y0 = np.full((xb.shape[0], circuit.num_y), np.nan)
    fp = forward(circuit, y0, xb, mode="max")
    index = circuit._index

    def choose(node, rows):
        kids = fp.values[[index[c] for c in node.children]][:, rows]
        return np.argmax(fp.log_weights[node.id][rows].T + kids, axis=0)

    out = _top_down(circuit, xb, choose, lambda node, xr: lv.leaf_mode(node.leaf, xr))
    return out[0] if single else out


def sample(circuit: Circuit, x, rng=None):
    """Ancestral sampling; ``rng`` is a seed or a caller-owned Generator."""
    rng = make_rng(rng)
    xb = np.asarray(x, dtype=float)
    single = xb.ndim < 2
    xb = lv.as_rows(xb, circuit.num_x)
    _ = circuit.order

    def choose(node, rows):
        w = node.gate.weights(xb[rows])
        u = rng.random(int(rows.sum()))[:, None]
        return np.minimum((np.cumsum(w, axis=1) < u).sum(axis=1), w.shape[1] - 1)

    out = _top_down(circuit, xb, choose, lambda node, xr: lv.leaf_sample(node.leaf, xr, rng))
    return out[0] if single else out


def expectation(circuit: Circuit, x) -> np.ndarray:
    """E[Y | x] for every target, shape (n, num_y) (or (num_y,) for one point)."""
    xb = np.asarray(x, dtype=float)
    single = xb.ndim < 2
    xb = lv.as_rows(xb, circuit.num_x)
    n = xb.shape[0]
    means = {}
    for nid in circuit.order:
        node = circuit.nodes[nid]
        m = np.zeros((n, circuit.num_y))
        if node.kind == LEAF:
            m[:, node.var] = lv.mean(node.leaf, xb)
        elif node.kind == PRODUCT:
            for c in node.children:
                m += means[c]
        else:
            w = node.gate.weights(xb)
            for k, c in enumerate(node.children):
                m += w[:, k:k + 1] * means[c]
        means[nid] = m
    out = means[circuit.root]
    return out[0] if single else out


def structure_summary(circuit: Circuit) -> dict:
    counts = {LEAF: 0, PRODUCT: 0, GATING: 0}
    families = {}
    depth = {}
    for nid in circuit.order:
        node = circuit.nodes[nid]
        counts[node.kind] += 1
        if node.kind == LEAF:
            families[node.leaf.family] = families.get(node.leaf.family, 0) + 1
            depth[nid] = 0
        else:
            depth[nid] = 1 + max(depth[c] for c in node.children)
    root = circuit.nodes[circuit.root]
    return {
        "nodes": len(circuit.order),
        "edges": circuit.num_edges,
        "leaf": counts[LEAF],
        "product": counts[PRODUCT],
        "gating": counts[GATING],
        "depth": depth[circuit.root],
        "root_kind": root.kind,
        "root_partition": [list(circuit.nodes[c].scope) for c in root.children] if root.kind == PRODUCT else [list(root.scope)],
        "leaf_families": dict(sorted(families.items())),
    }


# -- model files ----------------------------------------------------------------


def _dump(obj) -> str:
    # 17 significant digits: files round-trip bit-exactly
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            raise ValueError("cannot serialize non-finite real")
        return format(float(obj), ".16e")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_dict(circuit: Circuit) -> dict:
    records = []
    for nid in sorted(circuit.nodes):
        node = circuit.nodes[nid]
        rec = {"id": node.id, "kind": node.kind, "scope": list(node.scope)}
        if node.kind != LEAF:
            rec["children"] = list(node.children)
        if node.kind == GATING:
            rec["gate"] = {"kind": node.gate.kind, "params": node.gate.params.tolist()}
        if node.kind == LEAF:
            leaf = node.leaf
            extra = {"dispersion": leaf.dispersion}
            if leaf.family == "categorical":
                extra["num_classes"] = leaf.num_classes
            rec["leaf"] = {"family": leaf.family, "link": leaf.link, "coeffs": leaf.coeffs.ravel().tolist(), "extra": extra}
        records.append(rec)
    return {
        "format_version": FORMAT_VERSION,
        "num_y": circuit.num_y,
        "num_x": circuit.num_x,
        "nodes": records,
        "root": circuit.root,
    }


def dumps(circuit: Circuit) -> str:
    d = to_dict(circuit)
    lines = [
        "{",
        f'  "format_version": {d["format_version"]},',
        f'  "num_y": {d["num_y"]},',
        f'  "num_x": {d["num_x"]},',
        f'  "root": {d["root"]},',
        '  "nodes": [',
    ]
    lines.append(",\n".join("    " + _dump(rec) for rec in d["nodes"]))
    lines += ["  ]", "}"]
    return "\n".join(lines) + "\n"


def _node_offset(text, nid):
    m = re.search(r'"id"\s*:\s*%d\b' % nid, text)
    return None if m is None else len(text[: m.start()].encode("utf-8"))


def loads(text: str) -> Circuit:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelParseError(f"invalid JSON: {e.msg}", offset=len(text[: e.pos].encode("utf-8"))) from None
    if not isinstance(d, dict):
        raise ModelParseError("top level must be an object", offset=0)
    for key in ("format_version", "num_y", "num_x", "nodes", "root"):
        if key not in d:
            raise ModelParseError(f"missing key {key!r}", offset=0)
    if d["format_version"] != FORMAT_VERSION:
        raise ModelParseError(f"unsupported format_version {d['format_version']}", offset=0)
    nodes = []
    for rec in d["nodes"]:
        nid = rec.get("id") if isinstance(rec, dict) else None
        off = _node_offset(text, nid) if isinstance(nid, int) else None
        try:
            nodes.append(_parse_node(rec))
        except ModelParseError as e:
            raise ModelParseError(str(e).split(" (")[0], offset=off, node_id=nid) from None
        except (KeyError, TypeError, ValueError) as e:
            raise ModelParseError(f"bad node record: {e}", offset=off, node_id=nid) from None
    try:
        circuit = Circuit(nodes, d["root"], d["num_y"], d["num_x"])
    except ValueError as e:
        raise ModelParseError(str(e), offset=0) from None
    report = validate(circuit)
    if report:
        v = report[0]
        kind = "cycle" if v.kind == "acyclicity" else v.kind
        raise ModelParseError(f"{kind}: {v.message}", offset=_node_offset(text, v.node_id) if v.node_id is not None else None, node_id=v.node_id)
    return circuit


def _parse_node(rec) -> Node:
    nid = int(rec["id"])
    kind = rec["kind"]
    scope = tuple(int(v) for v in rec["scope"])
    if kind == LEAF:
        spec = rec["leaf"]
        family = spec["family"]
        if family not in lv.FAMILIES:
            raise ModelParseError(f"unknown leaf family {family!r}", node_id=nid)
        extra = spec.get("extra", {}) or {}
        coeffs = np.asarray(spec["coeffs"], dtype=float)
        if family == "categorical":
            coeffs = coeffs.reshape(int(extra["num_classes"]), -1)
        leaf = lv.GlmLeaf(family, coeffs, float(extra.get("dispersion", 1.0)), spec.get("link", ""))
        return Node(nid, LEAF, scope, leaf=leaf)
    if kind == PRODUCT:
        return Node(nid, PRODUCT, scope, tuple(int(c) for c in rec["children"]))
    if kind == GATING:
        g = rec["gate"]
        if g["kind"] not in ("constant", "softmax"):
            raise ModelParseError(f"unknown gate kind {g['kind']!r}", node_id=nid)
        gate = GatingFunction(g["kind"], np.asarray(g["params"], dtype=float))
        return Node(nid, GATING, scope, tuple(int(c) for c in rec["children"]), gate=gate)
    raise ModelParseError(f"unknown node kind {kind!r}", node_id=nid)


def save(circuit: Circuit, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(circuit))


def load(path) -> Circuit:
    with open(path, "r", encoding="utf-8") as f:
        return loads(f.read())
