"""End-to-end refinement of circuit parameters by conditional log-likelihood ascent.

Every parameter is unconstrained in the flat vector: leaf coefficients as-is,
gaussian dispersions as logs, softmax gates as their coefficient matrices and
constant gates as logits. Gradients come from one reverse sweep over the
log-space circuit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from . import leaves as lv
from ._rng import make_rng
from .circuit import GATING, LEAF, PRODUCT, Circuit, GatingFunction, NumericError, _batch, forward

LOG_DISPERSION_FLOOR = np.log(lv.DISPERSION_FLOOR)
LOG_COLUMNS = ("epoch", "train_cll", "valid_cll", "grad_norm", "seconds")


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Slot:
    node_id: int
    role: str  # coeffs | log_dispersion | gate_softmax | gate_logits
    start: int
    shape: tuple

    @property
    def stop(self) -> int:
        return self.start + int(np.prod(self.shape))


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple

    @classmethod
    def from_circuit(cls, circuit: Circuit) -> "ParamVector":
        slots, chunks, pos = [], [], 0

        def add(nid, role, arr):
            nonlocal pos
            arr = np.asarray(arr, dtype=float)
            slots.append(Slot(nid, role, pos, arr.shape))
            chunks.append(arr.ravel())
            pos += arr.size

        for nid in circuit.order:
            node = circuit.nodes[nid]
            if node.kind == LEAF:
                add(nid, "coeffs", node.leaf.coeffs)
                if node.leaf.family == "gaussian":
                    add(nid, "log_dispersion", [np.log(node.leaf.dispersion)])
            elif node.kind == GATING:
                if node.gate.kind == "softmax":
                    add(nid, "gate_softmax", node.gate.params)
                else:
                    add(nid, "gate_logits", np.log(np.maximum(node.gate.params, 1e-300)))
        values = np.concatenate(chunks) if chunks else np.empty(0)
        return cls(values, tuple(slots))

    def get(self, slot: Slot) -> np.ndarray:
        return self.values[slot.start : slot.stop].reshape(slot.shape)

    def to_circuit(self, circuit: Circuit, values=None) -> Circuit:
        """Copy of ``circuit`` with parameters taken from ``values`` (default: own values)."""
        pv = self if values is None else ParamVector(np.asarray(values, dtype=float), self.layout)
        nodes = dict(circuit.nodes)
        for s in pv.layout:
            node = nodes[s.node_id]
            v = pv.get(s)
            if s.role == "coeffs":
                nodes[s.node_id] = replace(node, leaf=lv.GlmLeaf(node.leaf.family, v.copy(), node.leaf.dispersion))
            elif s.role == "log_dispersion":
                nodes[s.node_id] = replace(node, leaf=lv.GlmLeaf(node.leaf.family, node.leaf.coeffs, float(np.exp(v[0]))))
            elif s.role == "gate_softmax":
                nodes[s.node_id] = replace(node, gate=GatingFunction("softmax", v.copy()))
            else:
                nodes[s.node_id] = replace(node, gate=GatingFunction("constant", softmax(v)))
        out = Circuit(nodes.values(), circuit.root, circuit.num_y, circuit.num_x)
        # structure is unchanged, so the validated order carries over
        out.__dict__["order"] = circuit.order
        out.__dict__["_index"] = circuit._index
        return out


def _yx(data):
    if hasattr(data, "y") and hasattr(data, "x"):
        return np.asarray(data.y, dtype=float), np.asarray(data.x, dtype=float)
    y, x = data
    return np.asarray(y, dtype=float), np.asarray(x, dtype=float)


def mean_cll(circuit: Circuit, y, x) -> float:
    return float(np.mean(forward(circuit, y, x).values[-1]))


def cll_and_grad(circuit: Circuit, y, x, pv: ParamVector | None = None):
    """Mean conditional log-likelihood over the batch and its gradient (flat, in ``pv`` layout)."""
    y, x, _ = _batch(circuit, y, x)
    if np.any(np.isnan(y)):
        raise ValueError("training targets must be fully observed")
    pv = pv or ParamVector.from_circuit(circuit)
    fp = forward(circuit, y, x)
    n = y.shape[0]
    index = circuit._index
    adj = np.zeros_like(fp.values)
    adj[index[circuit.root]] = 1.0 / n
    slots = {}
    for s in pv.layout:
        slots.setdefault(s.node_id, []).append(s)
    grad = np.zeros_like(pv.values)

    for nid in reversed(circuit.order):
        node = circuit.nodes[nid]
        a = adj[index[nid]]
        if node.kind == PRODUCT:
            for c in node.children:
                adj[index[c]] += a
        elif node.kind == GATING:
            lw = fp.log_weights[nid]
            kids = fp.values[[index[c] for c in node.children]].T
            r = np.exp(lw + kids - fp.values[index[nid]][:, None])  # posterior responsibilities
            for k, c in enumerate(node.children):
                adj[index[c]] += a * r[:, k]
            delta = a[:, None] * (r - np.exp(lw))
            (s,) = slots[nid]
            g = delta.T @ lv.design(x) if s.role == "gate_softmax" else delta.sum(axis=0)
            grad[s.start : s.stop] = g.ravel()
        else:
            lg = a @ lv.leaf_grad(node.leaf, y[:, node.var], x)
            for s in slots[nid]:
                size = s.stop - s.start
                grad[s.start : s.stop] = lg[:size] if s.role == "coeffs" else lg[-1:]
        if np.any(np.isnan(grad)) or np.any(np.isnan(adj[index[nid]])):
            raise NumericError(nid, "NaN gradient")
    return float(np.sum(fp.values[index[circuit.root]]) / n), grad


@dataclass
class OptControl:
    step: float = 1e-2
    decay: float = 0.0  # step / (1 + decay * epoch)
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_nats: float = 10.0
    merge_valid: bool = False

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")


@dataclass
class TrainResult:
    circuit: Circuit
    log: list = field(default_factory=list)
    best_epoch: int = 0

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.log:
                w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


def _project(values, layout):
    for s in layout:
        if s.role == "log_dispersion":
            values[s.start] = max(values[s.start], LOG_DISPERSION_FLOOR)


def _run(circuit, y, x, valid, ctrl, epochs, select):
    pv = ParamVector.from_circuit(circuit)
    theta = pv.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    rng = make_rng(ctrl.seed)
    t0 = time.perf_counter()
    t = 0

    def evaluate(th):
        c = pv.to_circuit(circuit, th)
        tr, g = cll_and_grad(c, y, x, pv)
        va = mean_cll(c, *valid) if valid is not None else None
        return tr, va, float(np.linalg.norm(g))

    init_train, init_valid, gn = evaluate(theta)
    log = [{"epoch": 0, "train_cll": init_train, "valid_cll": init_valid, "grad_norm": gn, "seconds": time.perf_counter() - t0}]
    # select: best validation epoch; otherwise the final parameters
    best = (init_valid if select else init_train, 0, theta.copy())
    stale = 0
    n = y.shape[0]
    for epoch in range(1, epochs + 1):
        lr = ctrl.step / (1.0 + ctrl.decay * (epoch - 1))
        perm = rng.permutation(n)
        try:
            for start in range(0, n, ctrl.batch_size):
                rows = perm[start : start + ctrl.batch_size]
                _, g = cll_and_grad(pv.to_circuit(circuit, theta), y[rows], x[rows], pv)
                t += 1
                m = ctrl.beta1 * m + (1 - ctrl.beta1) * g
                v = ctrl.beta2 * v + (1 - ctrl.beta2) * g * g
                mhat = m / (1 - ctrl.beta1**t)
                vhat = v / (1 - ctrl.beta2**t)
                theta = theta + lr * mhat / (np.sqrt(vhat) + ctrl.eps)
                _project(theta, pv.layout)
            tr, va, gn = evaluate(theta)
        except NumericError as e:
            raise TrainingDivergedError(f"training diverged at epoch {epoch}: {e}") from e
        log.append({"epoch": epoch, "train_cll": tr, "valid_cll": va, "grad_norm": gn, "seconds": time.perf_counter() - t0})
        if not np.isfinite(tr) or tr < init_train - ctrl.divergence_nats:
            raise TrainingDivergedError(
                f"training diverged at epoch {epoch}: mean train CLL {tr:.6g} vs initial {init_train:.6g} "
                f"(limit {ctrl.divergence_nats} nats), gradient norm {gn:.3g}")
        if not select:
            best = (tr, epoch, theta)
        elif va > best[0]:
            best = (va, epoch, theta.copy())
            stale = 0
        else:
            stale += 1
            if stale >= ctrl.patience:
                break
    return pv.to_circuit(circuit, best[2]), log, best[1]


def train(circuit: Circuit, train_data, valid_data=None, ctrl: OptControl | None = None, log_path=None) -> TrainResult:
    """Adam ascent on mean CLL; returns the parameters of the best validation epoch.

    Without validation data the final parameters are returned. With
    ``ctrl.merge_valid`` the selected epoch count is rerun from the initial
    parameters on train and validation rows together.
    """
    ctrl = ctrl or OptControl()
    y, x = _yx(train_data)
    valid = _yx(valid_data) if valid_data is not None else None
    out, log, best_epoch = _run(circuit, y, x, valid, ctrl, ctrl.max_epochs, valid is not None)
    if ctrl.merge_valid and valid is not None:
        ym, xm = np.vstack([y, valid[0]]), np.vstack([x, valid[1]])
        out, merged, _ = _run(circuit, ym, xm, None, ctrl, best_epoch, False)
        log += [{**row, "epoch": f"merged:{row['epoch']}"} for row in merged]
    res = TrainResult(out, log, best_epoch)
    if log_path is not None:
        res.write_log(log_path)
    return res
