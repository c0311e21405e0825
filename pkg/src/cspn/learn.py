"""Structure learning for conditional circuits.

Recursion over (rows, targets): one target gives a GLM leaf; too few rows give
a factorized product of leaves; otherwise targets are split into conditionally
independent groups (product node) or, failing that, rows are clustered on X
and a softmax gate is fitted to the cluster labels (gating node).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import log_softmax, logsumexp

from . import citest
from . import leaves as lv
from ._rng import child_seed, make_rng, stream
from .circuit import Circuit, CircuitBuilder, GatingFunction
from .data import Dataset

CLUSTER_METHODS = ("kmeans", "random_split")


class LeafFitError(ArithmeticError):
    pass


@dataclass
class LearnParams:
    min_instances: int = 256
    alpha: float = 0.05
    K: int = 2
    cluster_method: str = "kmeans"
    seed: int = 0
    min_frac: float | None = None  # factorize once rows <= min_frac * total rows
    max_depth: int | None = None
    gating_ridge: float = 1e-3
    leaf_ridge: float = 1e-6
    threads: int = 1
    guard: bool = True  # keep a gating node only if it beats the factorized alternative

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.min_instances < 2 * self.K:
            raise ValueError("min_instances must be at least 2*K")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.cluster_method not in CLUSTER_METHODS:
            raise ValueError(f"cluster_method must be one of {CLUSTER_METHODS}")
        if self.min_frac is not None and not 0 < self.min_frac < 1:
            raise ValueError("min_frac must lie in (0, 1)")


@dataclass
class ClusterAssignment:
    labels: np.ndarray

    @property
    def num_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_clusters)


@dataclass
class LearnStats:
    ci_tests: int = 0
    root_ci_tests: int = 0  # pairwise tests run at the root: |Y| choose 2 when the root is split
    product_splits: int = 0
    gating_splits: int = 0
    forced_splits: int = 0
    rejected_gatings: int = 0
    factorized: int = 0
    leaves: int = 0
    seconds: float = 0.0
    ci_methods: dict = field(default_factory=dict)


def _relabel(labels) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    return inv.astype(np.int64)


def _standardize(x):
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=0) if x.size else np.zeros(x.shape[1])
    sd = x.std(axis=0) if x.size else np.ones(x.shape[1])
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (x - mu) / sd, mu, sd


def kmeans(x, k: int, rng, max_iter: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm on standardized columns with farthest-first seeding."""
    z, _, _ = _standardize(x)
    n = z.shape[0]
    centers = [int(rng.integers(n))]
    mind = np.sum((z - z[centers[0]]) ** 2, axis=1)
    while len(centers) < k:
        nxt = int(np.argmax(mind))
        if mind[nxt] <= 0:
            break
        centers.append(nxt)
        mind = np.minimum(mind, np.sum((z - z[nxt]) ** 2, axis=1))
    c = z[centers]
    labels = np.zeros(n, dtype=np.int64)
    for it in range(max_iter):
        d2 = np.sum((z[:, None, :] - c[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if it > 0 and np.array_equal(new, labels):
            break
        labels = new
        c = np.array([z[labels == j].mean(axis=0) if np.any(labels == j) else c[j] for j in range(len(c))])
    return ClusterAssignment(_relabel(labels))


def random_hyperplane_split(x, k: int, rng) -> ClusterAssignment:
    """Repeatedly cut the largest cluster by a random direction at its median projection."""
    z, _, _ = _standardize(x)
    labels = np.zeros(z.shape[0], dtype=np.int64)
    stuck = set()
    while labels.max() + 1 < k:
        sizes = np.bincount(labels)
        order = [j for j in np.argsort(-sizes, kind="stable") if j not in stuck]
        if not order:
            break
        j = order[0]
        rows = np.flatnonzero(labels == j)
        proj = z[rows] @ rng.standard_normal(z.shape[1]) if z.shape[1] else np.zeros(rows.size)
        side = proj > np.median(proj)
        if side.all() or not side.any():
            stuck.add(j)
            continue
        labels[rows[side]] = labels.max() + 1
    return ClusterAssignment(_relabel(labels))


def split_instances(x, K: int = 2, method: str = "kmeans", seed=0) -> ClusterAssignment:
    x = np.asarray(x, dtype=float)
    if x.shape[0] < K:
        raise ValueError("fewer rows than clusters")
    rng = make_rng(seed)
    if method == "kmeans":
        return kmeans(x, K, rng)
    if method == "random_split":
        return random_hyperplane_split(x, K, rng)
    raise ValueError(f"unknown cluster method {method!r}")


def balanced_split(n: int, K: int, rng) -> ClusterAssignment:
    labels = np.empty(n, dtype=np.int64)
    labels[rng.permutation(n)] = np.arange(n) % K
    return ClusterAssignment(labels)


def fit_gating(x, z, ridge: float = 1e-3, gtol: float = 1e-6, max_iter: int = 500) -> GatingFunction:
    """Softmax regression of cluster labels on ``[x; 1]``.

    Minimizes ``-sum log g_{z_i}(x_i) + ridge/2 ||W||^2`` over the raw-scale
    coefficients with L-BFGS; the search runs in standardized coordinates for
    conditioning but the objective is unchanged.
    """
    labels = np.asarray(z.labels if isinstance(z, ClusterAssignment) else z, dtype=np.int64)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    K = int(labels.max()) + 1
    if K < 2:
        raise ValueError("fit_gating needs at least two clusters")
    n, d = x.shape
    _, mu, sd = _standardize(x)
    # raw coefficients beta = theta @ T^T maps standardized to raw scale
    T = np.zeros((d + 1, d + 1))
    T[:d, :d] = np.diag(1.0 / sd)
    T[d, :d] = -mu / sd
    T[d, d] = 1.0
    A = lv.design(x)
    onehot = np.eye(K)[labels]

    def objective(theta):
        beta = theta.reshape(K, d + 1) @ T.T
        logits = A @ beta.T
        lse = logsumexp(logits, axis=1)
        f = np.sum(lse) - np.sum(logits[onehot.astype(bool)]) + 0.5 * ridge * np.sum(beta * beta)
        p = np.exp(logits - lse[:, None])
        g_beta = (p - onehot).T @ A + ridge * beta
        return f, (g_beta @ T).ravel()

    res = optimize.minimize(objective, np.zeros(K * (d + 1)), jac=True, method="L-BFGS-B",
                            options={"gtol": gtol, "maxiter": max_iter, "maxcor": 20, "ftol": 0.0})
    beta = res.x.reshape(K, d + 1) @ T.T
    beta -= beta.mean(axis=0)  # likelihood-invariant; also minimizes the penalty
    return GatingFunction("softmax", beta)


# -- intermediate tree ------------------------------------------------------------


class _Leaf:
    def __init__(self, var, glm):
        self.var, self.glm = var, glm

    def ll(self, y, x):
        return lv.leaf_log_density(self.glm, y[:, self.var], x)

    def emit(self, b):
        return b.leaf(self.var, self.glm)


class _Product:
    def __init__(self, children):
        self.children = children

    def ll(self, y, x):
        return sum(c.ll(y, x) for c in self.children)

    def emit(self, b):
        return b.product([c.emit(b) for c in self.children])


class _Gating:
    def __init__(self, children, gate):
        self.children, self.gate = children, gate

    def ll(self, y, x):
        kids = np.stack([c.ll(y, x) for c in self.children], axis=1)
        return logsumexp(self.gate.log_weights(x) + kids, axis=1)

    def emit(self, b):
        return b.gating([c.emit(b) for c in self.children], self.gate)


class _Learner:
    def __init__(self, data: Dataset, params: LearnParams, stats: LearnStats):
        self.y, self.x = data.y, data.x
        self.cols = data.y_columns
        self.p = params
        self.stats = stats
        self.total = data.n
        self.ctrl = lv.FitControl(ridge=params.leaf_ridge)

    def leaf(self, var, rows, path):
        col = self.cols[var]
        try:
            glm = lv.fit_irwls(col.family, self.y[rows, var], self.x[rows], self.ctrl,
                               num_classes=col.num_classes if col.type == "categorical" else None)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
            raise LeafFitError(f"leaf fit failed for {col.name} at node path {list(path)} ({rows.size} rows): {e}") from e
        self.stats.leaves += 1
        return _Leaf(var, glm)

    def factorized(self, scope, rows, path, count=True):
        self.stats.factorized += count
        return _Product([self.leaf(v, rows, path + (i,)) for i, v in enumerate(scope)])

    def node_seed(self, path, salt):
        return child_seed(stream(self.p.seed, salt, *path))

    def cluster(self, rows, path):
        x = self.x[rows]
        assign = split_instances(x, self.p.K, self.p.cluster_method, self.node_seed(path, 1))
        sizes = assign.sizes
        if assign.num_clusters < 2 or sizes.min() < 2:
            self.stats.forced_splits += 1
            assign = balanced_split(rows.size, self.p.K, make_rng(self.node_seed(path, 2)))
        return assign

    def learn(self, scope, rows, path=(), depth=0):
        if len(scope) == 1:
            return self.leaf(scope[0], rows, path)
        p = self.p
        if (rows.size < p.min_instances
                or (p.min_frac is not None and rows.size <= p.min_frac * self.total)
                or (p.max_depth is not None and depth >= p.max_depth)):
            return self.factorized(scope, rows, path)

        graph = citest.dependence_graph(self.y[np.ix_(rows, scope)], self.x[rows], p.alpha,
                                        self.node_seed(path, 0), p.threads)
        self.stats.ci_tests += graph.num_tests
        if not path:
            self.stats.root_ci_tests = graph.num_tests
        for res in graph.tests.values():
            self.stats.ci_methods[res.method] = self.stats.ci_methods.get(res.method, 0) + 1
        blocks = [[scope[i] for i in comp] for comp in graph.connected_components()]
        if len(blocks) > 1:
            self.stats.product_splits += 1
            return _Product([self.learn(b, rows, path + (i,), depth + 1) for i, b in enumerate(blocks)])

        assign = self.cluster(rows, path)
        gate = fit_gating(self.x[rows], assign, ridge=p.gating_ridge)
        kids = [self.learn(scope, rows[assign.labels == k], path + (k,), depth + 1) for k in range(assign.num_clusters)]
        node = _Gating(kids, gate)
        if p.guard:
            y, x = self.y[rows], self.x[rows]
            alt = self.factorized(scope, rows, path, count=False)
            if np.sum(alt.ll(y, x)) > np.sum(node.ll(y, x)):
                self.stats.rejected_gatings += 1
                self.stats.factorized += 1
                return alt
        self.stats.gating_splits += 1
        return node


def learn_cspn(data: Dataset, params: LearnParams | None = None, stats: LearnStats | None = None) -> Circuit:
    """Learn a circuit for P(Y | X) from ``data``; ``stats`` (if given) receives telemetry."""
    params = params or LearnParams()
    stats = stats if stats is not None else LearnStats()
    if data.n == 0:
        raise ValueError("cannot learn from an empty dataset")
    ny = len(data.schema.y_indices)
    if ny == 0:
        raise ValueError("dataset declares no target columns")
    t0 = time.perf_counter()
    tree = _Learner(data, params, stats).learn(list(range(ny)), np.arange(data.n))
    b = CircuitBuilder(ny, len(data.schema.x_indices))
    circuit = b.build(tree.emit(b))
    stats.seconds = time.perf_counter() - t0
    return circuit


def factorized_baseline(data: Dataset, leaf_ridge: float = 1e-6) -> Circuit:
    """Product of independently fitted GLM leaves, one per target."""
    params = LearnParams(min_instances=max(2 * 2, data.n + 1), leaf_ridge=leaf_ridge)
    return learn_cspn(data, params)
