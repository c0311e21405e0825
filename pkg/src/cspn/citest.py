"""Randomized conditional correlation test (RCoT) and label partitioning.

The test statistic is ``n * ||C_{ij.x}||_F^2`` where ``C_{ij.x}`` is the
empirical partial cross-covariance of random Fourier features of ``y_i`` and
``y_j`` after regressing out random Fourier features of ``x``. Under
conditional independence the statistic is asymptotically a weighted sum of
independent chi-square(1) variables; its tail is approximated by the
Lindsay-Pilla-Basak moment method, falling back to Hall-Buckley-Eagleson
gamma matching and finally to a permutation test.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats
from scipy.spatial.distance import pdist

from ._rng import make_rng, stream

LPB, HBE, PERMUTATION = "LPB", "HBE", "permutation"
MIN_ASYMPTOTIC_N = 20


class CiNumericError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class RffMap:
    bandwidth: float
    frequencies: np.ndarray  # (F, d)
    phases: np.ndarray  # (F,)

    @property
    def num_features(self) -> int:
        return self.frequencies.shape[0]

    @classmethod
    def draw(cls, points, num_features, rng=None, bandwidth=None) -> "RffMap":
        """Frequencies ~ N(0, 1/bandwidth^2), phases ~ U[0, 2 pi)."""
        points = _as_matrix(points)
        rng = make_rng(rng)
        if bandwidth is None:
            bandwidth = median_bandwidth(points)
        d = points.shape[1]
        w = rng.standard_normal((num_features, d)) / bandwidth
        b = 2.0 * np.pi * rng.random(num_features)
        return cls(float(bandwidth), w, b)


@dataclass
class CiTestResult:
    statistic: float
    p_value: float
    method: str
    eigenvalues: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


@dataclass
class DependenceGraph:
    vertices: list
    edges: dict = field(default_factory=dict)  # (i, j) -> CiTestResult, i < j
    tests: dict = field(default_factory=dict)  # every pair tested, edge or not

    @property
    def num_tests(self) -> int:
        return len(self.tests)

    def connected_components(self) -> list:
        parent = {v: v for v in self.vertices}

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for i, j in self.edges:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        groups = {}
        for v in self.vertices:
            groups.setdefault(find(v), []).append(v)
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _standardize(a) -> np.ndarray:
    a = _as_matrix(a)
    sd = a.std(axis=0)
    out = a - a.mean(axis=0)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(a).max(axis=0))
    out[:, ok] /= sd[ok]
    out[:, ~ok] = 0.0
    return out


def median_bandwidth(points, max_points: int = 500) -> float:
    """Median pairwise Euclidean distance over the first ``max_points`` rows.

    Discrete data can make the median zero; the median of the nonzero
    distances is used then, and 1.0 if every point coincides.
    """
    points = _as_matrix(points)[:max_points]
    if points.shape[0] < 2:
        return 1.0
    dist = pdist(points)
    med = float(np.median(dist))
    if med > 0:
        return med
    nz = dist[dist > 0]
    return float(np.median(nz)) if nz.size else 1.0


def rff_features(points, rmap: RffMap, center: bool = True) -> np.ndarray:
    """``sqrt(2/F) cos(W x + b)`` for each row, column-centered by default."""
    points = _as_matrix(points)
    if points.shape[1] != rmap.frequencies.shape[1]:
        raise ValueError(f"map expects dimension {rmap.frequencies.shape[1]}, got {points.shape[1]}")
    z = np.sqrt(2.0 / rmap.num_features) * np.cos(points @ rmap.frequencies.T + rmap.phases)
    if center:
        z = z - z.mean(axis=0)
    return z


# -- null distribution of a weighted sum of chi-square(1) variables --------------


def _cumulants(weights, order):
    return np.array([2.0 ** (r - 1) * math.factorial(r - 1) * np.sum(weights**r) for r in range(1, order + 1)])


def _moments(kappa):
    m = np.zeros(len(kappa))
    for n in range(1, len(kappa) + 1):
        m[n - 1] = kappa[n - 1] + sum(math.comb(n - 1, k - 1) * kappa[k - 1] * m[n - k - 1] for k in range(1, n))
    return m


def _hankel(lam, moments, n):
    """Moment matrix of the candidate mixture after removing a gamma shape ``lam``."""
    m = np.concatenate([[1.0], moments[: 2 * n]])
    c = np.concatenate([[0.0, 0.0], np.arange(1, 2 * n)]) * lam + 1.0
    m = m / np.cumprod(c)
    idx = np.add.outer(np.arange(n + 1), np.arange(n + 1))
    return m[idx]


def lpb_sf(weights, q, p: int = 4):
    """Upper tail P(sum_k w_k chi2_1 > q) by the Lindsay-Pilla-Basak method.

    Matches the first ``2p`` moments with a ``p``-component mixture of gammas
    sharing a common shape. Returns ``None`` when the moment system has no
    admissible solution.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.size < p:
        return None
    moments = _moments(_cumulants(weights, 2 * p))
    lam = moments[1] / moments[0] ** 2 - 1.0
    if not lam > 0:
        return None
    for n in range(2, p + 1):
        f = lambda t: linalg.det(_hankel(t, moments, n))  # noqa: E731
        lo, hi = 0.0, lam
        flo, fhi = f(lo), f(hi)
        if not (np.isfinite(flo) and np.isfinite(fhi)) or flo * fhi > 0:
            return None
        lam = optimize.brentq(f, lo, hi, xtol=1e-12, rtol=1e-12, maxiter=500)
        if not lam > 0:
            return None
    mat = _hankel(lam, moments, p)
    coeffs = np.array([(-1) ** i * linalg.det(np.delete(mat[:p], i, axis=1)) for i in range(p + 1)])
    roots = np.polynomial.polynomial.polyroots(coeffs)
    if np.any(np.abs(roots.imag) > 1e-8 * np.maximum(1.0, np.abs(roots.real))):
        return None
    mu = roots.real
    if np.any(mu <= 0):
        return None
    vdm = np.vander(mu, p, increasing=True).T
    try:
        pi = linalg.solve(vdm, mat[:p, 0])
    except linalg.LinAlgError:
        return None
    if np.any(pi < -1e-8) or abs(pi.sum() - 1.0) > 1e-6:
        return None
    shape = 1.0 / lam
    sf = float(np.sum(pi * stats.gamma.sf(q, a=shape, scale=mu * lam)))
    if not np.isfinite(sf) or sf < -1e-8 or sf > 1 + 1e-8:
        return None
    return min(max(sf, 0.0), 1.0)


def hbe_sf(weights, q):
    """Upper tail by three-cumulant chi-square matching (Hall-Buckley-Eagleson)."""
    k1, k2, k3 = _cumulants(np.asarray(weights, dtype=float), 3)
    if not (k2 > 0 and k3 > 0):
        return None
    nu = 8.0 * k2**3 / k3**2
    t = np.sqrt(2.0 * nu / k2) * (q - k1) + nu
    sf = float(stats.chi2.sf(t, nu))
    return sf if np.isfinite(sf) else None


# -- the test -------------------------------------------------------------------


def _residualize(f, fz, ridge):
    """``f - fz (Czz + r I)^{-1} Czf`` with ``r = ridge * trace(Czz)``.

    Evaluated through the thin SVD of ``fz``; with s the singular values the
    fitted part is ``U diag(s^2 / (s^2 + n r)) U^T f``, which avoids forming
    the ill-conditioned inverse.
    """
    if fz is None:
        return f
    n = fz.shape[0]
    try:
        u, s, _ = linalg.svd(fz, full_matrices=False)
    except linalg.LinAlgError as e:
        raise CiNumericError(f"feature covariance decomposition failed: {e}") from None
    s2 = s * s
    r = ridge * s2.sum()
    if not r > 0:
        raise CiNumericError("singular regularized feature covariance")
    shrink = s2 / (s2 + r)
    return f - u @ (shrink[:, None] * (u.T @ f))


def _stat(rx, ry):
    n = rx.shape[0]
    c = rx.T @ ry / n
    return float(n * np.sum(c * c))


def _permutation_p(rx, ry, stat, rng, n_perm):
    hits = 0
    for _ in range(n_perm):
        if _stat(rx[rng.permutation(rx.shape[0])], ry) >= stat * (1 - 1e-12):
            hits += 1
    return (1 + hits) / (1 + n_perm)


def rcot(yi, yj, x=None, alpha: float = 0.05, seed=None, num_f_y: int = 5, num_f_x: int = 25,
         ridge: float = 1e-10, n_perm: int = 200, method: str | None = None) -> CiTestResult:
    """Test ``y_i`` independent of ``y_j`` given ``x``.

    ``method`` forces a null approximation ("LPB", "HBE", "permutation");
    by default LPB is tried first and the ladder falls back on failure. With
    fewer than 20 rows the permutation test is used directly. ``alpha`` is
    carried for interface symmetry; the decision is left to the caller.
    """
    rng = make_rng(seed)
    a, b = _standardize(yi), _standardize(yj)
    n = a.shape[0]
    fa = _standardize(rff_features(a, RffMap.draw(a, num_f_y, rng)))
    fb = _standardize(rff_features(b, RffMap.draw(b, num_f_y, rng)))
    fz = None
    if x is not None and np.size(x) > 0:
        z = _standardize(x)
        if np.any(z):
            fz = _standardize(rff_features(z, RffMap.draw(z, num_f_x, rng)))
    ra, rb = _residualize(fa, fz, ridge), _residualize(fb, fz, ridge)
    stat = _stat(ra, rb)

    prods = (ra[:, :, None] * rb[:, None, :]).reshape(n, -1)
    cov = prods.T @ prods / n
    eig = linalg.eigvalsh(cov)[::-1]
    eig = eig[eig > 1e-10 * max(eig[0], 1e-300)] if eig.size and eig[0] > 0 else np.empty(0)

    if eig.size == 0:
        # every feature is constant: permuted statistics all equal the observed one
        return CiTestResult(stat, 1.0, PERMUTATION, eig)

    ladder = [LPB, HBE, PERMUTATION] if method is None else [method]
    if n < MIN_ASYMPTOTIC_N:
        ladder = [PERMUTATION]
    for m in ladder:
        if m == LPB:
            p = lpb_sf(eig, stat)
        elif m == HBE:
            p = hbe_sf(eig, stat)
        elif m == PERMUTATION:
            p = _permutation_p(ra, rb, stat, rng, n_perm)
        else:
            raise ValueError(f"unknown null approximation {m!r}")
        if p is not None:
            return CiTestResult(stat, float(p), m, eig)
    raise CiNumericError(f"null approximation {method} failed")


def dependence_graph(y, x=None, alpha: float = 0.05, seed=0, threads: int = 1, **kw) -> DependenceGraph:
    """Run RCoT on every label pair; an edge marks conditional dependence (p <= alpha)."""
    y = _as_matrix(y)
    pairs = list(itertools.combinations(range(y.shape[1]), 2))

    def run(pair):
        i, j = pair
        return rcot(y[:, i], y[:, j], x, alpha=alpha, seed=stream(seed, i, j), **kw)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]
    graph = DependenceGraph(list(range(y.shape[1])))
    for pair, res in zip(pairs, results):
        graph.tests[pair] = res
        if res.p_value <= alpha:
            graph.edges[pair] = res
    return graph


def split_labels(y, x=None, alpha: float = 0.05, seed=0, threads: int = 1, **kw) -> list:
    """Partition label columns into connected components of the dependence graph.

    Blocks are sorted by their smallest member.
    """
    y = _as_matrix(y)
    if y.shape[1] < 2:
        raise ValueError("split_labels needs at least two labels")
    return dependence_graph(y, x, alpha, seed, threads, **kw).connected_components()
