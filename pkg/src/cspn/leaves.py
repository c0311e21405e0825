"""Univariate conditional leaves P(y | x) as generalized linear models.

Coefficient vectors are laid out as ``[w_1, ..., w_d, intercept]``; the
categorical family stores a ``(C, d + 1)`` matrix with the same layout per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaln, log_expit, logsumexp, softmax

FAMILIES = ("bernoulli", "poisson", "gaussian", "categorical")
CANONICAL_LINK = {
    "bernoulli": "logit",
    "poisson": "log",
    "gaussian": "identity",
    "categorical": "softmax",
}
DISPERSION_FLOOR = 1e-4
_ETA_MAX = 700.0


class DomainError(ValueError):
    """Raised when an observation lies outside the support of a leaf family."""


@dataclass(frozen=True, eq=False)
class GlmLeaf:
    family: str
    coeffs: np.ndarray
    dispersion: float = 1.0
    link: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown leaf family {self.family!r}")
        link = self.link or CANONICAL_LINK[self.family]
        if link != CANONICAL_LINK[self.family]:
            raise ValueError(f"family {self.family} requires link {CANONICAL_LINK[self.family]}, got {link}")
        object.__setattr__(self, "link", link)
        coeffs = np.array(self.coeffs, dtype=float)
        if self.family == "categorical":
            if coeffs.ndim != 2 or coeffs.shape[0] < 2:
                raise ValueError("categorical coeffs must be a (C, d+1) matrix with C >= 2")
        elif coeffs.ndim != 1 or coeffs.size < 1:
            raise ValueError("coeffs must be a non-empty vector")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coeffs must be finite")
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "dispersion", float(self.dispersion))

    @property
    def num_features(self) -> int:
        return self.coeffs.shape[-1] - 1

    @property
    def num_classes(self) -> int | None:
        return self.coeffs.shape[0] if self.family == "categorical" else None

    @property
    def num_params(self) -> int:
        return self.coeffs.size + (1 if self.family == "gaussian" else 0)


@dataclass(frozen=True)
class FitControl:
    max_iters: int = 50
    tol: float = 1e-8
    ridge: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")


@dataclass
class IrwlsResult:
    coeffs: np.ndarray
    objective: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def design(x, n=None) -> np.ndarray:
    """Append the intercept column: ``[x, 1]``."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        if n is None:
            x = x.reshape(1, -1)
        else:
            x = np.empty((n, 0)) if x.size == 0 else x.reshape(n, -1)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def as_rows(x, num_features) -> np.ndarray:
    """View ``x`` as an ``(n, num_features)`` matrix; a 1-D input is one point."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        if x.size != num_features:
            raise ValueError(f"expected {num_features} features, got {x.size}")
        return x.reshape(1, num_features)
    if x.shape[1] != num_features:
        raise ValueError(f"expected {num_features} features, got {x.shape[1]}")
    return x


def _rows(y, x, num_features):
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    x = as_rows(x, num_features)
    if x.shape[0] == 1 and y.size > 1:
        x = np.repeat(x, y.size, axis=0)
    return y, x, scalar


def linear_predictor(leaf: GlmLeaf, x) -> np.ndarray:
    """eta = coeffs . [x; 1]; shape (n,) or (n, C) for categorical."""
    return design(as_rows(x, leaf.num_features)) @ leaf.coeffs.T


def mean(leaf: GlmLeaf, x) -> np.ndarray:
    eta = linear_predictor(leaf, x)
    if leaf.family == "bernoulli":
        return np.exp(log_expit(eta))
    if leaf.family == "poisson":
        return np.exp(np.minimum(eta, _ETA_MAX))
    if leaf.family == "gaussian":
        return eta
    return softmax(eta, axis=1) @ np.arange(leaf.num_classes, dtype=float)


def check_support(family: str, y, num_classes=None) -> None:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError(f"{family} observation must be finite")
    if family == "bernoulli":
        bad = (y != 0) & (y != 1)
    elif family == "poisson":
        bad = (y < 0) | (y != np.floor(y))
    elif family == "categorical":
        bad = (y < 0) | (y >= num_classes) | (y != np.floor(y))
    else:
        return
    if np.any(bad):
        raise DomainError(f"value {y[bad].flat[0]!r} outside {family} support")


def _log_density_eta(family, y, eta, dispersion):
    if family == "bernoulli":
        return log_expit(np.where(y > 0.5, eta, -eta))
    if family == "poisson":
        eta = np.minimum(eta, _ETA_MAX)
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if family == "gaussian":
        r = y - eta
        return -0.5 * (np.log(2.0 * np.pi * dispersion) + r * r / dispersion)
    lse = logsumexp(eta, axis=1)
    return np.take_along_axis(eta, y.astype(int)[:, None], axis=1)[:, 0] - lse


def leaf_log_density(leaf: GlmLeaf, y, x):
    """Exact log pmf/pdf of ``y`` given ``x``; vectorized over rows."""
    y, x, scalar = _rows(y, x, leaf.num_features)
    check_support(leaf.family, y, leaf.num_classes)
    out = _log_density_eta(leaf.family, y, linear_predictor(leaf, x), leaf.dispersion)
    return float(out[0]) if scalar else out


def leaf_mode(leaf: GlmLeaf, x):
    """Mode of P(y | x). Ties resolve to the lower value."""
    eta = linear_predictor(leaf, x)
    if leaf.family == "bernoulli":
        out = (eta > 0).astype(float)
    elif leaf.family == "poisson":
        mu = np.exp(np.minimum(eta, _ETA_MAX))
        out = np.floor(mu)
        out = np.where((out == mu) & (mu >= 1), mu - 1, out)
    elif leaf.family == "gaussian":
        out = eta
    else:
        out = np.argmax(eta, axis=1).astype(float)
    return float(out[0]) if np.ndim(x) <= 1 else out


def leaf_sample(leaf: GlmLeaf, x, rng: np.random.Generator):
    eta = linear_predictor(leaf, x)
    n = eta.shape[0]
    if leaf.family == "bernoulli":
        out = (rng.random(n) < np.exp(log_expit(eta))).astype(float)
    elif leaf.family == "poisson":
        out = rng.poisson(np.exp(np.minimum(eta, _ETA_MAX))).astype(float)
    elif leaf.family == "gaussian":
        out = eta + np.sqrt(leaf.dispersion) * rng.standard_normal(n)
    else:
        p = softmax(eta, axis=1)
        u = rng.random(n)[:, None]
        out = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), leaf.num_classes - 1).astype(float)
    return float(out[0]) if np.ndim(x) <= 1 else out


def leaf_grad(leaf: GlmLeaf, y, x) -> np.ndarray:
    """Score of the log-density w.r.t. the flattened coefficients.

    Gaussian leaves append the derivative w.r.t. log-dispersion. Returns shape
    ``(num_params,)`` for a single observation, ``(n, num_params)`` otherwise.
    """
    y, x, scalar = _rows(y, x, leaf.num_features)
    check_support(leaf.family, y, leaf.num_classes)
    a = design(x)
    eta = a @ leaf.coeffs.T
    if leaf.family == "bernoulli":
        g = (y - np.exp(log_expit(eta)))[:, None] * a
    elif leaf.family == "poisson":
        g = (y - np.exp(np.minimum(eta, _ETA_MAX)))[:, None] * a
    elif leaf.family == "gaussian":
        r = y - eta
        g = np.hstack([(r / leaf.dispersion)[:, None] * a, (-0.5 + 0.5 * r * r / leaf.dispersion)[:, None]])
    else:
        onehot = np.zeros_like(eta)
        onehot[np.arange(len(y)), y.astype(int)] = 1.0
        resid = onehot - softmax(eta, axis=1)
        g = (resid[:, :, None] * a[:, None, :]).reshape(len(y), -1)
    return g[0] if scalar else g


# -- fitting ------------------------------------------------------------------


def _nll(family, y, eta):
    return -np.sum(_log_density_eta(family, y, eta, 1.0))


def _working_weights(family, eta):
    if family == "bernoulli":
        p = np.exp(log_expit(eta))
        return p * (1 - p), p
    if family == "poisson":
        mu = np.exp(np.minimum(eta, _ETA_MAX))
        return mu, mu
    return np.ones_like(eta), eta


def _initial_coeffs(family, y, p):
    beta = np.zeros(p)
    ybar = float(np.mean(y))
    if family == "bernoulli":
        ybar = min(max(ybar, 1e-3), 1 - 1e-3)
        beta[-1] = np.log(ybar / (1 - ybar))
    elif family == "poisson":
        beta[-1] = np.log(max(ybar, 1e-3))
    return beta


def irwls(family: str, y, x, ctrl: FitControl = FitControl()) -> IrwlsResult:
    """Ridge-penalized IRWLS for the scalar-parameter families.

    Minimizes ``-loglik + ridge/2 * ||beta||^2`` (unit dispersion for the
    gaussian). Each reweighted least-squares step is solved as an augmented
    least-squares problem with an SVD-based solver; a step that increases the
    objective is halved until it does not.
    """
    y = np.asarray(y, dtype=float).ravel()
    a = design(x, n=len(y))
    n, p = a.shape
    lam = ctrl.ridge
    pen = np.sqrt(lam) * np.eye(p)

    def objective(b):
        return _nll(family, y, a @ b) + 0.5 * lam * float(b @ b)

    beta = _initial_coeffs(family, y, p)
    obj = objective(beta)
    res = IrwlsResult(coeffs=beta, objective=[obj])
    for it in range(1, ctrl.max_iters + 1):
        eta = a @ beta
        w, mu = _working_weights(family, eta)
        sw = np.sqrt(np.maximum(w, 1e-10))
        lhs = np.vstack([sw[:, None] * a, pen])
        rhs = np.concatenate([sw * eta + (y - mu) / sw, np.zeros(p)])
        proposal, *_ = linalg.lstsq(lhs, rhs, lapack_driver="gelsd")
        new_obj = objective(proposal)
        halvings = 0
        while not (new_obj <= obj) and halvings < 50:
            proposal = 0.5 * (beta + proposal)
            new_obj = objective(proposal)
            halvings += 1
        if not (new_obj <= obj):
            # no descent direction left: at the optimum to machine precision
            res.converged = True
            res.iterations = it
            break
        change = (obj - new_obj) / (abs(new_obj) + 0.1)
        beta, obj = proposal, new_obj
        res.objective.append(obj)
        res.iterations = it
        if change < ctrl.tol:
            res.converged = True
            break
    res.coeffs = beta
    return res


def _fit_categorical(y, x, num_classes, ctrl):
    y = np.asarray(y, dtype=int).ravel()
    a = design(x, n=len(y))
    n, p = a.shape
    c = num_classes
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    lam = ctrl.ridge
    freq = (onehot.sum(axis=0) + 1.0) / (n + c)
    w = np.zeros((c, p))
    w[:, -1] = np.log(freq) - np.mean(np.log(freq))

    def objective(wm):
        eta = a @ wm.T
        return -np.sum(eta[np.arange(n), y] - logsumexp(eta, axis=1)) + 0.5 * lam * float(np.sum(wm * wm))

    obj = objective(w)
    for _ in range(ctrl.max_iters):
        prob = softmax(a @ w.T, axis=1)
        grad = ((onehot - prob).T @ a) - lam * w
        hess = np.zeros((c * p, c * p))
        for i in range(c):
            for j in range(c):
                wij = prob[:, i] * ((i == j) - prob[:, j])
                hess[i * p:(i + 1) * p, j * p:(j + 1) * p] = (a * wij[:, None]).T @ a
        hess += lam * np.eye(c * p)
        step, *_ = linalg.lstsq(hess, grad.ravel(), lapack_driver="gelsd")
        step = step.reshape(c, p)
        # shifting every class row equally leaves the likelihood unchanged and
        # only adds ridge penalty, so the optimum has zero class-mean
        step -= (w + step).mean(axis=0)
        t = 1.0
        new = w + step
        new_obj = objective(new)
        while not (new_obj <= obj) and t > 1e-12:
            t *= 0.5
            new = w + t * step
            new_obj = objective(new)
        if not (new_obj <= obj):
            break
        change = (obj - new_obj) / (abs(new_obj) + 0.1)
        moved = t * float(np.max(np.abs(step)))
        w, obj = new, new_obj
        if change < ctrl.tol and moved < 1e-10:
            break
    return w


def fit_irwls(family: str, y, x, ctrl: FitControl = FitControl(), num_classes: int | None = None) -> GlmLeaf:
    """Fit a GLM leaf to rows ``(y_i, x_i)`` by penalized IRWLS."""
    if family not in FAMILIES:
        raise ValueError(f"unknown leaf family {family!r}")
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 1:
        raise ValueError("need at least one row")
    x = np.asarray(x, dtype=float)
    x = np.empty((len(y), 0)) if x.size == 0 else x.reshape(len(y), -1)
    if family == "categorical":
        if num_classes is None:
            num_classes = int(np.max(y)) + 1
        check_support(family, y, max(num_classes, 2))
        return GlmLeaf("categorical", _fit_categorical(y, x, max(num_classes, 2), ctrl))
    check_support(family, y)
    if family == "gaussian" and y.size < 2:
        raise ValueError("gaussian leaf needs at least two rows to estimate dispersion")
    beta = irwls(family, y, x, ctrl).coeffs
    dispersion = 1.0
    if family == "gaussian":
        resid = y - design(x) @ beta
        dispersion = max(float(np.mean(resid * resid)), DISPERSION_FLOOR)
    return GlmLeaf(family, beta, dispersion)
