"""Byzantine-tolerant aggregation rules, pluggable in place of the mean.

All rules are pure functions over a list of equal-dimension vectors.  Krum is
a selection rule (returns one of its inputs); the others synthesize a vector.
"""

from __future__ import annotations

import numpy as np

from .numeric import ParameterError, as_vector, vec_mean


def _stack(vectors) -> np.ndarray:
    vs = [as_vector(v) for v in vectors]
    if not vs:
        raise ParameterError("no vectors to aggregate")
    dim = vs[0].shape[0]
    if any(v.shape[0] != dim for v in vs):
        raise ParameterError("aggregation inputs must share a dimension")
    return np.stack(vs)


def krum_scores(X: np.ndarray, n_excluded: int) -> np.ndarray:
    """Score of each row: sum of squared distances to its nearest neighbors.

    Neighbor count is n - n_excluded - 2 (self excluded).
    """
    n = X.shape[0]
    keep = n - n_excluded - 2
    if keep < 1:
        raise ParameterError(f"too few vectors ({n}) for {n_excluded} excluded")
    diffs = X[:, None, :] - X[None, :, :]
    d2 = np.sum(diffs * diffs, axis=2)
    np.fill_diagonal(d2, np.inf)
    sorted_d2 = np.sort(d2, axis=1)
    return np.sum(sorted_d2[:, :keep], axis=1)


def krum_index(X: np.ndarray, n_excluded: int) -> int:
    # ties break toward the lowest input index (argmin returns the first)
    return int(np.argmin(krum_scores(X, n_excluded)))


def krum(vectors, delta: float = 0.0) -> np.ndarray:
    """Return the input vector with the smallest Krum score.

    delta is the assumed Byzantine fraction; floor(delta * n) + 2 vectors are
    excluded from each score's neighbor set.
    """
    X = _stack(vectors)
    n = X.shape[0]
    f = int(np.floor(delta * n))
    if n < f + 3:
        raise ParameterError(f"krum needs n >= {f + 3} vectors, got {n}")
    return X[krum_index(X, f)].copy()


def geometric_median(vectors, max_iters: int = 200, tol: float = 1e-8) -> np.ndarray:
    """Weiszfeld iteration for the approximate geometric median."""
    X = _stack(vectors)
    if X.shape[0] == 1:
        return X[0].copy()
    nu = np.mean(X, axis=0)
    for _ in range(max_iters):
        dists = np.linalg.norm(X - nu, axis=1)
        if np.any(dists < tol):
            # iterate landed on a data point: perturb and continue
            nu = nu + tol
            dists = np.linalg.norm(X - nu, axis=1)
        weights = 1.0 / dists
        new_nu = np.sum(X * weights[:, None], axis=0) / np.sum(weights)
        if np.linalg.norm(new_nu - nu) < tol:
            return new_nu
        nu = new_nu
    return nu


def trimmed_mean(vectors, zeta: float) -> np.ndarray:
    """Per-coordinate mean after removing the floor(zeta*n) extremes per side."""
    if not (0.0 <= zeta < 0.5):
        raise ParameterError("zeta must lie in [0, 0.5)")
    X = _stack(vectors)
    n = X.shape[0]
    t = int(np.floor(zeta * n))
    if n - 2 * t < 1:
        raise ParameterError("trimming would remove every value")
    s = np.sort(X, axis=0)
    return np.mean(s[t : n - t], axis=0)


def coord_median(vectors) -> np.ndarray:
    """Per-coordinate median; even counts average the two central values."""
    return np.median(_stack(vectors), axis=0)


def centered_clip(vectors, v0, tau: float, iters: int = 1) -> np.ndarray:
    """Iterative clipped averaging from an initial center v0."""
    if tau < 0:
        raise ParameterError("tau must be >= 0")
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    X = _stack(vectors)
    nu = as_vector(v0).copy()
    if nu.shape[0] != X.shape[1]:
        raise ParameterError("v0 dimension mismatch")
    n = X.shape[0]
    for _ in range(iters):
        diffs = X - nu
        norms = np.linalg.norm(diffs, axis=1)
        # zero distance contributes the raw (zero) difference
        factors = np.where(norms > 0, np.minimum(1.0, np.divide(tau, norms, out=np.full_like(norms, np.inf), where=norms > 0)), 1.0)
        nu = nu + np.sum(diffs * factors[:, None], axis=0) / n
    return nu


def worker_momentum(grad, prev_beta, zeta_t: float) -> np.ndarray:
    """Exponential moving average of gradients shared in place of gradients."""
    if not (0.0 <= zeta_t <= 1.0):
        raise ParameterError("zeta_t must lie in [0, 1]")
    g = as_vector(grad)
    b = as_vector(prev_beta)
    if g.shape != b.shape:
        raise ParameterError("gradient and momentum dims differ")
    return (1.0 - zeta_t) * g + zeta_t * b


def bulyan(vectors, d: int, inner: str = "krum") -> np.ndarray:
    """Recursive selection via the inner rule, then per-coordinate averaging
    of the values closest to the coordinate-wise median.

    gamma = n - 2d vectors are selected; zeta = gamma - 2d values per
    coordinate are averaged.  Requires n >= 4d + 3.
    """
    if inner == "bulyan":
        raise ParameterError("bulyan cannot nest itself")
    X = _stack(vectors)
    n = X.shape[0]
    if d < 0:
        raise ParameterError("d must be >= 0")
    if n < 4 * d + 3:
        raise ParameterError(f"bulyan needs n >= {4 * d + 3} vectors, got {n}")
    gamma = n - 2 * d
    zeta = gamma - 2 * d

    remaining = list(range(n))
    selected: list[int] = []
    while len(selected) < gamma:
        if len(remaining) == gamma - len(selected):
            selected.extend(remaining)
            break
        pool = X[remaining]
        if inner == "krum" and len(remaining) >= d + 3:
            pick = krum_index(pool, d)
        elif inner == "geometric_median" or len(remaining) < d + 3:
            gm = geometric_median(pool)
            pick = int(np.argmin(np.linalg.norm(pool - gm, axis=1)))
        else:
            raise ParameterError(f"unknown inner rule {inner!r}")
        selected.append(remaining.pop(pick))

    S = X[sorted(selected)]
    out = np.empty(X.shape[1])
    for i in range(X.shape[1]):
        col = S[:, i]
        # median restricted to the observed values (argmin of summed distance)
        costs = np.sum(np.abs(col[None, :] - col[:, None]), axis=1)
        med = col[int(np.argmin(costs))]
        order = np.argsort(np.abs(col - med), kind="stable")
        out[i] = float(np.mean(col[order[:zeta]]))
    return out


AGGREGATORS = {
    "mean": lambda vs, **kw: vec_mean(vs),
    "krum": lambda vs, **kw: krum(vs, kw.get("delta", 0.0)),
    "geometric_median": lambda vs, **kw: geometric_median(
        vs, kw.get("max_iters", 200), kw.get("tol", 1e-8)
    ),
    "bulyan": lambda vs, **kw: bulyan(vs, kw.get("d", 1), kw.get("inner", "krum")),
    "trimmed_mean": lambda vs, **kw: trimmed_mean(vs, kw.get("zeta", 0.1)),
    "coord_median": lambda vs, **kw: coord_median(vs),
    "centered_clip": lambda vs, **kw: centered_clip(
        vs, kw.get("v0", np.zeros(np.asarray(vs[0]).shape[0])), kw.get("tau", 1.0), kw.get("iters", 5)
    ),
}


def aggregate(name: str, vectors, **params) -> np.ndarray:
    if name not in AGGREGATORS:
        raise ParameterError(f"unknown aggregator {name!r}")
    return AGGREGATORS[name](vectors, **params)
