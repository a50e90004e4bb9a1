"""Curve fits of log PPL against mask fraction and rank-based group tests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy import special

ADJUSTMENTS = ("bonferroni", "holm", "none")


@dataclass
class FitReport:
    kind: str
    params: dict
    r2: float
    converged: bool
    iterations: int
    status: str = ""
    cost_history: list = field(default_factory=list)

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        p = self.params
        if self.kind == "linear":
            return p["slope"] * x + p["intercept"]
        return p["a"] * np.exp(p["b"] * x) + p.get("c", 0.0)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("cost_history")
        return out


def r_squared(y: np.ndarray, fitted: np.ndarray) -> float:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - fitted) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - ss_res / ss_tot


def fit_linear(x, y) -> FitReport:
    """Ordinary least squares ``y = slope * x + intercept``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if x.size < 3:
        raise ValueError("linear fit needs at least 3 points")
    xc = x - x.mean()
    sxx = float((xc * xc).sum())
    if sxx == 0.0:
        raise ValueError("degenerate x: all values equal")
    slope = float((xc * (y - y.mean())).sum()) / sxx
    intercept = float(y.mean() - slope * x.mean())
    r2 = r_squared(y, slope * x + intercept)
    return FitReport("linear", {"slope": slope, "intercept": intercept}, r2, True, 0, "closed form")


def _exp_model(theta, x, offset):
    a, b = theta[0], theta[1]
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(b * x)
        f = a * e + (theta[2] if offset else 0.0)
    return f, e


def fit_exponential(x, y, offset: bool = False, max_iter: int = 200, tol: float = 1e-10,
                    floor: float = 1e-12) -> FitReport:
    """Levenberg-Marquardt fit of ``y = a * exp(b * x) (+ c)``.

    Starts from a log-linear regression on ``max(y, floor)``. Converged means
    that within ``max_iter`` iterations an accepted step changed the
    residual sum of squares by less than ``tol`` relative to its previous
    value, or the residual fell to the rounding level of ``y``. Failure is
    reported in the status, never raised.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if x.size < 4:
        raise ValueError("exponential fit needs at least 4 points")
    logy = np.log(np.maximum(y, floor))
    xc = x - x.mean()
    sxx = float((xc * xc).sum())
    b0 = float((xc * (logy - logy.mean())).sum()) / sxx if sxx else 0.0
    a0 = math.exp(float(logy.mean() - b0 * x.mean()))
    theta = np.array([a0, b0] + ([0.0] if offset else []), dtype=np.float64)

    f, _ = _exp_model(theta, x, offset)
    cost = float(((y - f) ** 2).sum())
    history = [cost]
    lam = 1e-3
    # Residuals at rounding level of the data cannot improve further.
    noise_floor = y.size * (np.finfo(np.float64).eps * max(1.0, float(np.abs(y).max()))) ** 2
    converged = bool(cost <= noise_floor)
    status = "exact fit at initialisation" if converged else ""
    it = 0
    while not converged and it < max_iter:
        it += 1
        f, e = _exp_model(theta, x, offset)
        cols = [e, theta[0] * x * e] + ([np.ones_like(x)] if offset else [])
        jac = np.stack(cols, axis=1)
        r = y - f
        if not (np.isfinite(jac).all() and np.isfinite(r).all()):
            status = "non-finite model evaluation"
            break
        a = jac.T @ jac
        g = jac.T @ r
        damp = np.diag(np.maximum(np.diag(a), 1e-300))
        try:
            step = np.linalg.solve(a + lam * damp, g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = theta + step
        f_new, _ = _exp_model(trial, x, offset)
        new_cost = float(((y - f_new) ** 2).sum()) if np.isfinite(f_new).all() else math.inf
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            theta, cost = trial, new_cost
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if rel < tol or cost <= noise_floor:
                converged = True
                status = ("relative residual change below tolerance" if rel < tol
                          else "residual at rounding level")
        else:
            lam *= 10.0
            if lam > 1e16:
                status = "damping exhausted without progress"
                break
    if not converged and not status:
        status = f"no convergence within {max_iter} iterations"
    params = {"a": float(theta[0]), "b": float(theta[1])}
    if offset:
        params["c"] = float(theta[2])
    fitted, _ = _exp_model(theta, x, offset)
    r2 = r_squared(y, fitted) if np.isfinite(fitted).all() else float("nan")
    return FitReport("exponential", params, r2, converged, it, status, history)


# tail probabilities ----------------------------------------------------------


def chi_squared_tail(x: float, df: int) -> float:
    """Upper tail P(X >= x) of a chi-squared variable with ``df`` degrees of freedom."""
    if isinstance(df, bool) or int(df) != df or df < 1:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    if x < 0:
        raise ValueError("x must be non-negative")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def normal_tail(z: float) -> float:
    """Upper tail P(Z >= z) of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# rank tests -------------------------------------------------------------------


def rank_with_ties(values) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks (1-based) and the sizes of every tie group."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    ties = []
    i = 0
    n = values.size
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        ties.append(j - i + 1)
        i = j + 1
    return ranks, np.asarray(ties, dtype=np.float64)


def _pool(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("every group must be non-empty")
    sizes = np.array([g.size for g in groups])
    ranks, ties = rank_with_ties(np.concatenate(groups))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    mean_ranks = np.array([ranks[bounds[i]:bounds[i + 1]].mean() for i in range(len(groups))])
    return sizes, mean_ranks, ties


def kruskal_wallis(groups) -> tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-squared p-value (df = groups - 1)."""
    sizes, mean_ranks, ties = _pool(groups)
    n = float(sizes.sum())
    correction = 1.0 - float((ties ** 3 - ties).sum()) / (n ** 3 - n) if n > 1 else 0.0
    if correction <= 0.0:
        return 0.0, 1.0
    h = 12.0 / (n * (n + 1.0)) * float((sizes * mean_ranks ** 2).sum()) - 3.0 * (n + 1.0)
    h = max(h / correction, 0.0)
    return h, chi_squared_tail(h, len(sizes) - 1)


@dataclass
class DunnPair:
    group_a: str
    group_b: str
    z: float
    p_raw: float
    p_adj: float


@dataclass
class DunnReport:
    h: float
    p: float
    pairs: list
    adjustment: str

    def pair(self, a: str, b: str) -> DunnPair:
        for rec in self.pairs:
            if (rec.group_a, rec.group_b) in ((a, b), (b, a)):
                return rec
        raise KeyError((a, b))

    def to_dict(self) -> dict:
        return {"kruskal_wallis": {"h": self.h, "p": self.p}, "adjustment": self.adjustment,
                "pairs": [asdict(p) for p in self.pairs]}


def adjust_pvalues(p, method: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    m = p.size
    if method == "none":
        return p.copy()
    if method == "bonferroni":
        return np.minimum(p * m, 1.0)
    if method == "holm":
        order = np.argsort(p, kind="mergesort")
        adj = np.empty(m)
        running = 0.0
        for rank, idx in enumerate(order):
            running = max(running, min(1.0, (m - rank) * p[idx]))
            adj[idx] = running
        return adj
    raise ValueError(f"adjustment must be one of {ADJUSTMENTS}")


def dunn_test(groups, adjustment: str = "bonferroni", names=None) -> DunnReport:
    """Dunn's pairwise post-hoc comparisons with tie-corrected standard errors.

    ``z`` for pair (A, B) is ``(mean rank A - mean rank B) / SE``; p-values
    are two-sided.
    """
    if adjustment not in ADJUSTMENTS:
        raise ValueError(f"adjustment must be one of {ADJUSTMENTS}")
    sizes, mean_ranks, ties = _pool(groups)
    names = [str(i) for i in range(len(sizes))] if names is None else [str(n) for n in names]
    if len(names) != len(sizes):
        raise ValueError("one name per group required")
    h, p_kw = kruskal_wallis(groups)
    n = float(sizes.sum())
    tie_term = float((ties ** 3 - ties).sum()) / (12.0 * (n - 1.0))
    base = n * (n + 1.0) / 12.0 - tie_term
    raw = []
    zs = []
    pairs = list(combinations(range(len(sizes)), 2))
    for i, j in pairs:
        se = math.sqrt(max(base, 0.0) * (1.0 / sizes[i] + 1.0 / sizes[j]))
        diff = float(mean_ranks[i] - mean_ranks[j])
        z = diff / se if se > 0 else 0.0
        zs.append(z)
        raw.append(min(1.0, 2.0 * normal_tail(abs(z))))
    adj = adjust_pvalues(raw, adjustment)
    records = [DunnPair(names[i], names[j], zs[k], raw[k], float(adj[k]))
               for k, (i, j) in enumerate(pairs)]
    return DunnReport(h, p_kw, records, adjustment)
