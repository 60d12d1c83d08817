"""Regress individual symbol positions against infection presence and area.

Symbols at a position are categorical predictors (one-hot, rare symbols pooled).
Presence uses a ridge-penalised logistic regression scored by McFadden's
pseudo-R^2; area uses least squares on infected rows scored by the squared
Pearson correlation between fitted and observed values.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedFitError, ValidationError

RIDGE = 1e-3
OTHER = -1


def one_hot_design(symbols: Sequence[int], min_count: int = 2) -> tuple[np.ndarray, list[int]]:
    """One column per observed symbol; symbols seen fewer than `min_count` times share an OTHER column."""
    s = np.asarray(symbols, dtype=np.int64)
    values, counts = np.unique(s, return_counts=True)
    common = values[counts >= min_count]
    pooled = np.where(np.isin(s, common), s, OTHER)
    cats = sorted(set(pooled.tolist()))
    index = {c: j for j, c in enumerate(cats)}
    X = np.zeros((s.size, len(cats)))
    X[np.arange(s.size), [index[c] for c in pooled.tolist()]] = 1.0
    return X, cats


def _bernoulli_loglik(y: np.ndarray, eta: np.ndarray) -> float:
    # sum y*eta - log(1 + exp(eta)), computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def null_loglik(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    p = y.mean()
    if p in (0.0, 1.0):
        return 0.0
    return float(y.sum() * np.log(p) + (y.size - y.sum()) * np.log1p(-p))


def mcfadden_r2(loglik_model: float, loglik_null: float) -> float:
    return 1.0 - loglik_model / loglik_null


def fit_logistic(X: np.ndarray, y: np.ndarray, ridge: float = RIDGE, max_iter: int = 200,
                 tol: float = 1e-12) -> tuple[float, np.ndarray, float]:
    """Newton's method for an intercept plus ridge-penalised coefficients.

    Maximises loglik - ridge/2 * ||beta||^2 (intercept unpenalised).
    Returns (intercept, beta, unpenalised log-likelihood at the optimum).
    """
    n, k = X.shape
    Z = np.hstack([np.ones((n, 1)), X])
    pen = np.full(k + 1, ridge)
    pen[0] = 0.0
    p0 = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    theta = np.zeros(k + 1)
    theta[0] = np.log(p0 / (1 - p0))

    def objective(t):
        return _bernoulli_loglik(y, Z @ t) - 0.5 * np.sum(pen * t * t)

    obj = objective(theta)
    for _ in range(max_iter):
        eta = Z @ theta
        mu = 1.0 / (1.0 + np.exp(-eta))
        grad = Z.T @ (y - mu) - pen * theta
        hess = (Z * (mu * (1 - mu))[:, None]).T @ Z + np.diag(pen)
        step = np.linalg.solve(hess + 1e-12 * np.eye(k + 1), grad)
        t = 1.0
        while True:
            cand = theta + t * step
            new = objective(cand)
            if new >= obj - 1e-14 or t < 1e-10:
                break
            t *= 0.5
        theta, improved = cand, new - obj
        obj = new
        if abs(improved) <= tol * (1 + abs(obj)) and np.max(np.abs(grad)) < 1e-8 * n:
            break
    return float(theta[0]), theta[1:], _bernoulli_loglik(y, Z @ theta)


def fit_presence(symbols: Sequence[int], present: Sequence[bool], ridge: float = RIDGE, min_count: int = 2) -> float:
    """McFadden pseudo-R^2 of a logistic fit of presence on the symbol at one position."""
    y = np.asarray(present, dtype=np.float64)
    if len(symbols) != y.size:
        raise ValidationError("symbols and outcomes differ in length")
    if y.size == 0 or y.min() == y.max():
        raise UndefinedFitError("presence regression needs both outcome classes")
    X, _ = one_hot_design(symbols, min_count)
    _, _, ll = fit_logistic(X, y, ridge)
    r2 = mcfadden_r2(ll, null_loglik(y))
    return float(min(max(r2, 0.0), 1.0 - 1e-12))


def least_squares_fit(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return X @ coef


def pearson_r2(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 0.0
    return float(((a * b).sum() / den) ** 2)


def fit_area(symbols: Sequence[int], areas: Sequence[float], min_count: int = 2) -> float:
    """Squared Pearson r between least-squares fitted and observed areas, infected rows only."""
    s = np.asarray(symbols, dtype=np.int64)
    a = np.asarray(areas, dtype=np.float64)
    if s.size != a.size:
        raise ValidationError("symbols and outcomes differ in length")
    keep = a > 0
    s, a = s[keep], a[keep]
    if np.unique(a).size < 2:
        raise UndefinedFitError("area regression needs at least two distinct infected areas")
    X, _ = one_hot_design(s, min_count)
    return min(pearson_r2(least_squares_fit(X, a), a), 1.0)


def select_best_position(fits: Sequence[Optional[float]]) -> int:
    """1-based index of the largest fit; lowest position wins ties; undefined fits are skipped."""
    best, best_val = None, -np.inf
    for i, f in enumerate(fits):
        if f is not None and f > best_val:
            best, best_val = i + 1, f
    if best is None:
        raise UndefinedFitError("no symbol position produced a defined fit")
    return best


@dataclass
class RegressionResult:
    kind: str  # "presence" | "area"
    fits: list[Optional[float]]
    best_position: int
    n_rows: int
    meta: dict = field(default_factory=dict)

    @property
    def best_fit(self) -> float:
        return self.fits[self.best_position - 1]

    def to_dict(self) -> dict:
        return asdict(self)


def _fit(kind: str, symbols, present, areas, ridge: float, min_count: int) -> float:
    if kind == "presence":
        return fit_presence(symbols, present, ridge, min_count)
    if kind == "area":
        return fit_area(symbols, areas, min_count)
    raise ValidationError(f"unknown regression kind {kind!r}")


def analyze(sentences: Sequence[Sequence[int]], present: Sequence[bool], areas: Sequence[float], kind: str,
            positions: int = 4, ridge: float = RIDGE, min_count: int = 2, meta: Optional[dict] = None
            ) -> RegressionResult:
    """Fit every analysed symbol position and pick S*."""
    S = np.asarray([list(s) for s in sentences], dtype=np.int64)
    if S.ndim != 2 or S.shape[0] == 0:
        raise ValidationError("need a nonempty list of equal-length sentences")
    positions = min(positions, S.shape[1])
    fits: list[Optional[float]] = []
    for i in range(positions):
        try:
            fits.append(_fit(kind, S[:, i], present, areas, ridge, min_count))
        except UndefinedFitError:
            fits.append(None)
    return RegressionResult(kind, fits, select_best_position(fits), int(S.shape[0]), dict(meta or {}))


def permutation_control(symbols: Sequence[int], present: Sequence[bool], areas: Sequence[float], kind: str,
                        n_permutations: int = 100, rng=None, ridge: float = RIDGE, min_count: int = 2) -> float:
    """Mean fit after shuffling the outcome; near zero when the fit procedure does not overfit."""
    rng = np.random.default_rng(rng)
    present = np.asarray(present)
    areas = np.asarray(areas, dtype=np.float64)
    vals = []
    for _ in range(n_permutations):
        perm = rng.permutation(present.size)
        vals.append(_fit(kind, symbols, present[perm], areas[perm], ridge, min_count))
    return float(np.mean(vals))


def write_results(results: Sequence[RegressionResult], out_dir) -> dict[str, Path]:
    """RegressionResult JSON plus a summary table (text and CSV) (one row per outcome)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "regression.json", "csv": out / "regression_table.csv",
             "text": out / "regression_table.txt"}
    paths["json"].write_text(json.dumps([r.to_dict() for r in results], sort_keys=True, indent=2) + "\n")
    header = ["model", "N_S", "V", "outcome", "S*", "fit", "metric"]
    rows = []
    for r in results:
        metric = "McFadden_R2" if r.kind == "presence" else "r2"
        rows.append([str(r.meta.get("model", "")), str(r.meta.get("n_symbols", "")), str(r.meta.get("vocab_size", "")),
                     r.kind, f"S{r.best_position}", f"{r.best_fit:.4f}", metric])
    with paths["csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    paths["text"].write_text(format_table(header, rows))
    return paths


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, rows)]) + "\n"
