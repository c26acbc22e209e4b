"""Temporal causal structure inference via pairwise Granger tests.

For each ordered node pair (i, j) a restricted autoregression of j's series
on its own lags is compared against an unrestricted one that adds i's lags;
the variance reduction is scored by an F statistic whose p-value comes from
the regularized incomplete beta function.  Significant pairs form a
directed causal graph.

Per-node feature matrices are reduced to scalar series first, either by the
first principal component fitted on the training split ("pca1") or by the
feature mean ("mean").

All pair tests are independent and side-effect free; ``infer_causal_graph``
evaluates them with a vectorized shared-QR kernel and merges results in
(source, target) lexicographic order, so the output is deterministic.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, NumericalError, RankDeficient, SeriesTooShort
from .hypergraph import NodeFeatureSeries
from .linalg import least_squares

REDUCTIONS = ("pca1", "mean")

# Residual sum of squares at or below this (relative to the target's scale)
# counts as an exact fit, which rescues rank-deficient designs that still
# determine the residual uniquely (e.g. a constant series, or a target that
# is a deterministic lagged copy of the source).
_EXACT_RSS_TOL = 1e-18


@dataclass(frozen=True)
class GrangerConfig:
    lag: int = 2
    alpha: float = 0.01
    reduction: str = "pca1"
    bonferroni: bool = False

    def __post_init__(self):
        if self.lag < 1:
            raise ContractViolation(f"lag must be >= 1, got {self.lag}")
        if not (0.0 < self.alpha < 1.0):
            raise ContractViolation(f"alpha must be in (0, 1), got {self.alpha}")
        if self.reduction not in REDUCTIONS:
            raise ContractViolation(f"unknown reduction {self.reduction!r}")

    @property
    def min_length(self) -> int:
        return 4 * self.lag + 4


@dataclass(frozen=True)
class CausalEdge:
    src: str
    dst: str
    f_statistic: float
    p_value: float


@dataclass
class CausalGraph:
    """Directed graph of significant Granger edges, sorted by (src, dst)."""

    alpha: float
    lag: int
    edges: list[CausalEdge] = field(default_factory=list)

    def __post_init__(self):
        self.edges = sorted(self.edges, key=lambda e: (e.src, e.dst))
        seen = set()
        for e in self.edges:
            if e.src == e.dst:
                raise ContractViolation(f"self loop {e.src}->{e.dst}")
            if (e.src, e.dst) in seen:
                raise ContractViolation(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))
            if e.p_value > self.alpha:
                raise ContractViolation(
                    f"stored edge {e.src}->{e.dst} has p {e.p_value} > alpha"
                )
            if not (e.f_statistic >= 0.0):
                raise ContractViolation("edge F statistic must be >= 0")

    def parents_of(self, node: str) -> list[CausalEdge]:
        return [e for e in self.edges if e.dst == node]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "lag": self.lag,
            "edges": [
                {"src": e.src, "dst": e.dst, "f": e.f_statistic, "p": e.p_value}
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CausalGraph":
        return cls(
            alpha=float(doc["alpha"]),
            lag=int(doc["lag"]),
            edges=[
                CausalEdge(str(e["src"]), str(e["dst"]), float(e["f"]), float(e["p"]))
                for e in doc["edges"]
            ],
        )

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "CausalGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# Regularized incomplete beta, for the F survival function
# --------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise NumericalError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) with relative error around 1e-12 via continued fractions."""
    if not (0.0 <= x <= 1.0):
        raise ContractViolation(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_survival(f_stat: float, d1: float, d2: float) -> float:
    """P(F > f) for an F(d1, d2) distribution."""
    if f_stat <= 0.0:
        return 1.0
    if math.isinf(f_stat):
        return 0.0
    x = d2 / (d2 + d1 * f_stat)
    return min(1.0, max(0.0, regularized_incomplete_beta(0.5 * d2, 0.5 * d1, x)))


# --------------------------------------------------------------------------
# VAR fits
# --------------------------------------------------------------------------


def _lagged(y: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Target y_t for t >= lag and the (T-lag) x lag matrix of its lags."""
    t = y.shape[0]
    cols = [y[lag - 1 - k : t - 1 - k] for k in range(lag)]
    return y[lag:], np.column_stack(cols)


def _check_series(y: np.ndarray, lag: int, min_length: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ContractViolation("series must be 1-D")
    if not np.all(np.isfinite(y)):
        raise ContractViolation("series has nonfinite values")
    if y.shape[0] < min_length:
        raise SeriesTooShort(
            f"series length {y.shape[0]} < minimum {min_length} for lag {lag}"
        )
    return y


def _solve_ols(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Least squares with an exact-fit rescue for rank-deficient designs."""
    try:
        coef = least_squares(a, b)
    except RankDeficient:
        coef, *_ = np.linalg.lstsq(a, b, rcond=None)
        resid = b - a @ coef
        rss = float(resid @ resid)
        if rss <= _EXACT_RSS_TOL * max(1.0, float(b @ b)):
            return coef, rss
        raise
    resid = b - a @ coef
    return coef, float(resid @ resid)


def fit_var_restricted(y, lag: int, min_length: int | None = None):
    """OLS of y_t on (1, y_{t-1}, ..., y_{t-lag}); returns (coef, rss, dof)."""
    min_length = 4 * lag + 4 if min_length is None else min_length
    y = _check_series(y, lag, min_length)
    target, lags = _lagged(y, lag)
    design = np.column_stack([np.ones(target.shape[0]), lags])
    coef, rss = _solve_ols(design, target)
    dof = y.shape[0] - lag - (lag + 1)
    return coef, rss, dof


def fit_var_unrestricted(y, x, lag: int, min_length: int | None = None):
    """OLS of y_t on (1, y lags, x lags); returns (coef, rss, dof)."""
    min_length = 4 * lag + 4 if min_length is None else min_length
    y = _check_series(y, lag, min_length)
    x = _check_series(x, lag, min_length)
    if y.shape[0] != x.shape[0]:
        raise ContractViolation("series must be aligned and equal length")
    target, ylags = _lagged(y, lag)
    _, xlags = _lagged(x, lag)
    design = np.column_stack([np.ones(target.shape[0]), ylags, xlags])
    coef, rss = _solve_ols(design, target)
    dof = y.shape[0] - lag - (2 * lag + 1)
    return coef, rss, dof


class GrangerDecision(NamedTuple):
    f_statistic: float
    p_value: float
    is_edge: bool
    note: str = ""


def granger_test(source, target, cfg: GrangerConfig, n_tests: int = 1) -> GrangerDecision:
    """Test whether ``source`` Granger-causes ``target``.

    Degenerate designs (rank deficiency, too-short series) yield a
    no-edge decision with a diagnostic note rather than an error.
    """
    alpha = cfg.alpha / n_tests if cfg.bonferroni else cfg.alpha
    try:
        _, rss_r, _ = fit_var_restricted(target, cfg.lag, cfg.min_length)
        _, rss_u, dof_u = fit_var_unrestricted(target, source, cfg.lag, cfg.min_length)
    except (RankDeficient, SeriesTooShort) as exc:
        return GrangerDecision(0.0, 1.0, False, f"{type(exc).__name__}: {exc}")
    if dof_u < 1:
        return GrangerDecision(0.0, 1.0, False, "not enough observations for dof")
    if rss_u >= rss_r:
        f_stat = 0.0
    else:
        scale = rss_u / dof_u
        f_stat = ((rss_r - rss_u) / cfg.lag) / max(scale, 1e-300)
    p_value = f_survival(f_stat, cfg.lag, dof_u)
    return GrangerDecision(f_stat, p_value, p_value <= alpha and rss_u < rss_r)


# --------------------------------------------------------------------------
# Feature reduction and whole-graph inference
# --------------------------------------------------------------------------


def reduce_features(
    nodes: list[NodeFeatureSeries],
    mode: str = "pca1",
    fit_ids: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Collapse each node's T x d features to a scalar series.

    "pca1" projects onto the first principal direction of the pooled
    (timestep, node) rows of the fit subset; "mean" averages feature
    dimensions.  The principal direction's sign is fixed so its largest
    component is positive.
    """
    if mode not in REDUCTIONS:
        raise ContractViolation(f"unknown reduction {mode!r}")
    if mode == "mean":
        return {n.node_id: n.features.mean(axis=1) for n in nodes}
    fit = set(fit_ids) if fit_ids else {n.node_id for n in nodes}
    pool = np.concatenate([n.features for n in nodes if n.node_id in fit], axis=0)
    center = pool.mean(axis=0)
    cov = (pool - center).T @ (pool - center)
    _, vecs = np.linalg.eigh(cov)
    w = vecs[:, -1]
    if w[np.argmax(np.abs(w))] < 0:
        w = -w
    return {n.node_id: (n.features - center) @ w for n in nodes}


def infer_causal_graph(
    nodes: list[NodeFeatureSeries],
    cfg: GrangerConfig,
    fit_ids: list[str] | None = None,
) -> CausalGraph:
    """Run the pairwise test over all ordered pairs; keep significant edges.

    The shared restricted fit per target is factored once (Householder QR)
    and each source's lag block is orthogonalized against it, which is
    algebraically the block form of the full QR solve.  Pairs whose
    combined R diagonal signals rank deficiency fall back to the reference
    single-pair path so corner cases match ``granger_test`` exactly.
    """
    if len(nodes) < 2:
        raise ContractViolation("need at least 2 nodes")
    series = reduce_features(nodes, cfg.reduction, fit_ids)
    ids = sorted(series)
    n = len(ids)
    n_tests = n * (n - 1)
    alpha = cfg.alpha / n_tests if cfg.bonferroni else cfg.alpha
    t_len = series[ids[0]].shape[0]
    for nid in ids:
        if series[nid].shape[0] != t_len:
            raise ContractViolation("all series must have equal length")
    if t_len < cfg.min_length:
        raise SeriesTooShort(
            f"series length {t_len} < minimum {cfg.min_length} for lag {cfg.lag}"
        )

    p = cfg.lag
    rows = t_len - p
    dof_u = t_len - p - (2 * p + 1)
    targets = np.stack([series[nid][p:] for nid in ids])
    lag_mats = np.stack([_lagged(series[nid], p)[1] for nid in ids])

    edges: list[CausalEdge] = []
    for j, dst in enumerate(ids):
        design_r = np.column_stack([np.ones(rows), lag_mats[j]])
        q_r, r_r = np.linalg.qr(design_r, mode="reduced")
        rdiag_r = np.abs(np.diag(r_r))
        resid = targets[j] - q_r @ (q_r.T @ targets[j])
        rss_r = float(resid @ resid)

        # Orthogonalize every source's lag block against the restricted
        # design in one batch, then Gram-Schmidt the p remaining columns.
        blocks = lag_mats - np.einsum("rk,knp->rnp", q_r, np.tensordot(q_r, lag_mats, axes=([0], [1])), optimize=True).transpose(1, 0, 2)
        qs = np.empty((n, rows, p))
        rdiag_b = np.empty((n, p))
        proj_sq = np.zeros(n)
        for k in range(p):
            v = blocks[:, :, k].copy()
            for m in range(k):
                v -= np.einsum("nr,nr->n", qs[:, :, m], v)[:, None] * qs[:, :, m]
            norm = np.sqrt(np.einsum("nr,nr->n", v, v))
            rdiag_b[:, k] = norm
            safe = np.where(norm > 0.0, norm, 1.0)
            qs[:, :, k] = v / safe[:, None]
            proj_sq += (qs[:, :, k] @ resid) ** 2

        rmax = np.maximum(rdiag_b.max(axis=1), rdiag_r.max())
        rmin = np.minimum(rdiag_b.min(axis=1), rdiag_r.min())
        degenerate = rmin <= 1e-10 * rmax
        rss_u = np.clip(rss_r - proj_sq, 0.0, None)

        for i, src in enumerate(ids):
            if i == j:
                continue
            if degenerate[i]:
                dec = granger_test(series[src], series[dst], cfg, n_tests=n_tests)
                if dec.is_edge:
                    edges.append(CausalEdge(src, dst, dec.f_statistic, dec.p_value))
                continue
            if rss_u[i] >= rss_r:
                continue
            scale = rss_u[i] / dof_u
            f_stat = ((rss_r - rss_u[i]) / p) / max(scale, 1e-300)
            p_value = f_survival(f_stat, p, dof_u)
            if p_value <= alpha:
                edges.append(CausalEdge(src, dst, float(f_stat), float(p_value)))

    return CausalGraph(alpha=cfg.alpha, lag=cfg.lag, edges=edges)
