"""Bagged depth-limited decision trees over the three scenario features.

Features are grid-valued (OEOFF seconds, deceleration, event maximum impact
speed), so split candidates live on a small fixed set of bins per feature.
Trees are grown level-wise with histogram split search; splits minimize the
weighted squared error, which for 0/1 labels coincides with Gini impurity, so
one criterion serves both model kinds. Classification predictions are the
ensemble mean of leaf class fractions, hence probabilities in [0, 1].

A fitted model carries its hold-out quality: R-squared for regression,
accuracy minus the majority-class rate for classification. The gate passes a
model iff that metric is >= 0 (boundary inclusive).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

N_TREES = 50
MAX_DEPTH = 6
FEATURES_PER_SPLIT = 2
MIN_RECORDS = 20
HOLDOUT_FRACTION = 0.2

_FEATURE_PAIRS = np.array([[0, 1], [0, 2], [1, 2]], dtype=np.int64)


@dataclass(frozen=True)
class PredictorModel:
    kind: str                    # "classification" | "regression"
    node_feature: np.ndarray     # (B, n_nodes) int64, -1 marks a leaf
    node_threshold: np.ndarray   # (B, n_nodes) int64 bin index; left if bin <= threshold
    node_value: np.ndarray       # (B, n_nodes) float64 node means
    bins: tuple                  # per-feature sorted bin values
    holdout_metric: float
    sigma: float                 # hold-out RMSE for regression, nan otherwise
    n_train: int


@njit(cache=True, fastmath=True)
def _grow_forest(xb, y, train_rows, boot, pairs, max_depth, nbins_max,
                 node_feature, node_threshold, node_value):
    B, n_boot = boot.shape
    max_width = 1 << max_depth
    # fused histogram: [local node, feature slot, bin, (count, sum_y)]
    hist = np.empty((max_width, 2, nbins_max, 2))
    n_node = np.empty(max_width)
    s_node = np.empty(max_width)
    xrows = np.empty((n_boot, 3), dtype=np.int64)
    yb = np.empty(n_boot)
    node = np.empty(n_boot, dtype=np.int64)
    for t in range(B):
        for i in range(n_boot):
            r = train_rows[boot[t, i]]
            xrows[i, 0] = xb[r, 0]
            xrows[i, 1] = xb[r, 1]
            xrows[i, 2] = xb[r, 2]
            yb[i] = y[r]
            node[i] = 0

        for level in range(max_depth + 1):
            first = (1 << level) - 1
            width = 1 << level
            splitting = level < max_depth
            for local in range(width):
                n_node[local] = 0.0
                s_node[local] = 0.0
            if splitting:
                hist[:width] = 0.0
            for i in range(n_boot):
                nd = node[i]
                if nd < 0:
                    continue
                local = nd - first
                yv = yb[i]
                n_node[local] += 1.0
                s_node[local] += yv
                if splitting:
                    b0 = xrows[i, pairs[t, nd, 0]]
                    hist[local, 0, b0, 0] += 1.0
                    hist[local, 0, b0, 1] += yv
                    b1 = xrows[i, pairs[t, nd, 1]]
                    hist[local, 1, b1, 0] += 1.0
                    hist[local, 1, b1, 1] += yv

            for local in range(width):
                nd = first + local
                n0 = n_node[local]
                if n0 <= 0.0:
                    continue
                node_value[t, nd] = s_node[local] / n0
                if not splitting or n0 < 2.0:
                    continue
                best_score = -1.0
                best_feat = -1
                best_bin = -1
                for slot in range(2):
                    f = pairs[t, nd, slot]
                    nl = 0.0
                    syl = 0.0
                    for b in range(nbins_max - 1):
                        nl += hist[local, slot, b, 0]
                        syl += hist[local, slot, b, 1]
                        nr = n0 - nl
                        if nl <= 0.0 or nr <= 0.0:
                            continue
                        syr = s_node[local] - syl
                        score = syl * syl / nl + syr * syr / nr
                        if score > best_score:
                            best_score = score
                            best_feat = f
                            best_bin = b
                if best_feat < 0:
                    continue
                base = s_node[local] * s_node[local] / n0
                if best_score <= base + 1e-12 * (1.0 + abs(base)):
                    continue   # no impurity reduction
                node_feature[t, nd] = best_feat
                node_threshold[t, nd] = best_bin

            if splitting:
                # route records to children (or retire them at leaves)
                for i in range(n_boot):
                    nd = node[i]
                    if nd < 0:
                        continue
                    f = node_feature[t, nd]
                    if f < 0:
                        node[i] = -1
                        continue
                    if xrows[i, f] <= node_threshold[t, nd]:
                        node[i] = 2 * nd + 1
                    else:
                        node[i] = 2 * nd + 2


@njit(cache=True)
def _predict_rows(xb, node_feature, node_threshold, node_value):
    M = xb.shape[0]
    B = node_feature.shape[0]
    out = np.zeros(M)
    for t in range(B):
        for i in range(M):
            nd = 0
            while node_feature[t, nd] >= 0:
                if xb[i, node_feature[t, nd]] <= node_threshold[t, nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            out[i] += node_value[t, nd]
    return out / B


@njit(cache=True)
def _predict_grid(node_feature, node_threshold, node_value, n_o, n_d, n_m):
    """Sum of leaf boxes over the (m-rank, oeoff, decel) lattice, averaged over trees."""
    B = node_feature.shape[0]
    out = np.zeros((n_m, n_o, n_d))
    # explicit DFS stack: node, o_lo, o_hi, d_lo, d_hi, m_lo, m_hi
    stack = np.empty((2 * (MAX_DEPTH + 2), 7), dtype=np.int64)
    for t in range(B):
        top = 0
        stack[0, 0] = 0
        stack[0, 1] = 0
        stack[0, 2] = n_o
        stack[0, 3] = 0
        stack[0, 4] = n_d
        stack[0, 5] = 0
        stack[0, 6] = n_m
        top = 1
        while top > 0:
            top -= 1
            nd = stack[top, 0]
            o_lo, o_hi = stack[top, 1], stack[top, 2]
            d_lo, d_hi = stack[top, 3], stack[top, 4]
            m_lo, m_hi = stack[top, 5], stack[top, 6]
            f = node_feature[t, nd]
            if f < 0:
                v = node_value[t, nd]
                for m in range(m_lo, m_hi):
                    for o in range(o_lo, o_hi):
                        for d in range(d_lo, d_hi):
                            out[m, o, d] += v
                continue
            thr = node_threshold[t, nd]
            if f == 0:
                cut = min(max(thr + 1, o_lo), o_hi)
                lo_b, hi_b = (o_lo, cut), (cut, o_hi)
                left = (2 * nd + 1, lo_b[0], lo_b[1], d_lo, d_hi, m_lo, m_hi)
                right = (2 * nd + 2, hi_b[0], hi_b[1], d_lo, d_hi, m_lo, m_hi)
            elif f == 1:
                cut = min(max(thr + 1, d_lo), d_hi)
                left = (2 * nd + 1, o_lo, o_hi, d_lo, cut, m_lo, m_hi)
                right = (2 * nd + 2, o_lo, o_hi, cut, d_hi, m_lo, m_hi)
            else:
                cut = min(max(thr + 1, m_lo), m_hi)
                left = (2 * nd + 1, o_lo, o_hi, d_lo, d_hi, m_lo, cut)
                right = (2 * nd + 2, o_lo, o_hi, d_lo, d_hi, cut, m_hi)
            for child in (left, right):
                if child[2] > child[1] and child[4] > child[3] and child[6] > child[5]:
                    stack[top, 0] = child[0]
                    stack[top, 1] = child[1]
                    stack[top, 2] = child[2]
                    stack[top, 3] = child[3]
                    stack[top, 4] = child[4]
                    stack[top, 5] = child[5]
                    stack[top, 6] = child[6]
                    top += 1
    return out / B


def _bin_columns(x: np.ndarray, bins: tuple) -> np.ndarray:
    xb = np.empty(x.shape, dtype=np.int64)
    for j, b in enumerate(bins):
        xb[:, j] = np.clip(np.searchsorted(b, x[:, j], side="right") - 1, 0, b.size - 1)
    return xb


def fit(x: np.ndarray, y: np.ndarray, kind: str, seed: int,
        n_trees: int = N_TREES, max_depth: int = MAX_DEPTH,
        bins: tuple | None = None) -> PredictorModel | None:
    """Fit a bagged forest; returns None on insufficient data.

    Insufficient: fewer than MIN_RECORDS records, or a single-class label set
    for classification (overall or in the seeded 80% training split).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if n < MIN_RECORDS:
        return None
    if kind not in ("classification", "regression"):
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == "classification" and np.unique(y).size < 2:
        return None

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(HOLDOUT_FRACTION * n)))
    hold_rows = perm[:n_hold]
    train_rows = perm[n_hold:]
    if kind == "classification" and np.unique(y[train_rows]).size < 2:
        return None

    if bins is None:
        bins = tuple(np.unique(x[:, j]) for j in range(x.shape[1]))
    xb = _bin_columns(x, bins)
    nbins_max = max(b.size for b in bins)

    n_nodes = (1 << (max_depth + 1)) - 1
    boot = rng.integers(0, train_rows.size, size=(n_trees, train_rows.size))
    pairs = _FEATURE_PAIRS[rng.integers(0, 3, size=(n_trees, n_nodes))]
    node_feature = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    node_threshold = np.zeros((n_trees, n_nodes), dtype=np.int64)
    node_value = np.zeros((n_trees, n_nodes))
    _grow_forest(xb, y, train_rows, boot, pairs, max_depth, nbins_max,
                 node_feature, node_threshold, node_value)

    preds = _predict_rows(xb[hold_rows], node_feature, node_threshold, node_value)
    y_hold = y[hold_rows]
    if kind == "regression":
        sse = float(((y_hold - preds) ** 2).sum())
        sst = float(((y_hold - y_hold.mean()) ** 2).sum())
        if sst > 0.0:
            metric = 1.0 - sse / sst
        else:
            metric = 1.0 if sse <= 1e-18 * max(1, n_hold) else -1.0
        sigma = math.sqrt(sse / n_hold)
    else:
        acc = float(((preds >= 0.5) == (y_hold >= 0.5)).mean())
        majority = max(float((y_hold >= 0.5).mean()), float((y_hold < 0.5).mean()))
        metric = acc - majority
        sigma = math.nan

    return PredictorModel(kind=kind, node_feature=node_feature,
                          node_threshold=node_threshold, node_value=node_value,
                          bins=bins, holdout_metric=metric, sigma=sigma,
                          n_train=train_rows.size)


def gate(model: PredictorModel | None) -> bool:
    """use_model iff the hold-out metric is >= 0; insufficient data always falls back."""
    return model is not None and model.holdout_metric >= 0.0


def predict(model: PredictorModel, x: np.ndarray) -> np.ndarray:
    """Ensemble-mean predictions for raw feature rows, clamped for probabilities."""
    xb = _bin_columns(np.asarray(x, dtype=float), model.bins)
    out = _predict_rows(xb, model.node_feature, model.node_threshold, model.node_value)
    if model.kind == "classification":
        out = np.clip(out, 0.0, 1.0)
    return out


def predict_event_grid(model: PredictorModel, n_oeoff: int, n_decel: int,
                       event_bin: np.ndarray) -> np.ndarray:
    """Predictions over the full (event, oeoff, decel) lattice.

    ``event_bin`` maps each event to its bin index in the max-speed feature.
    Requires the model to have been fitted with bins matching the grid levels.
    """
    if model.bins[0].size != n_oeoff or model.bins[1].size != n_decel:
        raise ValueError("model bins do not match the grid levels")
    n_m = model.bins[2].size
    grid_vals = _predict_grid(model.node_feature, model.node_threshold,
                              model.node_value, n_oeoff, n_decel, n_m)
    out = grid_vals[event_bin]
    if model.kind == "classification":
        out = np.clip(out, 0.0, 1.0)
    return out
