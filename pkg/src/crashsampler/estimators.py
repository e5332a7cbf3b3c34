"""Inverse-probability-weighted estimation of the three safety targets.

Per prototype event (case), the target is a ratio over the baseline-crash
region: mu_k = sum(w_i y_i) / sum(w_i) over crash cells. Draws from a
multinomial design estimate both totals with Hansen-Hurwitz with-replacement
sums; cells known exactly by inference enter as a zero-variance certainty
stratum. The ratio's standard error comes from Taylor linearization.

Case estimates are stabilized by shrinkage toward the grand mean before the
equal-weight combination across cases (stratified and post-stratified modes
share this step; they differ only in which draws feed which case and in the
Hansen-Hurwitz divisor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import ScenarioCell
from .simulator import TARGETS, OutcomeTriple

TARGET_INDEX = {name: i for i, name in enumerate(TARGETS)}


def target_value(outcome: OutcomeTriple, target: str) -> float:
    if target == "speed_reduction":
        return outcome.impact_speed_reduction
    if target == "crash_avoidance":
        return float(outcome.crash_avoided)
    if target == "injury_risk_reduction":
        return outcome.injury_risk_reduction
    raise KeyError(f"unknown target {target!r}")


@dataclass(frozen=True)
class SampleRecord:
    """One multinomial draw with the selection probability recorded at draw time."""

    cell: ScenarioCell
    pi: float
    w: float
    base_crashed: bool
    outcome: OutcomeTriple | None = None   # None iff baseline did not crash
    provenance: str = "simulated"


@dataclass(frozen=True)
class CertaintyCell:
    """A cell whose outcome is known exactly without having been drawn."""

    cell: ScenarioCell
    w: float
    base_crashed: bool
    outcome: OutcomeTriple | None = None


@dataclass(frozen=True)
class CaseEstimate:
    mu: float          # nan when the crash-region total is zero
    se: float          # 0 with pure certainty, nan with < 2 draws
    n_crashes: int     # crash draws plus inferred-certainty crash cells
    within_var: float  # sample variance of observed crash outcomes, nan if < 2


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    n_sims_used: int = 0
    per_case: tuple = ()    # (shrunk mu_k, n_k, raw SE_k) per case


def _case_from_sums(n_draws: int, sum_a: float, sum_a2: float, sum_b: float,
                    sum_b2: float, sum_ab: float, cert_y: float, cert_1: float) -> tuple[float, float]:
    """(mu, se) from Hansen-Hurwitz running sums plus certainty totals."""
    if n_draws > 0:
        t_y = cert_y + sum_a / n_draws
        t_1 = cert_1 + sum_b / n_draws
    else:
        t_y, t_1 = cert_y, cert_1
    if t_1 <= 0.0:
        return math.nan, math.nan
    mu = t_y / t_1
    if n_draws == 0:
        return mu, 0.0
    if n_draws < 2:
        return mu, math.nan
    # linearized residual e_j = a_j - mu*b_j; draws outside the case contribute zeros
    e_sum = sum_a - mu * sum_b
    e2_sum = sum_a2 - 2.0 * mu * sum_ab + mu * mu * sum_b2
    s2 = (e2_sum - e_sum * e_sum / n_draws) / (n_draws - 1)
    s2 = max(s2, 0.0)
    return mu, math.sqrt(s2 / n_draws) / t_1


def case_ratio_estimate(records: list[SampleRecord], certainty: list[CertaintyCell],
                        n_draws: int, target: str) -> CaseEstimate:
    """Ratio estimate for one case.

    ``records`` are the case's draws; ``n_draws`` is the Hansen-Hurwitz divisor
    (the case's draw count under stratified sampling, the total draw count when
    the case subset comes from one pooled sample).
    """
    if n_draws < len(records):
        raise ValueError("n_draws smaller than the number of case records")
    cert_y = cert_1 = 0.0
    n_cert_crash = 0
    ys = []
    for c in certainty:
        if c.base_crashed:
            cert_y += c.w * target_value(c.outcome, target)
            cert_1 += c.w
            n_cert_crash += 1
            ys.append(target_value(c.outcome, target))
    sa = sa2 = sb = sb2 = sab = 0.0
    n_crash_draws = 0
    for r in records:
        if not r.base_crashed:
            continue
        if not r.pi > 0:
            raise ValueError(f"sampled record with non-positive pi: {r}")
        y = target_value(r.outcome, target)
        a = r.w * y / r.pi
        b = r.w / r.pi
        sa += a
        sa2 += a * a
        sb += b
        sb2 += b * b
        sab += a * b
        n_crash_draws += 1
        ys.append(y)
    mu, se = _case_from_sums(n_draws, sa, sa2, sb, sb2, sab, cert_y, cert_1)
    arr = np.asarray(ys)
    within = float(np.var(arr, ddof=1)) if arr.size >= 2 else math.nan
    return CaseEstimate(mu=mu, se=se, n_crashes=n_crash_draws + n_cert_crash, within_var=within)


def shrink_case_estimates(values: np.ndarray, counts: np.ndarray,
                          within_vars: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Pull noisy case estimates toward the grand mean.

    rho_k = sigma_u^2 / (sigma_u^2 + sigma_k^2 / n_k), with rho_k = 0 when
    n_k = 0 so empty cases default to the grand mean. sigma_u^2 is the
    across-case variance of the available estimates; sigma_k^2 falls back to
    the pooled within-case variance when a case has too few observations.
    Returns (shrunk values, rho, grand mean); grand mean is nan when no case
    has data.
    """
    values = np.asarray(values, dtype=float)
    counts = np.asarray(counts)
    within = np.asarray(within_vars, dtype=float)
    avail = np.isfinite(values)
    if not avail.any():
        return np.full_like(values, np.nan), np.zeros_like(values), math.nan
    grand = float(values[avail].mean())
    sigma_u2 = float(np.var(values[avail], ddof=1)) if avail.sum() >= 2 else 0.0
    finite_w = np.isfinite(within)
    pooled = float(within[finite_w].mean()) if finite_w.any() else 0.0
    w_eff = np.where(finite_w, within, pooled)

    rho = np.zeros_like(values)
    pos = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        noise = w_eff[pos] / counts[pos]
        denom = sigma_u2 + noise
        rho[pos] = np.where(denom > 0.0, sigma_u2 / np.maximum(denom, 1e-300), 1.0)
    shrunk = np.where(rho > 0.0, rho * values, 0.0) + (1.0 - rho) * grand
    return shrunk, rho, grand


def _combine_cases(mus: np.ndarray, ses: np.ndarray, counts: np.ndarray,
                   withins: np.ndarray, n_sims_used: int = 0) -> Estimate:
    """Equal-weight average across cases.

    The combined value averages the raw case ratios, substituting the grand
    mean for cases without data (the no-information endpoint of the shrinkage
    rule). The intermediate shrinkage pull is kept out of the headline value:
    its weight correlates with the case mean through the within-case variance,
    which would bias the average; the fully shrunk values are reported per
    case. SE combines per-case SEs under the subset-independence
    approximation, with the grand-mean SE standing in where a case SE is
    undefined.
    """
    K = mus.size
    shrunk, rho, grand = shrink_case_estimates(mus, counts, withins)
    if not math.isfinite(grand):
        return Estimate(value=math.nan, se=math.nan, n_sims_used=n_sims_used,
                        per_case=tuple((math.nan, int(n), math.nan) for n in counts))
    avail = np.isfinite(mus)
    value = float(np.where(avail, mus, grand).mean())

    finite_se = np.isfinite(ses)
    if finite_se.any():
        se_grand2 = float((ses[finite_se] ** 2).sum()) / (finite_se.sum() ** 2)
    else:
        se_grand2 = math.nan
    se_k2 = np.where(finite_se, ses ** 2, se_grand2)
    se = float(np.sqrt(se_k2.sum()) / K)
    per_case = tuple((float(shrunk[k]), int(counts[k]),
                      float(ses[k]) if finite_se[k] else math.nan) for k in range(K))
    return Estimate(value=value, se=se, n_sims_used=n_sims_used, per_case=per_case)


def _group_by_case(items, n_events: int):
    groups = [[] for _ in range(n_events)]
    for it in items:
        groups[it.cell.event_id].append(it)
    return groups


def stratified_combine(case_records: list[list[SampleRecord]],
                       case_certainty: list[list[CertaintyCell]],
                       case_n_draws: list[int], target: str) -> Estimate:
    """Combine independent per-case samples with equal case weights."""
    cases = [case_ratio_estimate(r, c, n, target)
             for r, c, n in zip(case_records, case_certainty, case_n_draws)]
    return _combine_cases(np.array([c.mu for c in cases]),
                          np.array([c.se for c in cases]),
                          np.array([c.n_crashes for c in cases]),
                          np.array([c.within_var for c in cases]))


def post_stratified_combine(records: list[SampleRecord], certainty: list[CertaintyCell],
                            n_draws_total: int, n_events: int, target: str) -> Estimate:
    """Reweight one pooled sample so each case contributes equally.

    Each case's ratio estimate is computed from the pooled sample's case
    subset with the pooled draw count as divisor; the ratio form implements
    the inverse-crash-region-probability weighting.
    """
    rec_groups = _group_by_case(records, n_events)
    cert_groups = _group_by_case(certainty, n_events)
    cases = [case_ratio_estimate(r, c, n_draws_total, target)
             for r, c in zip(rec_groups, cert_groups)]
    return _combine_cases(np.array([c.mu for c in cases]),
                          np.array([c.se for c in cases]),
                          np.array([c.n_crashes for c in cases]),
                          np.array([c.within_var for c in cases]))


class EstimationAccumulator:
    """Running sums equivalent to the record-list estimators, O(batch) per update.

    Tracks, per case: Hansen-Hurwitz sums for the shared denominator and the
    three target numerators, certainty totals, and the observed crash-outcome
    moments used by shrinkage. ``estimate`` reproduces stratified_combine /
    post_stratified_combine exactly (see the equivalence test).
    """

    def __init__(self, n_events: int):
        K = n_events
        self.n_events = K
        self.n_draws = np.zeros(K, dtype=np.int64)
        self.sum_b = np.zeros(K)
        self.sum_b2 = np.zeros(K)
        self.sum_a = np.zeros((3, K))
        self.sum_a2 = np.zeros((3, K))
        self.sum_ab = np.zeros((3, K))
        self.crash_draws = np.zeros(K, dtype=np.int64)
        self.sum_y = np.zeros((3, K))
        self.sum_y2 = np.zeros((3, K))
        self.cert_y = np.zeros((3, K))
        self.cert_1 = np.zeros(K)
        self.cert_cells = np.zeros(K, dtype=np.int64)

    def add_draws(self, case_idx: np.ndarray, pis: np.ndarray, ws: np.ndarray,
                  crashed: np.ndarray, y3: np.ndarray) -> None:
        """Record one batch of draws; y3 has shape (3, n) and is ignored off-crash."""
        np.add.at(self.n_draws, case_idx, 1)
        b = np.where(crashed, ws / pis, 0.0)
        np.add.at(self.sum_b, case_idx, b)
        np.add.at(self.sum_b2, case_idx, b * b)
        np.add.at(self.crash_draws, case_idx, crashed.astype(np.int64))
        for t in range(3):
            a = np.where(crashed, y3[t], 0.0) * b
            np.add.at(self.sum_a[t], case_idx, a)
            np.add.at(self.sum_a2[t], case_idx, a * a)
            np.add.at(self.sum_ab[t], case_idx, a * b)
            yc = np.where(crashed, y3[t], 0.0)
            np.add.at(self.sum_y[t], case_idx, yc)
            np.add.at(self.sum_y2[t], case_idx, yc * yc)

    def add_certainty(self, case_idx: np.ndarray, ws: np.ndarray, y3: np.ndarray) -> None:
        """Record newly inferred crash cells (exact outcomes, zero variance)."""
        np.add.at(self.cert_1, case_idx, ws)
        np.add.at(self.cert_cells, case_idx, 1)
        for t in range(3):
            np.add.at(self.cert_y[t], case_idx, ws * y3[t])
            np.add.at(self.sum_y[t], case_idx, y3[t])
            np.add.at(self.sum_y2[t], case_idx, y3[t] * y3[t])

    def case_arrays(self, t: int, stratified: bool) -> tuple[np.ndarray, ...]:
        K = self.n_events
        mus = np.empty(K)
        ses = np.empty(K)
        n_total = int(self.n_draws.sum())
        for k in range(K):
            n_k = int(self.n_draws[k]) if stratified else n_total
            mus[k], ses[k] = _case_from_sums(
                n_k, self.sum_a[t, k], self.sum_a2[t, k], self.sum_b[k],
                self.sum_b2[k], self.sum_ab[t, k], self.cert_y[t, k], self.cert_1[k])
        counts = self.crash_draws + self.cert_cells
        n_y = self.crash_draws + self.cert_cells
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_y = self.sum_y[t] / n_y
            var_y = (self.sum_y2[t] - n_y * mean_y ** 2) / (n_y - 1)
        withins = np.where(n_y >= 2, np.maximum(var_y, 0.0), np.nan)
        return mus, ses, counts, withins

    def estimate(self, target: str, stratified: bool, n_sims_used: int = 0) -> Estimate:
        t = TARGET_INDEX[target]
        mus, ses, counts, withins = self.case_arrays(t, stratified)
        return _combine_cases(mus, ses, counts, withins, n_sims_used)
