"""Selection-probability schemes over the samplable set, and multinomial draws.

All schemes operate on flat cell indices (event-major, then OEOFF, then
deceleration). Probabilities are zero off the samplable set. A small uniform
floor (mixing weight FLOOR_EPS over the samplable cells of each normalization
scope) keeps inverse-probability weights bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ExhaustedSampleSpace
from .grid import ScenarioCell, ScenarioGrid

FLOOR_EPS = 0.01
SCHEME_CSV_HEADER = "event_id,oeoff_idx,decel_idx,pi,kind"


@dataclass
class SamplingScheme:
    pi: np.ndarray          # flat (n_cells,), sums to 1 globally or per case
    kind: str               # density | severity | active | fallback
    stratified: bool
    cells_per_event: int
    _cdf: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_events(self) -> int:
        return self.pi.size // self.cells_per_event

    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            self._cdf = np.cumsum(self.pi)
        return self._cdf


def _normalize_scoped(raw: np.ndarray, mask: np.ndarray, stratified: bool,
                      cells_per_event: int, eps: float) -> np.ndarray:
    """Normalize within each scope and mix with a uniform floor over the scope's mask."""
    raw = np.where(mask, raw, 0.0)
    if not mask.any():
        raise ExhaustedSampleSpace("no samplable cells remain")
    pi = np.zeros_like(raw, dtype=float)
    if stratified:
        scopes = [slice(k * cells_per_event, (k + 1) * cells_per_event)
                  for k in range(raw.size // cells_per_event)]
    else:
        scopes = [slice(None)]
    for sl in scopes:
        m = mask[sl]
        n_open = int(m.sum())
        if n_open == 0:
            continue   # exhausted case: no draws allocated to it
        r = raw[sl]
        total = r.sum()
        base = r / total if total > 0.0 else m / n_open
        mixed = (1.0 - eps) * base + eps * m / n_open
        pi[sl] = mixed / mixed.sum()
    return pi


def density_scheme(grid: ScenarioGrid, samplable: np.ndarray, stratified: bool,
                   eps: float = FLOOR_EPS, kind: str = "density") -> SamplingScheme:
    """pi proportional to the scenario probability w over the samplable set."""
    pi = _normalize_scoped(grid.weights_flat(), samplable, stratified,
                           grid.cells_per_event, eps)
    return SamplingScheme(pi=pi, kind=kind, stratified=stratified,
                          cells_per_event=grid.cells_per_event)


def _affine_to_unit_band(values: np.ndarray) -> np.ndarray:
    """Map to [0.1, 1] over the value range; degenerate ranges map to 1."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.ones_like(values, dtype=float)
    return 0.1 + 0.9 * (values - lo) / (hi - lo)


def severity_factors(grid: ScenarioGrid, max_speeds: np.ndarray) -> np.ndarray:
    """Flat severity product w * o * d * m with each factor scaled to [0.1, 1].

    The deceleration factor is inverted (weaker braking maps larger) so that
    more severe cells receive more mass.
    """
    o_f = _affine_to_unit_band(grid.oeoff_levels)
    d_f = _affine_to_unit_band(grid.decel_levels.max() - grid.decel_levels)
    m_f = _affine_to_unit_band(np.asarray(max_speeds, dtype=float))
    per_event = grid.cell_weights * np.outer(o_f, d_f)
    return (m_f[:, None, None] * per_event[None, :, :]).ravel()


def severity_scheme(grid: ScenarioGrid, max_speeds: np.ndarray, samplable: np.ndarray,
                    stratified: bool, eps: float = FLOOR_EPS) -> SamplingScheme:
    if np.any(~np.isfinite(max_speeds)):
        raise ConfigError("severity scheme requires max speeds from the deterministic initialization")
    pi = _normalize_scoped(severity_factors(grid, max_speeds), samplable, stratified,
                           grid.cells_per_event, eps)
    return SamplingScheme(pi=pi, kind="severity", stratified=stratified,
                          cells_per_event=grid.cells_per_event)


def active_criterion(p_hat: np.ndarray, y_hat: np.ndarray, sigma, mu_hat: float,
                     w: np.ndarray) -> np.ndarray:
    """c_i = sqrt(p_i * w_i^2 * ((y_i - mu)^2 + sigma^2)); sigma scalar or per-cell."""
    sigma2 = np.asarray(sigma, dtype=float) ** 2
    return np.sqrt(p_hat * w * w * ((y_hat - mu_hat) ** 2 + sigma2))


def active_scheme(p_hat: np.ndarray, y_hat: np.ndarray, sigma, mu_hat: float,
                  grid: ScenarioGrid, samplable: np.ndarray, stratified: bool,
                  eps: float = FLOOR_EPS) -> SamplingScheme | None:
    """Optimal-variance scheme from model predictions; None when all c_i vanish.

    In the non-stratified mode each case's criterion values are pre-multiplied
    by u_k = 1 / sum(p_hat * w) over the case, compensating the equal-case
    reweighting used in estimation.
    """
    w = grid.weights_flat()
    c = active_criterion(p_hat, y_hat, sigma, mu_hat, w)
    c = np.where(samplable, c, 0.0)
    if not np.isfinite(c).all():
        raise ValueError("non-finite sampling criterion")
    if not stratified:
        pw = np.where(samplable, p_hat * w, 0.0).reshape(grid.n_events, -1).sum(axis=1)
        u = np.where(pw > 0.0, 1.0 / np.maximum(pw, 1e-300), 0.0)
        c = c * np.repeat(u, grid.cells_per_event)
    if c.sum() <= 0.0:
        return None
    pi = _normalize_scoped(c, samplable, stratified, grid.cells_per_event, eps)
    return SamplingScheme(pi=pi, kind="active", stratified=stratified,
                          cells_per_event=grid.cells_per_event)


def init_deterministic(grid: ScenarioGrid) -> list[ScenarioCell]:
    """One cell per event at maximum OEOFF and minimum deceleration."""
    return [ScenarioCell(e, grid.n_oeoff - 1, 0) for e in range(grid.n_events)]


def _draw_from_cdf(cdf: np.ndarray, pi: np.ndarray, n: int, rng: np.random.Generator,
                   offset: int = 0) -> np.ndarray:
    total = cdf[-1]
    u = rng.random(n) * total
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, cdf.size - 1)
    for i in range(n):   # float-boundary hits on zero-probability cells
        j = int(idx[i])
        while j < pi.size - 1 and pi[j] == 0.0:
            j += 1
        while pi[j] == 0.0:
            j -= 1
        idx[i] = j
    return idx + offset

def draw_batch(scheme: SamplingScheme, n_t: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """n_t multinomial draws (with replacement); returns (flat cells, pi per draw).

    Stratified schemes require n_t divisible by the number of events and
    allocate n_t/K draws per case; exhausted cases are skipped.
    """
    if n_t < 1:
        raise ConfigError(f"batch size must be >= 1, got {n_t}")
    if not scheme.stratified:
        cells = _draw_from_cdf(scheme.cdf(), scheme.pi, n_t, rng)
        return cells, scheme.pi[cells]
    K = scheme.n_events
    if n_t % K != 0:
        raise ConfigError(f"stratified batch size {n_t} not divisible by {K} events")
    per_case = n_t // K
    out = []
    cpe = scheme.cells_per_event
    for k in range(K):
        sl = scheme.pi[k * cpe:(k + 1) * cpe]
        total = sl.sum()
        if total <= 0.0:
            continue
        cdf = np.cumsum(sl)
        out.append(_draw_from_cdf(cdf, sl, per_case, rng, offset=k * cpe))
    if not out:
        raise ExhaustedSampleSpace("no samplable cells remain in any case")
    cells = np.concatenate(out)
    return cells, scheme.pi[cells]


def scheme_to_csv(scheme: SamplingScheme, grid: ScenarioGrid, path) -> None:
    with open(path, "w") as fh:
        fh.write(SCHEME_CSV_HEADER + "\n")
        for flat in range(scheme.pi.size):
            cell = grid.cell_at(flat)
            fh.write(f"{cell.event_id},{cell.oeoff_idx},{cell.decel_idx},"
                     f"{repr(float(scheme.pi[flat]))},{scheme.kind}\n")
