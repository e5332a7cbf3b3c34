"""Synthetic counterfactual rear-end simulator (baseline and AEB countermeasure).

Fixed-step kinematics at 5 ms: the lead vehicle brakes from t=0 until
standstill; the following vehicle holds speed until its driver's brake onset
(looming anchor + glance duration), then ramps deceleration at a fixed jerk to
the cell's maximum. The countermeasure adds an AEB that triggers on
time-to-collision and commands a stronger deceleration; the effective
deceleration is the maximum of driver and AEB commands.

A crash is the first step where the gap closes; impact speed is the relative
speed at contact (km/h). No crash is declared when the closing speed drops to
zero or below, which is final for this command family (commands only grow).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigError, SimulationFault
from .grid import PrototypeEvent, ScenarioCell, ScenarioGrid

MPS_TO_KMH = 3.6

TARGETS = ("speed_reduction", "crash_avoidance", "injury_risk_reduction")


@dataclass(frozen=True)
class InjuryRiskParams:
    beta0: float = -6.0
    beta1: float = 0.1   # per km/h of delta-v

    def validate(self):
        if not self.beta1 > 0:
            raise ConfigError(f"beta1 must be positive, got {self.beta1}")


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.005                 # s
    brake_jerk: float = 20.0          # m/s^3, driver and AEB ramp rate
    anchor_inv_tau: float = 0.2       # 1/s, closing-speed/gap threshold
    aeb_enabled: bool = True
    aeb_ttc: float = 2.0              # s, trigger threshold
    aeb_decel: float = 10.0           # m/s^2, commanded authority
    max_time: float = 60.0            # s, integration horizon guard
    injury: InjuryRiskParams = field(default_factory=InjuryRiskParams)

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.max_time / self.dt))


@dataclass(frozen=True)
class SimOutcome:
    crashed: bool
    impact_speed: float       # km/h, relative speed at contact; 0 if no crash
    sim_invocations: int = 1


@dataclass(frozen=True)
class OutcomeTriple:
    """Per-cell safety impact of the countermeasure, given a baseline crash."""

    impact_speed_reduction: float    # km/h
    injury_risk_reduction: float
    crash_avoided: int               # 0/1


@njit(cache=True)
def _anchor_time(fv0, lv0, gap0, lv_dec, inv_tau, dt, max_steps):
    """First step time where closing/gap >= inv_tau on the no-braking trajectory.

    Falls back to the crash time if contact happens first (the driver could
    never have braked in time for any glance duration).
    """
    vf = fv0
    vl = lv0
    gap = gap0
    t = 0.0
    for _ in range(max_steps):
        t2 = t + dt
        vl2 = vl - lv_dec * dt
        if vl2 < 0.0:
            vl2 = 0.0
        gap = gap - 0.5 * ((vf + vf) - (vl + vl2)) * dt
        vl = vl2
        t = t2
        if gap <= 0.0:
            return t
        closing = vf - vl
        if closing > 0.0 and closing >= inv_tau * gap:
            return t
    return np.nan


@njit(cache=True)
def _simulate_cell(fv0, lv0, gap0, lv_dec, t_brake, driver_decel, jerk,
                   aeb_on, aeb_ttc, aeb_decel, dt, max_steps):
    """Integrate one cell; returns impact speed in m/s (0 = no crash, nan = fault)."""
    vf = fv0
    vl = lv0
    gap = gap0
    driver_cmd = 0.0
    aeb_cmd = 0.0
    aeb_latched = False
    t = 0.0
    for _ in range(max_steps):
        if aeb_on and not aeb_latched:
            closing = vf - vl
            if closing > 0.0 and gap <= aeb_ttc * closing:
                aeb_latched = True
        t2 = t + dt
        if t2 >= t_brake:
            driver_cmd = min(driver_cmd + jerk * dt, driver_decel)
        if aeb_latched:
            aeb_cmd = min(aeb_cmd + jerk * dt, aeb_decel)
        eff = driver_cmd if driver_cmd > aeb_cmd else aeb_cmd
        vf2 = vf - eff * dt
        if vf2 < 0.0:
            vf2 = 0.0
        vl2 = vl - lv_dec * dt
        if vl2 < 0.0:
            vl2 = 0.0
        gap = gap - 0.5 * ((vf + vf2) - (vl + vl2)) * dt
        vf = vf2
        vl = vl2
        t = t2
        if not (math.isfinite(gap) and math.isfinite(vf) and math.isfinite(vl)):
            return np.nan
        closing = vf - vl
        if gap <= 0.0:
            return closing if closing > 0.0 else 0.0
        if closing <= 0.0:
            return 0.0
    return np.nan


@njit(cache=True)
def _event_tables(fv0, lv0, gap0, lv_dec, t_anchor, oeoffs, decels, jerk,
                  aeb_on, aeb_ttc, aeb_decel, dt, max_steps):
    """Impact-speed lattice (km/h) over all (OEOFF, deceleration) cells of one event."""
    n_o = oeoffs.size
    n_d = decels.size
    out = np.empty((n_o, n_d))
    for i in range(n_o):
        t_brake = t_anchor + oeoffs[i]
        for j in range(n_d):
            v = _simulate_cell(fv0, lv0, gap0, lv_dec, t_brake, decels[j], jerk,
                               aeb_on, aeb_ttc, aeb_decel, dt, max_steps)
            out[i, j] = v * MPS_TO_KMH
    return out


def anchor_time(event: PrototypeEvent, params: SimParams) -> float:
    t = _anchor_time(event.fv_speed0, event.lv_speed0, event.gap0, event.lv_decel,
                     params.anchor_inv_tau, params.dt, params.max_steps)
    if not math.isfinite(t):
        raise SimulationFault(f"no looming anchor found for event {event.event_id}")
    return float(t)


def _simulate(event: PrototypeEvent, oeoff: float, decel: float,
              params: SimParams, aeb_on: bool) -> SimOutcome:
    t_brake = anchor_time(event, params) + oeoff
    speed_mps = _simulate_cell(event.fv_speed0, event.lv_speed0, event.gap0,
                               event.lv_decel, t_brake, decel, params.brake_jerk,
                               aeb_on, params.aeb_ttc, params.aeb_decel,
                               params.dt, params.max_steps)
    if not math.isfinite(speed_mps):
        raise SimulationFault(
            f"non-finite kinematics for event {event.event_id}, oeoff={oeoff}, decel={decel}")
    kmh = float(speed_mps * MPS_TO_KMH)
    return SimOutcome(crashed=kmh > 0.0, impact_speed=kmh)


def simulate_baseline(event: PrototypeEvent, oeoff: float, decel: float,
                      params: SimParams | None = None) -> SimOutcome:
    return _simulate(event, oeoff, decel, params or SimParams(), aeb_on=False)


def simulate_countermeasure(event: PrototypeEvent, oeoff: float, decel: float,
                            params: SimParams | None = None) -> SimOutcome:
    params = params or SimParams()
    return _simulate(event, oeoff, decel, params, aeb_on=params.aeb_enabled)


def event_tables(event: PrototypeEvent, oeoff_levels: np.ndarray, decel_levels: np.ndarray,
                 params: SimParams) -> tuple[np.ndarray, np.ndarray]:
    """(baseline, countermeasure) impact-speed lattices in km/h for one event."""
    t_anchor = anchor_time(event, params)
    args = (event.fv_speed0, event.lv_speed0, event.gap0, event.lv_decel, t_anchor,
            np.asarray(oeoff_levels, dtype=float), np.asarray(decel_levels, dtype=float),
            params.brake_jerk)
    base = _event_tables(*args, False, params.aeb_ttc, params.aeb_decel,
                         params.dt, params.max_steps)
    cm = _event_tables(*args, params.aeb_enabled, params.aeb_ttc, params.aeb_decel,
                       params.dt, params.max_steps)
    if not (np.all(np.isfinite(base)) and np.all(np.isfinite(cm))):
        raise SimulationFault(f"non-finite lattice for event {event.event_id}")
    return base, cm


def validate_event(event: PrototypeEvent, oeoff_levels: np.ndarray,
                   decel_levels: np.ndarray, params: SimParams) -> bool:
    """Accept an event only if its lattice has the structure deduction relies on."""
    event.validate()
    try:
        base, cm = event_tables(event, oeoff_levels, decel_levels, params)
    except SimulationFault:
        return False
    if not base[-1, 0] > 0.0:
        return False  # most severe cell must crash
    if base.shape[0] > 1 and np.any(np.diff(base, axis=0) < 0):
        return False  # impact speed must not decrease with glance duration
    if base.shape[1] > 1 and np.any(np.diff(base, axis=1) > 0):
        return False  # impact speed must not increase with deceleration
    if np.any(cm > base):
        return False
    cm_crash = cm > 0.0
    if cm_crash.shape[0] > 1 and np.any(np.diff(cm_crash.astype(np.int8), axis=0) < 0):
        return False  # countermeasure crash set must be monotone in glance
    if cm_crash.shape[1] > 1 and np.any(np.diff(cm_crash.astype(np.int8), axis=1) > 0):
        return False  # ... and in deceleration
    return True


def injury_risk(impact_speed_kmh: float, params: InjuryRiskParams | None = None) -> float:
    """MAIS2+-style logistic risk of delta-v; exactly 0 for a non-crash."""
    if impact_speed_kmh < 0:
        raise ValueError(f"impact speed must be >= 0, got {impact_speed_kmh}")
    if impact_speed_kmh == 0.0:
        return 0.0
    p = params or InjuryRiskParams()
    delta_v = impact_speed_kmh / 2.0
    return 1.0 / (1.0 + math.exp(-(p.beta0 + p.beta1 * delta_v)))


def injury_risk_array(impact_kmh: np.ndarray, params: InjuryRiskParams) -> np.ndarray:
    risk = 1.0 / (1.0 + np.exp(-(params.beta0 + params.beta1 * impact_kmh / 2.0)))
    return np.where(impact_kmh == 0.0, 0.0, risk)


@dataclass(frozen=True)
class GroundTruth:
    """Exhaustive outcome tables plus per-target case means and grand means.

    Target order follows TARGETS. ``case_means[t, k]`` is the weighted mean of
    target t over event k's baseline-crash cells; events without any baseline
    crash are excluded from the grand mean.
    """

    base_speed: np.ndarray        # (E, n_o, n_d), km/h
    cm_speed: np.ndarray          # (E, n_o, n_d), km/h
    y: np.ndarray                 # (3, E, n_o, n_d) target values
    base_crashed: np.ndarray      # (E, n_o, n_d) bool
    weights: np.ndarray           # (n_o, n_d)
    case_means: np.ndarray        # (3, E), nan for excluded events
    grand_means: np.ndarray       # (3,)
    included_events: np.ndarray   # (E,) bool
    max_speeds: np.ndarray        # (E,), km/h, baseline at (max OEOFF, min decel)

    @property
    def n_enumerated(self) -> int:
        return 2 * self.base_speed.size


def outcome_triple(base_kmh: float, cm_kmh: float, injury: InjuryRiskParams) -> OutcomeTriple:
    return OutcomeTriple(
        impact_speed_reduction=base_kmh - cm_kmh,
        injury_risk_reduction=injury_risk(base_kmh, injury) - injury_risk(cm_kmh, injury),
        crash_avoided=int(base_kmh > 0.0 and cm_kmh == 0.0),
    )


def build_ground_truth(grid: ScenarioGrid, params: SimParams | None = None) -> GroundTruth:
    """Enumerate every cell, baseline and countermeasure, and derive the targets."""
    params = params or SimParams()
    E, n_o, n_d = grid.n_events, grid.n_oeoff, grid.n_decel
    base = np.empty((E, n_o, n_d))
    cm = np.empty((E, n_o, n_d))
    for ev in grid.events:
        b, c = event_tables(ev, grid.oeoff_levels, grid.decel_levels, params)
        base[ev.event_id] = b
        cm[ev.event_id] = c

    crashed = base > 0.0
    speed_red = base - cm
    injury_red = injury_risk_array(base, params.injury) - injury_risk_array(cm, params.injury)
    avoided = (crashed & (cm == 0.0)).astype(float)
    y = np.stack([speed_red, avoided, injury_red])

    w = grid.cell_weights
    case_means = np.full((3, E), np.nan)
    included = np.zeros(E, dtype=bool)
    for k in range(E):
        mask = crashed[k]
        denom = float(w[mask].sum())
        if denom <= 0.0:
            warnings.warn(f"event {k} has no baseline crashes; excluded from grand means")
            continue
        included[k] = True
        for t in range(3):
            case_means[t, k] = float((w * y[t, k])[mask].sum()) / denom
    if not included.any():
        raise SimulationFault("no event produced any baseline crash")
    grand = case_means[:, included].mean(axis=1)

    return GroundTruth(base_speed=base, cm_speed=cm, y=y, base_crashed=crashed,
                       weights=w.copy(), case_means=case_means, grand_means=grand,
                       included_events=included, max_speeds=base[:, -1, 0].copy())


GROUND_TRUTH_HEADER = ("event_id,oeoff_s,decel_mps2,w,base_impact_kmh,cm_impact_kmh,"
                       "speed_reduction_kmh,injury_risk_reduction,base_crashed,"
                       "cm_crashed,crash_avoided")


def _fnum(x: float) -> str:
    return repr(float(x))


def ground_truth_to_csv(gt: GroundTruth, grid: ScenarioGrid, path) -> None:
    """Columnar dump, rows ordered by (event, oeoff, decel) ascending."""
    with open(path, "w") as fh:
        fh.write(GROUND_TRUTH_HEADER + "\n")
        for e in range(grid.n_events):
            for i in range(grid.n_oeoff):
                for j in range(grid.n_decel):
                    b = gt.base_speed[e, i, j]
                    c = gt.cm_speed[e, i, j]
                    fh.write(",".join([
                        str(e), _fnum(grid.oeoff_levels[i]), _fnum(grid.decel_levels[j]),
                        _fnum(gt.weights[i, j]), _fnum(b), _fnum(c),
                        _fnum(gt.y[0, e, i, j]), _fnum(gt.y[2, e, i, j]),
                        str(int(b > 0)), str(int(c > 0)), str(int(gt.y[1, e, i, j])),
                    ]) + "\n")
