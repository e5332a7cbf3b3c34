"""Discrete scenario space: prototype events x glance durations x decelerations.

The scenario space is a 3-D lattice. Each prototype event is a rear-end
conflict parameterized by initial speeds, gap, and lead-vehicle braking.
Glance duration (OEOFF, seconds past the looming anchor) and driver maximum
deceleration carry a joint probability table shared by all events: the two
marginals are independent, so the joint weight is their product.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError

PMF_TOL = 1e-12

DEFAULT_OEOFF_LEVELS = tuple(round(i * 0.1, 10) for i in range(67))   # 0.0 .. 6.6 s
DEFAULT_DECEL_LEVELS = tuple(3.75 + 0.5 * i for i in range(15))       # 3.75 .. 10.75 m/s^2
DEFAULT_GLANCE_ZERO_MASS = 0.854
DEFAULT_GLANCE_TAIL_SCALE = 1.2

# Prototype-event parameter ranges (uniform draws, seeded).
EVENT_FV_SPEED_RANGE = (20.0, 33.0)   # m/s
EVENT_GAP_RANGE = (15.0, 50.0)        # m
EVENT_LV_DECEL_RANGE = (3.0, 8.0)     # m/s^2
MAX_EVENT_ATTEMPTS = 1000


class ScenarioCell(NamedTuple):
    """One (prototype event, OEOFF level, deceleration level) triple."""

    event_id: int
    oeoff_idx: int
    decel_idx: int


@dataclass(frozen=True)
class GridConfig:
    n_events: int = 44
    oeoff_levels: tuple = DEFAULT_OEOFF_LEVELS
    decel_levels: tuple = DEFAULT_DECEL_LEVELS
    rng_seed: int = 1234

    def validate(self):
        if self.n_events < 1:
            raise ConfigError(f"n_events must be >= 1, got {self.n_events}")
        oe = np.asarray(self.oeoff_levels, dtype=float)
        de = np.asarray(self.decel_levels, dtype=float)
        if oe.size < 1 or np.any(oe < 0) or np.any(np.diff(oe) <= 0):
            raise ConfigError("oeoff_levels must be nonnegative and strictly increasing")
        if de.size < 1 or np.any(de <= 0) or np.any(np.diff(de) <= 0):
            raise ConfigError("decel_levels must be positive and strictly increasing")


@dataclass(frozen=True)
class PrototypeEvent:
    """Pre-crash kinematics of one rear-end conflict with the evasive maneuver removed."""

    event_id: int
    fv_speed0: float   # following-vehicle initial speed, m/s
    lv_speed0: float   # lead-vehicle initial speed, m/s
    gap0: float        # initial bumper-to-bumper gap, m
    lv_decel: float    # lead-vehicle braking magnitude from t=0, m/s^2

    def validate(self):
        if not (self.fv_speed0 > 0 and self.lv_speed0 >= 0 and self.gap0 > 0 and self.lv_decel > 0):
            raise ConfigError(f"invalid prototype event parameters: {self}")


def _validate_pmf(p: np.ndarray, n_levels: int, name: str):
    if p.shape != (n_levels,):
        raise ConfigError(f"{name} must have one probability per level ({n_levels}), got shape {p.shape}")
    if np.any(p < 0):
        raise ConfigError(f"{name} has negative mass")
    if abs(p.sum() - 1.0) > PMF_TOL:
        raise ConfigError(f"{name} sums to {p.sum()!r}, expected 1 within {PMF_TOL}")


@dataclass(frozen=True)
class GlancePMF:
    """Marginal distribution of OEOFF glance durations."""

    probabilities: np.ndarray

    @classmethod
    def default(cls, oeoff_levels: Sequence[float],
                zero_mass: float = DEFAULT_GLANCE_ZERO_MASS,
                tail_scale: float = DEFAULT_GLANCE_TAIL_SCALE) -> "GlancePMF":
        """Point mass at 0 s plus an exponentially decaying tail over the rest."""
        oe = np.asarray(oeoff_levels, dtype=float)
        p = np.zeros(oe.size)
        if oe.size == 1:
            p[0] = 1.0
        else:
            p[0] = zero_mass
            tail = np.exp(-oe[1:] / tail_scale)
            p[1:] = (1.0 - zero_mass) * tail / tail.sum()
        return cls(probabilities=p)

    def validate(self, n_levels: int):
        _validate_pmf(self.probabilities, n_levels, "glance PMF")


@dataclass(frozen=True)
class DecelPMF:
    """Marginal distribution of driver maximum decelerations."""

    probabilities: np.ndarray

    @classmethod
    def default(cls, n_levels: int) -> "DecelPMF":
        """Discretized symmetric triangular distribution peaked at the median level."""
        mid = (n_levels - 1) / 2.0
        w = (mid + 1.0) - np.abs(np.arange(n_levels) - mid)
        return cls(probabilities=w / w.sum())

    def validate(self, n_levels: int):
        _validate_pmf(self.probabilities, n_levels, "deceleration PMF")


@dataclass(frozen=True)
class ScenarioGrid:
    """Immutable scenario space with its joint weight table.

    Weights are identical across events; ``cell_weights[o, d]`` is the joint
    probability of the (OEOFF, deceleration) pair, summing to 1 per event.
    """

    config: GridConfig
    events: tuple
    oeoff_levels: np.ndarray
    decel_levels: np.ndarray
    glance_pmf: GlancePMF
    decel_pmf: DecelPMF
    cell_weights: np.ndarray   # (n_oeoff, n_decel)

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def n_oeoff(self) -> int:
        return self.oeoff_levels.size

    @property
    def n_decel(self) -> int:
        return self.decel_levels.size

    @property
    def cells_per_event(self) -> int:
        return self.n_oeoff * self.n_decel

    @property
    def n_cells(self) -> int:
        return self.n_events * self.cells_per_event

    def flat_index(self, cell: ScenarioCell) -> int:
        return (cell.event_id * self.n_oeoff + cell.oeoff_idx) * self.n_decel + cell.decel_idx

    def cell_at(self, flat: int) -> ScenarioCell:
        e, rest = divmod(flat, self.cells_per_event)
        o, d = divmod(rest, self.n_decel)
        return ScenarioCell(e, o, d)

    def weights_flat(self) -> np.ndarray:
        """Per-cell weights in flat order (each event's block sums to 1)."""
        return np.tile(self.cell_weights.ravel(), self.n_events)


def joint_weight(grid: ScenarioGrid, cell: ScenarioCell) -> float:
    """Scenario probability w_i of one cell (product of the two marginals)."""
    if not (0 <= cell.event_id < grid.n_events):
        raise IndexError(f"event_id {cell.event_id} out of range")
    # Negative indices would silently wrap; reject them along with overruns.
    if not (0 <= cell.oeoff_idx < grid.n_oeoff and 0 <= cell.decel_idx < grid.n_decel):
        raise IndexError(f"cell indices out of range: {cell}")
    return float(grid.cell_weights[cell.oeoff_idx, cell.decel_idx])


def build_grid(config: GridConfig,
               glance_pmf: GlancePMF | None = None,
               decel_pmf: DecelPMF | None = None,
               sim_params=None,
               events: Sequence[PrototypeEvent] | None = None) -> ScenarioGrid:
    """Construct the scenario grid, generating prototype events by rejection.

    Candidate events are drawn uniformly from the parameter ranges above and
    accepted only if the simulator's outcome lattice has the structure the
    deduction rules rely on: a crash at the most severe cell, baseline impact
    speed monotone in both axes, countermeasure dominated by baseline, and a
    severity-monotone countermeasure crash set.
    """
    from .simulator import SimParams, validate_event   # deferred: simulator imports grid types

    config.validate()
    oe = np.asarray(config.oeoff_levels, dtype=float)
    de = np.asarray(config.decel_levels, dtype=float)
    glance = glance_pmf if glance_pmf is not None else GlancePMF.default(oe)
    decel = decel_pmf if decel_pmf is not None else DecelPMF.default(de.size)
    glance.validate(oe.size)
    decel.validate(de.size)
    params = sim_params if sim_params is not None else SimParams()

    if events is not None:
        events = tuple(events)
        if len(events) != config.n_events:
            raise ConfigError(f"expected {config.n_events} events, got {len(events)}")
        for ev in events:
            ev.validate()
    else:
        rng = np.random.default_rng(config.rng_seed)
        generated = []
        for eid in range(config.n_events):
            for _ in range(MAX_EVENT_ATTEMPTS):
                fv = rng.uniform(*EVENT_FV_SPEED_RANGE)
                gap = rng.uniform(*EVENT_GAP_RANGE)
                lv_dec = rng.uniform(*EVENT_LV_DECEL_RANGE)
                cand = PrototypeEvent(event_id=eid, fv_speed0=fv, lv_speed0=fv,
                                      gap0=gap, lv_decel=lv_dec)
                if validate_event(cand, oe, de, params):
                    generated.append(cand)
                    break
            else:
                raise ConfigError(
                    f"could not generate a crash-capable monotone prototype event "
                    f"(id {eid}) in {MAX_EVENT_ATTEMPTS} attempts")
        events = tuple(generated)

    weights = np.outer(glance.probabilities, decel.probabilities)
    total = weights.sum()
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"joint weights sum to {total!r}")
    return ScenarioGrid(config=config, events=events, oeoff_levels=oe, decel_levels=de,
                        glance_pmf=glance, decel_pmf=decel, cell_weights=weights)


def save_grid(grid: ScenarioGrid, path) -> None:
    """Serialize the grid (levels, PMFs, seed, and generated events) as JSON.

    Floats are written with shortest round-trip repr, so load_grid is bit-exact.
    """
    doc = {
        "n_events": grid.n_events,
        "rng_seed": grid.config.rng_seed,
        "oeoff_levels": [float(x) for x in grid.oeoff_levels],
        "decel_levels": [float(x) for x in grid.decel_levels],
        "glance_pmf": [float(x) for x in grid.glance_pmf.probabilities],
        "decel_pmf": [float(x) for x in grid.decel_pmf.probabilities],
        "events": [
            {"event_id": ev.event_id, "fv_speed0": ev.fv_speed0, "lv_speed0": ev.lv_speed0,
             "gap0": ev.gap0, "lv_decel": ev.lv_decel}
            for ev in grid.events
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_grid(path) -> ScenarioGrid:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        config = GridConfig(n_events=int(doc["n_events"]),
                            oeoff_levels=tuple(doc["oeoff_levels"]),
                            decel_levels=tuple(doc["decel_levels"]),
                            rng_seed=int(doc["rng_seed"]))
        glance = GlancePMF(probabilities=np.asarray(doc["glance_pmf"], dtype=float))
        decel = DecelPMF(probabilities=np.asarray(doc["decel_pmf"], dtype=float))
        events = [PrototypeEvent(**ev) for ev in doc["events"]]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed grid file {path}: {exc}") from exc
    return build_grid(config, glance_pmf=glance, decel_pmf=decel, events=events)
