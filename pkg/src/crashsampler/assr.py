"""Adaptive sample space reduction: rule-based deduction over the monotone lattice.

Per event, three monotone regions are tracked as staircase thresholds over the
(OEOFF index, deceleration index) lattice:

* non-crash region (rule i): a baseline non-crash at (o, d) implies non-crashes
  at all (o' <= o, d' >= d); those cells leave the samplable set.
* max-speed region (rule iv): a baseline crash at the event's maximum impact
  speed at (o, d) implies the same impact speed at all (o' >= o, d' <= d);
  those cells keep only their countermeasure cost.
* avoided region (rule iii): a countermeasure non-crash at (o, d) implies
  avoidance at all (o' <= o, d' >= d).

Cells fully known by pure inference (max-speed region intersected with the
avoided region) become certainty cells: exact outcomes with zero cost and zero
sampling variance; they leave the samplable set. Cells that were themselves
simulated never become certainty cells (their information enters estimation
through their draw records).

With ``inference=False`` the map degrades to a plain outcome cache and the
samplable set never shrinks.
"""

from __future__ import annotations

import numpy as np

from .errors import MonotonicityViolation
from .grid import ScenarioCell, ScenarioGrid

BASE_UNKNOWN = 0
BASE_NONCRASH_INFERRED = 1
BASE_NONCRASH_SIMULATED = 2
BASE_CRASH_SIMULATED = 3
BASE_CRASH_INFERRED = 4

CM_UNKNOWN = 0
CM_AVOIDED_INFERRED = 1
CM_AVOIDED_SIMULATED = 2
CM_CRASH_SIMULATED = 3

_BASE_STATE_NAMES = {0: "unknown", 1: "noncrash_inferred", 2: "noncrash_simulated",
                     3: "crash_simulated", 4: "crash_inferred_max"}
_CM_STATE_NAMES = {0: "unknown", 1: "avoided_inferred", 2: "avoided_simulated",
                   3: "crash_simulated"}

KNOWLEDGE_CSV_HEADER = "event_id,oeoff_idx,decel_idx,base_state,cm_state,base_speed_kmh,cm_speed_kmh,samplable"


class KnowledgeMap:
    """Mutable per-experiment knowledge state. Single writer, cheap readers."""

    def __init__(self, grid: ScenarioGrid, inference: bool = True):
        E, NO, ND = grid.n_events, grid.n_oeoff, grid.n_decel
        self.grid = grid
        self.inference = inference
        self.base_state = np.zeros((E, NO, ND), dtype=np.int8)
        self.cm_state = np.zeros((E, NO, ND), dtype=np.int8)
        self.base_speed = np.full((E, NO, ND), np.nan)
        self.cm_speed = np.full((E, NO, ND), np.nan)
        self.max_speeds = np.full(E, np.nan)
        self.samplable = np.ones((E, NO, ND), dtype=bool)
        # staircases: tau = non-crash prefix length, alpha = avoided prefix length,
        # sigma = first row of the max-speed region (NO = empty), all per decel column
        self.tau = np.zeros((E, ND), dtype=np.int64)
        self.sigma = np.full((E, ND), NO, dtype=np.int64)
        self.alpha = np.zeros((E, ND), dtype=np.int64)
        self.certainty = np.zeros((E, NO, ND), dtype=bool)
        self._new_certainty: list[ScenarioCell] = []

    # -- queries ------------------------------------------------------------

    def base_known(self, cell: ScenarioCell) -> bool:
        return self.base_state[cell] != BASE_UNKNOWN

    def base_outcome(self, cell: ScenarioCell) -> tuple[bool, float]:
        s = self.base_state[cell]
        if s == BASE_UNKNOWN:
            raise KeyError(f"baseline outcome unknown for {cell}")
        return s in (BASE_CRASH_SIMULATED, BASE_CRASH_INFERRED), float(self.base_speed[cell])

    def needs_countermeasure(self, cell: ScenarioCell) -> tuple[bool, tuple[bool, float] | None]:
        """(run it?, known outcome if not). Baseline outcome must be known."""
        crashed, _ = self.base_outcome(cell)
        if not crashed:
            return False, (False, 0.0)
        s = self.cm_state[cell]
        if s == CM_UNKNOWN:
            return True, None
        if s == CM_CRASH_SIMULATED:
            return False, (True, float(self.cm_speed[cell]))
        return False, (False, 0.0)

    def simulation_cost(self, cell: ScenarioCell) -> tuple[bool, bool]:
        """Invocation flags for a sampled cell: (run baseline, run countermeasure).

        The countermeasure flag is conditional: it means an invocation will be
        needed if the baseline outcome is (or turns out to be) a crash.
        """
        run_base = self.base_state[cell] == BASE_UNKNOWN
        if not run_base:
            crashed, _ = self.base_outcome(cell)
            if not crashed:
                return False, False
        return run_base, self.cm_state[cell] == CM_UNKNOWN

    def fully_known(self, cell: ScenarioCell) -> bool:
        s = self.base_state[cell]
        if s == BASE_UNKNOWN:
            return False
        if s in (BASE_NONCRASH_INFERRED, BASE_NONCRASH_SIMULATED):
            return True
        return self.cm_state[cell] != CM_UNKNOWN

    def drain_new_certainty(self) -> list[ScenarioCell]:
        out = self._new_certainty
        self._new_certainty = []
        return out

    # -- recording ----------------------------------------------------------

    def record_baseline(self, cell: ScenarioCell, crashed: bool, impact_kmh: float) -> list[ScenarioCell]:
        """Store a simulated baseline outcome; returns the newly inferred cells."""
        e, o, d = cell
        state = self.base_state[e, o, d]
        if crashed:
            if state in (BASE_NONCRASH_INFERRED, BASE_NONCRASH_SIMULATED):
                raise MonotonicityViolation(f"crash recorded inside non-crash region at {cell}")
            if state in (BASE_CRASH_SIMULATED, BASE_CRASH_INFERRED):
                if impact_kmh != self.base_speed[e, o, d]:
                    raise MonotonicityViolation(
                        f"impact speed {impact_kmh} contradicts known {self.base_speed[e, o, d]} at {cell}")
                self.base_state[e, o, d] = BASE_CRASH_SIMULATED
                return []
            self.base_state[e, o, d] = BASE_CRASH_SIMULATED
            self.base_speed[e, o, d] = impact_kmh
            if o == self.grid.n_oeoff - 1 and d == 0 and np.isnan(self.max_speeds[e]):
                self.max_speeds[e] = impact_kmh
            if not self.inference:
                return []
            mk = self.max_speeds[e]
            if np.isnan(mk):
                return []
            if impact_kmh > mk:
                raise MonotonicityViolation(
                    f"impact speed {impact_kmh} exceeds event max {mk} at {cell}")
            if impact_kmh == mk:
                return self._extend_max_region(e, o, d)
            return []

        # non-crash
        if state in (BASE_CRASH_SIMULATED, BASE_CRASH_INFERRED):
            raise MonotonicityViolation(f"non-crash recorded at known crash cell {cell}")
        self.base_state[e, o, d] = BASE_NONCRASH_SIMULATED
        self.base_speed[e, o, d] = 0.0
        if not self.inference:
            return []
        self.cm_state[e, o, d] = max(self.cm_state[e, o, d], CM_AVOIDED_INFERRED)
        self.cm_speed[e, o, d] = 0.0
        if o >= self.sigma[e, d]:
            raise MonotonicityViolation(f"non-crash recorded inside max-speed region at {cell}")
        return self._extend_noncrash_region(e, o, d)

    def record_countermeasure(self, cell: ScenarioCell, crashed: bool, impact_kmh: float) -> list[ScenarioCell]:
        e, o, d = cell
        base = self.base_state[e, o, d]
        if base in (BASE_UNKNOWN,):
            raise ValueError(f"countermeasure recorded before baseline at {cell}")
        if crashed:
            s = self.cm_state[e, o, d]
            if s in (CM_AVOIDED_INFERRED, CM_AVOIDED_SIMULATED):
                raise MonotonicityViolation(f"countermeasure crash inside avoided region at {cell}")
            if s == CM_CRASH_SIMULATED:
                if impact_kmh != self.cm_speed[e, o, d]:
                    raise MonotonicityViolation(
                        f"countermeasure speed {impact_kmh} contradicts known "
                        f"{self.cm_speed[e, o, d]} at {cell}")
                return []
            base_speed = self.base_speed[e, o, d]
            if impact_kmh > base_speed:
                raise MonotonicityViolation(
                    f"countermeasure impact {impact_kmh} exceeds baseline {base_speed} at {cell}")
            self.cm_state[e, o, d] = CM_CRASH_SIMULATED
            self.cm_speed[e, o, d] = impact_kmh
            return []

        s = self.cm_state[e, o, d]
        if s == CM_CRASH_SIMULATED:
            raise MonotonicityViolation(f"countermeasure non-crash at known cm-crash cell {cell}")
        self.cm_state[e, o, d] = CM_AVOIDED_SIMULATED
        self.cm_speed[e, o, d] = 0.0
        if not self.inference:
            return []
        return self._extend_avoided_region(e, o, d)

    # -- region machinery ---------------------------------------------------

    def _mark_unsamplable(self, e: int, o: int, d: int):
        self.samplable[e, o, d] = False

    def _extend_noncrash_region(self, e: int, o: int, d: int) -> list[ScenarioCell]:
        new = []
        self._mark_unsamplable(e, o, d)
        for d2 in range(d, self.grid.n_decel):
            old = self.tau[e, d2]
            hi = o + 1
            if hi <= old:
                continue
            states = self.base_state[e, old:hi, d2]
            if np.any((states == BASE_CRASH_SIMULATED) | (states == BASE_CRASH_INFERRED)):
                raise MonotonicityViolation(
                    f"known crash inside deduced non-crash region (event {e}, decel col {d2})")
            for o2 in range(old, hi):
                if self.base_state[e, o2, d2] == BASE_UNKNOWN:
                    self.base_state[e, o2, d2] = BASE_NONCRASH_INFERRED
                    self.base_speed[e, o2, d2] = 0.0
                    self.cm_state[e, o2, d2] = max(self.cm_state[e, o2, d2], CM_AVOIDED_INFERRED)
                    self.cm_speed[e, o2, d2] = 0.0
                    new.append(ScenarioCell(e, o2, d2))
                self.samplable[e, o2, d2] = False
            self.tau[e, d2] = hi
            if hi > self.sigma[e, d2]:
                raise MonotonicityViolation(
                    f"non-crash region overlaps max-speed region (event {e}, decel col {d2})")
        return new

    def _extend_max_region(self, e: int, o: int, d: int) -> list[ScenarioCell]:
        mk = self.max_speeds[e]
        new = []
        for d2 in range(d, -1, -1):
            old = self.sigma[e, d2]
            if o >= old:
                continue
            for o2 in range(o, old):
                st = self.base_state[e, o2, d2]
                if st in (BASE_NONCRASH_INFERRED, BASE_NONCRASH_SIMULATED):
                    raise MonotonicityViolation(
                        f"known non-crash inside deduced max-speed region (event {e}, col {d2})")
                if st == BASE_CRASH_SIMULATED and self.base_speed[e, o2, d2] != mk:
                    raise MonotonicityViolation(
                        f"known impact {self.base_speed[e, o2, d2]} != max {mk} "
                        f"inside max-speed region (event {e}, col {d2})")
                if st == BASE_UNKNOWN:
                    self.base_state[e, o2, d2] = BASE_CRASH_INFERRED
                    self.base_speed[e, o2, d2] = mk
                    new.append(ScenarioCell(e, o2, d2))
            self.sigma[e, d2] = o
            if self.tau[e, d2] > o:
                raise MonotonicityViolation(
                    f"max-speed region overlaps non-crash region (event {e}, col {d2})")
        self._scan_certainty(e, range(0, d + 1))
        return new

    def _extend_avoided_region(self, e: int, o: int, d: int) -> list[ScenarioCell]:
        new = []
        for d2 in range(d, self.grid.n_decel):
            old = self.alpha[e, d2]
            hi = o + 1
            if hi <= old:
                continue
            for o2 in range(old, hi):
                st = self.cm_state[e, o2, d2]
                if st == CM_CRASH_SIMULATED:
                    raise MonotonicityViolation(
                        f"known countermeasure crash inside deduced avoided region (event {e}, col {d2})")
                if st == CM_UNKNOWN:
                    self.cm_state[e, o2, d2] = CM_AVOIDED_INFERRED
                    self.cm_speed[e, o2, d2] = 0.0
                    new.append(ScenarioCell(e, o2, d2))
            self.alpha[e, d2] = hi
        self._scan_certainty(e, range(d, self.grid.n_decel))
        return new

    def _scan_certainty(self, e: int, cols):
        """Cells inferred on both layers (max-speed crash + avoided) become certainty."""
        for d2 in cols:
            lo = self.sigma[e, d2]
            hi = min(self.alpha[e, d2], self.grid.n_oeoff)
            for o2 in range(lo, hi):
                if self.certainty[e, o2, d2]:
                    continue
                if (self.base_state[e, o2, d2] == BASE_CRASH_INFERRED
                        and self.cm_state[e, o2, d2] == CM_AVOIDED_INFERRED):
                    self.certainty[e, o2, d2] = True
                    self.samplable[e, o2, d2] = False
                    self._new_certainty.append(ScenarioCell(e, o2, d2))

    # -- frontiers and export -----------------------------------------------

    def noncrash_frontier(self, e: int) -> list[tuple[int, int]]:
        """Minimal antichain generating the non-crash region (rule i)."""
        pts = []
        for d in range(self.grid.n_decel):
            t = self.tau[e, d]
            if t > 0 and (d == 0 or t > self.tau[e, d - 1]):
                pts.append((int(t - 1), d))
        return pts

    def maxspeed_frontier(self, e: int) -> list[tuple[int, int]]:
        """Minimal antichain generating the max-speed region (rule iv)."""
        pts = []
        NO = self.grid.n_oeoff
        for d in range(self.grid.n_decel - 1, -1, -1):
            s = self.sigma[e, d]
            if s < NO and (d == self.grid.n_decel - 1 or s < self.sigma[e, d + 1]):
                pts.append((int(s), d))
        return pts

    def export_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(KNOWLEDGE_CSV_HEADER + "\n")
            for e in range(self.grid.n_events):
                for o in range(self.grid.n_oeoff):
                    for d in range(self.grid.n_decel):
                        fh.write(",".join([
                            str(e), str(o), str(d),
                            _BASE_STATE_NAMES[int(self.base_state[e, o, d])],
                            _CM_STATE_NAMES[int(self.cm_state[e, o, d])],
                            repr(float(self.base_speed[e, o, d])),
                            repr(float(self.cm_speed[e, o, d])),
                            str(int(self.samplable[e, o, d])),
                        ]) + "\n")
