"""Experiment orchestration: sampling loops, repeated-run RMSE evaluation, suites.

One experiment runs: deterministic initialization (one baseline simulation per
event at maximum OEOFF / minimum deceleration), then iterate
learn -> optimize -> sample -> estimate -> check stopping. Importance-sampling
methods skip the learning/optimization steps and keep their scheme frozen,
renormalized over the shrinking samplable set when ASSR is on.

Simulation cost: with ASSR on, outcomes known to the knowledge map (earlier
runs or inference) cost nothing; batches are costed against batch-start
knowledge with per-cell deduplication (parallel-batch semantics) and the
knowledge map updates at batch boundaries. With ASSR off every draw pays the
baseline and countermeasure invocations, duplicates included.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assr import (KnowledgeMap, BASE_CRASH_SIMULATED, BASE_NONCRASH_SIMULATED,
                   CM_UNKNOWN)
from .errors import ConfigError, ExhaustedSampleSpace
from .estimators import EstimationAccumulator, TARGET_INDEX
from .grid import ScenarioGrid
from . import predictor
from .samplers import (SamplingScheme, active_scheme, density_scheme, draw_batch,
                       init_deterministic, severity_scheme)
from .simulator import (GroundTruth, SimParams, TARGETS, anchor_time,
                        injury_risk_array, _simulate_cell, MPS_TO_KMH)
from .stopping import StoppingRule, should_stop

METHODS = ("density", "severity", "active")

TRACE_CSV_HEADER = ("iteration,sims_used,scheme,fallback,value,se,"
                    "value_speed_reduction,se_speed_reduction,"
                    "value_crash_avoidance,se_crash_avoidance,"
                    "value_injury_risk_reduction,se_injury_risk_reduction")

RMSE_CSV_HEADER = ("label,method,target,assr,stratified,batch_size,sims,"
                   "rmse_speed_reduction,rmse_crash_avoidance,rmse_injury_risk_reduction")


def _fnum(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    target: str = "speed_reduction"
    assr: bool = False
    stratified: bool = False
    batch_size: int = 10
    repetitions: int = 200
    stopping: tuple = ()
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if not self.stopping:
            raise ConfigError("at least one stopping rule is required")
        for rule in self.stopping:
            rule.validate()
        if not any(r.kind in ("budget", "max_iterations") for r in self.stopping):
            raise ConfigError("a budget or max_iterations stopping rule is required")

    @property
    def label(self) -> str:
        parts = [self.method]
        if self.assr:
            parts.append("assr")
        parts.append("strat" if self.stratified else "post")
        parts.append(self.target)
        parts.append(f"b{self.batch_size}")
        return "-".join(parts)


@dataclass
class EstimateTrace:
    """Per-iteration estimates; row 0 is the initialization state."""

    config: ExperimentConfig
    rep: int
    iterations: np.ndarray
    sims_used: np.ndarray   # non-decreasing; flat across zero-cost batches
    scheme_kinds: list
    fallback: np.ndarray
    values: np.ndarray      # (n, 3), TARGETS order
    ses: np.ndarray         # (n, 3)
    stop_reason: str = ""

    def value_at(self, sims: int, target_idx: int) -> float:
        """Last estimate recorded at or below a simulation count (nan before the first)."""
        i = int(np.searchsorted(self.sims_used, sims, side="right")) - 1
        return float(self.values[i, target_idx]) if i >= 0 else math.nan


def trace_to_csv(trace: EstimateTrace, path) -> None:
    t = TARGET_INDEX[trace.config.target]
    with open(path, "w") as fh:
        fh.write(TRACE_CSV_HEADER + "\n")
        for i in range(trace.iterations.size):
            row = [str(int(trace.iterations[i])), str(int(trace.sims_used[i])),
                   trace.scheme_kinds[i], str(int(trace.fallback[i])),
                   _fnum(trace.values[i, t]), _fnum(trace.ses[i, t])]
            for j in range(3):
                row += [_fnum(trace.values[i, j]), _fnum(trace.ses[i, j])]
            fh.write(",".join(row) + "\n")


class _OutcomeProvider:
    """Per-cell outcome source: ground-truth lookup, or on-demand simulation."""

    def __init__(self, grid: ScenarioGrid, ground_truth: GroundTruth | None,
                 params: SimParams):
        self.grid = grid
        self.params = params
        if ground_truth is not None:
            self.base_table = ground_truth.base_speed
            self.cm_table = ground_truth.cm_speed
        else:
            self.base_table = None
            self._anchors = [anchor_time(ev, params) for ev in grid.events]

    def _run(self, e: int, o: int, d: int, aeb: bool) -> float:
        ev = self.grid.events[e]
        p = self.params
        v = _simulate_cell(ev.fv_speed0, ev.lv_speed0, ev.gap0, ev.lv_decel,
                           self._anchors[e] + float(self.grid.oeoff_levels[o]),
                           float(self.grid.decel_levels[d]), p.brake_jerk,
                           aeb, p.aeb_ttc, p.aeb_decel, p.dt, p.max_steps)
        return float(v * MPS_TO_KMH)

    def base(self, e: int, o: int, d: int) -> float:
        if self.base_table is not None:
            return float(self.base_table[e, o, d])
        return self._run(e, o, d, False)

    def cm(self, e: int, o: int, d: int) -> float:
        if self.base_table is not None:
            return float(self.cm_table[e, o, d])
        return self._run(e, o, d, self.params.aeb_enabled)


def _fit_seed(config: ExperimentConfig, rep: int, tag: int, n_records: int) -> int:
    ss = np.random.SeedSequence((config.seed & 0x7FFFFFFF, rep, tag, n_records))
    return int(ss.generate_state(1)[0])


class _ActiveLearner:
    """Model fitting with caching keyed on training-set size.

    Training data only ever appends, so the record count identifies the data;
    fit seeds derive from (experiment seed, rep, model, count), which keeps
    reruns bit-identical while avoiding redundant refits on unchanged data.
    Cached entries hold the grid predictions alongside the model.
    """

    def __init__(self, config, rep, grid: ScenarioGrid, km: KnowledgeMap,
                 injury_params):
        self.config = config
        self.rep = rep
        self.grid = grid
        self.km = km
        self.injury = injury_params
        self.cache: dict = {}
        self.bins = None
        self.event_bin = None

    def _ensure_bins(self):
        if self.bins is None:
            mk = np.unique(self.km.max_speeds)
            self.bins = (self.grid.oeoff_levels, self.grid.decel_levels, mk)
            self.event_bin = np.searchsorted(mk, self.km.max_speeds)

    def _features(self, e, o, d) -> np.ndarray:
        return np.column_stack([self.grid.oeoff_levels[o], self.grid.decel_levels[d],
                                self.km.max_speeds[e]])

    def _fit_predict(self, tag: int, kind: str, mask: np.ndarray, label_fn):
        """Fit (or reuse) a model on the masked cells; returns (predictions, sigma) or None."""
        n = int(mask.sum())
        key = (tag, kind, n)
        if key not in self.cache:
            e, o, d = np.nonzero(mask)
            x = self._features(e, o, d)
            y = label_fn(e, o, d)
            model = predictor.fit(x, y, kind, _fit_seed(self.config, self.rep, tag, n),
                                  bins=self.bins)
            if not predictor.gate(model):
                self.cache[key] = None
            else:
                grid_pred = predictor.predict_event_grid(
                    model, self.grid.n_oeoff, self.grid.n_decel, self.event_bin)
                if kind == "classification":
                    grid_pred = np.clip(grid_pred, 0.0, 1.0)
                self.cache[key] = (grid_pred.ravel(), model.sigma)
        return self.cache[key]

    def predictions(self):
        """(p_hat, y_hat, sigma) flat arrays for the config target, or None for fallback."""
        self._ensure_bins()
        km = self.km

        def base_label(e, o, d):
            return (km.base_state[e, o, d] == BASE_CRASH_SIMULATED).astype(float)

        sim_mask = ((km.base_state == BASE_CRASH_SIMULATED)
                    | (km.base_state == BASE_NONCRASH_SIMULATED))
        p_entry = self._fit_predict(0, "classification", sim_mask, base_label)
        if p_entry is None:
            return None

        target = self.config.target
        kind = "classification" if target == "crash_avoidance" else "regression"

        def outcome_label(e, o, d):
            base = km.base_speed[e, o, d]
            cm = km.cm_speed[e, o, d]
            if target == "speed_reduction":
                return base - cm
            if target == "crash_avoidance":
                return (cm == 0.0).astype(float)
            return injury_risk_array(base, self.injury) - injury_risk_array(cm, self.injury)

        out_mask = (km.base_state == BASE_CRASH_SIMULATED) & (km.cm_state != CM_UNKNOWN)
        y_entry = self._fit_predict(1, kind, out_mask, outcome_label)
        if y_entry is None:
            return None

        p_hat = p_entry[0]
        y_hat, sigma_hold = y_entry
        if kind == "classification":
            sigma = np.sqrt(y_hat * (1.0 - y_hat))
        else:
            sigma = sigma_hold
        return p_hat, y_hat, sigma


def run_experiment(config: ExperimentConfig, grid: ScenarioGrid,
                   ground_truth: GroundTruth | None = None,
                   sim_params: SimParams | None = None, rep: int = 0) -> EstimateTrace:
    """Execute one experiment repetition and return its estimate trace."""
    config.validate()
    params = sim_params or SimParams()
    if config.stratified and config.batch_size % grid.n_events != 0:
        raise ConfigError(f"stratified batch size {config.batch_size} must be a "
                          f"multiple of {grid.n_events} events")

    rng = np.random.default_rng(np.random.SeedSequence((config.seed & 0x7FFFFFFF, rep)))
    provider = _OutcomeProvider(grid, ground_truth, params)
    km = KnowledgeMap(grid, inference=config.assr)
    acc = EstimationAccumulator(grid.n_events)
    w_flat = grid.weights_flat()
    cpe = grid.cells_per_event
    target_idx = TARGET_INDEX[config.target]
    sims = 0

    # Initialization: deterministic baseline sample, one cell per event.
    for cell in init_deterministic(grid):
        kmh = provider.base(*cell)
        km.record_baseline(cell, kmh > 0.0, kmh)
        sims += 1
    km.drain_new_certainty()

    learner = _ActiveLearner(config, rep, grid, km, params.injury)
    scheme: SamplingScheme | None = None
    samplable_count = -1

    rows_iter = [0]
    rows_sims = [sims]
    rows_kind = ["init"]
    rows_fb = [False]
    rows_val = [np.full(3, np.nan)]
    rows_se = [np.full(3, np.nan)]
    prev_values = np.full(3, np.nan)
    iteration = 0
    stop_reason = ""

    while True:
        last_val = rows_val[-1][target_idx]
        last_se = rows_se[-1][target_idx]
        stop, reason = should_stop(config.stopping, float(last_val), float(last_se),
                                   sims, iteration)
        if stop:
            stop_reason = reason
            break
        samplable_flat = km.samplable.reshape(-1)
        n_open = int(samplable_flat.sum())
        if n_open == 0:
            stop_reason = "exhausted samplable space"
            break

        iteration += 1
        fallback = False
        try:
            if config.method == "active":
                preds = learner.predictions()
                mu_hat = prev_values[target_idx]
                sch = None
                if preds is not None and math.isfinite(mu_hat):
                    p_hat, y_hat, sigma = preds
                    sch = active_scheme(p_hat, y_hat, sigma, mu_hat, grid,
                                        samplable_flat, config.stratified)
                if sch is None:
                    fallback = True
                    sch = density_scheme(grid, samplable_flat, config.stratified,
                                         kind="fallback")
                scheme = sch
            else:
                if scheme is None or n_open != samplable_count:
                    if config.method == "density":
                        scheme = density_scheme(grid, samplable_flat, config.stratified)
                    else:
                        scheme = severity_scheme(grid, km.max_speeds, samplable_flat,
                                                 config.stratified)
                    samplable_count = n_open
            cells, pis = draw_batch(scheme, config.batch_size, rng)
        except ExhaustedSampleSpace:
            stop_reason = "exhausted samplable space"
            break

        uniq, inv = np.unique(cells, return_inverse=True)
        n_u = uniq.size
        base_kmh = np.empty(n_u)
        cm_kmh = np.empty(n_u)
        if config.assr:
            pending = []
            for i in range(n_u):
                cell = grid.cell_at(int(uniq[i]))
                run_base, cm_unknown = km.simulation_cost(cell)
                if run_base:
                    b = provider.base(*cell)
                    sims += 1
                else:
                    _, b = km.base_outcome(cell)
                crashed = b > 0.0
                ran_cm = False
                if not crashed:
                    c = 0.0
                elif cm_unknown:
                    c = provider.cm(*cell)
                    sims += 1
                    ran_cm = True
                else:
                    c = float(km.cm_speed[cell])
                base_kmh[i], cm_kmh[i] = b, c
                if run_base or ran_cm:
                    pending.append((cell, run_base, b, ran_cm, c))
            # knowledge updates apply at the batch boundary
            for cell, ran_base, b, ran_cm, c in pending:
                if ran_base:
                    km.record_baseline(cell, b > 0.0, b)
                if ran_cm:
                    km.record_countermeasure(cell, c > 0.0, c)
        else:
            for i in range(n_u):
                cell = grid.cell_at(int(uniq[i]))
                if not km.base_known(cell):
                    b = provider.base(*cell)
                    km.record_baseline(cell, b > 0.0, b)
                else:
                    _, b = km.base_outcome(cell)
                if km.cm_state[cell] == CM_UNKNOWN:
                    c = provider.cm(*cell)
                    km.record_countermeasure(cell, c > 0.0, c)
                else:
                    c = float(km.cm_speed[cell])
                base_kmh[i], cm_kmh[i] = b, c
            sims += 2 * cells.size   # the naive pipeline always runs both layers

        risk_base = injury_risk_array(base_kmh, params.injury)
        risk_cm = injury_risk_array(cm_kmh, params.injury)
        y3_u = np.stack([base_kmh - cm_kmh,
                         ((base_kmh > 0.0) & (cm_kmh == 0.0)).astype(float),
                         risk_base - risk_cm])
        acc.add_draws(cells // cpe, pis, w_flat[cells],
                      (base_kmh > 0.0)[inv], y3_u[:, inv])

        new_cert = km.drain_new_certainty()
        if new_cert:
            ce = np.array([c.event_id for c in new_cert])
            flat = np.array([grid.flat_index(c) for c in new_cert])
            mk = km.max_speeds[ce]
            y3c = np.stack([mk, np.ones(mk.size),
                            injury_risk_array(mk, params.injury)])
            acc.add_certainty(ce, w_flat[flat], y3c)

        ests = [acc.estimate(t, config.stratified, sims) for t in TARGETS]
        prev_values = np.array([e.value for e in ests])
        rows_iter.append(iteration)
        rows_sims.append(sims)
        rows_kind.append(scheme.kind)
        rows_fb.append(fallback)
        rows_val.append(prev_values)
        rows_se.append(np.array([e.se for e in ests]))

    return EstimateTrace(config=config, rep=rep,
                         iterations=np.asarray(rows_iter, dtype=np.int64),
                         sims_used=np.asarray(rows_sims, dtype=np.int64),
                         scheme_kinds=rows_kind,
                         fallback=np.asarray(rows_fb, dtype=bool),
                         values=np.asarray(rows_val, dtype=float).reshape(-1, 3),
                         ses=np.asarray(rows_se, dtype=float).reshape(-1, 3),
                         stop_reason=stop_reason)


# ---------------------------------------------------------------------------
# Repeated evaluation against ground truth

@dataclass
class EvaluationResult:
    configs: tuple
    checkpoints: np.ndarray
    rmse: np.ndarray        # (n_configs, n_checkpoints, 3)
    finals: np.ndarray      # (n_configs, n_reps, 3)
    truth: np.ndarray       # (3,)
    n_reps: int

    def rmse_for(self, config_idx: int, target: str) -> np.ndarray:
        return self.rmse[config_idx, :, TARGET_INDEX[target]]


def to_rmse_csv(result: EvaluationResult, path) -> None:
    with open(path, "w") as fh:
        fh.write(RMSE_CSV_HEADER + "\n")
        for ci, cfg in enumerate(result.configs):
            for pi_, cp in enumerate(result.checkpoints):
                row = [cfg.label, cfg.method, cfg.target, str(int(cfg.assr)),
                       str(int(cfg.stratified)), str(cfg.batch_size), str(int(cp))]
                row += [_fnum(result.rmse[ci, pi_, j]) for j in range(3)]
                fh.write(",".join(row) + "\n")


_WORKER: dict = {}


def _init_worker(grid, ground_truth, sim_params):
    _WORKER["grid"] = grid
    _WORKER["gt"] = ground_truth
    _WORKER["params"] = sim_params


def _run_task(task):
    cfg, cfg_idx, rep, checkpoints = task
    trace = run_experiment(cfg, _WORKER["grid"], _WORKER["gt"],
                           _WORKER["params"], rep=rep)
    locf = np.empty((len(checkpoints), 3))
    for p, cp in enumerate(checkpoints):
        for t in range(3):
            locf[p, t] = trace.value_at(int(cp), t)
    final = trace.values[-1] if trace.values.size else np.full(3, np.nan)
    return cfg_idx, rep, locf, final


def evaluate_rmse(configs, grid: ScenarioGrid, ground_truth: GroundTruth,
                  n_reps: int, checkpoints, sim_params: SimParams | None = None,
                  n_workers: int | None = None) -> EvaluationResult:
    """Run each config for n_reps independent repetitions and align RMSE curves.

    Traces are aligned on the simulation-count axis by carrying the last
    estimate forward onto the checkpoints. Results are deterministic in
    (config.seed, rep) regardless of worker scheduling.
    """
    configs = tuple(configs)
    params = sim_params or SimParams()
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    tasks = [(cfg, ci, rep, checkpoints)
             for ci, cfg in enumerate(configs) for rep in range(n_reps)]
    locf_all = np.full((len(configs), n_reps, checkpoints.size, 3), np.nan)
    finals = np.full((len(configs), n_reps, 3), np.nan)

    if n_workers is None:
        n_workers = min(os.cpu_count() or 1, len(tasks))
    if n_workers <= 1:
        _init_worker(grid, ground_truth, params)
        results = map(_run_task, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=n_workers, initializer=_init_worker,
                                   initargs=(grid, ground_truth, params))
        results = pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (n_workers * 8)))

    for cfg_idx, rep, locf, final in results:
        locf_all[cfg_idx, rep] = locf
        finals[cfg_idx, rep] = final
    if pool is not None:
        pool.shutdown()

    truth = ground_truth.grand_means
    err = locf_all - truth[None, None, None, :]
    with np.errstate(invalid="ignore"):
        rmse = np.sqrt(np.nanmean(err ** 2, axis=1))
    return EvaluationResult(configs=configs, checkpoints=checkpoints, rmse=rmse,
                            finals=finals, truth=truth.copy(), n_reps=n_reps)


# ---------------------------------------------------------------------------
# Comparison suites (paper-style comparisons i-v)

SUITES = ("methods", "assr", "stratification", "stratification-assr", "batch-size")


def default_checkpoints(budget: int, n_points: int = 12, start: int = 500) -> np.ndarray:
    start = min(start, budget)
    return np.unique(np.linspace(start, budget, n_points).astype(np.int64))


def suite_configs(suite: str, seed: int, budget: int = 6000, batch_size: int = 44,
                  targets=TARGETS, max_iterations: int = 3000) -> list[ExperimentConfig]:
    """Experiment arms for one named comparison suite."""
    stop = (StoppingRule("budget", budget), StoppingRule("max_iterations", max_iterations))

    def cfg(method, target, assr, stratified, batch=batch_size):
        return ExperimentConfig(method=method, target=target, assr=assr,
                                stratified=stratified, batch_size=batch,
                                stopping=stop, seed=seed)

    out = []
    if suite == "methods":
        for t in targets:
            out.append(cfg("active", t, False, False))
        out.append(cfg("density", TARGETS[0], False, False))
        out.append(cfg("severity", TARGETS[0], False, False))
    elif suite == "assr":
        for t in targets:
            out.append(cfg("active", t, True, False))
            out.append(cfg("active", t, False, False))
    elif suite == "stratification":
        for t in targets:
            for method in ("active", "severity"):
                out.append(cfg(method, t, False, True))
                out.append(cfg(method, t, False, False))
    elif suite == "stratification-assr":
        for t in targets:
            for method in ("active", "severity"):
                out.append(cfg(method, t, True, True))
                out.append(cfg(method, t, True, False))
    elif suite == "batch-size":
        for t in targets:
            for b in (44, 132, 440):
                out.append(cfg("active", t, True, True, batch=b))
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    return out
