"""Acceptance suite: one test per criterion, printing one PASS line each.

Criteria 5-9 are the repeated-experiment comparisons (200 repetitions on a
worker pool); they dominate the runtime and their cumulative wall time is
asserted against the 30-minute bound. Everything else is exact arithmetic,
exhaustive enumeration, or property tests.
"""

import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crashsampler import (ExperimentConfig, GridConfig, KnowledgeMap, StoppingRule,
                          build_grid, build_ground_truth, evaluate_rmse,
                          should_stop, shrink_case_estimates)
from crashsampler.cli import main as cli_main
from crashsampler.estimators import SampleRecord, case_ratio_estimate
from crashsampler.samplers import active_criterion, active_scheme, density_scheme
from crashsampler.simulator import OutcomeTriple, TARGETS

REPS = 200
SEED = 2024
_heavy_seconds: list[float] = []


def report(n: int, detail: str):
    print(f"\nACCEPTANCE {n:02d} PASS: {detail}")


def make_cfg(method, target="speed_reduction", assr=False, strat=False, batch=88,
             budget=6000, max_iter=2500):
    return ExperimentConfig(method=method, target=target, assr=assr, stratified=strat,
                            batch_size=batch, seed=SEED,
                            stopping=(StoppingRule("budget", budget),
                                      StoppingRule("max_iterations", max_iter)))


def timed_evaluate(configs, grid, gt, checkpoints):
    t0 = time.time()
    res = evaluate_rmse(configs, grid, gt, n_reps=REPS, checkpoints=checkpoints,
                        n_workers=2)
    _heavy_seconds.append(time.time() - t0)
    return res


@pytest.fixture(scope="module", autouse=True)
def warm_kernels(default_grid):
    """Compile the numba kernels in the parent before pools fork."""
    from crashsampler import predictor as P
    rng = np.random.default_rng(0)
    mk = np.sort(rng.uniform(30, 90, 44))
    x = np.column_stack([rng.choice(default_grid.oeoff_levels, 50),
                         rng.choice(default_grid.decel_levels, 50),
                         rng.choice(mk, 50)])
    bins = (default_grid.oeoff_levels, default_grid.decel_levels, mk)
    m = P.fit(x, x[:, 0] * 2.0, "regression", seed=0, bins=bins)
    P.predict(m, x[:3])
    P.predict_event_grid(m, default_grid.n_oeoff, default_grid.n_decel,
                         np.arange(44))


def test_c01_grid_fidelity():
    t0 = time.time()
    grid = build_grid(GridConfig())
    gt = build_ground_truth(grid)
    elapsed = time.time() - t0
    assert grid.n_events == 44 and grid.n_oeoff == 67 and grid.n_decel == 15
    assert grid.n_cells == 44220
    assert gt.n_enumerated == 88440
    per_event = grid.weights_flat().reshape(44, -1).sum(axis=1)
    assert np.all(np.abs(per_event - 1.0) <= 1e-9)
    assert grid.glance_pmf.probabilities[0] == 0.854
    assert elapsed < 120.0
    report(1, f"44x67x15 grid, 88,440 outcomes, weights sum to 1, "
              f"OEOFF=0 mass 0.854; built in {elapsed:.1f}s (< 120s)")


def test_c02_assr_soundness(default_grid, ground_truth):
    """Exhaustive: every rule-i/ii/iii/iv inference equals the simulator output."""
    grid, gt = default_grid, ground_truth
    km = KnowledgeMap(grid, inference=True)
    order = np.random.default_rng(99).permutation(grid.n_cells)
    checked = 0
    for flat in order:
        cell = grid.cell_at(int(flat))
        e, o, d = cell
        true_base = float(gt.base_speed[e, o, d])
        true_cm = float(gt.cm_speed[e, o, d])
        if km.base_state[cell] != 0:
            crashed, speed = km.base_outcome(cell)
            assert crashed == (true_base > 0.0), cell
            assert speed == true_base, cell
            checked += 1
        else:
            km.record_baseline(cell, true_base > 0.0, true_base)
        if true_base > 0.0:
            if km.cm_state[cell] != 0:
                run, known = km.needs_countermeasure(cell)
                assert not run
                assert known == (true_cm > 0.0, true_cm), cell
                checked += 1
            else:
                km.record_countermeasure(cell, true_cm > 0.0, true_cm)
        else:
            # rule ii: inferred avoided for non-crash baselines
            if km.cm_state[cell] != 0:
                assert true_cm == 0.0
    # final sweep: all knowledge equals the truth tables
    known = km.base_state > 0
    assert known.all()
    assert np.array_equal(km.base_speed, gt.base_speed)
    report(2, f"exhaustive replay over {grid.n_cells} cells: {checked} inferred "
              f"outcomes verified, zero violations")


def test_c03_simulator_monotonicity(ground_truth):
    base = ground_truth.base_speed
    viol_o = int((np.diff(base, axis=1) < 0).sum())
    viol_d = int((np.diff(base, axis=2) > 0).sum())
    assert viol_o == 0 and viol_d == 0
    report(3, "baseline impact speed non-decreasing in OEOFF and non-increasing "
              "in deceleration for all 44 events, zero violations")


def test_c04_toy_estimator_unbiasedness(toy_grid, toy_ground_truth):
    """Exhaustive multinomial enumeration: HH totals exact, ratio bias < 5%."""
    grid, gt = toy_grid, toy_ground_truth
    n_cells = grid.n_cells
    w = grid.weights_flat()
    pi = w / w.sum()
    ev = np.arange(n_cells) // grid.cells_per_event
    cells = [grid.cell_at(i) for i in range(n_cells)]
    crash = np.array([gt.base_crashed[c] for c in cells])
    yv = np.array([gt.y[0][c] for c in cells])

    def rec(i):
        out = OutcomeTriple(yv[i], 0.0, int(yv[i] > 0)) if crash[i] else None
        return SampleRecord(cell=cells[i], pi=float(pi[i]), w=float(w[i]),
                            base_crashed=bool(crash[i]), outcome=out)

    truth_ty = np.array([float((w * yv * crash)[ev == k].sum()) for k in range(2)])
    truth_t1 = np.array([float((w * crash)[ev == k].sum()) for k in range(2)])
    worst_total = 0.0
    worst_bias = 0.0
    for n in (1, 2, 3):
        e_ty = np.zeros(2)
        e_t1 = np.zeros(2)
        ratio = np.zeros(2)
        ratio_p = np.zeros(2)
        for sample in itertools.product(range(n_cells), repeat=n):
            p = float(np.prod(pi[list(sample)]))
            for k in range(2):
                recs = [rec(i) for i in sample if ev[i] == k]
                ty = sum(r.w * r.outcome.impact_speed_reduction / r.pi
                         for r in recs if r.base_crashed) / n
                t1 = sum(r.w / r.pi for r in recs if r.base_crashed) / n
                e_ty[k] += p * ty
                e_t1[k] += p * t1
                est = case_ratio_estimate(recs, [], n, "speed_reduction")
                if math.isfinite(est.mu):
                    ratio[k] += p * est.mu
                    ratio_p[k] += p
        worst_total = max(worst_total, np.abs(e_ty - truth_ty).max(),
                          np.abs(e_t1 - truth_t1).max())
        assert np.all(np.abs(e_ty - truth_ty) <= 1e-12)
        assert np.all(np.abs(e_t1 - truth_t1) <= 1e-12)
        if n == 3:
            mu_true = truth_ty / truth_t1
            bias = np.abs(ratio / ratio_p - mu_true)
            worst_bias = float((bias / np.abs(mu_true)).max())
            assert np.all(bias < 0.05 * np.abs(mu_true))
    report(4, f"all multinomial samples up to size 3 on the 2x3x2 grid: totals "
              f"exact (worst error {worst_total:.2e} <= 1e-12), ratio bias "
              f"{100 * worst_bias:.3g}% < 5%")


def test_c05_density_convergence(default_grid, ground_truth):
    """Density IS at a 20%-of-grid budget: unbiased within noise, RMSE decreasing."""
    budget = int(0.2 * default_grid.n_cells)   # 8,844
    quartiles = [budget // 4, budget // 2, 3 * budget // 4, budget]
    res = timed_evaluate([make_cfg("density", batch=220, budget=budget)],
                         default_grid, ground_truth, quartiles)
    details = []
    for t, name in enumerate(TARGETS):
        rmse = res.rmse[0, :, t]
        assert np.all(np.diff(rmse) < 0), f"RMSE not strictly decreasing for {name}"
        finals = res.finals[0, :, t]
        sd = finals.std(ddof=1)
        bias = abs(finals.mean() - ground_truth.grand_means[t])
        assert bias <= 2.0 * sd, name
        details.append(f"{name} bias/SE={bias / sd:.2f}")
    report(5, f"budget {budget}, {REPS} reps: RMSE strictly decreasing across "
              f"quartiles; mean within 2 SE of truth ({'; '.join(details)})")


def test_c06_assr_benefit(default_grid, ground_truth):
    res = timed_evaluate([make_cfg("active", target="crash_avoidance", assr=True),
                          make_cfg("active", target="crash_avoidance", assr=False)],
                         default_grid, ground_truth, [6000])
    t = TARGETS.index("crash_avoidance")
    on, off = res.rmse[0, -1, t], res.rmse[1, -1, t]
    reduction = 1.0 - on / off
    assert reduction >= 0.20
    report(6, f"active sampling at 6,000 sims, {REPS} reps: ASSR cuts "
              f"crash-avoidance RMSE by {100 * reduction:.0f}% (>= 20%)")


def test_c07_stratification_benefit(default_grid, ground_truth):
    cps = [2000, 3000, 4000, 5000, 6000]
    res = timed_evaluate([make_cfg("severity", strat=True),
                          make_cfg("severity", strat=False)],
                         default_grid, ground_truth, cps)
    for name in ("speed_reduction", "crash_avoidance"):
        t = TARGETS.index(name)
        assert np.all(res.rmse[0, :, t] <= res.rmse[1, :, t]), name
    report(7, f"severity IS without ASSR, {REPS} reps: stratified RMSE <= "
              f"post-stratified at every checkpoint {cps} for speed reduction "
              f"and crash avoidance")


def test_c08_method_ordering(default_grid, ground_truth):
    arms = [make_cfg("active", target=t) for t in TARGETS] + [make_cfg("density")]
    res = timed_evaluate(arms, default_grid, ground_truth, [6000])
    ratios = []
    for i, name in enumerate(TARGETS):
        t = TARGETS.index(name)
        a, d = res.rmse[i, -1, t], res.rmse[3, -1, t]
        assert a <= d, name
        ratios.append(f"{name} {a / d:.2f}")
    report(8, f"post-stratified, no ASSR, {REPS} reps: active RMSE <= density at "
              f"the final 6,000-sim checkpoint for its optimized target "
              f"(ratios {', '.join(ratios)})")


def test_c09_batch_size_trend(default_grid, ground_truth):
    cps = [2000, 3000, 4000]
    res = timed_evaluate([make_cfg("active", assr=True, strat=True, batch=44,
                                   budget=4000, max_iter=1200),
                          make_cfg("active", assr=True, strat=True, batch=440,
                                   budget=4000, max_iter=1200)],
                         default_grid, ground_truth, cps)
    for t, name in enumerate(TARGETS):
        assert np.all(res.rmse[0, :, t] <= res.rmse[1, :, t]), name
    total = sum(_heavy_seconds)
    assert total < 1800.0, f"comparison suite took {total:.0f}s"
    report(9, f"batch 44 RMSE <= batch 440 at matched sims >= 2,000 for all "
              f"targets, {REPS} reps; comparison suite total {total / 60:.1f} min "
              f"(< 30 min)")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_c10_shrinkage_properties(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 10))
    values = rng.normal(0.0, 5.0, K)
    counts = rng.integers(0, 50, K)
    values[counts == 0] = np.nan
    if not np.isfinite(values).any():
        counts[0] = 1
        values[0] = rng.normal()
    withins = np.abs(rng.normal(1.0, 1.0, K))
    withins[counts < 2] = np.nan
    shrunk, rho, grand = shrink_case_estimates(values, counts, withins)
    assert np.all((rho >= 0.0) & (rho <= 1.0))
    assert np.all(rho[counts == 0] == 0.0)
    assert np.all(shrunk[counts == 0] == grand)
    avail = np.isfinite(values)
    lo = np.minimum(values[avail], grand) - 1e-12
    hi = np.maximum(values[avail], grand) + 1e-12
    assert np.all((shrunk[avail] >= lo) & (shrunk[avail] <= hi))
    big = counts.copy()
    big[avail] = 10 ** 12
    shrunk_big, _, _ = shrink_case_estimates(values, big, withins)
    assert np.all(np.abs(shrunk_big[avail] - values[avail]) < 1e-9)


def test_c10_shrinkage_properties_report():
    report(10, "shrinkage property tests: rho in [0,1], n_k=0 -> grand mean, "
               "large n_k -> raw estimate within 1e-9 (100 hypothesis examples)")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.booleans())
def test_c11_active_scheme_properties(seed, stratified):
    grid = _TOY_CACHE["grid"]
    rng = np.random.default_rng(seed)
    n = grid.n_cells
    p_hat = rng.uniform(0.0, 1.0, n)
    p_hat[rng.random(n) < 0.2] = 0.0
    y_hat = rng.uniform(0.0, 10.0, n)
    mask = rng.random(n) < 0.8
    for k in range(grid.n_events):   # keep each case non-empty
        mask[k * grid.cells_per_event] = True
    s = active_scheme(p_hat, y_hat, 0.5, 2.0, grid, mask, stratified)
    if s is None:
        return
    if stratified:
        sums = s.pi.reshape(grid.n_events, -1).sum(axis=1)
        open_cases = mask.reshape(grid.n_events, -1).any(axis=1)
        assert np.all(np.abs(sums[open_cases] - 1.0) <= 1e-9)
    else:
        assert abs(s.pi.sum() - 1.0) <= 1e-9
    # floor: every samplable cell keeps at least eps/|scope|
    if stratified:
        for k in range(grid.n_events):
            sl = slice(k * grid.cells_per_event, (k + 1) * grid.cells_per_event)
            m = mask[sl]
            if m.any():
                assert s.pi[sl][m].min() >= 0.01 / m.sum() * (1 - 1e-9)
    else:
        assert s.pi[mask].min() >= 0.01 / mask.sum() * (1 - 1e-9)
    c = active_criterion(p_hat, y_hat, 0.5, 2.0, grid.weights_flat())
    assert np.all(c[p_hat == 0.0] == 0.0)


_TOY_CACHE = {}


@pytest.fixture(scope="module", autouse=True)
def _cache_toy(toy_grid):
    _TOY_CACHE["grid"] = toy_grid


def test_c11_hand_computed_ratio(toy_grid):
    n = toy_grid.n_cells
    p_hat = np.zeros(n)
    y_hat = np.zeros(n)
    p_hat[0] = p_hat[1] = 1.0
    y_hat[0], y_hat[1] = 1.0, 3.0   # |y - mu| ratio 1:3 at mu=0, sigma=0
    mask = np.zeros(n, dtype=bool)
    mask[0] = mask[1] = True
    s = active_scheme(p_hat, y_hat, 0.0, 0.0, toy_grid, mask, False, eps=0.0)
    assert s.pi[1] / s.pi[0] == pytest.approx(3.0, rel=1e-12)
    report(11, "Eq-style scheme properties: normalization to 1 +/- 1e-9 "
               "(global and per stratum), floor respected, c_i = 0 when "
               "p_i = 0, hand-computed pi ratios match")


def test_c12_stopping_rules():
    rules = (StoppingRule("absolute_se", 0.025),)
    ses = [0.2, 0.11, 0.051, 0.031, 0.024, 0.02]   # synthetic SE trace
    fired = [should_stop(rules, 0.5, se, 100 * (i + 1), i + 1)[0]
             for i, se in enumerate(ses)]
    assert fired == [False, False, False, False, True, True]
    cv = (StoppingRule("cv", 2.5),)
    assert not should_stop(cv, 0.0, 1e-12, 10, 1)[0]
    assert should_stop(cv, 4.0, 0.05, 10, 1)[0]
    report(12, "absolute-SE rule fires when the synthetic trace crosses 0.025; "
               "CV rule never stops at value 0")


def test_c13_determinism_byte_identical(tmp_path):
    args = ["evaluate", "--method", "severity", "--target", "crash_avoidance",
            "--seed", "31", "--reps", "6", "--budget", "1200",
            "--batch-size", "44", "--workers", "2"]
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli_main(args + ["--out", str(out1)]) == 0
    assert cli_main(args + ["--out", str(out2)]) == 0
    b1, b2 = out1.read_bytes(), out2.read_bytes()
    assert b1 == b2
    report(13, f"two `evaluate` runs with identical seeds: byte-identical CSVs "
               f"({len(b1)} bytes)")
