import math

import numpy as np
import pytest

from crashsampler import (GridConfig, InjuryRiskParams, PrototypeEvent, SimParams,
                          build_grid, build_ground_truth, injury_risk,
                          simulate_baseline, simulate_countermeasure)
from crashsampler.simulator import event_tables, ground_truth_to_csv, outcome_triple


def no_braking_impact_kmh(fv0, lv0, gap0, lv_decel):
    """Closed-form contact closing speed when the striker never brakes.

    With equal initial speeds the gap shrinks by lv_decel/2 * t^2 while the
    lead vehicle still moves, so contact happens at t = sqrt(2*gap0/lv_decel)
    with closing speed lv_decel * t (valid while t is before the lead stops).
    """
    t = math.sqrt(2.0 * gap0 / lv_decel)
    assert t < lv0 / lv_decel, "oracle only valid before the lead vehicle stops"
    return lv_decel * t * 3.6


def test_no_braking_closed_form_oracle():
    ev = PrototypeEvent(0, 30.0, 30.0, 30.0, 6.0)
    expected = no_braking_impact_kmh(30.0, 30.0, 30.0, 6.0)
    assert expected == pytest.approx(68.305, abs=0.01)   # 6*sqrt(10) m/s
    out = simulate_baseline(ev, oeoff=6.6, decel=3.75)
    assert out.crashed
    assert abs(out.impact_speed - expected) < 0.5


def test_avoided_case():
    # mild conflict, attentive driver, strong braking
    ev = PrototypeEvent(0, 20.0, 20.0, 50.0, 3.0)
    out = simulate_baseline(ev, oeoff=0.0, decel=10.75)
    assert not out.crashed
    assert out.impact_speed == 0.0


def test_extreme_cell_attains_event_maximum(default_grid, ground_truth):
    base = ground_truth.base_speed
    corner = base[:, -1, 0]
    assert np.all(corner == base.reshape(44, -1).max(axis=1))
    assert np.array_equal(ground_truth.max_speeds, corner)


def test_countermeasure_never_crashes_when_baseline_does_not(default_grid):
    ev = default_grid.events[0]
    base, cm = event_tables(ev, default_grid.oeoff_levels, default_grid.decel_levels,
                            SimParams())
    assert not np.any((base == 0.0) & (cm > 0.0))


def test_aeb_disabled_equals_baseline(default_grid):
    ev = default_grid.events[3]
    params = SimParams(aeb_enabled=False)
    for oeoff, decel in [(0.0, 3.75), (3.0, 6.25), (6.6, 10.75)]:
        b = simulate_baseline(ev, oeoff, decel, params)
        c = simulate_countermeasure(ev, oeoff, decel, params)
        assert b == c


def test_countermeasure_reduces_mean_impact_speed(ground_truth):
    # exhaustive-enumeration analogue of the paper's baseline vs AEB table
    w = ground_truth.weights
    base_mean = np.einsum("eod,od->", ground_truth.base_speed, w)
    cm_mean = np.einsum("eod,od->", ground_truth.cm_speed, w)
    assert cm_mean < base_mean


def test_injury_risk_basics():
    assert injury_risk(0.0) == 0.0
    # logistic midpoint: beta0 + beta1 * (120/2) = -6 + 0.1*60 = 0
    assert injury_risk(120.0) == pytest.approx(0.5, abs=1e-12)
    speeds = np.linspace(0.0, 150.0, 40)
    risks = [injury_risk(s) for s in speeds]
    assert all(a <= b for a, b in zip(risks, risks[1:]))
    with pytest.raises(ValueError):
        injury_risk(-1.0)
    with pytest.raises(Exception):
        InjuryRiskParams(beta1=-0.1).validate()


def test_outcome_triple_consistency():
    p = InjuryRiskParams()
    t = outcome_triple(50.0, 0.0, p)
    assert t.crash_avoided == 1
    assert t.impact_speed_reduction == 50.0
    assert t.injury_risk_reduction == pytest.approx(injury_risk(50.0, p))
    t2 = outcome_triple(50.0, 20.0, p)
    assert t2.crash_avoided == 0
    assert t2.impact_speed_reduction == 30.0


def test_ground_truth_enumeration_counts(ground_truth):
    assert ground_truth.base_speed.size == 44220
    assert ground_truth.n_enumerated == 88440


def test_stratified_equals_post_stratified_on_full_grid(ground_truth):
    """On the full dataset, case-mean averaging equals inverse-crash-probability
    reweighting of the pooled table."""
    w = ground_truth.weights
    crash = ground_truth.base_crashed
    K = ground_truth.included_events.sum()
    for t in range(3):
        pooled = 0.0
        for k in range(ground_truth.base_speed.shape[0]):
            if not ground_truth.included_events[k]:
                continue
            p_k = (w * crash[k]).sum()
            pooled += (w * ground_truth.y[t, k] * crash[k]).sum() / p_k
        pooled /= K
        assert pooled == pytest.approx(ground_truth.grand_means[t], abs=1e-12)


def test_avoid_all_event_rate_one():
    """A never-braking mild conflict: AEB with huge authority avoids everything."""
    ev = PrototypeEvent(0, 20.0, 20.0, 15.0, 3.0)
    config = GridConfig(n_events=1, oeoff_levels=(5.0, 6.6), decel_levels=(3.75, 10.75),
                        rng_seed=1)
    params = SimParams(aeb_ttc=2.0, aeb_decel=10.0)
    grid = build_grid(config, sim_params=params, events=[ev])
    gt = build_ground_truth(grid, params)
    assert np.all(gt.base_crashed)
    assert gt.case_means[1, 0] == pytest.approx(1.0)


def test_determinism_and_scalar_vs_table(default_grid):
    ev = default_grid.events[7]
    params = SimParams()
    base, cm = event_tables(ev, default_grid.oeoff_levels, default_grid.decel_levels, params)
    for (o, d) in [(0, 0), (33, 7), (66, 14), (10, 3)]:
        b = simulate_baseline(ev, float(default_grid.oeoff_levels[o]),
                              float(default_grid.decel_levels[d]), params)
        assert b.impact_speed == base[o, d]
        c = simulate_countermeasure(ev, float(default_grid.oeoff_levels[o]),
                                    float(default_grid.decel_levels[d]), params)
        assert c.impact_speed == cm[o, d]
    base2, cm2 = event_tables(ev, default_grid.oeoff_levels, default_grid.decel_levels, params)
    assert np.array_equal(base, base2) and np.array_equal(cm, cm2)


def test_sim_outcome_invariant(default_grid):
    ev = default_grid.events[0]
    for oeoff in (0.0, 2.0, 6.6):
        out = simulate_baseline(ev, oeoff, 6.25)
        assert out.crashed == (out.impact_speed > 0.0)
        assert out.impact_speed >= 0.0


def test_ground_truth_csv(tmp_path, toy_grid, toy_ground_truth):
    path = tmp_path / "gt.csv"
    ground_truth_to_csv(toy_ground_truth, toy_grid, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("event_id,oeoff_s,decel_mps2,w,")
    assert len(lines) == 1 + toy_grid.n_cells
    # deterministic row order: (event, oeoff, decel) ascending
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == 0.0 and float(first[2]) == 3.75
