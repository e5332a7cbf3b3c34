"""Adaptive sampling for counterfactual crash-scenario generation.

Desk-scale engine comparing importance sampling and active sampling with
adaptive sample space reduction, stratification, shrinkage estimation, and
stopping rules, verified against a brute-force ground truth from the built-in
synthetic rear-end crash simulator.
"""

from .errors import (ConfigError, ExhaustedSampleSpace, MonotonicityViolation,
                     SimulationFault)
from .grid import (DecelPMF, GlancePMF, GridConfig, PrototypeEvent, ScenarioCell,
                   ScenarioGrid, build_grid, joint_weight, load_grid, save_grid)
from .simulator import (GroundTruth, InjuryRiskParams, OutcomeTriple, SimOutcome,
                        SimParams, TARGETS, build_ground_truth, ground_truth_to_csv,
                        injury_risk, simulate_baseline, simulate_countermeasure)
from .assr import KnowledgeMap
from .estimators import (CertaintyCell, Estimate, EstimationAccumulator,
                         SampleRecord, case_ratio_estimate, post_stratified_combine,
                         shrink_case_estimates, stratified_combine)
from .samplers import (SamplingScheme, active_scheme, density_scheme, draw_batch,
                       init_deterministic, severity_scheme)
from .predictor import PredictorModel, fit, gate, predict
from .stopping import StoppingRule, should_stop
from .harness import (EstimateTrace, EvaluationResult, ExperimentConfig,
                      evaluate_rmse, run_experiment, suite_configs, trace_to_csv,
                      to_rmse_csv)

__version__ = "0.1.0"
