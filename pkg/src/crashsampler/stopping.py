"""Stopping rules: precision targets, relative precision, and resource budgets."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

Z_95 = 1.96   # normal quantile for the 95% interval half-width

KINDS = ("absolute_se", "rope", "cv", "budget", "max_iterations")


@dataclass(frozen=True)
class StoppingRule:
    kind: str
    threshold: float

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown stopping rule {self.kind!r}")
        if not self.threshold > 0:
            raise ConfigError(f"stopping threshold must be > 0, got {self.threshold}")


def should_stop(rules, value: float, se: float, sims_used: int,
                iteration: int) -> tuple[bool, str | None]:
    """First-triggered-wins over the rule list; returns (stop, reason).

    Precision rules never trigger on nan estimates, and the coefficient of
    variation rule never stops while the estimate is exactly zero.
    """
    for rule in rules:
        k, thr = rule.kind, rule.threshold
        if k == "budget":
            if sims_used >= thr:
                return True, f"budget: {sims_used} sims >= {thr:g}"
        elif k == "max_iterations":
            if iteration >= thr:
                return True, f"max_iterations: {iteration} >= {thr:g}"
        elif not math.isfinite(se):
            continue
        elif k == "absolute_se":
            if se < thr:
                return True, f"absolute_se: {se:g} < {thr:g}"
        elif k == "rope":
            if Z_95 * se < thr:
                return True, f"rope: {Z_95 * se:g} < {thr:g}"
        elif k == "cv":
            if math.isfinite(value) and value != 0.0 and se < thr / 100.0 * abs(value):
                return True, f"cv: {se:g} < {thr:g}% of {value:g}"
    return False, None
