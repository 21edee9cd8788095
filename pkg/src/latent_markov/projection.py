"""Deterministic scenario projection, new counts and sensitivity scans."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .markov_core import TrajectoryPanel, TransitionModel, as_prob_vector, empirical_frequencies, propagate


@dataclass(frozen=True, eq=False)
class Scenario:
    model: TransitionModel
    p_start: np.ndarray
    population: int
    horizon_days: int
    label: str = "scenario"
    new_count_states: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be >= 1")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        object.__setattr__(self, "p_start", as_prob_vector(self.p_start))


@dataclass
class ProjectionOutput:
    label: str
    labels: tuple[str, ...]
    marginals: np.ndarray
    new_counts: dict
    peaks: dict
    population: int
    cumulative_states: tuple[str, ...] = ()
    notes: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.marginals.shape[0] - 1

    def series(self, state: str) -> np.ndarray:
        return self.marginals[:, self.labels.index(state)]


def _peaks(marginals, labels):
    out = {}
    for j, lab in enumerate(labels):
        k = int(np.argmax(marginals[:, j]))
        out[lab] = {"day": k, "value": float(marginals[k, j])}
    return out


def project(scenario: Scenario) -> ProjectionOutput:
    """Run the recursion and derive new counts and peaks.

    ``new_counts[state][t-1] = (p(t) - p(t-1)) * population`` for t = 1..horizon.
    """
    model = scenario.model
    labels = model.state_space.labels
    path = propagate(model, scenario.p_start, scenario.horizon_days)
    states = scenario.new_count_states
    if states is None:
        states = tuple(model.metadata.get("new_count_states", ()))
    new_counts = {s: np.diff(path[:, labels.index(s)]) * scenario.population for s in states}
    cumulative = tuple(model.metadata.get("cumulative_states", ()))
    return ProjectionOutput(
        label=scenario.label,
        labels=labels,
        marginals=path,
        new_counts=new_counts,
        peaks=_peaks(path, labels),
        population=scenario.population,
        cumulative_states=cumulative,
    )


def sensitivity_scan(
    base: Scenario, scale_factors: Sequence[float], param_names: Sequence[str]
) -> list[ProjectionOutput]:
    """One projection per factor, multiplying the named parameters by it."""
    model = base.model
    missing = [n for n in param_names if n not in model.param_names]
    if missing:
        raise KeyError(f"unknown parameters {missing} for model {model.name!r}")
    out = []
    for f in scale_factors:
        updates = {n: model.params[n] * f for n in param_names}
        scen = replace(base, model=model.with_params(**updates), label=f"{base.label} x{f:g}")
        out.append(project(scen))
    return out


@dataclass
class PanelComparison:
    gaps: np.ndarray
    normalized: np.ndarray
    max_abs_gap: float
    max_abs_normalized: float
    N: int


def compare_panels(deterministic: ProjectionOutput, panel: TrajectoryPanel) -> PanelComparison:
    """Gaps ``f_j(t) - p_j(t)`` between a panel and the deterministic path.

    Normalised gaps divide by the binomial standard error
    ``sqrt(p (1 - p) / N)``; where that is zero the gap must be zero too and
    anything else is reported as infinite.
    """
    J = len(deterministic.labels)
    f = empirical_frequencies(panel, J)
    p = deterministic.marginals
    if f.shape != p.shape:
        raise ValueError(f"panel covers {f.shape}, projection {p.shape}")
    gaps = f - p
    se = np.sqrt(p * (1 - p) / panel.N)
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = np.where(se > 0, gaps / se, np.where(np.abs(gaps) > 1e-12, np.inf, 0.0))
    return PanelComparison(gaps, norm, float(np.max(np.abs(gaps))), float(np.max(np.abs(norm))), panel.N)
