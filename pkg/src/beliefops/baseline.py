"""Scripted mission baseline: fill the chamber, run the instrument sequence,
declare on belief thresholds.

The cycle per sample: accumulate until the chamber is full; run instruments
in their listed order, checking the life belief against the declaration
thresholds after every reading; skip any instrument the remaining volume
cannot feed (the nanopore never fits after the others have run); when the
pass ends without a declaration, return to accumulation. Belief updates go
through the same LifeBeliefTracker as the precomputed policies, so the two
pipelines are comparable measurement for measurement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mission import VOLUME_STEP
from .pomdp import (
    ACCUMULATE,
    DECLARE_ABIOTIC,
    DECLARE_BIOTIC,
    INSTRUMENT_ACTIONS,
    PomdpModel,
)
from .sim import EnvRuntime, LifeBeliefTracker, MetricsSummary, evaluate, pareto_flags

__all__ = [
    "ConopsParams",
    "ConopsPhase",
    "ConopsStepper",
    "conops_step",
    "threshold_sweep",
    "default_threshold_grid",
]


@dataclass(frozen=True)
class ConopsParams:
    """Declaration thresholds; biotic in [0.9, 1.0], abiotic in [0, 0.1]."""

    t_biotic: float
    t_abiotic: float

    def __post_init__(self):
        if not self.t_abiotic < self.t_biotic:
            raise ValueError("t_abiotic must be below t_biotic")


@dataclass
class ConopsPhase:
    """Mutable cycle bookkeeping: accumulation flag and next instrument."""

    accumulating: bool = True
    next_instrument: int = 0


def conops_step(
    phase: ConopsPhase,
    p_life: float,
    volume_index: int,
    params: ConopsParams,
    usage_steps: list[int],
    full_index: int,
) -> int:
    """Next scripted action. Mutates ``phase``.

    Thresholds are checked first (they can only trip right after a
    measurement; during accumulation the belief sits at the sampling prior).
    Infeasible instruments are skipped within the pass; when none remain the
    cycle returns to accumulation.
    """
    if p_life >= params.t_biotic:
        return DECLARE_BIOTIC
    if p_life <= params.t_abiotic:
        return DECLARE_ABIOTIC
    if phase.accumulating:
        if volume_index < full_index:
            return ACCUMULATE
        phase.accumulating = False
        phase.next_instrument = 0
    while (phase.next_instrument < len(usage_steps)
           and usage_steps[phase.next_instrument] > volume_index):
        phase.next_instrument += 1
    if phase.next_instrument >= len(usage_steps):
        phase.accumulating = True
        phase.next_instrument = 0
        return ACCUMULATE
    action = phase.next_instrument
    phase.next_instrument += 1
    return action


class ConopsStepper:
    """Baseline agent with the shared belief tracker."""

    def __init__(self, model: PomdpModel, params: ConopsParams):
        self.tracker = LifeBeliefTracker(model)
        self.params = params
        self.usage_steps = [model.usage_steps(a) for a in INSTRUMENT_ACTIONS]
        self.full_index = int(round(model.config.s_v_max / VOLUME_STEP))
        self.phase = ConopsPhase()

    def reset(self) -> None:
        self.tracker.reset()
        self.phase = ConopsPhase()

    def act(self) -> int:
        return conops_step(
            self.phase, self.tracker.p_life, self.tracker.volume_index,
            self.params, self.usage_steps, self.full_index,
        )

    def observe(self, action: int, obs: int | None, observed_volume_index: int) -> None:
        self.tracker.update(action, obs, observed_volume_index)
        if action in (DECLARE_ABIOTIC, DECLARE_BIOTIC):
            self.phase = ConopsPhase()  # new sample cycle

    @property
    def belief(self) -> float:
        return self.tracker.p_life


def default_threshold_grid(n: int = 5) -> list[ConopsParams]:
    """The n x n grid over t_biotic in [0.9, 1.0] and t_abiotic in [0, 0.1]."""
    tb = np.linspace(0.9, 1.0, n)
    ta = np.linspace(0.0, 0.1, n)
    return [ConopsParams(float(b), float(a)) for b in tb for a in ta]


def threshold_sweep(
    grid: list[ConopsParams],
    rt: EnvRuntime,
    n_rollouts: int,
    horizon: int,
    master_seed: int,
    threads: int = 1,
) -> list[dict]:
    """Evaluate every threshold pair; returns rows with Pareto flags."""
    rows = []
    for params in grid:
        summary: MetricsSummary = evaluate(
            rt, lambda: ConopsStepper(rt.model, params),
            n_rollouts, horizon, master_seed, threads,
        )
        rows.append({"t_biotic": params.t_biotic, "t_abiotic": params.t_abiotic,
                     "summary": summary})
    pts = [
        (r["summary"].fnr, r["summary"].fpr)
        if r["summary"].fnr is not None and r["summary"].fpr is not None else None
        for r in rows
    ]
    for r, flag in zip(rows, pareto_flags(pts)):
        r["pareto"] = flag
    return rows
