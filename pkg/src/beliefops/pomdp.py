"""Explicit tabular POMDP for instrument-suite operations.

State is (sample volume on a fixed 0.01 grid, binary life flag) plus one
absorbing terminal state entered by either declaration. Actions are the six
instruments, accumulate, and the two declarations. Observation likelihoods
for instrument actions come from exact evidence inference on the observation
network; accumulate and the declarations emit a single null symbol.

With capacity 1.0 the model has 202 non-terminal states (101 volume indices
x 2 life values) and 203 states total.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from math import erf, sqrt
from typing import NamedTuple

import numpy as np

from .bayesnet import DiscreteBayesNet, evidence_likelihood
from .mission import (
    INSTRUMENTS,
    PENALTY_INFEASIBLE,
    VOLUME_STEP,
    InstrumentSpec,
    MissionConfig,
    build_default_network,
    joint_observation_alphabet,
    measured_variables,
)

__all__ = [
    "State",
    "PomdpModel",
    "ImpossibleObservation",
    "ACTION_IDS",
    "ACTION_NAMES",
    "N_ACTIONS",
    "ACCUMULATE",
    "DECLARE_ABIOTIC",
    "DECLARE_BIOTIC",
    "build_model",
    "reward",
    "observation_distribution",
    "belief_update",
    "accumulation_increment_pmf",
]

ACTION_IDS = ("a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9")
ACTION_NAMES = {
    "a1": "HRMS",
    "a2": "SMS",
    "a3": "uCE-LIF",
    "a4": "ESA",
    "a5": "Microscope",
    "a6": "Nanopore",
    "a7": "accumulate",
    "a8": "declare_abiotic",
    "a9": "declare_biotic",
}
N_ACTIONS = 9
ACCUMULATE = 6
DECLARE_ABIOTIC = 7
DECLARE_BIOTIC = 8
INSTRUMENT_ACTIONS = tuple(range(6))


class State(NamedTuple):
    life: int
    volume_index: int
    terminal: bool


class ImpossibleObservation(ValueError):
    """The observation has zero likelihood under the predicted belief."""


def _normal_cdf(x: float, mu: float, sigma: float) -> float:
    return 0.5 * (1.0 + erf((x - mu) / (sigma * sqrt(2.0))))


def accumulation_increment_pmf(v_acc: float, sigma: float) -> dict[int, float]:
    """Grid-cell distribution of one accumulation step.

    The gaussian increment is integrated over each grid cell, truncated to
    +-4 sigma and to non-negative increments (the physical process only adds
    material), then renormalized. sigma == 0 degenerates to a point mass.
    """
    step = VOLUME_STEP
    if sigma == 0.0:
        return {int(round(v_acc / step)): 1.0}
    k_lo = max(0, int(np.ceil((v_acc - 4.0 * sigma) / step - 1e-12)))
    k_hi = max(k_lo, int(np.floor((v_acc + 4.0 * sigma) / step + 1e-12)))
    pmf = {}
    for k in range(k_lo, k_hi + 1):
        p = (_normal_cdf((k + 0.5) * step, v_acc, sigma)
             - _normal_cdf((k - 0.5) * step, v_acc, sigma))
        if p > 0.0:
            pmf[k] = p
    total = sum(pmf.values())
    return {k: p / total for k, p in pmf.items()}


@dataclass
class PomdpModel:
    """Immutable tabular model; all rows stochastic by construction."""

    config: MissionConfig
    network: DiscreteBayesNet
    instruments: tuple[InstrumentSpec, ...]
    n_volumes: int
    n_states: int
    terminal_index: int
    states: list[State]
    alphabets: list[list[tuple[int, ...] | None]]
    transitions: list[np.ndarray]   # per action: (S, S)
    observations: list[np.ndarray]  # per action: (S, n_obs(a))
    rewards: np.ndarray             # (S, N_ACTIONS)
    discount: float
    fingerprint: str

    def state_index(self, volume_index: int, life: int) -> int:
        return volume_index * 2 + life

    def usage_steps(self, action: int) -> int:
        return int(round(self.instruments[action].v_use / VOLUME_STEP))

    def point_belief(self, volume_index: int, p_life: float) -> np.ndarray:
        """Belief supported on one volume index with the life mass split."""
        b = np.zeros(self.n_states)
        b[self.state_index(volume_index, 0)] = 1.0 - p_life
        b[self.state_index(volume_index, 1)] = p_life
        return b

    def initial_belief(self) -> np.ndarray:
        return self.point_belief(0, self.config.p_biotic)

    def life_marginal(self, belief: np.ndarray) -> float:
        """P(life = 1 | not terminal) under the belief."""
        life = belief[1:self.terminal_index:2].sum()
        alive = belief[:self.terminal_index].sum()
        return float(life / alive) if alive > 0 else 0.0

    def volume_support(self, belief: np.ndarray) -> list[int]:
        nz = np.flatnonzero(belief[:self.terminal_index] > 0)
        return sorted({int(i) // 2 for i in nz})

    def summary(self) -> dict:
        """Counts and reward range, for validation review."""
        finite = self.rewards[self.rewards > -PENALTY_INFEASIBLE]
        return {
            "n_states": self.n_states,
            "n_nonterminal": self.terminal_index,
            "n_actions": N_ACTIONS,
            "observation_alphabet_sizes": {
                ACTION_IDS[a]: len(self.alphabets[a]) for a in range(N_ACTIONS)
            },
            "reward_min_feasible": float(finite.min()),
            "reward_max": float(self.rewards.max()),
            "penalty_infeasible": -PENALTY_INFEASIBLE,
            "discount": self.discount,
            "fingerprint": self.fingerprint,
        }


def reward(state: State, action: int, config: MissionConfig) -> float:
    """Stage reward: declarations earn +lambda when right and -lambda when
    wrong, instruments cost consumed volume scaled by (1 - lambda),
    accumulation is free, infeasible instrument use draws the large finite
    penalty.

    The symmetric +-lambda declaration term is what makes committing to a
    conclusion worthwhile at all: with a zero reward for correct calls, the
    zero-cost accumulate action would tie or dominate declaring everywhere
    and the optimal policy would simply never conclude.
    """
    if state.terminal:
        return 0.0
    if action == DECLARE_ABIOTIC:
        return config.lam if state.life == 0 else -config.lam
    if action == DECLARE_BIOTIC:
        return config.lam if state.life == 1 else -config.lam
    if action == ACCUMULATE:
        return 0.0
    usage = config.instruments()[action].v_use
    if usage > state.volume_index * VOLUME_STEP + 1e-12:
        return -PENALTY_INFEASIBLE
    return -(1.0 - config.lam) * usage / config.s_v_max


def build_model(
    config: MissionConfig,
    network: DiscreteBayesNet | None = None,
    instruments: tuple[InstrumentSpec, ...] | None = None,
) -> PomdpModel:
    """Assemble transition, observation and reward tables from the config.

    The network defaults to the config's own (rebuilt deterministically);
    instrument usages must sit on the volume grid.
    """
    if network is None:
        network, _ = build_default_network(config)
    if instruments is None:
        instruments = config.instruments()

    n_vol = int(round(config.s_v_max / VOLUME_STEP)) + 1
    terminal = 2 * n_vol
    n_states = terminal + 1
    states = [State(life=i % 2, volume_index=i // 2, terminal=False) for i in range(terminal)]
    states.append(State(life=0, volume_index=0, terminal=True))

    usage_steps = []
    for inst in instruments:
        steps = inst.v_use / VOLUME_STEP
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(
                f"{inst.action_id}: usage {inst.v_use} not representable on the volume grid"
            )
        usage_steps.append(int(round(steps)))

    p_life = np.array([1.0 - config.p_biotic, config.p_biotic])
    acc_pmf = accumulation_increment_pmf(config.v_acc, config.sigma)

    transitions = []
    for a in range(N_ACTIONS):
        T = np.zeros((n_states, n_states))
        T[terminal, terminal] = 1.0
        for v in range(n_vol):
            for life in range(2):
                s = v * 2 + life
                if a in INSTRUMENT_ACTIONS:
                    if v >= usage_steps[a]:
                        T[s, (v - usage_steps[a]) * 2 + life] = 1.0
                    else:
                        T[s, s] = 1.0  # infeasible: penalized self-loop
                elif a == ACCUMULATE:
                    for k, pk in acc_pmf.items():
                        v2 = min(v + k, n_vol - 1)
                        for life2 in range(2):
                            T[s, v2 * 2 + life2] += pk * p_life[life2]
                else:
                    T[s, terminal] = 1.0
        transitions.append(T)

    alphabets: list[list[tuple[int, ...] | None]] = []
    observations = []
    specs = {sp.id: sp for sp in network.variables}
    for a in range(N_ACTIONS):
        if a in INSTRUMENT_ACTIONS:
            inst = instruments[a]
            alphabet = joint_observation_alphabet(inst, specs)
            measured = measured_variables(inst)
            O = np.empty((n_states, len(alphabet)))
            for life in range(2):
                row = np.array([
                    evidence_likelihood(network, dict(zip(measured, obs)), life)
                    for obs in alphabet
                ])
                if abs(row.sum() - 1.0) > 1e-8:
                    raise AssertionError(
                        f"{inst.action_id}: alphabet likelihoods sum to {row.sum():.12g}"
                    )
                O[life::2, :] = row
            O[terminal, :] = 1.0 / len(alphabet)
            alphabets.append(list(alphabet))
            observations.append(O)
        else:
            alphabets.append([None])
            observations.append(np.ones((n_states, 1)))

    R = np.zeros((n_states, N_ACTIONS))
    for i, st in enumerate(states):
        for a in range(N_ACTIONS):
            R[i, a] = reward(st, a, config)

    for a in range(N_ACTIONS):
        if not np.allclose(transitions[a].sum(axis=1), 1.0, atol=1e-9):
            raise AssertionError(f"action {ACTION_IDS[a]}: non-stochastic transition row")
        if not np.allclose(observations[a].sum(axis=1), 1.0, atol=1e-9):
            raise AssertionError(f"action {ACTION_IDS[a]}: non-stochastic observation row")

    fp = _fingerprint(config, transitions, observations, R, alphabets)
    return PomdpModel(
        config=config,
        network=network,
        instruments=tuple(instruments),
        n_volumes=n_vol,
        n_states=n_states,
        terminal_index=terminal,
        states=states,
        alphabets=alphabets,
        transitions=transitions,
        observations=observations,
        rewards=R,
        discount=config.discount,
        fingerprint=fp,
    )


def _fingerprint(config, transitions, observations, rewards, alphabets) -> str:
    h = hashlib.sha256()
    h.update(f"v1|{config.discount}|{config.lam}|{config.p_biotic}".encode())
    for a, alphabet in enumerate(alphabets):
        h.update(repr(alphabet).encode())
        h.update(np.ascontiguousarray(transitions[a]).tobytes())
        h.update(np.ascontiguousarray(observations[a]).tobytes())
    h.update(np.ascontiguousarray(rewards).tobytes())
    return h.hexdigest()


def observation_distribution(model: PomdpModel, action: int, next_state: int) -> np.ndarray:
    """Distribution over the action's alphabet given the landed state."""
    return model.observations[action][next_state].copy()


def belief_update(
    model: PomdpModel, belief: np.ndarray, action: int, observation: int
) -> np.ndarray:
    """Exact Bayes filter: predict through T, weight by O, renormalize."""
    predicted = model.transitions[action].T @ belief
    posterior = model.observations[action][:, observation] * predicted
    total = posterior.sum()
    if total <= 0.0:
        raise ImpossibleObservation(
            f"observation {observation} has zero likelihood under action "
            f"{ACTION_IDS[action]}"
        )
    return posterior / total
