"""Seeded Monte Carlo evaluation against the continuous test environment.

The environment holds the true life flag, a continuous sample volume, and a
hidden chain of native-unit biosignature values redrawn whenever material is
accumulated. Instrument actions draw fresh measurements of their variables
conditioned on that chain (measured parents use the values drawn in the same
step, so within-measurement correlations match the observation network),
bin them, and hand the agent the joint symbol. Declarations are recorded,
reset the chamber, and start a fresh sampling cycle: episodes run for a fixed
number of steps spanning many samples.

Both the precomputed-policy stepper and the scripted baseline stepper track
their belief through the same LifeBeliefTracker, which is the single belief
update implementation used anywhere in evaluation (it mirrors the exact
tabular Bayes filter; tests assert trajectory-level equality).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bayesnet import ContinuousFamily, VariableSpec, bin_value, sample_ancestral_continuous
from .mission import ROOT, VOLUME_STEP, MissionConfig, PENALTY_INFEASIBLE, build_default_network
from .pomdp import (
    ACCUMULATE,
    ACTION_IDS,
    DECLARE_ABIOTIC,
    DECLARE_BIOTIC,
    INSTRUMENT_ACTIONS,
    PomdpModel,
    build_model,
)
from .solver import AlphaPolicy

__all__ = [
    "EnvRuntime",
    "EnvState",
    "DeclarationEvent",
    "MetricsSummary",
    "LifeBeliefTracker",
    "PolicyStepper",
    "env_reset",
    "env_step",
    "rollout",
    "evaluate",
    "lambda_sweep",
    "pareto_flags",
]


@dataclass(frozen=True)
class DeclarationEvent:
    step: int
    declared: str          # "a8" or "a9"
    true_life: int
    belief: float


@dataclass
class EnvState:
    life: int
    volume: float
    step: int
    chain: dict[str, float] | None  # sampled lazily at first measurement


@dataclass
class MetricsSummary:
    """Per-event misclassification rates with binomial standard errors.

    FNR counts abiotic declarations on truly biotic samples over all biotic
    declaration events; FPR mirrors it. Rates with no events in their class
    are None (reported as NA), never silently 0.
    """

    fnr: float | None
    fpr: float | None
    tpr: float | None
    tnr: float | None
    se_fnr: float | None
    se_fpr: float | None
    n_biotic_events: int
    n_abiotic_events: int
    n_declarations: int
    mean_instruments_per_declaration: float | None
    mean_discounted_return: float
    action_counts: dict[str, int]

    @classmethod
    def from_rollouts(
        cls, events: list[DeclarationEvent], returns: list[float], counts: dict[str, int]
    ) -> "MetricsSummary":
        biotic = [e for e in events if e.true_life == 1]
        abiotic = [e for e in events if e.true_life == 0]
        fn = sum(1 for e in biotic if e.declared == "a8")
        fp = sum(1 for e in abiotic if e.declared == "a9")

        def rate(k: int, n: int) -> tuple[float | None, float | None]:
            if n == 0:
                return None, None
            p = k / n
            return p, float(np.sqrt(p * (1.0 - p) / n))

        fnr, se_fnr = rate(fn, len(biotic))
        fpr, se_fpr = rate(fp, len(abiotic))
        n_decl = len(events)
        n_instr = sum(counts.get(ACTION_IDS[a], 0) for a in INSTRUMENT_ACTIONS)
        return cls(
            fnr=fnr, fpr=fpr,
            tpr=None if fnr is None else 1.0 - fnr,
            tnr=None if fpr is None else 1.0 - fpr,
            se_fnr=se_fnr, se_fpr=se_fpr,
            n_biotic_events=len(biotic), n_abiotic_events=len(abiotic),
            n_declarations=n_decl,
            mean_instruments_per_declaration=(n_instr / n_decl) if n_decl else None,
            mean_discounted_return=float(np.mean(returns)) if returns else 0.0,
            action_counts=dict(counts),
        )

    def mean_error(self) -> float | None:
        if self.fnr is None or self.fpr is None:
            return None
        return 0.5 * (self.fnr + self.fpr)


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


@dataclass
class EnvRuntime:
    """Everything the environment and steppers need, built once per scenario."""

    config: MissionConfig
    model: PomdpModel
    specs: dict[str, VariableSpec]
    families: dict[str, ContinuousFamily]
    v_acc: float
    sigma: float
    usage_steps: list[int]
    measured_topo: list[list[str]] = field(init=False)
    measured_order: list[list[str]] = field(init=False)
    strides: list[dict[str, int]] = field(init=False)

    def __post_init__(self):
        net_order = {v: i for i, v in enumerate(self.model.network.order)}
        self.measured_topo, self.measured_order, self.strides = [], [], []
        for a in INSTRUMENT_ACTIONS:
            inst = self.model.instruments[a]
            topo = sorted(inst.measures, key=lambda v: net_order[v])
            alpha_order = sorted(inst.measures, key=lambda v: int(v.split("_")[1]))
            stride, mul = {}, 1
            for v in reversed(alpha_order):
                stride[v] = mul
                mul *= self.specs[v].cardinality
            self.measured_topo.append(topo)
            self.measured_order.append(alpha_order)
            self.strides.append(stride)

    @classmethod
    def build(cls, config: MissionConfig, model: PomdpModel | None = None,
              families: dict[str, ContinuousFamily] | None = None,
              v_acc_override: float | None = None) -> "EnvRuntime":
        if model is None or families is None:
            net, fams = build_default_network(config)
            families = fams if families is None else families
            model = build_model(config, net) if model is None else model
        v_acc = config.v_acc if v_acc_override is None else float(v_acc_override)
        sigma = 0.5 * v_acc if config.sigma_acc is None else config.sigma_acc
        usage_steps = [model.usage_steps(a) for a in INSTRUMENT_ACTIONS]
        return cls(config=config, model=model,
                   specs={s.id: s for s in model.network.variables},
                   families=families, v_acc=v_acc, sigma=sigma,
                   usage_steps=usage_steps)


def grid_volume_index(volume: float) -> int:
    """Largest grid index not exceeding the observed volume (epsilon-guarded
    so exact arithmetic like 0.03 - 0.01 - 0.02 stays on its cell)."""
    return int((volume + 1e-9) / VOLUME_STEP)


def _draw_accumulation(rt: EnvRuntime, rng: np.random.Generator) -> float:
    if rt.sigma == 0.0:
        return rt.v_acc
    v = rng.normal(rt.v_acc, rt.sigma)
    while v < 0.0:
        v = rng.normal(rt.v_acc, rt.sigma)
    return v


def env_reset(rt: EnvRuntime, rng: np.random.Generator) -> EnvState:
    life = int(rng.random() < rt.config.p_biotic)
    return EnvState(life=life, volume=0.0, step=0, chain=None)


def _measure(rt: EnvRuntime, env: EnvState, action: int, rng: np.random.Generator) -> int:
    """Sample the instrument's variables given the hidden chain and return the
    flat joint-observation index.

    Variables are drawn in network order; a measured parent's fresh draw is
    fed to its measured children within the same reading, so one reading's
    joint law matches the observation model exactly. The persistent chain
    (the sample's own characteristics) is materialized lazily here: runs of
    accumulate steps never pay for chains no instrument ever reads.
    """
    if env.chain is None:
        env.chain = sample_ancestral_continuous(rt.specs, rt.families, ROOT, env.life, rng)
    fresh: dict[str, float] = {}
    for var in rt.measured_topo[action]:
        parents = rt.specs[var].parents
        key = tuple(
            bin_value(rt.specs[p], fresh[p] if p in fresh else env.chain[p])
            for p in parents
        )
        fresh[var] = float(rt.families[var].sample(key, rng, 1)[0])
    idx = 0
    for v in rt.measured_order[action]:
        idx += bin_value(rt.specs[v], fresh[v]) * rt.strides[action][v]
    return idx


def env_step(
    rt: EnvRuntime, env: EnvState, action: int, rng: np.random.Generator,
    belief: float | None = None,
) -> tuple[int | None, DeclarationEvent | None, float]:
    """Advance the environment; returns (observation index, event, reward).

    Accumulation adds a non-negative gaussian draw and replaces the sample
    (fresh life flag and hidden chain). Feasible instruments consume volume
    and produce a joint observation; infeasible ones are penalized no-ops
    with no observation. Declarations record an event and empty the chamber;
    the episode keeps running (multi-sample mission).
    """
    cfg = rt.config
    env.step += 1
    if action == ACCUMULATE:
        env.volume = min(env.volume + _draw_accumulation(rt, rng), cfg.s_v_max)
        env.life = int(rng.random() < cfg.p_biotic)
        env.chain = None  # fresh material: new sample characteristics
        return 0, None, 0.0
    if action in (DECLARE_ABIOTIC, DECLARE_BIOTIC):
        correct = (action == DECLARE_BIOTIC) == (env.life == 1)
        event = DeclarationEvent(
            step=env.step, declared=ACTION_IDS[action], true_life=env.life,
            belief=belief if belief is not None else float("nan"),
        )
        env.volume = 0.0
        return 0, event, cfg.lam if correct else -cfg.lam
    usage = rt.model.instruments[action].v_use
    if usage > env.volume + 1e-9:
        return None, None, -PENALTY_INFEASIBLE
    env.volume -= usage
    obs = _measure(rt, env, action, rng)
    return obs, None, -(1.0 - cfg.lam) * usage / cfg.s_v_max


# ---------------------------------------------------------------------------
# Shared belief tracking and steppers
# ---------------------------------------------------------------------------


class LifeBeliefTracker:
    """Belief over the hidden life flag at a known (grid) sample volume.

    This is the one belief-update implementation every evaluated pipeline
    uses. It is the exact tabular Bayes filter specialized to beliefs
    supported on a single volume index: instrument observations reweigh the
    life marginal by their per-life likelihoods, accumulation resets it to
    the sampling prior (the transition redraws the sample), declarations
    start a fresh cycle.
    """

    def __init__(self, model: PomdpModel):
        self.model = model
        self.p_prior = model.config.p_biotic
        # per instrument action: (n_obs, 2) likelihood given life = 0/1
        self.likelihoods = [
            np.stack([model.observations[a][0], model.observations[a][1]], axis=1)
            for a in INSTRUMENT_ACTIONS
        ]
        self.reset()

    def reset(self) -> None:
        self.p_life = self.p_prior
        self.volume_index = 0

    def update(self, action: int, obs: int | None, observed_volume_index: int) -> None:
        if action == ACCUMULATE:
            self.p_life = self.p_prior
        elif action in (DECLARE_ABIOTIC, DECLARE_BIOTIC):
            self.p_life = self.p_prior
        elif obs is not None:
            l0, l1 = self.likelihoods[action][obs]
            num = self.p_life * l1
            den = num + (1.0 - self.p_life) * l0
            if den <= 0.0:
                raise ValueError("observation with zero likelihood")
            self.p_life = num / den
        self.volume_index = observed_volume_index


class PolicyStepper:
    """Greedy alpha-vector policy over the tracked (volume, life) belief."""

    def __init__(self, model: PomdpModel, policy: AlphaPolicy):
        self.tracker = LifeBeliefTracker(model)
        self.matrix = policy.matrix()
        self.action_tags = policy.actions()

    def reset(self) -> None:
        self.tracker.reset()

    def act(self) -> int:
        t = self.tracker
        i0 = t.volume_index * 2
        vals = self.matrix[:, i0] * (1.0 - t.p_life) + self.matrix[:, i0 + 1] * t.p_life
        tied = self.action_tags[vals >= vals.max()]
        return int(tied.min())

    def observe(self, action: int, obs: int | None, observed_volume_index: int) -> None:
        self.tracker.update(action, obs, observed_volume_index)

    @property
    def belief(self) -> float:
        return self.tracker.p_life


# ---------------------------------------------------------------------------
# Rollouts and aggregation
# ---------------------------------------------------------------------------


def rollout(
    rt: EnvRuntime, stepper, seed_key: list[int], horizon: int
) -> tuple[list[DeclarationEvent], float, dict[str, int]]:
    """One seeded episode of exactly ``horizon`` environment steps."""
    rng = np.random.default_rng(seed_key)
    env = env_reset(rt, rng)
    stepper.reset()
    events: list[DeclarationEvent] = []
    counts: dict[str, int] = {}
    total, disc = 0.0, 1.0
    for _ in range(horizon):
        a = stepper.act()
        obs, event, r = env_step(rt, env, a, rng, belief=stepper.belief)
        counts[ACTION_IDS[a]] = counts.get(ACTION_IDS[a], 0) + 1
        total += disc * r
        disc *= rt.config.discount
        if event is not None:
            events.append(event)
        stepper.observe(a, obs, grid_volume_index(env.volume))
    return events, total, counts


def evaluate(
    rt: EnvRuntime,
    stepper_factory,
    n_rollouts: int,
    horizon: int,
    master_seed: int,
    threads: int = 1,
) -> MetricsSummary:
    """Aggregate independent seeded rollouts into a MetricsSummary.

    Per-rollout RNG streams derive from (master_seed, rollout index), and
    results are reduced in rollout order, so the thread count never changes
    the outcome.
    """

    def run(i: int):
        return rollout(rt, stepper_factory(), [master_seed, i], horizon)

    if threads <= 1:
        results = [run(i) for i in range(n_rollouts)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(n_rollouts)))

    events: list[DeclarationEvent] = []
    returns: list[float] = []
    counts: dict[str, int] = {}
    for ev, ret, cnt in results:  # already index-ordered
        events.extend(ev)
        returns.append(ret)
        for k, v in cnt.items():
            counts[k] = counts.get(k, 0) + v
    return MetricsSummary.from_rollouts(events, returns, counts)


def pareto_flags(points: list[tuple[float, float] | None]) -> list[bool]:
    """Pareto efficiency on (FNR, FPR), minimizing both; the O(n^2) dominance
    check is the definition. Rows with undefined rates are never efficient."""
    flags = []
    for i, pi in enumerate(points):
        if pi is None:
            flags.append(False)
            continue
        dominated = False
        for j, pj in enumerate(points):
            if j == i or pj is None:
                continue
            if pj[0] <= pi[0] and pj[1] <= pi[1] and (pj[0] < pi[0] or pj[1] < pi[1]):
                dominated = True
                break
        flags.append(not dominated)
    return flags


def lambda_sweep(
    lambdas: list[float],
    config: MissionConfig,
    solve_fn,
    n_rollouts: int,
    horizon: int,
    master_seed: int,
    threads: int = 1,
) -> list[dict]:
    """Solve one policy per reward weight and evaluate each.

    ``solve_fn(config) -> (policy, solve_meta)`` supplies solving (and any
    caching); a per-point failure flags the row and the sweep continues.
    Returns one dict per lambda plus Pareto flags over the defined rows.
    """
    base_net, base_fams = build_default_network(config)
    rows: list[dict] = []
    for lam in lambdas:
        cfg = replace(config, lam=float(lam))
        row: dict = {"lambda": float(lam)}
        try:
            policy, meta = solve_fn(cfg)
            model = build_model(cfg, base_net)
            rt = EnvRuntime.build(cfg, model=model, families=base_fams)
            summary = evaluate(rt, lambda: PolicyStepper(model, policy),
                               n_rollouts, horizon, master_seed, threads)
            row.update(summary=summary, solve_meta=meta, failed=False,
                       timed_out=bool(meta.get("timed_out", False)))
        except Exception as err:  # pragma: no cover - defensive sweep behavior
            row.update(summary=None, solve_meta={"error": str(err)},
                       failed=True, timed_out=False)
        rows.append(row)
    pts = [
        (r["summary"].fnr, r["summary"].fpr)
        if r["summary"] is not None and r["summary"].fnr is not None
        and r["summary"].fpr is not None else None
        for r in rows
    ]
    for r, flag in zip(rows, pareto_flags(pts)):
        r["pareto"] = flag
    return rows
