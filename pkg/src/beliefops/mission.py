"""Mission instantiation: biosignature catalog, instruments, configuration.

Defines the eleven-variable observation network (one hidden life state, ten
measurable biosignature / habitability variables), the six-instrument payload
with its measurement map and sample usages, and the MissionConfig that every
command consumes. The conditional-distribution defaults here are tunable
configuration: they satisfy the qualitative constraint that strong
biosignatures are far likelier under biotic samples (likelihood ratio >= 5
for the binary ones), but they are not calibrated against any instrument
data. Swap them via the ``cpd`` / ``bins`` config blocks.

Note: the default prior probability that a fresh sample is biotic is 0.5,
chosen for class-balanced evaluation; it is a guess, not a measured value,
and all headline metrics depend on it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .bayesnet import (
    ConditionalTable,
    ContinuousFamily,
    DiscreteBayesNet,
    NetworkError,
    VariableSpec,
    discretize,
)

__all__ = [
    "VOLUME_STEP",
    "PENALTY_INFEASIBLE",
    "ROOT",
    "OBSERVABLES",
    "InstrumentSpec",
    "INSTRUMENTS",
    "MissionConfig",
    "ConfigError",
    "load_config",
    "config_hash",
    "variable_catalog",
    "build_default_network",
    "default_families",
    "joint_observation_alphabet",
]

# Volume bookkeeping lives on a fixed grid: 0.01 is the coarsest step on
# which every default instrument usage and the fallout rate are exact.
VOLUME_STEP = 0.01

# Finite stand-in for the "never do this" penalty on infeasible instrument
# use; strictly dominates any feasible trajectory cost (|reward| <= 1).
PENALTY_INFEASIBLE = 10.0

ROOT = "s_L"
OBSERVABLES = ["o_1", "o_2", "o_3", "o_4", "o_5", "o_6", "o_7", "o_8", "o_9", "o_10"]

# Edges of the observation DAG: the life state drives the six direct
# biosignatures; second-layer variables are habitability readings driven by
# first-layer ones.
PARENTS: dict[str, tuple[str, ...]] = {
    "o_1": (ROOT,),
    "o_2": (ROOT,),
    "o_3": (ROOT,),
    "o_4": (ROOT,),
    "o_5": (ROOT,),
    "o_6": (ROOT,),
    "o_7": ("o_2",),
    "o_8": ("o_4", "o_5"),
    "o_9": ("o_1", "o_5"),
    "o_10": ("o_5",),
}

# Native value ranges (units: counts, percents, pH, volts).
RANGES: dict[str, tuple[float, float]] = {
    "o_5": (0.0, 22.0),
    "o_6": (0.0, 100.0),
    "o_7": (0.0, 100.0),
    "o_8": (0.0, 100.0),
    "o_9": (0.0, 14.0),
    "o_10": (-0.5, 0.0),
}

DEFAULT_BINS: dict[str, dict] = {
    "o_5": {"count": 4, "edges": [0.0, 3.0, 8.0, 15.0, 22.0]},
    "o_6": {"count": 3, "edges": [0.0, 55.0, 70.0, 100.0]},
    "o_7": {"count": 3, "edges": [0.0, 45.0, 60.0, 100.0]},
    "o_8": {"count": 3, "edges": [0.0, 35.0, 45.0, 100.0]},
    "o_9": {"count": 3, "edges": [0.0, 7.0, 7.8, 14.0]},
    "o_10": {"count": 3, "edges": [-0.5, -0.27, -0.17, 0.0]},
}

# Conditional-family parameters (configuration, not ground truth; see module
# docstring). Binary biosignatures keep P(1|biotic)/P(1|abiotic) >= 5; all
# families overlap enough that no single reading is decisive, so policies
# that sequence several measurements have something to gain.
DEFAULT_CPD: dict[str, dict[str, float]] = {
    "o_1": {"p_biotic": 0.80, "p_abiotic": 0.06},
    "o_2": {"p_biotic": 0.45, "p_abiotic": 0.05},
    "o_3": {"p_biotic": 0.40, "p_abiotic": 0.07},
    "o_4": {"p_biotic": 0.50, "p_abiotic": 0.09},
    "o_5": {"mean_biotic": 8.0, "mean_abiotic": 4.5},
    "o_6": {"alpha_biotic": 4.5, "beta_biotic": 2.5, "alpha_abiotic": 6.0, "beta_abiotic": 6.0},
    "o_7": {"mean_base": 40.0, "shift_o2": 12.0, "std": 14.0},
    "o_8": {"mean_base": 25.0, "shift_o4": 8.0, "shift_o5": 5.0, "std": 13.0},
    "o_9": {"mean_base": 6.6, "shift_o1": 0.6, "shift_o5": 0.25, "std": 0.8},
    "o_10": {"mean_base": -0.10, "shift_o5": -0.045, "std": 0.07},
}

MIN_BINARY_LIKELIHOOD_RATIO = 5.0


@dataclass(frozen=True)
class InstrumentSpec:
    """One science instrument: which variables it reads and what it costs."""

    action_id: str
    name: str
    measures: tuple[str, ...]
    v_use: float


DEFAULT_USAGE = {"a1": 0.01, "a2": 0.06, "a3": 0.02, "a4": 0.03, "a5": 0.01, "a6": 0.89}

INSTRUMENTS: tuple[InstrumentSpec, ...] = (
    InstrumentSpec("a1", "HRMS", ("o_5", "o_7", "o_8", "o_10"), 0.01),
    InstrumentSpec("a2", "SMS", ("o_5", "o_6"), 0.06),
    InstrumentSpec("a3", "uCE-LIF", ("o_5", "o_6"), 0.02),
    InstrumentSpec("a4", "ESA", ("o_7", "o_8"), 0.03),
    InstrumentSpec("a5", "Microscope", ("o_2", "o_3"), 0.01),
    InstrumentSpec("a6", "Nanopore", ("o_1",), 0.89),
)


class ConfigError(ValueError):
    """Invalid mission configuration; message names the offending field."""


def _on_grid(x: float) -> bool:
    return abs(x / VOLUME_STEP - round(x / VOLUME_STEP)) < 1e-9


@dataclass
class MissionConfig:
    """Every knob a run depends on; hashed into manifests for reproducibility."""

    seed: int = 20260809
    v_acc: float = 0.03
    sigma_acc: float | None = None  # None -> 0.5 * v_acc
    s_v_max: float = 1.0
    p_biotic: float = 0.5
    lam: float = 0.72
    discount: float = 0.99
    solver_precision: float = 1e-3
    solver_timeout_s: float = 600.0
    n_rollouts: int = 10_000
    horizon: int = 200
    network_seed: int = 7
    discretize_samples: int = 100_000
    bins: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_BINS)))
    cpd: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_CPD)))
    instrument_usage: dict = field(default_factory=lambda: dict(DEFAULT_USAGE))

    @property
    def sigma(self) -> float:
        return 0.5 * self.v_acc if self.sigma_acc is None else self.sigma_acc

    def instruments(self) -> tuple[InstrumentSpec, ...]:
        return tuple(
            InstrumentSpec(i.action_id, i.name, i.measures,
                           float(self.instrument_usage[i.action_id]))
            for i in INSTRUMENTS
        )

    def validate(self) -> list[str]:
        """Return violations (empty iff the configuration is usable)."""
        bad: list[str] = []
        if not 0.0 <= self.lam <= 1.0:
            bad.append(f"lambda: {self.lam} outside [0, 1]")
        if not 0.0 < self.discount < 1.0:
            bad.append(f"discount: {self.discount} outside (0, 1)")
        if not 0.0 <= self.p_biotic <= 1.0:
            bad.append(f"p_biotic: {self.p_biotic} outside [0, 1]")
        if self.v_acc <= 0:
            bad.append(f"v_acc: {self.v_acc} must be positive")
        elif not _on_grid(self.v_acc):
            bad.append(f"v_acc: {self.v_acc} not representable on the {VOLUME_STEP} volume grid")
        if self.sigma < 0:
            bad.append(f"sigma_acc: {self.sigma} must be non-negative")
        if self.s_v_max <= 0 or not _on_grid(self.s_v_max):
            bad.append(f"s_v_max: {self.s_v_max} must be a positive grid multiple")
        for aid, usage in sorted(self.instrument_usage.items()):
            if usage <= 0 or usage > self.s_v_max:
                bad.append(f"instrument_usage.{aid}: {usage} outside (0, s_v_max]")
            elif not _on_grid(usage):
                bad.append(
                    f"instrument_usage.{aid}: {usage} not representable on the "
                    f"{VOLUME_STEP} volume grid"
                )
        if self.solver_precision <= 0:
            bad.append(f"solver.precision: {self.solver_precision} must be positive")
        if self.solver_timeout_s <= 0:
            bad.append(f"solver.timeout_s: {self.solver_timeout_s} must be positive")
        if self.n_rollouts < 1:
            bad.append(f"evaluation.n_rollouts: {self.n_rollouts} must be >= 1")
        if self.horizon < 1:
            bad.append(f"evaluation.horizon: {self.horizon} must be >= 1")
        if self.discretize_samples < 10_000:
            bad.append(f"discretize_samples: {self.discretize_samples} below 10^4")
        for var in OBSERVABLES:
            spec = self.bins.get(var)
            if var in RANGES:
                if spec is None:
                    bad.append(f"bins.{var}: missing bin spec")
                    continue
                count, edges = int(spec["count"]), [float(e) for e in spec["edges"]]
                lo, hi = RANGES[var]
                if count < 2:
                    bad.append(f"bins.{var}.count: {count} must be >= 2")
                if len(edges) != count + 1:
                    bad.append(f"bins.{var}.edges: need {count + 1} edges, got {len(edges)}")
                elif edges[0] != lo or edges[-1] != hi:
                    bad.append(f"bins.{var}.edges: must span [{lo}, {hi}]")
                elif any(b <= a for a, b in zip(edges, edges[1:])):
                    bad.append(f"bins.{var}.edges: not strictly ascending")
        return bad

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["solver"] = {"precision": doc.pop("solver_precision"),
                         "timeout_s": doc.pop("solver_timeout_s")}
        doc["evaluation"] = {"n_rollouts": doc.pop("n_rollouts"),
                             "horizon": doc.pop("horizon")}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MissionConfig":
        doc = dict(doc)
        known = {
            "seed", "v_acc", "sigma_acc", "s_v_max", "p_biotic", "discount",
            "network_seed", "discretize_samples", "bins", "cpd", "instrument_usage",
        }
        kwargs = {k: doc[k] for k in known if k in doc}
        if "lambda" in doc:
            kwargs["lam"] = doc["lambda"]
        if "lam" in doc:
            kwargs["lam"] = doc["lam"]
        solver = doc.get("solver", {})
        if "precision" in solver:
            kwargs["solver_precision"] = solver["precision"]
        if "timeout_s" in solver:
            kwargs["solver_timeout_s"] = solver["timeout_s"]
        ev = doc.get("evaluation", {})
        if "n_rollouts" in ev:
            kwargs["n_rollouts"] = ev["n_rollouts"]
        if "horizon" in ev:
            kwargs["horizon"] = ev["horizon"]
        unknown = set(doc) - known - {"lambda", "lam", "solver", "evaluation"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**kwargs)


def load_config(path: str) -> tuple[MissionConfig, str]:
    """Read a config file; returns the config and the sha256 of its bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from None
    return MissionConfig.from_dict(doc), hashlib.sha256(raw).hexdigest()


def config_hash(config: MissionConfig) -> str:
    """Hash of the canonicalized config (used when no file bytes exist)."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Catalog and network construction
# ---------------------------------------------------------------------------


def variable_catalog(config: MissionConfig) -> list[VariableSpec]:
    """The eleven variable specs, bins taken from the config."""
    specs = [VariableSpec(id=ROOT, cardinality=2, bin_edges=None, parents=())]
    for var in OBSERVABLES:
        if var in RANGES:
            b = config.bins[var]
            specs.append(VariableSpec(
                id=var, cardinality=int(b["count"]),
                bin_edges=tuple(float(e) for e in b["edges"]),
                parents=PARENTS[var],
            ))
        else:
            specs.append(VariableSpec(id=var, cardinality=2, bin_edges=None,
                                      parents=PARENTS[var]))
    return specs


def _o5_bins(config: MissionConfig) -> int:
    return int(config.bins["o_5"]["count"])


def default_families(config: MissionConfig) -> dict[str, ContinuousFamily]:
    """Continuous conditional families for every observable, from config."""
    cpd = config.cpd
    fams: dict[str, ContinuousFamily] = {}
    for var in ("o_1", "o_2", "o_3", "o_4"):
        p1, p0 = float(cpd[var]["p_biotic"]), float(cpd[var]["p_abiotic"])
        for name, p in (("p_biotic", p1), ("p_abiotic", p0)):
            if not 0.0 <= p <= 1.0:
                raise NetworkError(f"cpd.{var}.{name}: {p} outside [0, 1]")
        fams[var] = ContinuousFamily(var, "bernoulli",
                                     {(0,): {"p": p0}, (1,): {"p": p1}},
                                     low=0.0, high=1.0)

    c5 = cpd["o_5"]
    fams["o_5"] = ContinuousFamily(
        "o_5", "truncated-count",
        {(0,): {"mean": float(c5["mean_abiotic"])}, (1,): {"mean": float(c5["mean_biotic"])}},
        low=0.0, high=22.0,
    )

    c6 = cpd["o_6"]
    fams["o_6"] = ContinuousFamily(
        "o_6", "beta-scaled",
        {(0,): {"alpha": float(c6["alpha_abiotic"]), "beta": float(c6["beta_abiotic"])},
         (1,): {"alpha": float(c6["alpha_biotic"]), "beta": float(c6["beta_biotic"])}},
        low=0.0, high=100.0,
    )

    c7 = cpd["o_7"]
    fams["o_7"] = ContinuousFamily(
        "o_7", "truncated-gaussian",
        {(k,): {"mean": float(c7["mean_base"]) + float(c7["shift_o2"]) * k,
                "std": float(c7["std"])} for k in range(2)},
        low=0.0, high=100.0,
    )

    c8 = cpd["o_8"]
    fams["o_8"] = ContinuousFamily(
        "o_8", "truncated-gaussian",
        {(k4, k5): {"mean": float(c8["mean_base"]) + float(c8["shift_o4"]) * k4
                    + float(c8["shift_o5"]) * k5,
                    "std": float(c8["std"])}
         for k4 in range(2) for k5 in range(_o5_bins(config))},
        low=0.0, high=100.0,
    )

    c9 = cpd["o_9"]
    fams["o_9"] = ContinuousFamily(
        "o_9", "truncated-gaussian",
        {(k1, k5): {"mean": float(c9["mean_base"]) + float(c9["shift_o1"]) * k1
                    + float(c9["shift_o5"]) * k5,
                    "std": float(c9["std"])}
         for k1 in range(2) for k5 in range(_o5_bins(config))},
        low=0.0, high=14.0,
    )

    c10 = cpd["o_10"]
    fams["o_10"] = ContinuousFamily(
        "o_10", "truncated-gaussian",
        {(k5,): {"mean": float(c10["mean_base"]) + float(c10["shift_o5"]) * k5,
                 "std": float(c10["std"])} for k5 in range(_o5_bins(config))},
        low=-0.5, high=0.0,
    )

    # families must live inside their variable's declared range
    for var, fam in fams.items():
        if var in RANGES and (fam.low, fam.high) != RANGES[var]:
            raise NetworkError(f"{var}: family range {(fam.low, fam.high)} != {RANGES[var]}")
    return fams


def build_default_network(
    config: MissionConfig,
) -> tuple[DiscreteBayesNet, dict[str, ContinuousFamily]]:
    """Build the discretized network and its paired continuous families.

    The CPT for each variable is the histogram binning of its continuous
    family (one RNG stream per variable, derived from ``network_seed``, so
    rebuilding from the same config is byte-identical). The root prior is a
    placeholder uniform row: every consumer conditions on the root, and the
    mission prior p_biotic lives in the decision model, not the network.
    """
    problems = config.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    specs = variable_catalog(config)
    by_id = {s.id: s for s in specs}
    fams = default_families(config)

    tables: dict[str, ConditionalTable] = {
        ROOT: ConditionalTable(ROOT, {(): np.array([0.5, 0.5])})
    }
    for idx, var in enumerate(OBSERVABLES):
        spec = by_id[var]
        rng = np.random.default_rng([config.network_seed, idx])
        if spec.bin_edges is None:
            # binary variables: the bernoulli family is already discrete
            fam = fams[var]
            tables[var] = ConditionalTable(var, {
                key: np.array([1.0 - fam.params[key]["p"], fam.params[key]["p"]])
                for key in sorted(fam.params)
            })
        else:
            tables[var] = discretize(fams[var], spec, config.discretize_samples, rng)

    net = DiscreteBayesNet(variables=specs, tables=tables, root=ROOT)

    for var in ("o_1", "o_2", "o_3", "o_4"):
        p1 = float(net.tables[var].row((1,))[1])
        p0 = float(net.tables[var].row((0,))[1])
        if p0 <= 0 or p1 / p0 < MIN_BINARY_LIKELIHOOD_RATIO:
            raise NetworkError(
                f"{var}: biotic/abiotic likelihood ratio {p1 / p0 if p0 else float('inf'):.2f} "
                f"below {MIN_BINARY_LIKELIHOOD_RATIO}"
            )
    return net, fams


def joint_observation_alphabet(
    instrument: InstrumentSpec, specs: list[VariableSpec] | dict[str, VariableSpec]
) -> list[tuple[int, ...]]:
    """All joint bin tuples an instrument can report.

    Measured variables are ordered by ascending catalog index and tuples are
    enumerated lexicographically, so alphabets (and policy files built on
    them) are stable across runs.
    """
    by_id = specs if isinstance(specs, dict) else {s.id: s for s in specs}
    measured = sorted(instrument.measures, key=lambda v: OBSERVABLES.index(v))
    cards = [by_id[v].cardinality for v in measured]
    return [tuple(t) for t in itertools.product(*(range(c) for c in cards))]


def measured_variables(instrument: InstrumentSpec) -> list[str]:
    """Measured variable ids in alphabet (catalog index) order."""
    return sorted(instrument.measures, key=lambda v: OBSERVABLES.index(v))
