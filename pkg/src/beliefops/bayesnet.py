"""Discrete Bayesian networks with histogram-binned conditional families.

A network is a DAG of categorical variables. Each non-root variable carries a
conditional probability table (CPT) indexed by the joint assignment of its
parents; the single root carries a prior. Continuous conditional families
(bernoulli / truncated-count / truncated-gaussian / beta-scaled) can be
attached per variable and reduced to CPTs by Monte Carlo histogram binning,
so that the same network supports exact discrete inference and native-unit
sampling side by side.

Evidence likelihoods P(evidence | root) are computed exactly by variable
elimination in reverse topological order.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VariableSpec",
    "ConditionalTable",
    "ContinuousFamily",
    "DiscreteBayesNet",
    "NetworkError",
    "CycleError",
    "validate_network",
    "topological_order",
    "discretize",
    "sample_ancestral",
    "sample_ancestral_continuous",
    "evidence_likelihood",
    "enumerate_evidence_likelihood",
    "bin_value",
    "save_network_file",
    "load_network_file",
]

ROW_SUM_TOL = 1e-9

FAMILY_KINDS = ("bernoulli", "truncated-count", "truncated-gaussian", "beta-scaled")


class NetworkError(ValueError):
    """Structural problem in a network definition."""


class CycleError(NetworkError):
    """Raised when the parent graph admits no topological order."""

    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("cycle detected: " + " -> ".join(cycle + cycle[:1]))


@dataclass(frozen=True)
class VariableSpec:
    """A categorical variable: id, bin count, optional bin edges, parent ids.

    ``bin_edges`` (length ``cardinality + 1``, strictly ascending, in the
    variable's native units) are required only for variables whose native
    values must be histogram-binned; purely categorical variables (bin index
    == native value) may omit them.
    """

    id: str
    cardinality: int
    bin_edges: tuple[float, ...] | None = None
    parents: tuple[str, ...] = ()

    def __post_init__(self):
        if self.cardinality < 2:
            raise NetworkError(f"{self.id}: cardinality must be >= 2")
        if self.bin_edges is not None:
            edges = tuple(float(e) for e in self.bin_edges)
            if len(edges) != self.cardinality + 1:
                raise NetworkError(
                    f"{self.id}: need {self.cardinality + 1} bin edges, got {len(edges)}"
                )
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise NetworkError(f"{self.id}: bin edges must be strictly ascending")
            object.__setattr__(self, "bin_edges", edges)
        parents = tuple(self.parents)
        if len(set(parents)) != len(parents):
            raise NetworkError(f"{self.id}: duplicate parent")
        if self.id in parents:
            raise NetworkError(f"{self.id}: variable cannot be its own parent")
        object.__setattr__(self, "parents", parents)


def bin_value(spec: VariableSpec, value: float) -> int:
    """Map a native-unit value to its bin index under ``spec``.

    Bins are half-open ``[e_k, e_{k+1})`` except the last, which includes its
    upper edge. Without edges the value itself is the (integer) bin index.
    """
    if spec.bin_edges is None:
        idx = int(value)
        if idx != value or not 0 <= idx < spec.cardinality:
            raise NetworkError(f"{spec.id}: value {value!r} is not a bin index")
        return idx
    edges = spec.bin_edges
    if value < edges[0] or value > edges[-1]:
        raise NetworkError(
            f"{spec.id}: value {value!r} outside range [{edges[0]}, {edges[-1]}]"
        )
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    return min(idx, spec.cardinality - 1)


@dataclass
class ConditionalTable:
    """CPT for one variable: parent joint assignment -> probability row."""

    variable: str
    table: dict[tuple[int, ...], np.ndarray]

    def row(self, parent_assignment: tuple[int, ...]) -> np.ndarray:
        return self.table[tuple(parent_assignment)]


@dataclass
class ContinuousFamily:
    """Native-unit conditional distribution, one parameter set per parent row.

    ``kind`` selects the sampling law; ``params`` maps each joint parent bin
    assignment to that law's parameters:

    * ``bernoulli``          -- {"p": success probability}
    * ``truncated-count``    -- {"mean": Poisson mean}, rejected above ``high``
    * ``truncated-gaussian`` -- {"mean", "std"}, rejected outside [low, high]
    * ``beta-scaled``        -- {"alpha", "beta"}, scaled to [low, high]

    ``low``/``high`` default to the variable's declared range and are enforced
    by rejection, so samples always bin cleanly.
    """

    variable: str
    kind: str
    params: dict[tuple[int, ...], dict[str, float]]
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise NetworkError(f"{self.variable}: unknown family kind {self.kind!r}")
        self.params = {tuple(k): dict(v) for k, v in self.params.items()}

    def sample(
        self, parent_assignment: tuple[int, ...], rng: np.random.Generator, size: int = 1
    ) -> np.ndarray:
        p = self.params[tuple(parent_assignment)]
        if self.kind == "bernoulli":
            return rng.binomial(1, p["p"], size=size).astype(float)
        if self.kind == "truncated-count":
            out = rng.poisson(p["mean"], size=size).astype(float)
            bad = out > self.high
            while bad.any():
                out[bad] = rng.poisson(p["mean"], size=int(bad.sum()))
                bad = out > self.high
            return out
        if self.kind == "truncated-gaussian":
            out = rng.normal(p["mean"], p["std"], size=size)
            bad = (out < self.low) | (out > self.high)
            while bad.any():
                out[bad] = rng.normal(p["mean"], p["std"], size=int(bad.sum()))
                bad = (out < self.low) | (out > self.high)
            return out
        # beta-scaled
        return self.low + (self.high - self.low) * rng.beta(p["alpha"], p["beta"], size=size)


@dataclass
class DiscreteBayesNet:
    """A validated DAG of categorical variables with one CPT per variable.

    The root (exactly one parentless variable) carries its prior as a CPT
    with the empty parent assignment.
    """

    variables: list[VariableSpec]
    tables: dict[str, ConditionalTable]
    root: str
    _specs: dict[str, VariableSpec] = field(init=False, repr=False)
    _order: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        self._specs = {v.id: v for v in self.variables}
        if len(self._specs) != len(self.variables):
            raise NetworkError("duplicate variable id")
        self._order = topological_order(self)
        problems = validate_network(self)
        if problems:
            raise NetworkError("; ".join(problems))

    def spec(self, var: str) -> VariableSpec:
        try:
            return self._specs[var]
        except KeyError:
            raise NetworkError(f"unknown variable {var!r}") from None

    def cardinality(self, var: str) -> int:
        return self.spec(var).cardinality

    @property
    def order(self) -> list[str]:
        return list(self._order)

    def parent_bins(self, var: str) -> list[tuple[int, ...]]:
        """All joint parent assignments of ``var`` in row-lexicographic order."""
        cards = [self.cardinality(p) for p in self.spec(var).parents]
        return [tuple(a) for a in itertools.product(*(range(c) for c in cards))]


def _toposort(ids: list[str], parents: dict[str, tuple[str, ...]]) -> list[str]:
    """Kahn's algorithm; raises CycleError naming one cycle on failure."""
    indeg = {v: 0 for v in ids}
    children: dict[str, list[str]] = {v: [] for v in ids}
    for v in ids:
        for p in parents[v]:
            if p not in indeg:
                raise NetworkError(f"{v}: unknown parent {p!r}")
            indeg[v] += 1
            children[p].append(v)
    ready = sorted(v for v in ids if indeg[v] == 0)
    order: list[str] = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if len(order) < len(ids):
        stuck = [v for v in ids if v not in set(order)]
        # walk parent links among the stuck nodes until a repeat names the cycle
        seen: list[str] = []
        v = stuck[0]
        while v not in seen:
            seen.append(v)
            v = next(p for p in parents[v] if p in stuck)
        raise CycleError(seen[seen.index(v):])
    return order


def topological_order(net: DiscreteBayesNet) -> list[str]:
    """Variable ids ordered so every variable follows all of its parents."""
    specs = net.variables if isinstance(net, DiscreteBayesNet) else net
    return _toposort([v.id for v in specs], {v.id: v.parents for v in specs})


def validate_network(net: DiscreteBayesNet) -> list[str]:
    """Collect violations (cycles, root count, row sums, missing rows).

    Returns an empty list iff the network is well formed.
    """
    problems: list[str] = []
    try:
        topological_order(net)
    except CycleError as err:
        problems.append(str(err))
    except NetworkError as err:
        problems.append(str(err))

    roots = [v.id for v in net.variables if not v.parents]
    if len(roots) != 1:
        problems.append(f"expected exactly one root, found {roots}")
    elif roots[0] != net.root:
        problems.append(f"declared root {net.root!r} but parentless variable is {roots[0]!r}")

    for v in net.variables:
        ct = net.tables.get(v.id)
        if ct is None:
            problems.append(f"{v.id}: missing conditional table")
            continue
        cards = []
        for p in v.parents:
            match = [w for w in net.variables if w.id == p]
            if not match:
                continue
            cards.append(match[0].cardinality)
        expected = {tuple(a) for a in itertools.product(*(range(c) for c in cards))}
        got = set(ct.table)
        for missing in sorted(expected - got):
            problems.append(f"{v.id}: missing row for parents {missing}")
        for extra in sorted(got - expected):
            problems.append(f"{v.id}: unexpected row {extra}")
        for key in sorted(got & expected):
            row = np.asarray(ct.table[key], dtype=float)
            if row.shape != (v.cardinality,):
                problems.append(f"{v.id}{key}: row length {row.shape} != {v.cardinality}")
                continue
            if (row < 0).any():
                problems.append(f"{v.id}{key}: negative probability")
            if abs(float(row.sum()) - 1.0) > ROW_SUM_TOL:
                problems.append(f"{v.id}{key}: row sums to {float(row.sum()):.12g}")
    return problems


def discretize(
    family: ContinuousFamily,
    spec: VariableSpec,
    samples_per_row: int = 100_000,
    seed: int | np.random.Generator = 0,
) -> ConditionalTable:
    """Histogram-bin a continuous family into a CPT, row by row.

    Each parent row draws ``samples_per_row`` native-unit samples, bins them
    by ``spec.bin_edges`` and normalizes the counts. Deterministic for a fixed
    seed; rows are visited in row-lexicographic parent order.
    """
    if spec.bin_edges is None:
        raise NetworkError(f"{spec.id}: discretize requires bin_edges")
    if samples_per_row < 10_000:
        raise NetworkError("samples_per_row must be at least 10^4")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    edges = np.asarray(spec.bin_edges)
    table: dict[tuple[int, ...], np.ndarray] = {}
    for key in sorted(family.params):
        draws = family.sample(key, rng, size=samples_per_row)
        if draws.min() < edges[0] or draws.max() > edges[-1]:
            raise NetworkError(
                f"{spec.id}{key}: samples escape [{edges[0]}, {edges[-1]}] "
                "(family truncation bug)"
            )
        counts, _ = np.histogram(draws, bins=edges)
        table[key] = counts / counts.sum()
    return ConditionalTable(variable=spec.id, table=table)


def sample_ancestral(
    net: DiscreteBayesNet, root_value: int, rng: np.random.Generator
) -> dict[str, int]:
    """Draw bin indices for every variable, conditioning on ``root = root_value``."""
    if not 0 <= root_value < net.cardinality(net.root):
        raise NetworkError(f"root value {root_value} out of range")
    out: dict[str, int] = {net.root: int(root_value)}
    for var in net.order:
        if var == net.root:
            continue
        parents = net.spec(var).parents
        row = net.tables[var].row(tuple(out[p] for p in parents))
        out[var] = int(rng.choice(len(row), p=row))
    return out


def sample_ancestral_continuous(
    specs: dict[str, VariableSpec],
    families: dict[str, ContinuousFamily],
    root: str,
    root_value: float,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Draw native-unit values for every variable given the root's value.

    Parents are binned on the fly to select each child's parameter row, so
    count-valued parents with coarse bins behave exactly as in the
    discretized network.
    """
    order = _toposort(list(specs), {v: specs[v].parents for v in specs})
    out: dict[str, float] = {root: float(root_value)}
    for var in order:
        if var == root:
            continue
        key = tuple(bin_value(specs[p], out[p]) for p in specs[var].parents)
        out[var] = float(families[var].sample(key, rng, size=1)[0])
    return out


# ---------------------------------------------------------------------------
# Exact inference
# ---------------------------------------------------------------------------


class _Factor:
    """Dense factor over an ordered tuple of variable ids."""

    __slots__ = ("vars", "values")

    def __init__(self, vars: tuple[str, ...], values: np.ndarray):
        self.vars = vars
        self.values = values

    def multiply(self, other: "_Factor", card: dict[str, int]) -> "_Factor":
        merged = self.vars + tuple(v for v in other.vars if v not in self.vars)
        a = self._broadcast(merged, card)
        b = other._broadcast(merged, card)
        return _Factor(merged, a * b)

    def _broadcast(self, merged: tuple[str, ...], card: dict[str, int]) -> np.ndarray:
        shape = [card[v] if v in self.vars else 1 for v in merged]
        perm = [self.vars.index(v) for v in merged if v in self.vars]
        return np.transpose(self.values, perm).reshape(shape)

    def marginalize(self, var: str) -> "_Factor":
        axis = self.vars.index(var)
        return _Factor(
            self.vars[:axis] + self.vars[axis + 1:], self.values.sum(axis=axis)
        )

    def condition(self, var: str, value: int) -> "_Factor":
        axis = self.vars.index(var)
        return _Factor(
            self.vars[:axis] + self.vars[axis + 1:], np.take(self.values, value, axis=axis)
        )


def _cpt_factor(net: DiscreteBayesNet, var: str) -> _Factor:
    """Factor over (parents..., var) built from the variable's CPT."""
    spec = net.spec(var)
    cards = [net.cardinality(p) for p in spec.parents] + [spec.cardinality]
    values = np.empty(cards)
    for key in net.parent_bins(var):
        values[key] = net.tables[var].row(key)
    return _Factor(tuple(spec.parents) + (var,), values)


def evidence_likelihood(
    net: DiscreteBayesNet, evidence: dict[str, int], root_value: int
) -> float:
    """P(evidence | root = root_value), marginalizing all other variables.

    Unobserved non-root variables are eliminated in reverse topological
    order, which is treewidth-optimal for the shallow layered graphs this
    toolkit builds. Zero-probability evidence yields 0.0, not an error.
    """
    for var in evidence:
        if var == net.root:
            raise NetworkError("evidence on the root is not allowed; pass root_value")
        net.spec(var)  # raises on unknown id
        if not 0 <= evidence[var] < net.cardinality(var):
            raise NetworkError(f"{var}: evidence bin {evidence[var]} out of range")
    card = {v.id: v.cardinality for v in net.variables}

    factors: list[_Factor] = []
    for var in net.order:
        if var == net.root:
            continue  # conditioning on the root: its prior factor drops out
        f = _cpt_factor(net, var)
        if net.root in f.vars:
            f = f.condition(net.root, root_value)
        for ev, val in evidence.items():
            if ev in f.vars:
                f = f.condition(ev, val)
        factors.append(f)

    hidden = [v for v in reversed(net.order) if v != net.root and v not in evidence]
    for var in hidden:
        related = [f for f in factors if var in f.vars]
        if not related:
            continue
        prod = related[0]
        for f in related[1:]:
            prod = prod.multiply(f, card)
        factors = [f for f in factors if var not in f.vars]
        factors.append(prod.marginalize(var))

    result = 1.0
    for f in factors:
        if f.vars:
            raise AssertionError(f"unexpected free variables {f.vars}")
        result *= float(f.values)
    return result


def enumerate_evidence_likelihood(
    net: DiscreteBayesNet, evidence: dict[str, int], root_value: int
) -> float:
    """Brute-force oracle for :func:`evidence_likelihood`.

    Sums the fully factored joint over every assignment of the hidden
    variables. Exponential; intended for tests on small networks.
    """
    hidden = [v for v in net.order if v != net.root and v not in evidence]
    base = dict(evidence)
    base[net.root] = root_value
    total = 0.0
    for combo in itertools.product(*(range(net.cardinality(h)) for h in hidden)):
        assignment = dict(base)
        assignment.update(zip(hidden, combo))
        prob = 1.0
        for var in net.order:
            if var == net.root:
                continue
            parents = net.spec(var).parents
            row = net.tables[var].row(tuple(assignment[p] for p in parents))
            prob *= float(row[assignment[var]])
        total += prob
    return total


# ---------------------------------------------------------------------------
# Network definition files
# ---------------------------------------------------------------------------

_SCHEMA_VERSION = 1


def save_network_file(
    path: str,
    specs: list[VariableSpec],
    root: str,
    families: dict[str, ContinuousFamily],
) -> None:
    """Write variables, edges and family parameters as documented JSON."""
    doc = {
        "schema_version": _SCHEMA_VERSION,
        "root": root,
        "variables": [
            {
                "id": v.id,
                "cardinality": v.cardinality,
                "bin_edges": list(v.bin_edges) if v.bin_edges is not None else None,
                "parents": list(v.parents),
            }
            for v in specs
        ],
        "families": {
            var: {
                "kind": fam.kind,
                "low": fam.low,
                "high": fam.high,
                "params": [
                    {"parents": list(k), **fam.params[k]} for k in sorted(fam.params)
                ],
            }
            for var, fam in families.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_network_file(path: str) -> tuple[list[VariableSpec], str, dict[str, ContinuousFamily]]:
    """Inverse of :func:`save_network_file` (validates the schema version)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != _SCHEMA_VERSION:
        raise NetworkError(f"unsupported network schema version {doc.get('schema_version')!r}")
    specs = [
        VariableSpec(
            id=v["id"],
            cardinality=int(v["cardinality"]),
            bin_edges=tuple(v["bin_edges"]) if v.get("bin_edges") else None,
            parents=tuple(v.get("parents", ())),
        )
        for v in doc["variables"]
    ]
    families = {}
    for var, fam in doc.get("families", {}).items():
        params = {}
        for row in fam["params"]:
            row = dict(row)
            key = tuple(int(x) for x in row.pop("parents"))
            params[key] = {k: float(x) for k, x in row.items()}
        families[var] = ContinuousFamily(
            variable=var,
            kind=fam["kind"],
            params=params,
            low=float(fam.get("low", 0.0)),
            high=float(fam.get("high", 1.0)),
        )
    return specs, doc["root"], families
