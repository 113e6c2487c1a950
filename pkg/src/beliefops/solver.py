"""Point-based POMDP solver with converging lower and upper bounds.

The lower bound is a set of alpha vectors, initialized from the blind
(repeat-one-action-forever) policies and improved by point-based backups at
sampled beliefs. The upper bound starts from the fully observable MDP values
at the belief-simplex corners and is tightened by Bellman updates at the same
beliefs, interpolated between points with the sawtooth approximation.

Beliefs are sampled by descending from the initial belief, following the
action with the best upper-bound value and the observation with the largest
probability-weighted bound gap, so effort concentrates on beliefs that a
near-optimal policy can actually reach. Backups run along the sampled path in
reverse order. Both bound sets are pruned periodically.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .pomdp import PomdpModel, belief_update

__all__ = [
    "AlphaVector",
    "AlphaPolicy",
    "BoundsPair",
    "SolverTimeout",
    "PolicyFileError",
    "FingerprintMismatch",
    "solve",
    "solve_with_bounds",
    "policy_action",
    "policy_value",
    "policy_map",
    "save_policy",
    "load_policy",
    "blind_alpha_vectors",
    "qmdp_values",
    "simulate_policy_in_model",
]

DOMINANCE_TOL = 1e-9


class SolverTimeout(RuntimeError):
    """Timed out before completing a single backup pass."""

    def __init__(self, message: str, metadata: dict):
        super().__init__(message)
        self.metadata = metadata


class PolicyFileError(ValueError):
    """Malformed or truncated policy file."""


class FingerprintMismatch(PolicyFileError):
    """Policy was solved for a different model than the one supplied."""


@dataclass(frozen=True)
class AlphaVector:
    values: np.ndarray
    action: int


@dataclass
class AlphaPolicy:
    """Lower-bound value function: one |S| vector per retained plan."""

    vectors: list[AlphaVector]
    fingerprint: str
    metadata: dict = field(default_factory=dict)

    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)
    _actions: np.ndarray | None = field(default=None, repr=False, compare=False)

    def matrix(self) -> np.ndarray:
        if self._matrix is None or self._matrix.shape[0] != len(self.vectors):
            object.__setattr__(self, "_matrix", np.array([v.values for v in self.vectors]))
            object.__setattr__(self, "_actions", np.array([v.action for v in self.vectors]))
        return self._matrix

    def actions(self) -> np.ndarray:
        self.matrix()
        return self._actions


@dataclass
class BoundsPair:
    """Final lower bound (alpha set) and upper bound (sawtooth point set)."""

    lower: AlphaPolicy
    ub_corner: np.ndarray          # value at each simplex corner
    ub_points: np.ndarray          # (n_p, S) interior beliefs
    ub_values: np.ndarray          # (n_p,)

    def lower_value(self, belief: np.ndarray) -> float:
        return float((self.lower.matrix() @ belief).max())

    def upper_value(self, belief: np.ndarray) -> float:
        return float(_sawtooth(belief[None, :], self.ub_corner,
                               self.ub_points, self.ub_values)[0])


def policy_value(policy: AlphaPolicy, belief: np.ndarray) -> float:
    return float((policy.matrix() @ belief).max())


def policy_action(policy: AlphaPolicy, belief: np.ndarray) -> int:
    """Action of the maximizing alpha vector; exact ties go to the lowest
    action id for reproducible maps."""
    if not policy.vectors:
        raise ValueError("empty policy")
    vals = policy.matrix() @ belief
    best = vals.max()
    tied = policy.actions()[vals >= best]
    return int(tied.min())


def policy_map(
    policy: AlphaPolicy,
    model: PomdpModel,
    belief_step: float,
    volume_indices: list[int] | None = None,
) -> list[tuple[int, float, int]]:
    """Dominating action per (life belief, volume) cell.

    Returns rows ``(volume_index, belief_in_life, action)`` covering the full
    grid, belief varying fastest. ``belief_step`` must divide 1 exactly.
    """
    n = round(1.0 / belief_step)
    if abs(n * belief_step - 1.0) > 1e-9:
        raise ValueError(f"belief step {belief_step} does not divide 1")
    if volume_indices is None:
        volume_indices = list(range(model.n_volumes))
    rows = []
    for v in volume_indices:
        for i in range(n + 1):
            p = i / n
            rows.append((v, p, policy_action(policy, model.point_belief(v, p))))
    return rows


# ---------------------------------------------------------------------------
# Bound initialization
# ---------------------------------------------------------------------------


def blind_alpha_vectors(model: PomdpModel) -> list[AlphaVector]:
    """Value of repeating each single action forever: alpha_a solves
    (I - gamma T_a) alpha = r_a. Every one is a valid lower bound."""
    S = model.n_states
    out = []
    for a in range(model.rewards.shape[1]):
        alpha = np.linalg.solve(
            np.eye(S) - model.discount * model.transitions[a], model.rewards[:, a]
        )
        out.append(AlphaVector(values=alpha, action=a))
    return out


def qmdp_values(model: PomdpModel, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Optimal fully observable values V_MDP(s); a corner upper bound."""
    T = np.stack(model.transitions)   # (A, S, S)
    R = model.rewards.T               # (A, S)
    V = np.zeros(model.n_states)
    for _ in range(max_iter):
        Q = R + model.discount * (T @ V)
        V_new = Q.max(axis=0)
        if np.abs(V_new - V).max() < tol:
            return V_new
        V = V_new
    return V


def _sawtooth(
    queries: np.ndarray, corner: np.ndarray, points: np.ndarray, values: np.ndarray
) -> np.ndarray:
    """Sawtooth upper-bound interpolation for a batch of beliefs.

    Each interior point contributes corner_part(q) + ratio * (v_p - corner
    part at p), where ratio = min_s q_s / p_s over the point's support; the
    bound is the minimum contribution. With no interior points this is the
    corner hyperplane itself. A point whose support is not contained in the
    query's support gets ratio 0 and contributes nothing, so each point is
    evaluated only on its own support indices.
    """
    base = queries @ corner
    out = base.copy()
    for p_row, value in zip(points, values):
        sup = np.flatnonzero(p_row > 0.0)
        delta = value - float(p_row[sup] @ corner[sup])
        if delta >= 0.0:
            continue
        with np.errstate(over="ignore"):
            r = np.minimum((queries[:, sup] / p_row[sup]).min(axis=1), 1.0)
        np.minimum(out, base + r * delta, out)
    return out


# ---------------------------------------------------------------------------
# Solver core
# ---------------------------------------------------------------------------


class _Solver:
    def __init__(self, model: PomdpModel, precision: float, timeout_s: float,
                 max_trial_depth: int | None, prune_every: int,
                 max_trials: int | None = None):
        self.model = model
        self.precision = precision
        self.timeout_s = timeout_s
        self.max_trials = max_trials
        self.prune_every = prune_every
        self.sweep_every = 5
        self.gamma = model.discount
        self.n_actions = model.rewards.shape[1]
        self.b0 = model.initial_belief()

        blind = blind_alpha_vectors(model)
        self.alphas = np.array([v.values for v in blind])
        self.alpha_actions = np.array([v.action for v in blind])
        self.ub_corner = qmdp_values(model)
        # sawtooth points, stored compactly on their supports for fast eval
        self.ub_sup: list[np.ndarray] = []
        self.ub_supvals: list[np.ndarray] = []
        self.ub_rows: list[np.ndarray] = []
        self.ub_vals: list[float] = []
        self.ub_cdots: list[float] = []

        r_span = float(model.rewards.max() - model.rewards.min())
        worst_gap = max(r_span / (1.0 - self.gamma), precision)
        depth_cap = int(np.ceil(np.log(worst_gap / precision) / np.log(1.0 / self.gamma))) + 1
        self.max_trial_depth = max_trial_depth or min(depth_cap, 300)

        self.backups = 0
        self.trials = 0
        self._anchors: np.ndarray | None = None
        self.bound_history: list[tuple[int, float, float]] = []
        self.backup_beliefs: list[np.ndarray] = [self.b0]

    # -- bound evaluation ---------------------------------------------------

    def lower_value(self, b: np.ndarray) -> float:
        return float((self.alphas @ b).max())

    def upper_value(self, b: np.ndarray) -> float:
        return float(self._ub_eval(b[None, :])[0])

    def _ub_eval(self, queries: np.ndarray) -> np.ndarray:
        """Batched sawtooth evaluation over the compact point set."""
        base = queries @ self.ub_corner
        out = base.copy()
        for sup, pv, val, cdot in zip(self.ub_sup, self.ub_supvals,
                                      self.ub_vals, self.ub_cdots):
            delta = val - cdot
            if delta >= 0.0:
                continue
            with np.errstate(over="ignore"):
                r = np.minimum((queries[:, sup] / pv).min(axis=1), 1.0)
            np.minimum(out, base + r * delta, out)
        return out

    def _add_ub_point(self, b: np.ndarray, value: float) -> None:
        sup = np.flatnonzero(b > 0.0)
        self.ub_sup.append(sup)
        self.ub_supvals.append(b[sup].copy())
        self.ub_rows.append(b.copy())
        self.ub_vals.append(float(value))
        self.ub_cdots.append(float(b[sup] @ self.ub_corner[sup]))

    def _refresh_cdots(self) -> None:
        self.ub_cdots = [float(pv @ self.ub_corner[sup])
                         for sup, pv in zip(self.ub_sup, self.ub_supvals)]

    def _set_ub_points(self, rows: list[np.ndarray], vals: list[float]) -> None:
        self.ub_sup, self.ub_supvals, self.ub_rows = [], [], []
        self.ub_vals, self.ub_cdots = [], []
        for b, v in zip(rows, vals):
            self._add_ub_point(b, v)

    def dense_ub(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.ub_rows:
            return np.zeros((0, self.model.n_states)), np.zeros(0)
        return np.array(self.ub_rows), np.array(self.ub_vals)

    def node_expand(self, b: np.ndarray):
        """One-step lookahead shared by action selection and bound updates.

        For every action: observation probabilities, live observation
        indices, normalized successor beliefs, their upper-bound values, and
        the resulting upper-bound Q. One batched sawtooth call covers every
        successor of every action.
        """
        m = self.model
        r = b @ m.rewards
        per_action = []
        blocks = []
        for a in range(self.n_actions):
            tau = m.transitions[a].T @ b
            M = m.observations[a] * tau[:, None]       # (S, n_o)
            po = M.sum(axis=0)
            live = np.flatnonzero(po > 1e-300)
            B = M.T[live] / po[live, None]
            per_action.append([po, live, B, None])
            blocks.append(B)
        ubs_all = self._ub_eval(np.vstack(blocks))
        q = np.empty(self.n_actions)
        ofs = 0
        for a in range(self.n_actions):
            po, live, B, _ = per_action[a]
            ubs = ubs_all[ofs:ofs + len(live)]
            ofs += len(live)
            per_action[a][3] = ubs
            q[a] = r[a] + self.gamma * float(po[live] @ ubs)
        return q, per_action

    # -- backup ---------------------------------------------------------------

    def backup(self, b: np.ndarray) -> None:
        m = self.model
        best_val, best_vec, best_action = -np.inf, None, 0
        for a in range(self.n_actions):
            tau = m.transitions[a].T @ b
            M = m.observations[a] * tau[:, None]
            G = self.alphas @ M                        # (n_alpha, n_o)
            k = np.argmax(G, axis=0)
            C = (m.observations[a] * self.alphas[k].T).sum(axis=1)
            beta = m.rewards[:, a] + self.gamma * (m.transitions[a] @ C)
            val = float(beta @ b)
            if val > best_val:
                best_val, best_vec, best_action = val, beta, a
        # keep only if it improves the bound somewhere we can see
        if best_val > (self.alphas @ b).max() - DOMINANCE_TOL:
            self.alphas = np.vstack([self.alphas, best_vec])
            self.alpha_actions = np.append(self.alpha_actions, best_action)
        self.backups += 1

    def update_upper(self, b: np.ndarray) -> None:
        q, _ = self.node_expand(b)
        val = float(q.max())
        corner = np.flatnonzero(b == 1.0)
        if corner.size == 1:
            s = int(corner[0])
            if val < self.ub_corner[s]:
                self.ub_corner[s] = val
                self._refresh_cdots()
            return
        if val < self.upper_value(b) - 1e-12:
            self._add_ub_point(b, val)

    # -- exploration ------------------------------------------------------------

    def trial(self) -> None:
        b = self.b0
        path: list[np.ndarray] = []
        t = 0
        scale = 1.0  # gamma^{-t}
        while t < self.max_trial_depth:
            gap = self.upper_value(b) - self.lower_value(b)
            if gap <= self.precision * scale:
                break
            path.append(b)
            q, per_action = self.node_expand(b)
            a_star = int(np.argmax(q))
            po, live, B, ubs = per_action[a_star]
            if len(live) == 0:
                break
            lbs = (self.alphas @ B.T).max(axis=0)
            excess = (ubs - lbs) - self.precision * scale / self.gamma
            weighted = po[live] * excess
            o_pick = int(np.argmax(weighted))
            if weighted[o_pick] <= 0.0:
                break
            b = B[o_pick]
            t += 1
            scale /= self.gamma
        for bb in reversed(path):
            self.backup(bb)
            self.update_upper(bb)
            if len(self.backup_beliefs) < 20_000:
                self.backup_beliefs.append(bb)
        self.trials += 1

    def backup_sweep(self, limit: int = 600) -> None:
        """Extra point-based backups over recently visited beliefs.

        Path backups alone improve the lower bound slowly when the discount
        is close to 1; re-backing up the belief pool propagates improved
        continuations everywhere they matter.
        """
        pool = self.backup_beliefs[-limit:]
        for bb in reversed(pool):
            self.backup(bb)

    # -- pruning -----------------------------------------------------------------

    def prune(self) -> None:
        self._prune_lower()
        self._prune_upper()

    def _prune_lower(self) -> None:
        n = len(self.alphas)
        if n <= 1:
            return
        keep = np.ones(n, dtype=bool)
        order = np.argsort(self.alphas.sum(axis=1))  # weakest first
        for idx in order:
            if not keep[idx]:
                continue
            others = keep.copy()
            others[idx] = False
            if not others.any():
                continue
            dominated = (self.alphas[others] >= self.alphas[idx] - DOMINANCE_TOL).all(axis=1)
            if dominated.any():
                keep[idx] = False
        # belief-set pruning if still oversized: keep argmax winners at
        # sampled beliefs plus static anchors (simplex corners and a
        # life-belief grid at every volume), so vectors that dominate only
        # in regions the search rarely visits survive; values at the
        # anchors and at b0 are preserved exactly
        if keep.sum() > 1200:
            B = np.vstack([self._anchor_beliefs(), self.backup_beliefs[-6000:]])
            winners = np.unique(np.argmax(self.alphas[keep] @ B.T, axis=0))
            kept_idx = np.flatnonzero(keep)[winners]
            keep = np.zeros(n, dtype=bool)
            keep[kept_idx] = True
        self.alphas = self.alphas[keep]
        self.alpha_actions = self.alpha_actions[keep]

    def _anchor_beliefs(self) -> np.ndarray:
        if self._anchors is None:
            S = self.model.n_states
            anchors = [np.eye(S)]
            point = getattr(self.model, "point_belief", None)
            n_vol = getattr(self.model, "n_volumes", 0)
            if point is not None and n_vol:
                grid = [point(v, p) for v in range(n_vol)
                        for p in (0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95)]
                anchors.append(np.array(grid))
            anchors.append(self.b0[None, :])
            self._anchors = np.vstack(anchors)
        return self._anchors

    def _prune_upper(self, cap: int = 400) -> None:
        if not self.ub_rows:
            return
        ub0_before = self.upper_value(self.b0)
        points, values = self.dense_ub()
        n = len(points)
        base = points @ self.ub_corner
        # contribution of point j at every point i, vectorized per column
        contrib = np.tile(base[:, None], (1, n))
        for j in range(n):
            sup, pv = self.ub_sup[j], self.ub_supvals[j]
            delta = values[j] - self.ub_cdots[j]
            if delta >= 0.0:
                continue
            with np.errstate(over="ignore"):
                r = np.minimum((points[:, sup] / pv).min(axis=1), 1.0)
            contrib[:, j] = base + r * delta
        np.fill_diagonal(contrib, np.inf)
        interp_without_self = contrib.min(axis=1)
        keep = values < interp_without_self - 1e-12
        idx = np.flatnonzero(keep)
        if len(idx) > cap:
            idx = idx[-cap:]  # newest points carry the tightest values
        saved = (self.ub_sup, self.ub_supvals, self.ub_rows, self.ub_vals, self.ub_cdots)
        self._set_ub_points([points[i] for i in idx], [float(values[i]) for i in idx])
        if self.upper_value(self.b0) > ub0_before + 1e-12:
            # dropping a binding point would loosen the root bound; keep all
            (self.ub_sup, self.ub_supvals, self.ub_rows,
             self.ub_vals, self.ub_cdots) = saved

    # -- main loop ------------------------------------------------------------------

    def run(self) -> tuple[AlphaPolicy, BoundsPair]:
        start = time.monotonic()
        lb0 = self.lower_value(self.b0)
        ub0 = self.upper_value(self.b0)
        self.bound_history.append((0, lb0, ub0))
        timed_out = False
        while ub0 - lb0 > self.precision:
            if self.max_trials is not None and self.trials >= self.max_trials:
                timed_out = True
                break
            if time.monotonic() - start > self.timeout_s:
                timed_out = True
                break
            self.trial()
            if self.sweep_every and self.trials % self.sweep_every == 0:
                self.backup_sweep()
            if self.prune_every and self.trials % self.prune_every == 0:
                self.prune()
            lb0 = self.lower_value(self.b0)
            ub0 = self.upper_value(self.b0)
            self.bound_history.append((self.trials, lb0, ub0))
        wall = time.monotonic() - start
        if self.backups == 0 and timed_out:
            raise SolverTimeout(
                "timed out before any backup",
                {"wall_time_s": wall, "trials": self.trials, "backups": 0,
                 "lower_value": lb0, "upper_value": ub0},
            )
        self.prune()
        lb0 = self.lower_value(self.b0)
        ub0 = min(ub0, self.upper_value(self.b0))
        meta = {
            "precision_target": self.precision,
            "gap": ub0 - lb0,
            "converged": ub0 - lb0 <= self.precision,
            "timed_out": timed_out,
            "wall_time_s": wall,
            "trials": self.trials,
            "backups": self.backups,
            "n_vectors": len(self.alphas),
            "n_ub_points": len(self.ub_rows),
            "lower_value": lb0,
            "upper_value": ub0,
            "bound_history": [(int(i), float(l), float(u))
                              for i, l, u in self.bound_history],
        }
        policy = AlphaPolicy(
            vectors=[AlphaVector(values=self.alphas[i].copy(),
                                 action=int(self.alpha_actions[i]))
                     for i in range(len(self.alphas))],
            fingerprint=self.model.fingerprint,
            metadata=meta,
        )
        pts, vals = self.dense_ub()
        bounds = BoundsPair(policy, self.ub_corner.copy(), pts, vals)
        return policy, bounds


def solve_with_bounds(
    model: PomdpModel,
    precision: float | None = None,
    timeout_s: float | None = None,
    max_trial_depth: int | None = None,
    prune_every: int = 10,
    max_trials: int | None = None,
) -> tuple[AlphaPolicy, BoundsPair]:
    """Run the solver; returns the lower-bound policy and both bounds.

    Terminates when the bound gap at the initial belief reaches ``precision``,
    after ``max_trials`` sampling trials (a deterministic budget, reported as
    a timeout), or at the wall-clock ``timeout_s``, whichever comes first.
    """
    precision = model.config.solver_precision if precision is None else precision
    timeout_s = model.config.solver_timeout_s if timeout_s is None else timeout_s
    if precision <= 0:
        raise ValueError("precision must be positive")
    return _Solver(model, precision, timeout_s, max_trial_depth, prune_every,
                   max_trials).run()


def solve(
    model: PomdpModel,
    precision: float | None = None,
    timeout_s: float | None = None,
    **kwargs,
) -> AlphaPolicy:
    """Solve and return the alpha-vector policy (see solve_with_bounds)."""
    return solve_with_bounds(model, precision, timeout_s, **kwargs)[0]


# ---------------------------------------------------------------------------
# Model-faithful policy simulation (bound validation)
# ---------------------------------------------------------------------------


def simulate_policy_in_model(
    model: PomdpModel,
    policy: AlphaPolicy,
    n_rollouts: int,
    seed: int,
    max_steps: int = 2_000,
) -> tuple[float, float]:
    """Mean and standard error of the discounted return when the greedy
    alpha-vector policy acts inside the tabular model itself.

    Rollouts end at the terminal state; the step cap only guards against
    non-declaring policies (the truncated tail is worth < 1e-8 in value).
    """
    A = policy.matrix()
    acts = policy.actions()
    terminal = getattr(model, "terminal_index", None)
    returns = np.empty(n_rollouts)
    for i in range(n_rollouts):
        rng = np.random.default_rng([seed, i])
        b = model.initial_belief()
        s = int(rng.choice(model.n_states, p=b))
        total, disc = 0.0, 1.0
        for _ in range(max_steps):
            vals = A @ b
            tied = acts[vals >= vals.max()]
            a = int(tied.min())
            total += disc * model.rewards[s, a]
            disc *= model.discount
            s = int(rng.choice(model.n_states, p=model.transitions[a][s]))
            o = int(rng.choice(model.observations[a].shape[1], p=model.observations[a][s]))
            b = belief_update(model, b, a, o)
            if s == terminal:
                break
        returns[i] = total
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n_rollouts))


# ---------------------------------------------------------------------------
# Policy files
# ---------------------------------------------------------------------------

_FORMAT = "beliefops-alpha-v1"


def save_policy(policy: AlphaPolicy, path: str, model: PomdpModel | None = None) -> None:
    """Write the documented policy file: one JSON header line, then per
    vector a little-endian uint32 action index and |S| float64 values."""
    n_states = len(policy.vectors[0].values) if policy.vectors else 0
    meta = {k: v for k, v in policy.metadata.items() if k != "bound_history"}
    header = {
        "format": _FORMAT,
        "fingerprint": policy.fingerprint,
        "n_states": n_states,
        "discount": model.discount if model else policy.metadata.get("discount"),
        "lambda": model.config.lam if model else policy.metadata.get("lambda"),
        "n_vectors": len(policy.vectors),
        "metadata": meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for vec in policy.vectors:
            fh.write(struct.pack("<I", vec.action))
            fh.write(np.asarray(vec.values, dtype="<f8").tobytes())


def load_policy(path: str, expected_model: PomdpModel | None = None) -> AlphaPolicy:
    """Read a policy file; verifies the model fingerprint when given one."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise PolicyFileError(f"{path}: missing or corrupt header") from None
        if header.get("format") != _FORMAT:
            raise PolicyFileError(f"{path}: unknown format {header.get('format')!r}")
        n_states = int(header["n_states"])
        n_vectors = int(header["n_vectors"])
        vectors = []
        for _ in range(n_vectors):
            raw = fh.read(4 + 8 * n_states)
            if len(raw) != 4 + 8 * n_states:
                raise PolicyFileError(f"{path}: truncated vector record")
            (action,) = struct.unpack("<I", raw[:4])
            values = np.frombuffer(raw[4:], dtype="<f8").copy()
            vectors.append(AlphaVector(values=values, action=int(action)))
        if fh.read(1):
            raise PolicyFileError(f"{path}: trailing bytes after last record")
    if expected_model is not None and header["fingerprint"] != expected_model.fingerprint:
        raise FingerprintMismatch(
            f"{path}: policy fingerprint {header['fingerprint'][:12]}... does not match "
            f"model {expected_model.fingerprint[:12]}..."
        )
    meta = dict(header.get("metadata", {}))
    meta.setdefault("discount", header.get("discount"))
    meta.setdefault("lambda", header.get("lambda"))
    return AlphaPolicy(vectors=vectors, fingerprint=header["fingerprint"], metadata=meta)
