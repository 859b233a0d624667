"""Stochastic orienteering: instances, solvers and Monte Carlo evaluation.

An instance is a set of reward nodes plus a start and an end node, with
coordinates scaled so the bounding-box diagonal is 1. Every edge costs its
length times a Gamma multiplier with mean 1 and variance ``v``; a trial fails
when the realized total exceeds the budget ``B``. Rewards are collected on
arrival and kept when a trial fails.

Three strategies are provided:

* :func:`solve_greedy_offline` commits to a route up front, choosing by
  reward per unit distance (the baseline).
* :class:`OnlinePolicy` re-decides after every realized leg. Candidates must
  pass a chance constraint on the next leg; among the survivors it re-plans a
  route on mean costs, padded by a risk margin, and takes its first node.
* :func:`solve_exact` enumerates routes on small instances.

All randomness is drawn per trial from ``numpy.random.default_rng`` seeded
with ``[stream, seed, trial]``, so strategies evaluated with the same seed
see the same realized edge multipliers (common random numbers).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence as Seq
from typing import Union

import numpy as np
from scipy import stats

from .geo import FarmMap, deploy_xy, tree_xy
from .mission import NAVIGATE_TO_TREE, RETURN_HOME, TAKE_PICTURE, MissionPlan, Sequence, Task
from .simulator import FORCE_HOME, HOME_KEY, PROCEED, REDIRECT, GuardDecision, NavState

INFEASIBLE = "INFEASIBLE"
TOO_LARGE = "TOO_LARGE"
UNKNOWN_NODE = "UNKNOWN_NODE"

EXACT_MAX_TARGETS = 10
EVAL_STREAM = 0
EXACT_STREAM = 1

Route = tuple[str, ...]


class SOPError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class SOPNode:
    id: str
    x: float
    y: float
    reward: float = 0.0


@dataclass(frozen=True)
class SOPInstance:
    nodes: tuple[SOPNode, ...]
    start: str
    end: str
    budget: float
    variance: float = 0.0
    scale_m: float = 1.0  # meters per normalized unit, 1.0 for synthetic instances

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node id")
        for name in (self.start, self.end):
            if name not in ids:
                raise SOPError(UNKNOWN_NODE, f"{name!r} is not a node")
        if not all(math.isfinite(n.reward) and n.reward >= 0 for n in self.nodes):
            raise ValueError("rewards must be finite and nonnegative")
        if not self.budget >= 0:
            raise ValueError("budget must be >= 0")
        if not self.variance >= 0:
            raise ValueError("variance must be >= 0")

    @cached_property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @cached_property
    def index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def P(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.nodes], dtype=float)

    @cached_property
    def D(self) -> np.ndarray:
        diff = self.P[:, None, :] - self.P[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([n.reward for n in self.nodes], dtype=float)

    @property
    def s(self) -> int:
        return self.index[self.start]

    @property
    def e(self) -> int:
        return self.index[self.end]

    @cached_property
    def targets(self) -> list[int]:
        """Visitable node indices, ordered by id (the tie-break order)."""
        return sorted((i for i in range(len(self.nodes)) if i not in (self.s, self.e)), key=lambda i: self.ids[i])

    def route(self, idx: Seq[int]) -> Route:
        return tuple(self.ids[i] for i in idx)

    def route_index(self, route: Seq[str]) -> list[int]:
        idx = [self.index[x] for x in route]
        if not idx or idx[0] != self.s or idx[-1] != self.e:
            raise ValueError("route must run from start to end")
        inner = idx[1:-1]
        if len(set(inner)) != len(inner) or {self.s, self.e} & set(inner):
            raise ValueError("route repeats a node")
        return idx

    def route_length(self, route: Seq[str]) -> float:
        idx = self.route_index(route)
        return float(sum(self.D[a, b] for a, b in zip(idx, idx[1:])))

    def route_reward(self, route: Seq[str]) -> float:
        return float(sum(self.r[i] for i in self.route_index(route)[1:]))

    # file format ---------------------------------------------------------

    def to_json(self) -> str:
        data = {
            "nodes": [{"id": n.id, "x": n.x, "y": n.y, "reward": n.reward} for n in self.nodes],
            "start": self.start,
            "end": self.end,
            "budget": self.budget,
            "variance": self.variance,
            "scale_m": self.scale_m,
        }
        return json.dumps(data, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SOPInstance":
        d = json.loads(text)
        nodes = tuple(SOPNode(str(n["id"]), float(n["x"]), float(n["y"]), float(n.get("reward", 0.0)))
                      for n in d["nodes"])
        return cls(nodes, d["start"], d["end"], float(d["budget"]), float(d.get("variance", 0.0)),
                   float(d.get("scale_m", 1.0)))


def _normalize(P: np.ndarray) -> tuple[np.ndarray, float]:
    lo = P.min(axis=0)
    diag = float(np.hypot(*(P.max(axis=0) - lo)))
    if diag == 0:
        return P - lo, 1.0
    return (P - lo) / diag, diag


def build_instance(farm: FarmMap, target_tree_ids: Seq[str], rewards=None, budget: float = 2.0,
                   start: str = HOME_KEY, end: str = HOME_KEY, variance: float = 0.0) -> SOPInstance:
    """SOP instance over farm trees. ``"home"`` names the deploy point.

    ``rewards`` may be a mapping by tree id or a sequence aligned with
    ``target_tree_ids``; missing rewards default to 1.0.
    """
    known = set(farm.tree_ids)

    def where(name: str):
        if name == HOME_KEY:
            return deploy_xy(farm)
        if name not in known:
            raise SOPError(UNKNOWN_NODE, f"unknown tree {name!r}")
        return tree_xy(farm, name)

    if rewards is None:
        rewards = {}
    elif not isinstance(rewards, dict):
        rewards = dict(zip(target_tree_ids, rewards))
    targets = [t for t in dict.fromkeys(target_tree_ids) if t not in (start, end)]
    names = [start] + targets + ([end] if end != start else [])
    P, scale = _normalize(np.array([where(n) for n in names], dtype=float))
    reward = [0.0] + [float(rewards.get(t, 1.0)) for t in targets] + ([0.0] if end != start else [])
    nodes = tuple(SOPNode(n, float(x), float(y), w) for n, (x, y), w in zip(names, P, reward))
    return SOPInstance(nodes, start, end, float(budget), float(variance), scale)


# --------------------------------------------------------------------------
# route construction helpers (mean costs)
# --------------------------------------------------------------------------


def _plen(path: list[int], D: np.ndarray) -> float:
    return float(sum(D[a, b] for a, b in zip(path, path[1:])))


def _maxleg(path: list[int], D: np.ndarray) -> float:
    return max((D[a, b] for a, b in zip(path, path[1:])), default=0.0)


def _fits(path: list[int], D: np.ndarray, budget: float, q: float) -> bool:
    return _plen(path, D) + q * _maxleg(path, D) <= budget


def _two_opt(path: list[int], D: np.ndarray) -> list[int]:
    improved = True
    while improved:
        improved = False
        for i in range(1, len(path) - 2):
            for j in range(i + 1, len(path) - 1):
                a, b, c, d = path[i - 1], path[i], path[j], path[j + 1]
                if D[a, c] + D[b, d] < D[a, b] + D[c, d] - 1e-12:
                    path[i:j + 1] = path[i:j + 1][::-1]
                    improved = True
    return path


def _two_opt_within(path: list[int], D: np.ndarray, budget: float, q: float) -> list[int]:
    """2-opt, unless it lengthens the longest leg past what the budget allows."""
    opt = _two_opt(list(path), D)
    return opt if q == 0 or _fits(opt, D, budget, q) else path


def _greedy_path(D, r, start, end, budget, cands, q=0.0) -> list[int]:
    """Reward/distance greedy from ``start``; every step keeps a way to ``end``.

    A route is kept within ``budget`` as ``length + q * longest_leg``; with
    ``q = 0`` that is the plain mean-cost test.
    """
    path, cur, pool = [start], start, list(cands)
    used, longest = 0.0, 0.0
    while pool:
        C = np.array(pool)
        lng = np.maximum(longest, np.maximum(D[cur, C], D[C, end]))
        ok = used + D[cur, C] + D[C, end] + q * lng <= budget
        if not ok.any():
            break
        score = np.where(ok, r[C] / np.maximum(D[cur, C], 1e-12), -np.inf)
        c = pool.pop(int(np.argmax(score)))
        used += D[cur, c]
        longest = max(longest, D[cur, c])
        path.append(c)
        cur = c
    return path + [end]


def _insertion(D, r, budget, cands, path, q=0.0) -> list[int]:
    """Best reward/added-length insertion into ``path``, 2-opt after each insert."""
    path, pool = list(path), list(cands)
    while pool:
        C = np.array(pool)
        a, b = np.array(path[:-1]), np.array(path[1:])
        edges = D[a, b]
        inc = D[np.ix_(C, a)] + D[np.ix_(C, b)] - edges
        length = float(edges.sum())
        if q:
            # longest leg once edge k is replaced by the two legs through c
            pre = np.maximum.accumulate(np.concatenate([[0.0], edges[:-1]]))
            suf = np.maximum.accumulate(np.concatenate([edges[1:], [0.0]])[::-1])[::-1]
            lng = np.maximum(np.maximum(pre, suf), np.maximum(D[np.ix_(C, a)], D[np.ix_(C, b)]))
            ok = length + inc + q * lng <= budget
        else:
            ok = length + inc <= budget
        if not ok.any():
            break
        score = np.where(ok, r[C][:, None] / np.maximum(inc, 1e-9), -np.inf)
        ci, k = np.unravel_index(int(np.argmax(score)), score.shape)
        path.insert(int(k) + 1, pool.pop(int(ci)))
        path = _two_opt_within(path, D, budget, q)
    return path


def _replan(D, r, start, end, budget, cands, q=0.0) -> list[int]:
    """Best of insertion and greedy-then-insertion, by planned reward."""
    a = _insertion(D, r, budget, cands, [start, end], q)
    g = _two_opt_within(_greedy_path(D, r, start, end, budget, cands, q), D, budget, q)
    rest = [c for c in cands if c not in set(g)]
    b = _insertion(D, r, budget, rest, g, q)
    return a if sum(r[a]) >= sum(r[b]) else b


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


def _check_feasible(inst: SOPInstance) -> None:
    if inst.D[inst.s, inst.e] > inst.budget:
        raise SOPError(INFEASIBLE, f"start->end distance {inst.D[inst.s, inst.e]:.6g} exceeds budget {inst.budget:.6g}")


def solve_greedy_offline(inst: SOPInstance) -> Route:
    _check_feasible(inst)
    return inst.route(_greedy_path(inst.D, inst.r, inst.s, inst.e, inst.budget, inst.targets))


@dataclass(frozen=True)
class OnlineState:
    current: str
    remaining_budget: float
    unvisited: frozenset[str]


@dataclass(frozen=True)
class OnlinePolicy:
    """Run-time policy.

    ``scoring="plan"`` (default) re-plans a route over the survivors and takes
    its first node; ``scoring="ratio"`` takes the best reward/distance
    survivor. ``feasibility="rollout"`` replaces the closed-form single-leg
    test with a Monte Carlo estimate over both remaining legs.
    """

    delta: float = 0.1
    scoring: str = "plan"
    feasibility: str = "leg"
    rollouts: int = 256

    def __post_init__(self):
        if self.scoring not in ("plan", "ratio"):
            raise ValueError(f"unknown scoring {self.scoring!r}")
        if self.feasibility not in ("leg", "rollout"):
            raise ValueError(f"unknown feasibility {self.feasibility!r}")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must be in [0, 1]")


def _risk_margin(variance: float, delta: float) -> float:
    """q = Q - 1, where Q is the (1 - delta) quantile of the leg multiplier.

    A leg of mean length d passes the chance test iff the slack left for it is
    at least Q * d. A planned route of mean length L whose longest leg is
    d_max therefore passes every later test, as long as costs come in at
    their means, iff L + q * d_max <= remaining budget.
    """
    if variance == 0 or delta >= 1:
        return 0.0
    if delta <= 0:
        return math.inf
    return float(stats.gamma.ppf(1 - delta, 1.0 / variance, scale=variance)) - 1.0


def _survivors(inst: SOPInstance, cur: int, rem: float, cands: list[int], policy: OnlinePolicy) -> list[int]:
    if not cands:
        return []
    C = np.array(cands)
    d, de = inst.D[cur, C], inst.D[C, inst.e]
    v = inst.variance
    if v == 0:
        ok = d + de <= rem
    elif policy.feasibility == "leg":
        slack = rem - de
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            p = np.where(d > 0, stats.gamma.cdf(slack / np.where(d > 0, d, 1.0), 1.0 / v, scale=v),
                         (slack >= 0).astype(float))
        ok = (slack >= 0) & (p >= 1 - policy.delta)
    else:
        rng = np.random.default_rng(0)
        m = rng.gamma(1.0 / v, v, (2, policy.rollouts, len(cands)))
        p = (d * m[0] + de * m[1] <= rem).mean(axis=0)
        ok = p >= 1 - policy.delta
    return [c for c, keep in zip(cands, ok) if keep]


def _online_next(inst: SOPInstance, cur: int, rem: float, unvisited: list[int], policy: OnlinePolicy) -> int:
    surv = _survivors(inst, cur, rem, unvisited, policy)
    if not surv:
        return inst.e
    if policy.scoring == "ratio":
        C = np.array(surv)
        return surv[int(np.argmax(inst.r[C] / np.maximum(inst.D[cur, C], 1e-12)))]
    path = _replan(inst.D, inst.r, cur, inst.e, rem, surv, _risk_margin(inst.variance, policy.delta))
    return path[1]


def solve_online_step(state: OnlineState, inst: SOPInstance, delta: float = 0.1,
                      policy: OnlinePolicy | None = None) -> str:
    """Next node to visit from ``state``; the end node when nothing is safe."""
    if state.remaining_budget < 0:
        raise ValueError("remaining_budget must be >= 0")
    policy = policy or OnlinePolicy(delta)
    unvisited = sorted((inst.index[u] for u in state.unvisited if u not in (inst.start, inst.end)),
                       key=lambda i: inst.ids[i])
    return inst.ids[_online_next(inst, inst.index[state.current], state.remaining_budget, unvisited, policy)]


def trial_multipliers(inst: SOPInstance, seed: int, trial: int, stream: int = EVAL_STREAM) -> np.ndarray:
    """Edge multiplier matrix for one trial; entry [i, j] applies to leg i -> j."""
    n = len(inst.nodes)
    if inst.variance == 0:
        return np.ones((n, n))
    rng = np.random.default_rng([stream, seed, trial])
    return rng.gamma(1.0 / inst.variance, inst.variance, (n, n))


def solve_exact(inst: SOPInstance, trials_per_route: int = 200, seed: int = 0) -> Route:
    """Best route by Monte Carlo expected reward over all mean-feasible routes.

    Routes are scored on a selection stream of multipliers separate from the
    one :func:`evaluate` uses, so the returned route is not tuned to the
    evaluation sample.
    """
    if len(inst.targets) > EXACT_MAX_TARGETS:
        raise SOPError(TOO_LARGE, f"{len(inst.targets)} targets; exact search allows at most {EXACT_MAX_TARGETS}")
    _check_feasible(inst)
    D, r, s, e, B = inst.D, inst.r, inst.s, inst.e, inst.budget
    Ms = np.stack([trial_multipliers(inst, seed, t, EXACT_STREAM) for t in range(trials_per_route)])
    W = np.ascontiguousarray((D[None] * Ms).transpose(1, 2, 0))  # W[i, j] = realized costs of leg i->j
    T = trials_per_route
    best_score, best_path = -math.inf, [s, e]

    def dfs(cur, used, cum, alive, coll, path, pool):
        nonlocal best_score, best_path
        done = cum + W[cur, e]
        score = float((coll + (alive & (done <= B)) * r[e]).mean())
        if score > best_score + 1e-12:
            best_score, best_path = score, path + [e]
        for k, c in enumerate(pool):
            if used + D[cur, c] + D[c, e] <= B:
                cum2 = cum + W[cur, c]
                alive2 = alive & (cum2 <= B)
                dfs(c, used + D[cur, c], cum2, alive2, coll + alive2 * r[c], path + [c], pool[:k] + pool[k + 1:])

    dfs(s, 0.0, np.zeros(T), np.ones(T, bool), np.zeros(T), [s], list(inst.targets))
    return inst.route(best_path)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

Strategy = Union[Seq[str], OnlinePolicy]


@dataclass(frozen=True)
class Metrics:
    R: float
    F: float
    trials: int
    R_stderr: float
    samples: tuple[float, ...] = field(default=(), repr=False, compare=False)
    failures: tuple[bool, ...] = field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"R": self.R, "F": self.F, "trials": self.trials,
                "R_stderr": None if math.isnan(self.R_stderr) else self.R_stderr}

    def stderr_text(self) -> str:
        return "n/a" if math.isnan(self.R_stderr) else f"{self.R_stderr:.3f}"


def _run_route(idx: list[int], inst: SOPInstance, M: np.ndarray) -> tuple[float, bool]:
    used = got = 0.0
    for a, b in zip(idx, idx[1:]):
        used += inst.D[a, b] * M[a, b]
        if used > inst.budget:
            return got, True
        got += inst.r[b]
    return got, False


def _run_online(policy: OnlinePolicy, inst: SOPInstance, M: np.ndarray) -> tuple[float, bool]:
    cur, used, got = inst.s, 0.0, 0.0
    unvisited = list(inst.targets)
    while True:
        nxt = _online_next(inst, cur, inst.budget - used, unvisited, policy)
        used += inst.D[cur, nxt] * M[cur, nxt]
        if used > inst.budget:
            return got, True
        got += inst.r[nxt]
        if nxt == inst.e:
            return got, False
        unvisited.remove(nxt)
        cur = nxt


def evaluate(strategy: Strategy, inst: SOPInstance, trials: int = 100, seed: int = 0) -> Metrics:
    """Mean collected reward R and failure fraction F over seeded trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if isinstance(strategy, OnlinePolicy):
        def run(M):
            return _run_online(strategy, inst, M)
    else:
        idx = inst.route_index(strategy)

        def run(M):
            return _run_route(idx, inst, M)

    results = [run(trial_multipliers(inst, seed, t)) for t in range(trials)]
    got = np.array([g for g, _ in results])
    fail = np.array([f for _, f in results])
    stderr = float(got.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan
    return Metrics(float(got.mean()), float(fail.mean()), trials, stderr,
                   tuple(float(g) for g in got), tuple(bool(f) for f in fail))


def paired_pvalue(better: Metrics, worse: Metrics) -> float:
    """One-sided paired t-test p-value for ``better.R > worse.R`` (same seeds)."""
    a, b = np.array(better.samples), np.array(worse.samples)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("paired test needs matching per-trial samples, at least 2")
    diff = a - b
    if np.all(diff == diff[0]):
        return 0.0 if diff[0] > 0 else 1.0
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


# --------------------------------------------------------------------------
# executor adapters
# --------------------------------------------------------------------------


class MatrixEdgeModel:
    """Edge model that replays one trial's multiplier matrix, keyed by node id."""

    def __init__(self, inst: SOPInstance, M: np.ndarray):
        self.inst, self.M = inst, M
        self.variance = inst.variance

    def multiplier(self, rng, src, dst) -> float:
        return float(self.M[self.inst.index[src], self.inst.index[dst]])


def route_plan(inst: SOPInstance, route: Seq[str], name: str = "route") -> MissionPlan:
    """A route over farm trees as an L1 plan: navigate and photograph each stop."""
    kids: list = []
    for node in route[1:-1]:
        kids += [Task(NAVIGATE_TO_TREE, {"tree_id": node}), Task(TAKE_PICTURE)]
    end = route[-1]
    kids.append(Task(RETURN_HOME) if end == HOME_KEY else Task(NAVIGATE_TO_TREE, {"tree_id": end}))
    return MissionPlan(name, Sequence(tuple(kids)))


class OnlineGuard:
    """Step guard that lets the online policy pick every navigation target.

    Pair it with :func:`online_plan`, whose navigation slots it redirects.
    """

    def __init__(self, inst: SOPInstance, policy: OnlinePolicy | None = None):
        self.inst = inst
        self.policy = policy or OnlinePolicy()

    def before_navigation(self, state: NavState) -> GuardDecision:
        inst = self.inst
        cur = state.location if state.location is not None else inst.start
        visited = set(state.visited)
        unvisited = frozenset(inst.ids[i] for i in inst.targets if inst.ids[i] not in visited)
        rem = max(state.remaining_budget / inst.scale_m, 0.0)
        nxt = solve_online_step(OnlineState(cur, rem, unvisited), inst, policy=self.policy)
        if nxt == inst.end:
            return GuardDecision(FORCE_HOME) if nxt == HOME_KEY else GuardDecision(REDIRECT, tree_id=nxt)
        if state.next_task.params.get("tree_id") == nxt:
            return GuardDecision(PROCEED)
        return GuardDecision(REDIRECT, tree_id=nxt)


def online_plan(inst: SOPInstance, name: str = "online") -> MissionPlan:
    """Placeholder plan with one navigate+picture slot per target for :class:`OnlineGuard`."""
    slot = inst.ids[inst.targets[0]] if inst.targets else inst.end
    kids: list = []
    for _ in inst.targets:
        kids += [Task(NAVIGATE_TO_TREE, {"tree_id": slot}), Task(TAKE_PICTURE)]
    kids.append(Task(RETURN_HOME))
    return MissionPlan(name, Sequence(tuple(kids)))


# --------------------------------------------------------------------------
# constructed instances
# --------------------------------------------------------------------------


def adversarial_instance(variance: float = 0.1, budget: float = 1.8) -> SOPInstance:
    """Ten cheap targets near the start and three valuable ones beside the end.

    Ranked by reward per distance, the far cluster wins as soon as it is in
    reach, so the offline greedy route collects a few near targets, jumps
    to the far cluster and then cannot afford to come back: about a third
    of the budget goes unused on every trial. The online policy re-plans
    with insertion, banks the near cluster first and still reaches the far
    one with a risk margin.
    """
    nodes = [SOPNode("a_start", 0.0, 0.0)]
    near = [(0.03, 0.0829), (0.2804, 0.2038), (0.0329, 0.1516), (0.1677, 0.0559), (0.2571, 0.0398),
            (0.1369, 0.1809), (0.1507, 0.2054), (0.2582, 0.3347), (0.0995, 0.227), (0.2437, 0.1025)]
    nodes += [SOPNode(f"near{i:02d}", x, y, 1.0) for i, (x, y) in enumerate(near)]
    e = 1 / math.sqrt(2)
    far = [(e - 0.03, e - 0.01), (e - 0.01, e - 0.04), (e - 0.045, e - 0.035)]
    nodes += [SOPNode(f"far{i}", x, y, 6.0) for i, (x, y) in enumerate(far)]
    nodes.append(SOPNode("z_end", e, e))
    return SOPInstance(tuple(nodes), "a_start", "z_end", budget, variance)

