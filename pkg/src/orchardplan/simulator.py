"""Desk-scale execution of L2 plans with stochastic travel costs.

Each navigation leg costs its straight-line length times a random
multiplier. The executor walks the behavior tree, asks an optional
:class:`StepGuard` before every navigation, and records everything in an
:class:`ExecutionTrace`. Running out of budget is an outcome, not an error:
the run stops at the leg that crossed the budget and keeps what it collected.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from .decoder import ExecutablePlan, ResolvedTask
from .geo import FarmMap, LocalXY, local_distance, tree_xy
from .mission import DATA_TASKS, MEASUREMENTS, NAVIGATE_TO_TREE, RETURN_HOME, Condition, Node, Sequence

COMPLETED = "completed"
BUDGET_VIOLATED = "budget_violated"
ABORTED_BY_GUARD = "aborted_by_guard"

HOME_KEY = "home"


@dataclass(frozen=True)
class StochasticEdgeModel:
    """Gamma multiplier with mean 1 and the given variance (0 = deterministic)."""

    variance: float = 0.0

    def __post_init__(self):
        if not (self.variance >= 0 and math.isfinite(self.variance)):
            raise ValueError(f"variance must be finite and >= 0, got {self.variance}")

    def multiplier(self, rng: np.random.Generator, src: str | None = None, dst: str | None = None) -> float:
        if self.variance == 0:
            return 1.0
        # shape k, scale theta: mean k*theta = 1, variance k*theta^2 = v
        return float(rng.gamma(1.0 / self.variance, self.variance))


class EdgeModel(Protocol):
    def multiplier(self, rng: np.random.Generator, src: str | None, dst: str | None) -> float:
        ...


def sample_travel_cost(frm: LocalXY, to: LocalXY, model: EdgeModel, rng: np.random.Generator,
                       src: str | None = None, dst: str | None = None) -> float:
    return local_distance(frm, to) * model.multiplier(rng, src, dst)


@dataclass(frozen=True)
class SensorOutcomeTable:
    readings: dict[tuple[str, str], float] = field(default_factory=dict)
    default_reading: float = 0.0

    def __post_init__(self):
        values = list(self.readings.values()) + [self.default_reading]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("sensor readings must be finite")

    def read(self, tree_id: str | None, task_type: str) -> float:
        return self.readings.get((tree_id, task_type), self.default_reading)

    @classmethod
    def from_json(cls, text: str) -> "SensorOutcomeTable":
        """``{"default": 0.0, "readings": [{"tree_id": .., "task_type": .., "value": ..}]}``"""
        data = json.loads(text)
        table = {(r["tree_id"], r["task_type"]): float(r["value"]) for r in data.get("readings", [])}
        return cls(table, float(data.get("default", 0.0)))


# --------------------------------------------------------------------------
# guard hook
# --------------------------------------------------------------------------

PROCEED = "proceed"
REDIRECT = "redirect"
FORCE_HOME = "return_home"


class GuardDecision(NamedTuple):
    action: str = PROCEED
    target: LocalXY | None = None
    tree_id: str | None = None


@dataclass(frozen=True)
class NavState:
    position: LocalXY
    location: str | None  # tree id, "home", or None at an arbitrary point
    cost_so_far: float
    budget: float
    next_task: ResolvedTask
    visited: tuple[str, ...]

    @property
    def remaining_budget(self) -> float:
        return self.budget - self.cost_so_far


class StepGuard(Protocol):
    def before_navigation(self, state: NavState) -> GuardDecision:
        ...


# --------------------------------------------------------------------------
# trace
# --------------------------------------------------------------------------


@dataclass
class TraceEvent:
    step: int
    kind: str  # "task" or "condition"
    task: str
    tree_id: str | None
    x: float
    y: float
    sampled_cost: float | None = None
    cumulative_cost: float = 0.0
    reading: float | None = None
    branch: str | None = None
    timestamp: float = 0.0
    note: str | None = None


@dataclass
class ExecutionTrace:
    plan_name: str
    events: list[TraceEvent]
    total_cost: float
    budget: float
    outcome: str
    rng_seed: int
    variance: float

    @property
    def collected(self) -> int:
        """R: number of data-collection tasks (pictures, measurements) completed."""
        return sum(1 for e in self.events if e.kind == "task" and e.task in DATA_TASKS)

    def summary(self) -> dict:
        return {
            "plan": self.plan_name,
            "outcome": self.outcome,
            "total_cost_m": self.total_cost,
            "budget_m": self.budget,
            "R": self.collected,
            "events": len(self.events),
            "rng_seed": self.rng_seed,
            "variance": self.variance,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps({"event": asdict(e)}, sort_keys=True) for e in self.events]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"


class _Stop(Exception):
    pass


class _Run:
    def __init__(self, plan: ExecutablePlan, farm: FarmMap, model: EdgeModel, sensors: SensorOutcomeTable,
                 rng: np.random.Generator, guard: StepGuard | None, speed: float):
        self.plan, self.farm, self.model, self.sensors = plan, farm, model, sensors
        self.rng, self.guard, self.speed = rng, guard, speed
        self.pos = plan.home
        self.location: str | None = HOME_KEY
        self.cost = 0.0
        self.budget = plan.budget_m
        self.events: list[TraceEvent] = []
        self.visited: list[str] = []
        self.outcome = COMPLETED

    def emit(self, kind, task, **kw) -> None:
        self.events.append(TraceEvent(len(self.events), kind, task, self.location if self.location != HOME_KEY else None,
                                      self.pos.x, self.pos.y, cumulative_cost=self.cost,
                                      timestamp=self.cost / self.speed, **kw))

    def travel(self, task: str, target: LocalXY, key: str | None, note: str | None = None) -> None:
        leg = sample_travel_cost(self.pos, target, self.model, self.rng, self.location, key)
        self.cost += leg
        self.pos, self.location = target, key
        if key is not None and key != HOME_KEY:
            self.visited.append(key)
        self.emit("task", task, sampled_cost=leg, note=note)
        if self.cost > self.budget:
            self.outcome = BUDGET_VIOLATED
            raise _Stop

    def navigate(self, task: ResolvedTask) -> None:
        key = HOME_KEY if task.task_type == RETURN_HOME else task.params.get("tree_id")
        target = task.target
        if self.guard is not None:
            state = NavState(self.pos, self.location, self.cost, self.budget, task, tuple(self.visited))
            decision = self.guard.before_navigation(state)
            if decision.action == FORCE_HOME:
                self.travel(RETURN_HOME, self.plan.home, HOME_KEY, note="guard")
                self.outcome = ABORTED_BY_GUARD
                raise _Stop
            if decision.action == REDIRECT:
                key = decision.tree_id
                target = decision.target if decision.target is not None else tree_xy(self.farm, key)
                kind = NAVIGATE_TO_TREE if key is not None else task.task_type
                self.travel(kind, target, key, note="redirect")
                return
            if decision.action != PROCEED:
                raise ValueError(f"unknown guard action {decision.action!r}")
        self.travel(task.task_type, target, key)

    def run(self, node: Node) -> None:
        if isinstance(node, Sequence):
            for child in node.children:
                self.run(child)
        elif isinstance(node, Condition):
            reading = self.sensors.read(self._tree(), node.sensor)
            taken = node.holds(reading)
            self.emit("condition", node.sensor, reading=reading, branch="then" if taken else "else")
            branch = node.then_branch if taken else node.else_branch
            if branch is not None:
                self.run(branch)
        elif node.target is not None:
            self.navigate(node)
        else:
            reading = self.sensors.read(self._tree(), node.task_type) if node.task_type in MEASUREMENTS else None
            self.emit("task", node.task_type, reading=reading)

    def _tree(self) -> str | None:
        return None if self.location == HOME_KEY else self.location


def execute(plan: ExecutablePlan, farm: FarmMap, model: EdgeModel | None = None,
            sensors: SensorOutcomeTable | None = None, seed: int = 0, guard: StepGuard | None = None,
            speed: float = 1.0, rng: np.random.Generator | None = None) -> ExecutionTrace:
    """Run ``plan`` once. Costs are in meters; the budget is ``plan.budget_m``."""
    model = model or StochasticEdgeModel()
    run = _Run(plan, farm, model, sensors or SensorOutcomeTable(),
               rng if rng is not None else np.random.default_rng(seed), guard, speed)
    try:
        run.run(plan.root)
    except _Stop:
        pass
    variance = getattr(model, "variance", float("nan"))
    return ExecutionTrace(plan.name, run.events, run.cost, run.budget, run.outcome, seed, variance)
