"""L1 mission plans as behavior trees.

A plan's root is one of three node kinds: a :class:`Sequence` runs its
children in order, a :class:`Task` is an atomic robot action, and a
:class:`Condition` takes a fresh sensor reading and runs exactly one branch.
"""

from __future__ import annotations

import operator as _op
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Union

NAVIGATE_TO_TREE = "navigate_to_tree"
NAVIGATE_TO_POINT = "navigate_to_point"
TAKE_PICTURE = "take_picture"
MEASURE_CO2 = "measure_co2"
MEASURE_TEMPERATURE = "measure_temperature"
MEASURE_MOISTURE = "measure_moisture"
RETURN_HOME = "return_home"

TASK_TYPES = (
    NAVIGATE_TO_TREE,
    NAVIGATE_TO_POINT,
    TAKE_PICTURE,
    MEASURE_CO2,
    MEASURE_TEMPERATURE,
    MEASURE_MOISTURE,
    RETURN_HOME,
)
MEASUREMENTS = (MEASURE_CO2, MEASURE_TEMPERATURE, MEASURE_MOISTURE)
NAVIGATION = (NAVIGATE_TO_TREE, NAVIGATE_TO_POINT, RETURN_HOME)
DATA_TASKS = (TAKE_PICTURE,) + MEASUREMENTS

OPERATORS = {"lt": _op.lt, "le": _op.le, "gt": _op.gt, "ge": _op.ge}


@dataclass(frozen=True)
class Task:
    task_type: str
    params: dict[str, str] = field(default_factory=dict)

    @property
    def is_navigation(self) -> bool:
        return self.task_type in NAVIGATION


@dataclass(frozen=True)
class Sequence:
    children: tuple["Node", ...]


@dataclass(frozen=True)
class Condition:
    sensor: str
    operator: str
    threshold: float
    then_branch: "Node"
    else_branch: "Node | None" = None

    def holds(self, reading: float) -> bool:
        return OPERATORS[self.operator](reading, self.threshold)


Node = Union[Sequence, Task, Condition]


@dataclass(frozen=True)
class Constraints:
    distance_budget: float | None = None


@dataclass(frozen=True)
class MissionPlan:
    name: str
    root: Node
    rationale: str = ""
    preconditions: tuple[str, ...] = ()
    constraints: Constraints | None = None


class PlanStats(NamedTuple):
    task_count: int
    conditional_count: int


def walk(node: Node) -> Iterator[Node]:
    """Pre-order traversal over every node, both branches included."""
    yield node
    if isinstance(node, Sequence):
        for child in node.children:
            yield from walk(child)
    elif isinstance(node, Condition):
        yield from walk(node.then_branch)
        if node.else_branch is not None:
            yield from walk(node.else_branch)


def tasks(node: Node) -> Iterator[Task]:
    return (n for n in walk(node) if isinstance(n, Task))


def plan_stats(plan: MissionPlan) -> PlanStats:
    """Count task leaves across all branches and condition nodes."""
    n_tasks = n_cond = 0
    for n in walk(plan.root):
        if isinstance(n, Task):
            n_tasks += 1
        elif isinstance(n, Condition):
            n_cond += 1
    return PlanStats(n_tasks, n_cond)


def required_capabilities(plan: MissionPlan) -> list[str]:
    """Capability names a robot needs for this plan, in first-use order."""
    seen: dict[str, None] = dict.fromkeys(plan.preconditions)
    for n in walk(plan.root):
        if isinstance(n, Task):
            seen.setdefault(n.task_type)
        elif isinstance(n, Condition):
            seen.setdefault(n.sensor)
    return list(seen)
