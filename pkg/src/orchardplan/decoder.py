"""L1 to L2: bind a mission plan to a robot profile and a farm.

Decoding resolves every navigation target to a local (east, north) position
in meters and checks the plan's capability needs against the robot. The
behavior-tree shape is kept as is; only task leaves are replaced by
:class:`ResolvedTask` leaves that carry their target.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .geo import FarmMap, GeoPoint, LocalXY, deploy_xy, farm_scale, to_local, tree_xy
from .mission import (
    NAVIGATE_TO_POINT,
    NAVIGATE_TO_TREE,
    RETURN_HOME,
    Condition,
    MissionPlan,
    Node,
    Sequence,
    Task,
    required_capabilities,
    walk,
)

UNKNOWN_TREE = "UNKNOWN_TREE"
MISSING_CAPABILITY = "MISSING_CAPABILITY"


class DecodeError(ValueError):
    def __init__(self, unknown_trees: list[str], missing_capabilities: list[str]):
        self.unknown_trees = unknown_trees
        self.missing_capabilities = missing_capabilities
        lines = [f"{UNKNOWN_TREE}({t})" for t in unknown_trees]
        lines += [f"{MISSING_CAPABILITY}({c})" for c in missing_capabilities]
        super().__init__("; ".join(lines))

    @property
    def issues(self) -> list[tuple[str, str]]:
        return ([(UNKNOWN_TREE, t) for t in self.unknown_trees]
                + [(MISSING_CAPABILITY, c) for c in self.missing_capabilities])


@dataclass(frozen=True)
class RobotProfile:
    capabilities: frozenset[str]
    distance_budget: float
    speed: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))
        if RETURN_HOME not in self.capabilities:
            raise ValueError("robot profile must include return_home")
        if not self.distance_budget > 0:
            raise ValueError("distance_budget must be positive")
        if not self.speed > 0:
            raise ValueError("speed must be positive")


def load_robot_profile(path) -> RobotProfile:
    """Read the ``[robot]`` section of an INI file.

    ``capabilities`` is a comma- or newline-separated list; ``distance_budget``
    is in normalized units (1.0 = the farm boundary's bounding-box diagonal);
    ``speed`` is in m/s.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise OSError(f"cannot read robot profile {path}")
    if "robot" not in cp:
        raise ValueError(f"{path}: missing [robot] section")
    sec = cp["robot"]
    unknown = set(sec) - {"capabilities", "distance_budget", "speed"}
    if unknown:
        raise ValueError(f"{path}: unknown robot keys {sorted(unknown)}")
    caps = [c.strip() for c in sec.get("capabilities", "").replace("\n", ",").split(",") if c.strip()]
    return RobotProfile(frozenset(caps), sec.getfloat("distance_budget"), sec.getfloat("speed", 1.0))


@dataclass(frozen=True)
class ResolvedTask(Task):
    """A task leaf bound to a position; data tasks have no target."""

    target: LocalXY | None = None


@dataclass(frozen=True)
class ExecutablePlan:
    name: str
    root: Node
    effective_budget: float  # normalized units
    scale_m: float  # meters per normalized unit
    home: LocalXY
    origin_task: ResolvedTask

    @property
    def budget_m(self) -> float:
        return self.effective_budget * self.scale_m


def _resolve(node: Node, farm: FarmMap, home: LocalXY) -> Node:
    if isinstance(node, Sequence):
        return Sequence(tuple(_resolve(c, farm, home) for c in node.children))
    if isinstance(node, Condition):
        return Condition(node.sensor, node.operator, node.threshold, _resolve(node.then_branch, farm, home),
                         None if node.else_branch is None else _resolve(node.else_branch, farm, home))
    target = None
    if node.task_type == NAVIGATE_TO_TREE:
        target = tree_xy(farm, node.params["tree_id"])
    elif node.task_type == NAVIGATE_TO_POINT:
        target = to_local(farm, GeoPoint(float(node.params["lat"]), float(node.params["lon"])))
    elif node.task_type == RETURN_HOME:
        target = home
    return ResolvedTask(node.task_type, dict(node.params), target)


def decode(plan: MissionPlan, profile: RobotProfile, farm: FarmMap) -> ExecutablePlan:
    """Check preconditions, resolve targets and compute the effective budget.

    Raises :class:`DecodeError` listing every unknown tree id and every
    missing capability, in first-use order.
    """
    known = set(farm.tree_ids)
    unknown: dict[str, None] = {}
    for n in walk(plan.root):
        if isinstance(n, Task) and n.task_type == NAVIGATE_TO_TREE and n.params["tree_id"] not in known:
            unknown.setdefault(n.params["tree_id"])
    missing = [c for c in required_capabilities(plan) if c not in profile.capabilities]
    if unknown or missing:
        raise DecodeError(list(unknown), missing)

    budget = profile.distance_budget
    if plan.constraints is not None and plan.constraints.distance_budget is not None:
        budget = min(budget, plan.constraints.distance_budget)
    home = deploy_xy(farm)
    origin = ResolvedTask(NAVIGATE_TO_POINT, {"lat": repr(farm.deploy_point.lat), "lon": repr(farm.deploy_point.lon)},
                          home)
    return ExecutablePlan(plan.name, _resolve(plan.root, farm, home), budget, farm_scale(farm), home, origin)
