"""Rule-based offline plan backend.

Understands a small mission grammar and answers the way a chat model would:
an ```xml fenced L1 plan followed by a rationale. Supported queries::

    take N pictures [of <value> trees] [in the <north|south|east|west>[ern] half]
    take N pictures in a row of M trees
    measure <co2|temperature|moisture> at K trees[; if low|high <action>[, otherwise <action>]]

``<value>`` matches any tree attribute value (``yellow``, ``pistachio``).
Actions are ``take a picture``, ``measure <sensor>`` and ``return home``.
Every plan starts by navigating to the deploy point and ends with
``return_home``; each target contributes a navigation plus one action.
"""

from __future__ import annotations

import re
from dataclasses import replace

from .geo import FarmMap, LocalXY, deploy_xy, load_farm, local_distance, trees_in_half, tree_xy
from .l1 import format_decimal, serialize_l1
from .mission import (
    MEASURE_CO2,
    MEASURE_MOISTURE,
    MEASURE_TEMPERATURE,
    NAVIGATE_TO_POINT,
    NAVIGATE_TO_TREE,
    RETURN_HOME,
    TAKE_PICTURE,
    Condition,
    MissionPlan,
    Node,
    Sequence,
    Task,
    required_capabilities,
)
from .planner import PlannerContext, PlannerError

UNPARSEABLE_QUERY = "UNPARSEABLE_QUERY"

SENSORS = {"co2": MEASURE_CO2, "temperature": MEASURE_TEMPERATURE, "moisture": MEASURE_MOISTURE}
# (low, high) thresholds per sensor: ppm, degrees C, volumetric fraction.
THRESHOLDS = {
    MEASURE_CO2: (400.0, 800.0),
    MEASURE_TEMPERATURE: (15.0, 30.0),
    MEASURE_MOISTURE: (0.25, 0.6),
}
_WORDS = {"a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
          "seven": 7, "eight": 8, "nine": 9, "ten": 10}
_NUM = r"(\d+|an?|one|two|three|four|five|six|seven|eight|nine|ten)"
_DIR = r"(north|south|east|west)(?:ern)?"
_ACTION = r"(take an? picture|measure (?:co2|temperature|moisture)|return home)"

_ROW = re.compile(rf"^take {_NUM} pictures? in a row of {_NUM} trees?$")
_PICTURES = re.compile(rf"^take {_NUM} pictures?(?: of (?:the )?([\w-]+) trees?)?(?: in the {_DIR} half)?$")
_MEASURE = re.compile(
    rf"^measure (co2|temperature|moisture) at {_NUM} trees?"
    rf"(?:[;,]? ?if (?:it is |it's |the reading is )?(low|high),? (?:then )?{_ACTION}"
    rf"(?:,? (?:otherwise|else) {_ACTION})?)?$"
)


class MockQueryError(PlannerError):
    def __init__(self, message: str):
        super().__init__(f"{UNPARSEABLE_QUERY}: {message}")
        self.code = UNPARSEABLE_QUERY


def _count(word: str) -> int:
    return int(word) if word.isdigit() else _WORDS[word]


def _normalize(query: str) -> str:
    q = query.strip().lower().rstrip(".!")
    q = q.replace("co₂", "co2")
    return re.sub(r"\s+", " ", q)


def _trees(k: int) -> str:
    return "1 tree" if k == 1 else f"{k} trees"


def _nav(tree_id: str) -> Task:
    return Task(NAVIGATE_TO_TREE, {"tree_id": tree_id})


def _chain(farm: FarmMap, candidates, k: int, start: LocalXY) -> list[str]:
    """Greedy nearest-neighbour chain of ``k`` trees from ``start``; ties by id."""
    pool = {tid: tree_xy(farm, tid) for tid in candidates}
    if len(pool) < k:
        raise MockQueryError(f"asked for {k} trees but only {len(pool)} match")
    out, here = [], start
    for _ in range(k):
        tid = min(pool, key=lambda t: (round(local_distance(here, pool[t]), 6), t))
        out.append(tid)
        here = pool.pop(tid)
    return out


def _rows(farm: FarmMap) -> list[list[str]]:
    """Tree rows: the ``row`` attribute if every tree has one, else equal northing."""
    groups: dict[str, list[str]] = {}
    if all("row" in t.attributes for t in farm.trees):
        for t in farm.trees:
            groups.setdefault(t.attributes["row"], []).append(t.id)
    else:
        for t in farm.trees:
            groups.setdefault(f"{tree_xy(farm, t.id).y:.0f}", []).append(t.id)
    rows = []
    for ids in groups.values():
        pts = {i: tree_xy(farm, i) for i in ids}
        xs = [p.x for p in pts.values()]
        ys = [p.y for p in pts.values()]
        axis = 0 if max(xs) - min(xs) >= max(ys) - min(ys) else 1
        rows.append(sorted(ids, key=lambda i: (pts[i][axis], i)))
    return rows


def _row_plan(farm: FarmMap, n: int, m: int) -> tuple[list[Node], str]:
    if n < 1 or n > m:
        raise MockQueryError(f"cannot take {n} pictures in a row of {m} trees")
    home = deploy_xy(farm)
    best = None
    for row in _rows(farm):
        if len(row) < m:
            continue
        for seg in (row[:m], row[::-1][:m]):
            d = local_distance(home, tree_xy(farm, seg[0]))
            if best is None or (round(d, 6), seg[0]) < best[0]:
                best = ((round(d, 6), seg[0]), seg)
    if best is None:
        raise MockQueryError(f"no row has {m} trees")
    seg = best[1]
    picks = [seg[0]] if n == 1 else [seg[round(i * (m - 1) / (n - 1))] for i in range(n)]
    body: list[Node] = []
    for tid in picks:
        body += [_nav(tid), Task(TAKE_PICTURE)]
    why = (f"The {m}-tree row segment nearest the deploy point is {', '.join(seg)}; "
           f"{n} pictures are spread evenly along it at {', '.join(picks)}.")
    return body, why


def _picture_plan(farm: FarmMap, n: int, value: str | None, direction: str | None) -> tuple[list[Node], str]:
    ids = set(farm.tree_ids)
    parts = []
    if value is not None:
        ids = {t.id for t in farm.trees if value in (v.lower() for v in t.attributes.values())}
        parts.append(f"trees whose attributes include {value!r}")
    if direction is not None:
        ids &= trees_in_half(farm, direction)
        parts.append(f"in the {direction} half of the farm boundary")
    targets = _chain(farm, ids, n, deploy_xy(farm))
    body: list[Node] = []
    for tid in targets:
        body += [_nav(tid), Task(TAKE_PICTURE)]
    scope = " ".join(parts) if parts else ("tree" if n == 1 else "trees")
    why = f"Selected {n} {scope}, visited nearest-first from the deploy point: {', '.join(targets)}."
    return body, why


def _action(text: str | None) -> Node | None:
    if text is None:
        return None
    if text.startswith("take"):
        return Task(TAKE_PICTURE)
    if text == "return home":
        return Task(RETURN_HOME)
    return Task(SENSORS[text.split()[1]])


def _measure_plan(farm: FarmMap, sensor: str, k: int, level, then_text, else_text) -> tuple[list[Node], str]:
    task = SENSORS[sensor]
    targets = _chain(farm, farm.tree_ids, k, deploy_xy(farm))
    body: list[Node] = []
    for tid in targets:
        body.append(_nav(tid))
        if level is None:
            body.append(Task(task))
        else:
            low, high = THRESHOLDS[task]
            op, thr = ("lt", low) if level == "low" else ("gt", high)
            body.append(Condition(task, op, thr, _action(then_text), _action(else_text)))
    why = f"Measured {sensor} at the {_trees(k)} nearest the deploy point: {', '.join(targets)}."
    if level is not None:
        low, high = THRESHOLDS[task]
        why += f" A {level} reading means {'below ' + format_decimal(low) if level == 'low' else 'above ' + format_decimal(high)}."
    return body, why


def mock_plan(query: str, farm: FarmMap) -> MissionPlan:
    q = _normalize(query)
    if m := _ROW.match(q):
        body, why = _row_plan(farm, _count(m.group(1)), _count(m.group(2)))
    elif m := _PICTURES.match(q):
        body, why = _picture_plan(farm, _count(m.group(1)), m.group(2), m.group(3))
    elif m := _MEASURE.match(q):
        body, why = _measure_plan(farm, m.group(1), _count(m.group(2)), m.group(3), m.group(4), m.group(5))
    else:
        raise MockQueryError(f"query outside the mock grammar: {query!r}")
    d = farm.deploy_point
    start = Task(NAVIGATE_TO_POINT, {"lat": format_decimal(d.lat), "lon": format_decimal(d.lon)})
    root = Sequence(tuple([start] + body + [Task(RETURN_HOME)]))
    plan = MissionPlan(query.strip()[:80], root, why)
    return replace(plan, preconditions=tuple(required_capabilities(plan)))


def mock_backend(query: str, ctx: PlannerContext) -> str:
    plan = mock_plan(query, load_farm(ctx.farm_geojson))
    return f"```xml\n{serialize_l1(plan)}```\n\nRationale: {plan.rationale}\n"


class MockBackend:
    def complete(self, messages, *, query: str, ctx: PlannerContext) -> str:
        return mock_backend(query, ctx)
