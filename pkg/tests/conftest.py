import json
import math
from pathlib import Path

import pytest

from orchardplan.geo import GeoPoint, _unproject, load_farm

DATA = Path(__file__).resolve().parents[1] / "src" / "orchardplan" / "data"
REF = GeoPoint(37.3668, -120.4215)


def farm_geojson(trees, boundary, deploy, attrs=None, ref=REF):
    """GeoJSON text for a farm described in local meters around ``ref``.

    ``trees`` maps id -> (x, y); ``boundary`` is a list of (x, y) vertices.
    """

    def ll(x, y):
        g = _unproject(ref, x, y)
        return [g.lon, g.lat]

    ring = [ll(*p) for p in boundary]
    feats = [
        {"type": "Feature", "properties": {"role": "boundary"},
         "geometry": {"type": "Polygon", "coordinates": [ring + [ring[0]]]}},
        {"type": "Feature", "properties": {"role": "deploy"},
         "geometry": {"type": "Point", "coordinates": ll(*deploy)}},
    ]
    for tid, (x, y) in trees.items():
        props = {"id": tid}
        props.update((attrs or {}).get(tid, {}))
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Point", "coordinates": ll(x, y)}})
    return json.dumps({"type": "FeatureCollection", "features": feats})


def grid_geojson(rows, cols, spacing=10.0, margin=5.0, deploy=(0.0, 0.0), attrs=None):
    """rows x cols grid centred on the reference point; ids g<row><col>."""
    trees = {}
    for r in range(rows):
        for c in range(cols):
            x = (c - (cols - 1) / 2) * spacing
            y = (r - (rows - 1) / 2) * spacing
            trees[f"g{r}{c}"] = (x, y)
    hx = (cols - 1) / 2 * spacing + margin
    hy = (rows - 1) / 2 * spacing + margin
    boundary = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
    return farm_geojson(trees, boundary, deploy, attrs)


@pytest.fixture
def grid2():
    return load_farm(grid_geojson(2, 2))


@pytest.fixture
def grid3():
    return load_farm(grid_geojson(3, 3))


@pytest.fixture(scope="session")
def orchard():
    return load_farm((DATA / "orchard.geojson").read_text())


@pytest.fixture(scope="session")
def orchard_text():
    return (DATA / "orchard.geojson").read_text()


def haversine(a, b):
    """Great-circle distance in meters, written out independently of the package."""
    r = 6371008.8
    p1, p2 = math.radians(a[0]), math.radians(b[0])
    dp = p2 - p1
    dl = math.radians(b[1] - a[1])
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(h))


# Five distinct schema violations, each a (name, old, new) text substitution
# on a mock reply for CONDITIONAL_QUERY.
CONDITIONAL_QUERY = "measure co2 at 2 trees; if low take a picture, otherwise measure moisture"
FAULTS = [
    ("missing_threshold", ' threshold="400"', ""),
    ("unknown_task", 'type="take_picture"', 'type="fly_drone"'),
    ("missing_tree_id", ' tree_id="t01"', ""),
    ("unknown_element", "<Then>", "<Then><Loop/>"),
    ("bad_operator", 'operator="lt"', 'operator="below"'),
]


def inject(reply: str, old: str, new: str) -> str:
    assert old in reply
    return reply.replace(old, new, 1)


def random_node(rnd, tree_ids, depth=3):
    """A random behavior tree over ``tree_ids`` using the stdlib RNG ``rnd``."""
    from orchardplan.mission import MEASUREMENTS, Condition, Sequence, Task

    roll = rnd.random()
    if depth == 0 or roll < 0.4:
        kind = rnd.choice(["navigate_to_tree", "take_picture", "measure_co2", "measure_temperature",
                           "measure_moisture", "return_home"])
        if kind == "navigate_to_tree":
            return Task(kind, {"tree_id": rnd.choice(tree_ids)})
        return Task(kind)
    if roll < 0.75:
        return Sequence(tuple(random_node(rnd, tree_ids, depth - 1) for _ in range(rnd.randint(1, 4))))
    else_branch = random_node(rnd, tree_ids, depth - 1) if rnd.random() < 0.5 else None
    return Condition(rnd.choice(MEASUREMENTS), rnd.choice(["lt", "le", "gt", "ge"]),
                     float(rnd.randint(0, 10)), random_node(rnd, tree_ids, depth - 1), else_branch)


def expected_leaves(node, table, default=0.0):
    """Independent walk: the (kind, name) sequence execution should produce."""
    from orchardplan.mission import Condition, Sequence

    ops = {"lt": lambda a, b: a < b, "le": lambda a, b: a <= b,
           "gt": lambda a, b: a > b, "ge": lambda a, b: a >= b}
    out, here = [], [None]

    def go(n):
        if isinstance(n, Sequence):
            for c in n.children:
                go(c)
        elif isinstance(n, Condition):
            value = table.get((here[0], n.sensor), default)
            out.append(("condition", n.sensor))
            nxt = n.then_branch if ops[n.operator](value, n.threshold) else n.else_branch
            if nxt is not None:
                go(nxt)
        else:
            out.append(("task", n.task_type))
            if n.task_type == "navigate_to_tree":
                here[0] = n.params["tree_id"]
            elif n.task_type in ("return_home", "navigate_to_point"):
                here[0] = None

    go(node)
    return out


# --------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the run
# --------------------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records a verdict line, then asserts ``ok``."""

    def check(n: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
