"""L1 plan XML: schema loading, validation, parsing and canonical output.

Validation and parsing share one checker, so a document parses into a
:class:`~orchardplan.mission.MissionPlan` exactly when its validation report
is empty. Every issue carries an element path in XPath style
(``/MissionPlan/BehaviorTree/Sequence/Task[2]``); a positional index is only
added when an element has same-named siblings.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from decimal import Decimal
from functools import lru_cache
from importlib import resources
from typing import NamedTuple
from xml.sax.saxutils import escape

from .mission import Condition, Constraints, MissionPlan, Node, Sequence, Task

XS = "{http://www.w3.org/2001/XMLSchema}"
XSI = "{http://www.w3.org/2001/XMLSchema-instance}"

# Issue codes.
MALFORMED_XML = "MALFORMED_XML"
UNKNOWN_ELEMENT = "UNKNOWN_ELEMENT"
UNEXPECTED_ELEMENT = "UNEXPECTED_ELEMENT"
MISSING_ELEMENT = "MISSING_ELEMENT"
UNEXPECTED_TEXT = "UNEXPECTED_TEXT"
MISSING_ATTR = "MISSING_ATTR"
UNKNOWN_ATTR = "UNKNOWN_ATTR"
BAD_VALUE = "BAD_VALUE"
UNKNOWN_TASK = "UNKNOWN_TASK"
MISSING_PARAM = "MISSING_PARAM"

_DECIMAL = re.compile(r"^\s*[+-]?([0-9]+(\.[0-9]*)?|\.[0-9]+)\s*$")
# expat is lenient about the version in an XML declaration; XML 1.0 is not.
_XML_DECL = re.compile(r"""^\ufeff?<\?xml\s+version\s*=\s*(["'])(.*?)\1""")
_NODE_TAGS = ("Sequence", "Task", "Condition")
_PLAN_PARTS = ("Metadata", "Preconditions", "Constraints", "BehaviorTree")


class SchemaError(ValueError):
    pass


class Issue(NamedTuple):
    path: str
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> list[str]:
        return [e.code for e in self.errors]

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"{e.path}: {e.code}: {e.message}" for e in self.errors)


class PlanParseError(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


# --------------------------------------------------------------------------
# schema document
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemaDoc:
    """The parts of the XSD the validator is driven by."""

    task_params: dict[str, tuple[str, ...]]
    task_attributes: tuple[str, ...]
    sensors: tuple[str, ...]
    operators: tuple[str, ...]
    text: str

    @property
    def task_pool(self) -> tuple[str, ...]:
        return tuple(self.task_params)


def _enumeration(root: ET.Element, type_name: str) -> list[ET.Element]:
    for st in root.iter(f"{XS}simpleType"):
        if st.get("name") == type_name:
            return list(st.iter(f"{XS}enumeration"))
    raise SchemaError(f"schema defines no simpleType named {type_name!r}")


def load_schema(xsd_text: str) -> SchemaDoc:
    try:
        root = ET.fromstring(xsd_text)
    except ET.ParseError as exc:
        raise SchemaError(f"unreadable schema: {exc}") from None
    if root.tag != f"{XS}schema":
        raise SchemaError("not an XML Schema document")

    task_params = {}
    for enum in _enumeration(root, "TaskType"):
        params = tuple(r.get("param") for r in enum.iter("requires") if r.get("param"))
        task_params[enum.get("value")] = params
    sensors = tuple(e.get("value") for e in _enumeration(root, "SensorType"))
    operators = tuple(e.get("value") for e in _enumeration(root, "Operator"))

    attrs: tuple[str, ...] = ()
    for el in root.iter(f"{XS}element"):
        if el.get("name") == "Task":
            attrs = tuple(a.get("name") for a in el.iter(f"{XS}attribute"))
    if "type" not in attrs:
        raise SchemaError("schema's Task element declares no 'type' attribute")
    if not task_params:
        raise SchemaError("schema declares an empty task pool")
    return SchemaDoc(task_params, attrs, sensors, operators, xsd_text)


def default_schema_text() -> str:
    return resources.files("orchardplan").joinpath("data/mission_l1.xsd").read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def default_schema() -> SchemaDoc:
    return load_schema(default_schema_text())


# --------------------------------------------------------------------------
# checker
# --------------------------------------------------------------------------


def _is_decimal(value: str) -> bool:
    return bool(_DECIMAL.match(value))


def _blank(s: str | None) -> bool:
    return s is None or not s.strip()


class _Checker:
    def __init__(self, schema: SchemaDoc):
        self.schema = schema
        self.issues: list[Issue] = []

    def add(self, path: str, code: str, message: str) -> None:
        self.issues.append(Issue(path, code, message))

    # helpers ---------------------------------------------------------------

    @staticmethod
    def child_paths(el: ET.Element, path: str) -> list[tuple[ET.Element, str]]:
        counts: dict[str, int] = {}
        for c in el:
            counts[c.tag] = counts.get(c.tag, 0) + 1
        seen: dict[str, int] = {}
        out = []
        for c in el:
            seen[c.tag] = seen.get(c.tag, 0) + 1
            suffix = f"[{seen[c.tag]}]" if counts[c.tag] > 1 else ""
            out.append((c, f"{path}/{c.tag}{suffix}"))
        return out

    def attrs(self, el: ET.Element, path: str, required=(), optional=()) -> dict[str, str] | None:
        ok = True
        allowed = set(required) | set(optional)
        for name in el.attrib:
            if name.startswith(XSI):
                continue
            if name not in allowed:
                self.add(path, UNKNOWN_ATTR, f"unknown attribute {name!r} on <{el.tag}>")
                ok = False
        for name in required:
            if name not in el.attrib:
                self.add(path, MISSING_ATTR, f"<{el.tag}> is missing required attribute {name!r}")
                ok = False
        return dict(el.attrib) if ok else None

    def element_only(self, el: ET.Element, path: str) -> None:
        if not _blank(el.text) or any(not _blank(c.tail) for c in el):
            self.add(path, UNEXPECTED_TEXT, f"<{el.tag}> may only contain elements, found text")

    def no_content(self, el: ET.Element, path: str) -> None:
        for c, cpath in self.child_paths(el, path):
            self.add(cpath, UNEXPECTED_ELEMENT, f"<{el.tag}> must be empty, found <{c.tag}>")
        if not _blank(el.text):
            self.add(path, UNEXPECTED_TEXT, f"<{el.tag}> must be empty, found text")

    def decimal(self, path: str, el: ET.Element, name: str, lo=None, hi=None) -> float | None:
        raw = el.get(name)
        if raw is None:
            return None
        if not _is_decimal(raw):
            self.add(path, BAD_VALUE, f"attribute {name!r} of <{el.tag}> must be a decimal number, got {raw!r}")
            return None
        value = Decimal(raw.strip())
        if (lo is not None and value < lo) or (hi is not None and value > hi):
            self.add(path, BAD_VALUE, f"attribute {name!r} of <{el.tag}> out of range: {raw!r}")
            return None
        return float(value)

    def nonempty(self, path: str, el: ET.Element, name: str) -> None:
        if el.get(name) == "":
            self.add(path, BAD_VALUE, f"attribute {name!r} of <{el.tag}> must not be empty")

    # structure -------------------------------------------------------------

    def branch(self, el: ET.Element, path: str) -> Node | None:
        """Element holding exactly one behavior-tree node."""
        self.attrs(el, path)
        self.element_only(el, path)
        kids = self.child_paths(el, path)
        if not kids:
            self.add(path, MISSING_ELEMENT, f"<{el.tag}> needs one Sequence, Task or Condition")
            return None
        nodes = [self.node(c, cpath) for c, cpath in kids]
        for c, cpath in kids[1:]:
            if c.tag in _NODE_TAGS:
                self.add(cpath, UNEXPECTED_ELEMENT, f"<{el.tag}> holds a single node; extra <{c.tag}>")
        return nodes[0] if len(kids) == 1 else None

    def node(self, el: ET.Element, path: str) -> Node | None:
        if el.tag == "Sequence":
            return self.sequence(el, path)
        if el.tag == "Task":
            return self.task(el, path)
        if el.tag == "Condition":
            return self.condition(el, path)
        self.add(path, UNKNOWN_ELEMENT, f"unknown element <{el.tag}>; expected Sequence, Task or Condition")
        return None

    def sequence(self, el: ET.Element, path: str) -> Node | None:
        self.attrs(el, path)
        self.element_only(el, path)
        kids = self.child_paths(el, path)
        if not kids:
            self.add(path, MISSING_ELEMENT, "<Sequence> needs at least one child node")
            return None
        children = [self.node(c, cpath) for c, cpath in kids]
        if any(c is None for c in children):
            return None
        return Sequence(tuple(children))

    def task(self, el: ET.Element, path: str) -> Node | None:
        n_before = len(self.issues)
        optional = [a for a in self.schema.task_attributes if a != "type"]
        attrs = self.attrs(el, path, required=("type",), optional=optional)
        self.no_content(el, path)
        ttype = el.get("type")
        if ttype is not None and ttype not in self.schema.task_params:
            self.add(path, UNKNOWN_TASK, f"task type {ttype!r} is not in the robot task pool")
        for name in ("tree_id",):
            self.nonempty(path, el, name)
        self.decimal(path, el, "lat", -90, 90)
        self.decimal(path, el, "lon", -180, 180)
        if ttype in self.schema.task_params:
            for param in self.schema.task_params[ttype]:
                if param not in el.attrib:
                    self.add(path, MISSING_PARAM, f"task {ttype!r} requires parameter {param!r}")
        if attrs is None or len(self.issues) != n_before:
            return None
        params = {k: v for k, v in el.attrib.items() if k != "type" and not k.startswith(XSI)}
        return Task(ttype, params)

    def condition(self, el: ET.Element, path: str) -> Node | None:
        n_before = len(self.issues)
        self.attrs(el, path, required=("sensor", "operator", "threshold"))
        self.element_only(el, path)
        sensor, op = el.get("sensor"), el.get("operator")
        if sensor is not None and sensor not in self.schema.sensors:
            self.add(path, BAD_VALUE, f"sensor {sensor!r} is not a measurement task")
        if op is not None and op not in self.schema.operators:
            self.add(path, BAD_VALUE, f"operator {op!r} not one of {', '.join(self.schema.operators)}")
        threshold = self.decimal(path, el, "threshold")

        then_node = else_node = None
        state = 0  # 0: expect Then, 1: expect Else, 2: done
        for c, cpath in self.child_paths(el, path):
            if c.tag == "Then" and state == 0:
                then_node = self.branch(c, cpath)
                state = 1
            elif c.tag == "Else" and state == 1:
                else_node = self.branch(c, cpath)
                state = 2
            elif c.tag in ("Then", "Else"):
                self.add(cpath, UNEXPECTED_ELEMENT, f"<{c.tag}> out of order or repeated in <Condition>")
            else:
                self.add(cpath, UNKNOWN_ELEMENT, f"unknown element <{c.tag}> in <Condition>; expected Then, Else")
        if state == 0:
            self.add(path, MISSING_ELEMENT, "<Condition> needs a <Then> branch")
        if len(self.issues) != n_before or then_node is None:
            return None
        return Condition(sensor, op, threshold, then_node, else_node)

    def plan(self, root: ET.Element) -> MissionPlan | None:
        path = f"/{root.tag}"
        if root.tag != "MissionPlan":
            self.add(path, UNKNOWN_ELEMENT, f"root element must be <MissionPlan>, got <{root.tag}>")
            return None
        self.attrs(root, path, required=("name",))
        self.element_only(root, path)

        rationale, preconditions, constraints, tree = "", [], None, None
        stage = -1
        for c, cpath in self.child_paths(root, path):
            if c.tag not in _PLAN_PARTS:
                self.add(cpath, UNKNOWN_ELEMENT, f"unknown element <{c.tag}> in <MissionPlan>")
                continue
            pos = _PLAN_PARTS.index(c.tag)
            if pos <= stage:
                self.add(cpath, UNEXPECTED_ELEMENT,
                         f"<{c.tag}> out of order or repeated; expected order {', '.join(_PLAN_PARTS)}")
                continue
            stage = pos
            if c.tag == "Metadata":
                rationale = self.metadata(c, cpath)
            elif c.tag == "Preconditions":
                preconditions = self.preconditions(c, cpath)
            elif c.tag == "Constraints":
                constraints = self.constraints(c, cpath)
            else:
                tree = self.branch(c, cpath)
        if stage < _PLAN_PARTS.index("BehaviorTree"):
            self.add(path, MISSING_ELEMENT, "<MissionPlan> needs a <BehaviorTree>")
        if self.issues or tree is None:
            return None
        return MissionPlan(root.get("name"), tree, rationale, tuple(preconditions), constraints)

    def metadata(self, el: ET.Element, path: str) -> str:
        self.attrs(el, path)
        self.element_only(el, path)
        text, seen = "", False
        for c, cpath in self.child_paths(el, path):
            if c.tag != "Rationale":
                self.add(cpath, UNKNOWN_ELEMENT, f"unknown element <{c.tag}> in <Metadata>")
            elif seen:
                self.add(cpath, UNEXPECTED_ELEMENT, "<Rationale> repeated")
            else:
                seen = True
                self.attrs(c, cpath)
                for g, gpath in self.child_paths(c, cpath):
                    self.add(gpath, UNEXPECTED_ELEMENT, f"<Rationale> holds text only, found <{g.tag}>")
                text = c.text or ""
        return text

    def preconditions(self, el: ET.Element, path: str) -> list[str]:
        self.attrs(el, path)
        self.element_only(el, path)
        names = []
        for c, cpath in self.child_paths(el, path):
            if c.tag != "Capability":
                self.add(cpath, UNKNOWN_ELEMENT, f"unknown element <{c.tag}> in <Preconditions>")
                continue
            if self.attrs(c, cpath, required=("name",)) is not None:
                self.nonempty(cpath, c, "name")
                names.append(c.get("name"))
            self.no_content(c, cpath)
        return names

    def constraints(self, el: ET.Element, path: str) -> Constraints:
        self.attrs(el, path, optional=("distance_budget",))
        self.no_content(el, path)
        return Constraints(self.decimal(path, el, "distance_budget", lo=0))


def _check(xml_text: str | bytes, schema: SchemaDoc) -> tuple[MissionPlan | None, ValidationReport]:
    checker = _Checker(schema)
    probe = xml_text if isinstance(xml_text, str) else xml_text.decode("utf-8", errors="replace")
    if "<!DOCTYPE" in probe:
        checker.add("/", MALFORMED_XML, "document type declarations are not accepted")
        return None, ValidationReport(tuple(checker.issues))
    decl = _XML_DECL.match(probe)
    if decl and not re.fullmatch(r"1\.[0-9]+", decl.group(2)):
        checker.add("/", MALFORMED_XML, f"unsupported XML version {decl.group(2)!r}")
        return None, ValidationReport(tuple(checker.issues))
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        checker.add("/", MALFORMED_XML, f"not well-formed XML: {exc}")
        return None, ValidationReport(tuple(checker.issues))
    except (ValueError, UnicodeError, LookupError) as exc:
        checker.add("/", MALFORMED_XML, f"unreadable document: {exc}")
        return None, ValidationReport(tuple(checker.issues))
    try:
        plan = checker.plan(root)
    except RecursionError:
        checker.add("/", MALFORMED_XML, "behavior tree nested too deeply")
        plan = None
    return plan, ValidationReport(tuple(checker.issues))


def validate(xml_text: str | bytes, schema: SchemaDoc | None = None) -> ValidationReport:
    return _check(xml_text, schema or default_schema())[1]


def parse_l1(xml_text: str | bytes, schema: SchemaDoc | None = None) -> MissionPlan:
    plan, report = _check(xml_text, schema or default_schema())
    if plan is None:
        raise PlanParseError(report)
    return plan


def load_plan_file(path, schema: SchemaDoc | None = None) -> MissionPlan:
    with open(path, "rb") as fh:
        return parse_l1(fh.read(), schema)


# --------------------------------------------------------------------------
# canonical output
# --------------------------------------------------------------------------

_ATTR_ESCAPES = {'"': "&quot;", "\n": "&#10;", "\r": "&#13;", "\t": "&#9;"}
_TASK_ATTR_ORDER = ("tree_id", "lat", "lon")


def format_decimal(x: float) -> str:
    """Shortest round-tripping decimal, never in exponent notation."""
    s = format(Decimal(repr(float(x))), "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s


def _attr(name: str, value: str) -> str:
    return f' {name}="{escape(value, _ATTR_ESCAPES)}"'


def _emit(node: Node, depth: int, out: list[str]) -> None:
    pad = "  " * depth
    if isinstance(node, Task):
        keys = [k for k in _TASK_ATTR_ORDER if k in node.params]
        keys += sorted(k for k in node.params if k not in _TASK_ATTR_ORDER)
        attrs = _attr("type", node.task_type) + "".join(_attr(k, node.params[k]) for k in keys)
        out.append(f"{pad}<Task{attrs}/>")
    elif isinstance(node, Sequence):
        out.append(f"{pad}<Sequence>")
        for child in node.children:
            _emit(child, depth + 1, out)
        out.append(f"{pad}</Sequence>")
    else:
        attrs = (_attr("sensor", node.sensor) + _attr("operator", node.operator)
                 + _attr("threshold", format_decimal(node.threshold)))
        out.append(f"{pad}<Condition{attrs}>")
        out.append(f"{pad}  <Then>")
        _emit(node.then_branch, depth + 2, out)
        out.append(f"{pad}  </Then>")
        if node.else_branch is not None:
            out.append(f"{pad}  <Else>")
            _emit(node.else_branch, depth + 2, out)
            out.append(f"{pad}  </Else>")
        out.append(f"{pad}</Condition>")


def serialize_l1(plan: MissionPlan) -> str:
    out = ['<?xml version="1.0" encoding="UTF-8"?>', f"<MissionPlan{_attr('name', plan.name)}>"]
    out.append("  <Metadata>")
    if plan.rationale:
        out.append(f"    <Rationale>{escape(plan.rationale, {chr(13): '&#13;'})}</Rationale>")
    else:
        out.append("    <Rationale/>")
    out.append("  </Metadata>")
    if plan.preconditions:
        out.append("  <Preconditions>")
        out.extend(f"    <Capability{_attr('name', c)}/>" for c in plan.preconditions)
        out.append("  </Preconditions>")
    else:
        out.append("  <Preconditions/>")
    if plan.constraints is not None:
        budget = plan.constraints.distance_budget
        attr = "" if budget is None else _attr("distance_budget", format_decimal(budget))
        out.append(f"  <Constraints{attr}/>")
    out.append("  <BehaviorTree>")
    _emit(plan.root, 2, out)
    out.append("  </BehaviorTree>")
    out.append("</MissionPlan>")
    return "\n".join(out) + "\n"
