"""Natural-language query to validated L1 plan.

The planner builds one prompt from the farm context, asks a backend for a
plan, and runs the approval loop: a reply that fails validation is sent back
with the validation report until it passes or the repair budget runs out.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

from .l1 import MALFORMED_XML, Issue, PlanParseError, SchemaDoc, ValidationReport, load_schema, parse_l1
from .mission import MissionPlan

DEFAULT_INSTRUCTIONS = """\
You are the mission planner for an agricultural ground robot working in an orchard.
Turn the user's request into a single L1 mission plan.

Rules:
- Reply with exactly one XML document whose root element is <MissionPlan>, inside a ```xml fenced block.
- The document must validate against the XML Schema below. Use only the task types it declares.
- Refer to trees by the "id" property from the farm GeoJSON. Use navigate_to_point with lat/lon for places that are not trees.
- Put a short explanation of your choices in <Metadata><Rationale>, and repeat it after the XML block under the heading "Rationale:".
- Only use capabilities the robot has.
"""

REPAIR_TEMPLATE = """\
The mission plan you sent does not validate against the L1 schema. Validation report:

{report}

Send the complete corrected plan as one XML document in a ```xml fenced block, followed by the rationale."""


class PlannerError(RuntimeError):
    pass


class BackendError(PlannerError):
    """Transport, HTTP or protocol failure talking to a plan backend."""


class UnrepairablePlan(PlannerError):
    def __init__(self, report: ValidationReport, transcript: list["Exchange"]):
        super().__init__(f"plan still invalid after {len(transcript) - 1} repair round(s):\n{report}")
        self.report = report
        self.transcript = transcript


@dataclass(frozen=True)
class PlannerContext:
    schema_text: str
    farm_geojson: str
    robot_capabilities: tuple[str, ...]
    instructions: str = DEFAULT_INSTRUCTIONS

    def __post_init__(self):
        object.__setattr__(self, "robot_capabilities", tuple(self.robot_capabilities))
        for name in ("schema_text", "farm_geojson", "instructions"):
            if not getattr(self, name).strip():
                raise ValueError(f"planner context field {name!r} is empty")
        if not self.robot_capabilities or not all(self.robot_capabilities):
            raise ValueError("planner context needs a nonempty capability list")


class Prompt(NamedTuple):
    system: str
    user: str

    def messages(self) -> list[dict[str, str]]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]


class Exchange(NamedTuple):
    request: list[dict[str, str]]
    response: str


class PlanBackend(Protocol):
    def complete(self, messages: list[dict[str, str]], *, query: str, ctx: PlannerContext) -> str:
        ...


@dataclass
class PlanResult:
    plan: MissionPlan
    raw_xml: str
    rationale: str
    repair_rounds: int
    transcript: list[Exchange] = field(default_factory=list)


def compose_prompt(ctx: PlannerContext, query: str) -> Prompt:
    if not query.strip():
        raise ValueError("query is empty")
    caps = "\n".join(f"- {c}" for c in ctx.robot_capabilities)
    system = (
        f"{ctx.instructions.rstrip()}\n\n"
        f"## Robot capabilities\n{caps}\n\n"
        f"## L1 schema (XSD)\n{ctx.schema_text.rstrip()}\n\n"
        f"## Farm map (GeoJSON)\n{ctx.farm_geojson.rstrip()}\n"
    )
    # The user turn is the query verbatim, which keeps prompts injective in it.
    return Prompt(system, query)


_FENCE = re.compile(r"```[ \t]*(?:xml)?[ \t]*\n(.*?)```", re.S | re.I)
_ROOT = re.compile(r"(?:<\?xml[^>]*\?>\s*)?<MissionPlan\b.*?</MissionPlan>", re.S)


def split_reply(reply: str) -> tuple[str | None, str]:
    """Return (xml_text, rationale) from a model reply.

    A ```xml fenced block containing a MissionPlan wins; otherwise the first
    ``<MissionPlan>...</MissionPlan>`` span. Whatever surrounds it is the
    rationale.
    """
    for m in _FENCE.finditer(reply):
        if "<MissionPlan" in m.group(1):
            rest = reply[: m.start()] + reply[m.end():]
            return m.group(1).strip() + "\n", _clean_rationale(rest)
    m = _ROOT.search(reply)
    if m:
        rest = reply[: m.start()] + reply[m.end():]
        return m.group(0) + "\n", _clean_rationale(rest)
    return None, _clean_rationale(reply)


def _clean_rationale(text: str) -> str:
    text = text.strip()
    return re.sub(r"^[ \t]*(#+[ \t]*)?\**rationale\**[ \t]*:?\**[ \t]*", "", text, flags=re.I | re.M).strip()


def _check_reply(reply: str, schema: SchemaDoc) -> tuple[MissionPlan | None, str | None, str, ValidationReport]:
    xml_text, rationale = split_reply(reply)
    if xml_text is None:
        report = ValidationReport((Issue("/", MALFORMED_XML, "no <MissionPlan> document found in the reply"),))
        return None, None, rationale, report
    try:
        return parse_l1(xml_text, schema), xml_text, rationale, ValidationReport()
    except PlanParseError as exc:
        return None, xml_text, rationale, exc.report


def generate_plan(query: str, ctx: PlannerContext, backend: PlanBackend, max_repairs: int = 1,
                  schema: SchemaDoc | None = None) -> PlanResult:
    """Ask ``backend`` for a plan and repair it up to ``max_repairs`` times.

    Each repair round resends the full original prompt, the previous reply and
    the validation report, so stateless endpoints see the whole context.
    """
    if max_repairs < 0:
        raise ValueError("max_repairs must be >= 0")
    schema = schema or load_schema(ctx.schema_text)
    messages = compose_prompt(ctx, query).messages()
    transcript: list[Exchange] = []
    for round_no in range(max_repairs + 1):
        reply = backend.complete(list(messages), query=query, ctx=ctx)
        transcript.append(Exchange(list(messages), reply))
        plan, xml_text, rationale, report = _check_reply(reply, schema)
        if plan is not None:
            return PlanResult(plan, xml_text, rationale or plan.rationale, round_no, transcript)
        messages = messages[:2] + [
            {"role": "assistant", "content": reply},
            {"role": "user", "content": REPAIR_TEMPLATE.format(report=report)},
        ]
    raise UnrepairablePlan(report, transcript)
