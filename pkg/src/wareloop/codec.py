"""Planner wire protocol: skill calls, plans, step replies, feedback lines.

Planner replies come from language models and are frequently almost-JSON:
missing commas, strings left open at a line break, stray prose before the
object, doubled braces.  ``loads_lenient`` repairs those shapes
deterministically; parsing falls back to it only after strict ``json.loads``
fails.  The feedback grammar rendered here is bit-exact and versioned: the
success wordings never change, and failures are always
``#feedback: <verb> failed, <detail>``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any

from .errors import (
    FeedbackParseError,
    MalformedCall,
    MissingNextAction,
    NoJsonFound,
    SchemaMismatch,
    UnknownSkill,
)
from .scene import SceneMap

SKILL_ALIASES = {
    "navigate": "navigate",
    "go_to": "navigate",
    "goto": "navigate",
    "go to": "navigate",
    "pick": "pick",
    "pick_up": "pick",
    "pickup": "pick",
    "pick up": "pick",
    "grasp": "pick",
    "place": "place",
    "put": "place",
    "done": "done",
}

_ARITY = {"navigate": (1, 2), "pick": (1, 1), "place": (0, 0), "done": (0, 0)}


@dataclass(frozen=True)
class SkillCall:
    skill: str
    params: tuple[str, ...] = ()

    def render(self) -> str:
        if self.skill == "done":
            return "done"
        surface = {"navigate": "go_to", "pick": "pick_up", "place": "place"}[self.skill]
        return f"{surface}({', '.join(self.params)})"

    def to_dict(self) -> dict:
        return {"skill": self.skill, "params": list(self.params)}


DONE = SkillCall("done")


@dataclass(frozen=True)
class Subtask:
    desc: str
    calls: tuple[SkillCall, ...] = ()


@dataclass(frozen=True)
class Plan:
    reasoning: str
    subtasks: tuple[Subtask, ...]
    first_action: SkillCall

    def flat_calls(self) -> list[SkillCall]:
        return [c for st in self.subtasks for c in st.calls]


@dataclass(frozen=True)
class StepReply:
    reasoning: str
    next_action: SkillCall


_FEEDBACK_KINDS = (
    "nav_success",
    "nav_fail",
    "pick_success",
    "pick_fail",
    "place_success",
    "place_fail",
)


@dataclass(frozen=True)
class FeedbackEvent:
    kind: str
    observation: tuple[str, ...] | None = None
    detail: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in _FEEDBACK_KINDS:
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        if self.kind == "nav_success" and self.observation is None:
            raise ValueError("nav_success requires an observation")
        if self.kind.endswith("_fail") and not self.detail:
            raise ValueError(f"{self.kind} requires a detail")


def make_call(skill: str, params: list[str] | tuple[str, ...]) -> SkillCall:
    """Canonicalize a (skill, params) pair, enforcing the catalog arities."""
    name = str(skill).strip().lower()
    canonical = SKILL_ALIASES.get(name)
    if canonical is None:
        raise UnknownSkill(name)
    cleaned = [str(p).strip() for p in params if str(p).strip()]
    if canonical in ("place", "done"):
        cleaned = []  # a target param here is accepted and discarded
    lo, hi = _ARITY[canonical]
    if not lo <= len(cleaned) <= hi:
        raise MalformedCall(f"{canonical} takes {lo}..{hi} params, got {cleaned!r}")
    if canonical == "navigate" and len(cleaned) == 2:
        try:
            float(cleaned[0]), float(cleaned[1])
        except ValueError:
            raise MalformedCall(f"navigate with two params needs numbers, got {cleaned!r}")
    return SkillCall(canonical, tuple(cleaned))


_CALL_RE = re.compile(
    r"^\s*(?:\d+\s*[.)]\s*)?([A-Za-z_][A-Za-z_ ]*?)\s*(?:\(([^)]*)\)|\[([^\]]*)\])?\s*\.?\s*$"
)


def parse_skill_call(text: str) -> SkillCall:
    m = _CALL_RE.match(text or "")
    if not m:
        raise MalformedCall(text)
    name = m.group(1)
    raw_args = m.group(2) if m.group(2) is not None else m.group(3)
    params = [a.strip() for a in raw_args.split(",")] if raw_args not in (None, "") else []
    return make_call(name, params)


# --- lenient JSON ---

_FENCE_RE = re.compile(r"```[a-zA-Z]*\n?|```", re.MULTILINE)


def extract_json_block(text: str) -> str:
    """Return the outermost brace-balanced block, ignoring braces in strings."""
    t = _FENCE_RE.sub("", text or "")
    start = t.find("{")
    if start == -1:
        raise NoJsonFound(text[:120] if text else "<empty>")
    depth = 0
    in_str = False
    escaped = False
    for i in range(start, len(t)):
        ch = t[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"' or ch == "\n":
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return t[start : i + 1]
    return t[start:]  # unbalanced: let the lenient parser close what it can


class _Lenient:
    """Recovering JSON reader for model output.

    Tolerates missing commas, strings terminated by a line break, junk
    between tokens, a doubled outer brace, and trailing commas.
    """

    def __init__(self, text: str):
        self.text = text
        self.i = 0
        self.n = len(text)

    def parse(self) -> Any:
        value = self._value()
        return value

    def _peek(self) -> str:
        return self.text[self.i] if self.i < self.n else ""

    def _skip_ws(self) -> None:
        while self.i < self.n and self.text[self.i] in " \t\r\n":
            self.i += 1

    def _value(self) -> Any:
        self._skip_ws()
        ch = self._peek()
        if ch == "{":
            return self._object()
        if ch == "[":
            return self._array()
        if ch == '"':
            return self._string()
        if ch == "" :
            raise NoJsonFound("unexpected end of input")
        word = self._bareword()
        low = word.lower()
        if low in ("true", "false"):
            return low == "true"
        if low == "null":
            return None
        try:
            return int(word)
        except ValueError:
            pass
        try:
            return float(word)
        except ValueError:
            return word

    def _string(self) -> str:
        assert self.text[self.i] == '"'
        self.i += 1
        out: list[str] = []
        while self.i < self.n:
            ch = self.text[self.i]
            if ch == "\\" and self.i + 1 < self.n:
                nxt = self.text[self.i + 1]
                mapped = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\", "/": "/"}.get(nxt)
                out.append(mapped if mapped is not None else nxt)
                self.i += 2
                continue
            if ch == '"':
                self.i += 1
                return "".join(out)
            if ch == "\n":  # model forgot the closing quote: end the string here
                return "".join(out).rstrip()
            out.append(ch)
            self.i += 1
        return "".join(out)

    def _bareword(self) -> str:
        start = self.i
        while self.i < self.n and self.text[self.i] not in ",}]\n":
            self.i += 1
        return self.text[start : self.i].strip()

    def _skip_junk_until(self, stops: str) -> None:
        while self.i < self.n and self.text[self.i] not in stops:
            self.i += 1

    def _array(self) -> list:
        assert self.text[self.i] == "["
        self.i += 1
        items: list = []
        while True:
            self._skip_ws()
            ch = self._peek()
            if ch == "":
                return items
            if ch == "]":
                self.i += 1
                return items
            if ch == ",":
                self.i += 1
                continue
            if ch in '"{[':
                items.append(self._value())
            else:
                word = self._bareword()
                if word:
                    items.append(word)
            # stray characters after a value (e.g. a period outside the quotes)
            self._skip_junk_until(',]"')

    def _object(self) -> dict:
        assert self.text[self.i] == "{"
        self.i += 1
        obj: dict = {}
        while True:
            self._skip_ws()
            ch = self._peek()
            if ch == "":
                return obj
            if ch == "}":
                self.i += 1
                return obj
            if ch == ",":
                self.i += 1
                continue
            if ch == "{" and not obj:
                # doubled outer brace: adopt the inner object
                inner = self._object()
                self._skip_junk_until("}")
                if self._peek() == "}":
                    self.i += 1
                return inner
            if ch != '"':
                # junk where a key belongs: skip to the next key or the end
                self._skip_junk_until('"}')
                continue
            key = self._string()
            self._skip_ws()
            if self._peek() == ":":
                self.i += 1
            else:
                self._skip_junk_until(':"}')
                if self._peek() == ":":
                    self.i += 1
                else:
                    continue  # key without a value: drop it
            obj[key] = self._value()
            self._skip_junk_until(',"}')


def loads_lenient(text: str) -> Any:
    block = extract_json_block(text)
    try:
        return json.loads(block)
    except json.JSONDecodeError:
        return _Lenient(block).parse()


# --- plan / reply parsing ---

_SENTENCE_RULES: tuple[tuple[str, str], ...] = (
    ("go to", "navigate"),
    ("navigate to", "navigate"),
    ("move to", "navigate"),
    ("pick up", "pick"),
    ("grasp", "pick"),
    ("grab", "pick"),
    ("fetch", "pick"),
    ("retrieve", "pick"),
    ("find", "pick"),
    ("move", "pick"),
    ("place", "place"),
    ("put", "place"),
    ("set", "place"),
    ("position", "place"),
    ("done", "done"),
    ("task is now complete", "done"),
)

_TARGET_STOPS = (" and ", " on ", " to ", " from ", " in ", " at ", ",", ".")
_ARTICLES = ("the ", "a ", "an ", "another ")


def _target_after(sentence: str, keyword: str) -> str:
    rest = sentence[sentence.index(keyword) + len(keyword):].strip()
    cut = len(rest)
    for stop in _TARGET_STOPS:
        idx = rest.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    target = rest[:cut].strip().strip(".")
    lowered = target.lower()
    for art in _ARTICLES:
        if lowered.startswith(art):
            target = target[len(art):]
            break
    return target.strip()


def extract_call_from_sentence(sentence: str) -> SkillCall | None:
    """Keyword-based extraction; sentences with no recognizable verb yield None."""
    text = re.sub(r"^\s*\d+\s*[.)]\s*", "", sentence).strip()
    inline = re.search(r"\b(go_to|pick_up|navigate|grasp|place|done)\s*[\(\[]", text)
    if inline:
        try:
            return parse_skill_call(text[inline.start():])
        except (UnknownSkill, MalformedCall):
            pass
    low = text.lower()
    # earliest keyword wins; at the same position the longer keyword wins
    # ("move to the table" navigates, "move a strawberry to" picks)
    hits = [(low.index(kw), -len(kw), kw, skill) for kw, skill in _SENTENCE_RULES if kw in low]
    if not hits:
        return None
    _, _, keyword, skill = min(hits)
    if skill == "navigate":
        target = _target_after(low, keyword)
        if not target:
            return None
        return SkillCall("navigate", (target,))
    if skill == "pick":
        target = _target_after(low, keyword)
        if not target:
            return None
        return SkillCall("pick", (target,))
    if skill == "place":
        return SkillCall("place")
    return DONE


def _call_from_value(value: Any, path: str) -> SkillCall:
    if isinstance(value, str):
        return parse_skill_call(value)
    if isinstance(value, dict):
        if "next_action" in value:  # nested reply-shaped first_action
            return _call_from_value(value["next_action"], path + ".next_action")
        if "skill" in value:
            params = value.get("params", [])
            if not isinstance(params, list):
                params = [params]
            return make_call(value["skill"], [str(p) for p in params])
    raise SchemaMismatch(path, f"cannot read a skill call from {value!r}")


def parse_initial_plan(text: str) -> Plan:
    doc = loads_lenient(text)
    if not isinstance(doc, dict):
        raise SchemaMismatch("$", "reply is not an object")
    raw_list = doc.get("action_list")
    if raw_list is None or not isinstance(raw_list, list):
        raise SchemaMismatch("action_list", "missing or not a list")

    subtasks: list[Subtask] = []
    for idx, item in enumerate(raw_list):
        if isinstance(item, str):
            call = extract_call_from_sentence(item)
            subtasks.append(Subtask(item.strip(), (call,) if call else ()))
        elif isinstance(item, dict):
            desc = str(item.get("desc", "")).strip()
            inner = item.get("action_list", [])
            if not isinstance(inner, list):
                raise SchemaMismatch(f"action_list[{idx}].action_list", "not a list")
            calls = tuple(_call_from_value(c, f"action_list[{idx}]") for c in inner)
            subtasks.append(Subtask(desc, calls))
        else:
            raise SchemaMismatch(f"action_list[{idx}]", f"unsupported item {item!r}")

    first_raw = doc.get("first_action")
    derived = next((st.calls[0] for st in subtasks if st.calls), None)
    if first_raw is None:
        if derived is None:
            raise SchemaMismatch("first_action", "absent and no subtask carries a call")
        first = derived
    else:
        first = _call_from_value(first_raw, "first_action")
        if derived is not None and first != derived:
            raise SchemaMismatch("first_action", f"{first} != first planned call {derived}")

    reasoning = str(doc.get("reasoning", doc.get("step_by_step_reasoning", "")) or "")
    return Plan(reasoning, tuple(subtasks), first)


def parse_step_reply(text: str) -> StepReply:
    doc = loads_lenient(text)
    if not isinstance(doc, dict):
        raise MissingNextAction(text[:120])
    if "next_action" not in doc or doc["next_action"] in (None, ""):
        raise MissingNextAction(text[:120])
    call = _call_from_value(doc["next_action"], "next_action")
    return StepReply(str(doc.get("step_by_step_reasoning", "") or ""), call)


def encode_plan(plan: Plan) -> str:
    return json.dumps(
        {
            "reasoning": plan.reasoning,
            "action_list": [
                {"desc": st.desc, "action_list": [c.to_dict() for c in st.calls]}
                for st in plan.subtasks
            ],
            "first_action": plan.first_action.to_dict(),
        },
        indent=1,
    )


def encode_step_reply(reply: StepReply) -> str:
    return json.dumps(
        {"step_by_step_reasoning": reply.reasoning, "next_action": reply.next_action.render()}
    )


# --- feedback grammar (versioned; see README) ---

_VERBS = {"nav": "navigation", "pick": "pick up", "place": "place"}


def render_feedback(event: FeedbackEvent) -> str:
    family, outcome = event.kind.split("_")
    verb = _VERBS[family]
    if outcome == "fail":
        return f"#feedback: {verb} failed, {event.detail}"
    if event.kind == "nav_success":
        items = list(event.observation or ())
        if not items:
            return "#feedback: navigation success, there is nothing on the table"
        if len(items) == 1:
            listing = items[0]
        else:
            listing = ", ".join(items[:-1]) + " and " + items[-1]
        return f"#feedback: navigation success, there are {listing} on the table"
    return f"#feedback: {verb} success"


_FB_PREFIX = "#feedback: "


def parse_feedback(text: str) -> FeedbackEvent:
    line = text.strip()
    if not line.startswith(_FB_PREFIX):
        raise FeedbackParseError(text[:120])
    body = line[len(_FB_PREFIX):]
    if body == "navigation success, there is nothing on the table":
        return FeedbackEvent("nav_success", observation=())
    m = re.fullmatch(r"navigation success, there are (.+) on the table", body)
    if m:
        listing = m.group(1)
        head, sep, last = listing.rpartition(" and ")
        items = ([p.strip() for p in head.split(",")] + [last.strip()]) if sep else [listing.strip()]
        return FeedbackEvent("nav_success", observation=tuple(items))
    if body == "pick up success":
        return FeedbackEvent("pick_success")
    if body == "place success":
        return FeedbackEvent("place_success")
    for family, verb in _VERBS.items():
        prefix = f"{verb} failed, "
        if body.startswith(prefix):
            return FeedbackEvent(f"{family}_fail", detail=body[len(prefix):])
    raise FeedbackParseError(text[:120])


# --- planner prompt ---

PROMPT_SECTIONS: dict[str, str] = {
    "#CONTEXT#": (
        "You are highly skilled in robotic task planning, breaking down intricate and "
        "long-term tasks into distinct primitive actions. The robot has a mobile base and "
        "one arm; the room has several tables and shelves with corresponding objects on "
        "them. When given a language instruction, you are required to break it into "
        "sub-tasks; for each subtask, you should list a set of skills to meet the goal."
    ),
    "#SKILL#": (
        "go_to(table name) pick_up(object name) place(object name) done\n\n"
        "You must strictly obey these rules using the exact output form above. We assume "
        "that the objects are all on the table; thus, you can do pick_up right after the "
        "navigation skill is successful. Before the pick skill, you should analyze the "
        "feedback and decide which object is correct and matches. You can only execute one "
        "skill at a time; remember, the robot can only hold one object at a time."
    ),
    "#OBJECTIVE#": (
        "Break the instruction into subtasks with short but logical analysis. At the start "
        "of each subtask, you should first go_to the correct table; before placement, go "
        "to the table given by the instruction. You can adjust the skills according to "
        "the feedback. Once the instruction is finished, finish the task by skill done."
    ),
    "#OUTPUT#": (
        "All of your output should be in JSON format. If the message is #instruction, "
        "output: 1. the reasoning over the instruction and the environment (MAP), 2. the "
        "overall action list, 3. the first action. If the message is #feedback, output: "
        "1. step-by-step reasoning according to the feedback, 2. the next action; output "
        "only the one skill that is exactly next."
    ),
}

PROMPT_EXAMPLE = """example 1:
user: #instruction: find a lemon and put it on the shipping table
your answer:
{
"reasoning": "The object [lemon] is most possible on the [fruit table]",
"action_list": [
"1. Go to the fruit table and find the lemon.",
"2. Pick up the lemon",
"3. Go to the shipping table",
"4. Place the lemon on the shipping table."
],
"first_action": "1.go_to[fruit table]"
}
example 2:
user: #feedback: navigation success, there are apple, banana and lemon on the table
your answer:
{
"step_by_step_reasoning": "We reached the [fruit table]; the [lemon] is on the table, so I pick it up.",
"next_action": "pick_up(lemon)"
}"""


def render_map_line(scene: SceneMap) -> str:
    return " ".join(f"[{site.name}]" for site in scene.sites)


def render_initial_prompt(task: str, scene: SceneMap, memory_hints: list[str] | None = None) -> str:
    parts: list[str] = []
    for header, body in PROMPT_SECTIONS.items():
        parts.append(f"{header}\n\n{body}")
    parts.append(f"#MAP#\n\n{render_map_line(scene)}")
    parts.append(f"#EXAMPLE#\n\n{PROMPT_EXAMPLE}")
    if memory_hints:
        parts.append("#MEMORY#\n\n" + "\n".join(memory_hints))
    parts.append(f"#instruction: {task}")
    return "\n\n".join(parts)


def approx_tokens(text: str) -> int:
    """4-characters-per-token proxy."""
    return max(1, len(text) // 4)
