"""Model backends: remote HTTP chat service, scripted replay, rule-based planner.

All planner backends share one contract: ``planner_initial(prompt)`` starts a
conversation and ``planner_step(feedback)`` continues it; both return
``(reply_text, BackendUsage)``.  Scripted and rule-based backends are fully
deterministic and report token usage through the 4-characters-per-token
proxy.  The HTTP backend speaks the chat-completions convention and replays
the full message history on every call.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import requests

from .codec import (
    Plan,
    SkillCall,
    StepReply,
    Subtask,
    approx_tokens,
    encode_step_reply,
    loads_lenient,
    parse_feedback,
)
from .errors import (
    BadStatus,
    ImpossibleTask,
    ObjectNotVisible,
    ParseFail,
    ScriptExhausted,
    ScriptMismatch,
    Transport,
)
from .scene import SceneMap, resolve_object_name
from .simenv import CODE_SIDES, SimEnv
from .suites import Move, TaskSpec, parse_instruction, resolve_goal_moves

ENV_API_BASE = "DADUE_API_BASE"
ENV_API_KEY = "DADUE_API_KEY"
ENV_MODEL = "DADUE_MODEL"
ENV_VLM_MODEL = "DADUE_VLM_MODEL"

VLM_SIDE_PROMPT = (
    "Please tell me which side of the table the {name} is closer to:\n"
    "1. left side,\n2. right side,\n3. far side,\n4. close side.\n"
    "The output should be the corresponding number and the color and shape "
    "of the object in JSON format."
)
VLM_DESCRIBE_PROMPT = "Please tell me the details of {name} in the picture with a brief sentence"


@dataclass
class BackendUsage:
    prompt_tokens: int
    completion_tokens: int
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "wall_time": self.wall_time,
        }


@dataclass
class ChatRequest:
    messages: list[dict]
    model: str
    max_tokens: int = 512
    temperature: float = 0.0

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": self.messages,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }


def _proxy_usage(stimulus: str, reply: str) -> BackendUsage:
    return BackendUsage(approx_tokens(stimulus), approx_tokens(reply), 0.0)


# --- scripted replay ---


@dataclass(frozen=True)
class ScriptStep:
    expect: str  # substring the stimulus must contain
    reply: str


@dataclass
class Script:
    steps: list[ScriptStep]
    cursor: int = 0


def load_script(path: str) -> Script:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    steps = doc["steps"] if isinstance(doc, dict) else doc
    return Script([ScriptStep(s["expect"], s["reply"]) for s in steps])


class ScriptedPlanner:
    """Replays canned replies in order, checking each stimulus by substring."""

    def __init__(self, script: Script):
        self.script = script

    def _next(self, stimulus: str) -> tuple[str, BackendUsage]:
        if self.script.cursor >= len(self.script.steps):
            raise ScriptExhausted(f"script ended before stimulus {stimulus[:80]!r}")
        step = self.script.steps[self.script.cursor]
        if step.expect and step.expect not in stimulus:
            raise ScriptMismatch(step.expect, stimulus)
        self.script.cursor += 1
        return step.reply, _proxy_usage(stimulus, step.reply)

    def planner_initial(self, prompt: str) -> tuple[str, BackendUsage]:
        return self._next(prompt)

    def planner_step(self, feedback: str) -> tuple[str, BackendUsage]:
        return self._next(feedback)


# --- rule-based planner with scene ground truth ---


def oracle_plan(task: TaskSpec, scene: SceneMap) -> Plan:
    """Perfect-knowledge plan for a structured task (see OraclePlanner)."""
    return OraclePlanner(scene, task)._build_plan()


class OraclePlanner:
    """Deterministic planner that reads the live scene as ground truth.

    The initial plan follows the goal order; when feedback reports a missing
    object the planner redirects to the object's true site, and when a grasp
    is out of reach it issues a coordinate navigation to the correct table
    side.
    """

    def __init__(self, scene: SceneMap, task: TaskSpec):
        self.scene = scene
        self.task = task
        self.moves: list[Move] = []
        self.mi = 0
        self.stage = "nav_src"  # nav_src | pick | nav_dst | place | done
        self.last_call: SkillCall | None = None

    # -- planning --

    def _goals(self):
        return self.task.goals or parse_instruction(self.task.instruction)

    def _build_plan(self) -> Plan:
        goals = self._goals()
        if not goals:
            raise ImpossibleTask(f"no actionable goals in {self.task.instruction!r}")
        self.moves = resolve_goal_moves(self.scene, goals)

        subtasks: list[Subtask] = []
        reasons: list[str] = []
        virtual: dict[int, str] = {}
        n = 1
        for move in self.moves:
            if move.object_id is None:
                sentence = f"{n}. Go to the {move.dest}."
                subtasks.append(Subtask(sentence, (SkillCall("navigate", (move.dest,)),)))
                n += 1
                continue
            src = virtual.get(move.object_id) or self._true_site(move.object_id) or move.dest
            reasons.append(f"the object [{move.name}] is at the [{src}]")
            steps = (
                (f"{n}. Go to the {src} and find the {move.name}.", SkillCall("navigate", (src,))),
                (f"{n + 1}. Pick up the {move.name}", SkillCall("pick", (move.name,))),
                (f"{n + 2}. Go to the {move.dest}", SkillCall("navigate", (move.dest,))),
                (f"{n + 3}. Place the {move.name} on the {move.dest}.", SkillCall("place")),
            )
            for sentence, call in steps:
                subtasks.append(Subtask(sentence, (call,)))
            virtual[move.object_id] = move.dest
            n += 4
        first = subtasks[0].calls[0]
        return Plan("; ".join(reasons), tuple(subtasks), first)

    def planner_initial(self, prompt: str) -> tuple[str, BackendUsage]:
        plan = self._build_plan()
        self.mi = 0
        self.stage = "nav_src" if self.moves[0].object_id is not None else "nav_goal"
        self.last_call = plan.first_action
        reply = json.dumps(
            {
                "reasoning": plan.reasoning,
                "action_list": [st.desc for st in plan.subtasks],
                "first_action": plan.first_action.render(),
            },
            indent=1,
        )
        return reply, _proxy_usage(prompt, reply)

    # -- stepping --

    def _true_site(self, object_id: int) -> str | None:
        try:
            obj = self.scene.object_by_id(object_id)
        except KeyError:
            return None
        return obj.site

    def _move(self) -> Move:
        return self.moves[self.mi]

    def _issue(self, call: SkillCall, reason: str) -> StepReply:
        self.last_call = call
        return StepReply(reason, call)

    def _advance(self) -> StepReply:
        self.mi += 1
        if self.mi >= len(self.moves):
            return self._issue(SkillCall("done"), "the task is now complete")
        move = self._move()
        if move.object_id is None:
            self.stage = "nav_goal"
            return self._issue(SkillCall("navigate", (move.dest,)), f"next, go to the [{move.dest}]")
        self.stage = "nav_src"
        return self._start_move(move)

    def _start_move(self, move: Move) -> StepReply:
        site = self._true_site(move.object_id)  # type: ignore[arg-type]
        if site is None:
            return self._skip_move(move)
        return self._issue(
            SkillCall("navigate", (site,)),
            f"next, go to the [{site}] to pick up the [{move.name}]",
        )

    def _skip_move(self, move: Move) -> StepReply:
        reply = self._advance()
        return StepReply(f"the [{move.name}] is gone; " + reply.reasoning, reply.next_action)

    def _redirect(self, move: Move) -> StepReply:
        site = self._true_site(move.object_id)  # type: ignore[arg-type]
        if site is None:
            return self._skip_move(move)
        self.stage = "nav_src"
        return self._issue(
            SkillCall("navigate", (site,)),
            f"there is no [{move.name}] here; the most possible table is the [{site}]",
        )

    def _side_fix(self, move: Move) -> StepReply:
        obj = self.scene.object_by_id(move.object_id)  # type: ignore[arg-type]
        site = self.scene.site_by_name(obj.site or "")
        cell, _facing = site.approach_points[obj.side or "close"]
        res = self.scene.grid.resolution
        self.stage = "nav_fix"
        return self._issue(
            SkillCall("navigate", (f"{cell[0] * res:.1f}", f"{cell[1] * res:.1f}")),
            f"the [{move.name}] is out of reach; move to the {obj.side} side",
        )

    def step(self, feedback_text: str) -> StepReply:
        event = parse_feedback(feedback_text)
        if self.mi >= len(self.moves):
            return self._issue(SkillCall("done"), "the task is now complete")
        move = self._move()

        if event.kind == "nav_fail":
            if event.detail == "navigation fault" and self.last_call is not None:
                return self._issue(self.last_call, "navigation failed; try the same goal again")
            if self.last_call is not None:
                return self._issue(self.last_call, "navigation failed; retrying")
            return self._advance()

        if event.kind == "nav_success":
            if self.stage == "nav_goal":
                return self._advance()
            if self.stage in ("nav_src", "nav_fix"):
                observed = {resolve_object_name(n) for n in (event.observation or ())}
                if resolve_object_name(move.name) in observed:
                    self.stage = "pick"
                    return self._issue(
                        SkillCall("pick", (move.name,)), f"the [{move.name}] is on the table; pick it up"
                    )
                return self._redirect(move)
            if self.stage == "nav_dst":
                self.stage = "place"
                return self._issue(SkillCall("place"), f"place the [{move.name}] on the [{move.dest}]")
            return self._redirect(move)

        if event.kind == "pick_success":
            self.stage = "nav_dst"
            return self._issue(
                SkillCall("navigate", (move.dest,)), f"now place the [{move.name}] on the [{move.dest}]"
            )

        if event.kind == "pick_fail":
            if event.detail == "out of arm range":
                return self._side_fix(move)
            if event.detail == "grasp slipped":
                self.stage = "pick"
                return self._issue(SkillCall("pick", (move.name,)), "the grasp slipped; try again")
            return self._redirect(move)

        if event.kind == "place_success":
            return self._advance()

        # place_fail: restart this move from the object's true location
        return self._redirect(move)

    def planner_step(self, feedback: str) -> tuple[str, BackendUsage]:
        reply = encode_step_reply(self.step(feedback))
        return reply, _proxy_usage(feedback, reply)


def oracle_step(planner: OraclePlanner, feedback: str) -> StepReply:
    return planner.step(feedback)


# --- VLM backends ---


class SimulatedVlm:
    """Answers side and description queries from the scene's ground truth."""

    def __init__(self, env: SimEnv):
        self.env = env

    def _visible(self, object_name: str):
        site = self.env.faced_site()
        if site is None:
            raise ObjectNotVisible(object_name)
        target = resolve_object_name(object_name)
        for obj in self.env.scene.objects_at(site.name):
            if resolve_object_name(obj.name) == target:
                return obj
        raise ObjectNotVisible(object_name)

    def table_side(self, object_name: str) -> tuple[int, str, str]:
        obj = self._visible(object_name)
        code = self.env.table_side(object_name)
        return code, obj.attributes.get("color", ""), obj.attributes.get("shape", "")

    def describe(self, object_name: str) -> str:
        obj = self._visible(object_name)
        code = self.env.table_side(object_name)
        color = obj.attributes.get("color", "")
        shape = obj.attributes.get("shape", "")
        return f"a {color} {shape} {obj.name} on the {CODE_SIDES[code]} side"


# --- HTTP chat-completions backend ---

RETRY_SLEEPS = (1.0, 2.0, 4.0)
REQUEST_TIMEOUT = 30.0


class HttpChat:
    """Minimal chat-completions client with bounded retries.

    ``post_fn(url, headers, body, timeout) -> (status, text)`` is injectable
    for tests; the raw request/response pair goes to ``wire_sink`` before any
    parsing happens.
    """

    def __init__(self, base_url: str, api_key: str = "", model: str = "",
                 max_tokens: int = 512, temperature: float = 0.0,
                 post_fn=None, sleep_fn=time.sleep, wire_sink=None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.post_fn = post_fn or self._requests_post
        self.sleep_fn = sleep_fn
        self.wire_sink = wire_sink

    @staticmethod
    def _requests_post(url: str, headers: dict, body: dict, timeout: float) -> tuple[int, str]:
        resp = requests.post(url, headers=headers, json=body, timeout=timeout)
        return resp.status_code, resp.text

    def complete(self, messages: list[dict]) -> tuple[str, BackendUsage]:
        request = ChatRequest(messages, self.model, self.max_tokens, self.temperature)
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = request.body()

        last_error: Exception | None = None
        for attempt in range(1 + len(RETRY_SLEEPS)):
            started = time.monotonic()
            try:
                status, text = self.post_fn(url, headers, body, REQUEST_TIMEOUT)
            except Exception as exc:  # connection refused, timeout, DNS
                last_error = exc
                if attempt < len(RETRY_SLEEPS):
                    self.sleep_fn(RETRY_SLEEPS[attempt])
                continue
            elapsed = time.monotonic() - started
            if self.wire_sink is not None:
                self.wire_sink({"request": body, "status": status, "response": text})
            if status >= 500:
                last_error = BadStatus(status, text)
                if attempt < len(RETRY_SLEEPS):
                    self.sleep_fn(RETRY_SLEEPS[attempt])
                continue
            if status != 200:
                raise BadStatus(status, text)
            doc = json.loads(text)
            reply = doc["choices"][0]["message"]["content"]
            usage_doc = doc.get("usage") or {}
            prompt_text = "".join(m["content"] for m in messages)
            usage = BackendUsage(
                int(usage_doc.get("prompt_tokens", approx_tokens(prompt_text))),
                int(usage_doc.get("completion_tokens", approx_tokens(reply))),
                elapsed,
            )
            return reply, usage
        raise Transport(f"backend unreachable after {1 + len(RETRY_SLEEPS)} attempts: {last_error}")


class HttpPlanner:
    """Chat backend that resends the whole conversation on every step."""

    def __init__(self, chat: HttpChat):
        self.chat = chat
        self.messages: list[dict] = []

    def planner_initial(self, prompt: str) -> tuple[str, BackendUsage]:
        self.messages = [{"role": "user", "content": prompt}]
        return self._complete()

    def planner_step(self, feedback: str) -> tuple[str, BackendUsage]:
        self.messages.append({"role": "user", "content": feedback})
        return self._complete()

    def _complete(self) -> tuple[str, BackendUsage]:
        reply, usage = self.chat.complete(list(self.messages))
        self.messages.append({"role": "assistant", "content": reply})
        return reply, usage


class HttpVlm:
    """Sends the side/description prompts to a chat endpoint; each query is a
    fresh single-turn conversation."""

    def __init__(self, chat: HttpChat):
        self.chat = chat

    def table_side(self, object_name: str) -> tuple[int, str, str]:
        prompt = VLM_SIDE_PROMPT.format(name=object_name)
        reply, _usage = self.chat.complete([{"role": "user", "content": prompt}])
        try:
            doc = loads_lenient(reply)
            side = int(doc.get("side", doc.get("number", doc.get("answer"))))
            if side not in (1, 2, 3, 4):
                raise ValueError(side)
            return side, str(doc.get("color", "")), str(doc.get("shape", ""))
        except Exception as exc:
            raise ParseFail(f"unusable side reply {reply[:120]!r}: {exc}")

    def describe(self, object_name: str) -> str:
        prompt = VLM_DESCRIBE_PROMPT.format(name=object_name)
        reply, _usage = self.chat.complete([{"role": "user", "content": prompt}])
        return reply.strip()
