"""The closed loop: prompt, plan, execute one skill, feed back, repeat.

Each episode owns its environment, memory store, and planner backend.  A
turn executes exactly one pending skill, composes the feedback line for its
outcome, and obtains the next action from the planner (or, with feedback
disabled, marches blindly through the canonical plan).  Transient injected
faults are retried in place without consulting the planner; everything else
is the planner's problem.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .codec import (
    DONE,
    FeedbackEvent,
    Plan,
    SkillCall,
    parse_initial_plan,
    parse_step_reply,
    render_feedback,
    render_initial_prompt,
)
from .errors import (
    BackendError,
    CodecError,
    PlannerProtocolError,
    Unreachable,
    UnknownSite,
)
from .gateway import BackendUsage, SimulatedVlm
from .memory import MemoryStores, memory_hints, stm_fresh_unit, stm_upsert
from .scene import copy_scene, resolve_object_name
from .simenv import FaultModel, SimEnv, SkillOutcome
from .skills import check_preconditions, dispatch
from .suites import TaskSpec, check_goals, parse_instruction, resolve_perturbations


@dataclass
class EpisodePolicy:
    max_steps: int = 40
    max_retries_per_subgoal: int = 3
    feedback_enabled: bool = True
    memory_enabled: bool = True
    side_refinement_enabled: bool = True

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.max_retries_per_subgoal < 0:
            raise ValueError("max_retries_per_subgoal must be >= 0")


_COUNTER_KEYS = (
    "llm_calls",
    "vlm_side_calls",
    "vlm_describe_calls",
    "navigate_calls",
    "pick_calls",
    "place_calls",
    "replans",
    "retries",
)


@dataclass
class EpisodeTranscript:
    task: str
    policy: dict
    turns: list[dict] = field(default_factory=list)
    verdict: str = ""
    failure_reason: str | None = None
    metrics_samples: list[tuple[float, float, float]] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=lambda: {k: 0 for k in _COUNTER_KEYS})
    goal_checked: bool = False
    plan_goal_consistent: bool | None = None

    @property
    def success(self) -> bool:
        return self.verdict == "success"

    def summary(self) -> dict:
        return {
            "task": self.task,
            "policy": self.policy,
            "verdict": self.verdict,
            "reason": self.failure_reason,
            "counters": self.counters,
            "samples": [list(s) for s in self.metrics_samples],
            "goal_checked": self.goal_checked,
            "plan_goal_consistent": self.plan_goal_consistent,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(t, ensure_ascii=False) for t in self.turns]
        lines.append(json.dumps(self.summary(), ensure_ascii=False))
        return "\n".join(lines) + "\n"


def transcript_from_jsonl(text: str) -> EpisodeTranscript:
    """Rebuild a transcript from its line-delimited form (last line = summary)."""
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records:
        raise ValueError("empty transcript")
    summary = records[-1]
    transcript = EpisodeTranscript(summary["task"], summary.get("policy", {}))
    transcript.turns = records[:-1]
    transcript.verdict = summary["verdict"]
    transcript.failure_reason = summary.get("reason")
    transcript.metrics_samples = [tuple(s) for s in summary.get("samples", [])]
    transcript.counters = {k: int(v) for k, v in summary.get("counters", {}).items()}
    transcript.goal_checked = bool(summary.get("goal_checked", False))
    transcript.plan_goal_consistent = summary.get("plan_goal_consistent")
    return transcript


def _usage_dict(usage: BackendUsage | None) -> dict | None:
    return usage.to_dict() if usage is not None else None


class _Halt(Exception):
    """Internal control flow: stop the episode with a failure verdict."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class _Episode:
    def __init__(self, env: SimEnv, planner, vlm, stores: MemoryStores | None,
                 policy: EpisodePolicy, task: TaskSpec, on_turn=None):
        self.env = env
        self.planner = planner
        self.vlm = vlm
        self.stores = stores
        self.policy = policy
        self.task = task
        self.on_turn = on_turn
        self.transcript = EpisodeTranscript(task.instruction, asdict(policy))
        self.goals = task.goals or parse_instruction(task.instruction)
        self.pending: SkillCall = DONE
        self.plan: Plan | None = None
        self.blind_queue: list[SkillCall] = []
        self.carried_description: str | None = None
        self.last_fail_sig: str | None = None
        self.fail_streak = 0
        self.step_index = 0

    # -- helpers --

    def _count(self, key: str, n: int = 1) -> None:
        self.transcript.counters[key] += n

    def _record(self, turn: dict) -> None:
        turn["t"] = len(self.transcript.turns)
        self.transcript.turns.append(turn)
        if self.on_turn is not None:
            self.on_turn(self.env, self.transcript)

    def _planner_call(self, stimulus: str, initial: bool) -> tuple[str, BackendUsage]:
        self._count("llm_calls")
        if initial:
            return self.planner.planner_initial(stimulus)
        return self.planner.planner_step(stimulus)

    def _parse_with_reprompts(self, stimulus: str, reply: str, usage: BackendUsage,
                              parser, kind: str):
        for attempt in range(3):
            try:
                return parser(reply), reply, usage
            except CodecError as exc:
                self._record({
                    "kind": "reprompt" if attempt else kind,
                    "stimulus": stimulus,
                    "reply": reply,
                    "usage": _usage_dict(usage),
                    "error": f"{exc.__class__.__name__}: {exc}",
                })
                if attempt == 2:
                    raise PlannerProtocolError(f"unparseable reply after 2 reprompts: {exc}")
                stimulus = (
                    f"#feedback: your reply could not be parsed "
                    f"({exc.__class__.__name__}); answer again with valid JSON"
                )
                try:
                    reply, usage = self._planner_call(stimulus, initial=False)
                except BackendError as exc2:
                    raise _Halt(f"BackendError: {exc2}")
        raise AssertionError("unreachable")

    # -- phases --

    def obtain_plan(self) -> None:
        hints: list[str] = []
        if self.policy.memory_enabled and self.stores is not None:
            hints = memory_hints(self.stores.short_term, self.stores.long_term,
                                 self.task.instruction)
        prompt = render_initial_prompt(self.task.instruction, self.env.scene, hints)
        try:
            reply, usage = self._planner_call(prompt, initial=True)
        except BackendError as exc:
            self._record({"kind": "plan", "stimulus": prompt, "reply": None,
                          "usage": None, "error": str(exc)})
            raise _Halt(f"BackendError: {exc}")
        plan, reply, usage = self._parse_with_reprompts(prompt, reply, usage,
                                                        parse_initial_plan, "plan")
        self.plan = plan
        self.pending = plan.first_action
        self.blind_queue = plan.flat_calls()
        if self.blind_queue and self.blind_queue[0] == plan.first_action:
            self.blind_queue = self.blind_queue[1:]
        self._record({
            "kind": "plan",
            "stimulus": prompt,
            "reply": reply,
            "usage": _usage_dict(usage),
            "subtasks": len(plan.subtasks),
            "action": plan.first_action.to_dict(),
        })

    def _refine_side(self, call: SkillCall, turn: dict) -> SkillOutcome | None:
        """Side refinement before a pick; returns a synthesized failure outcome
        when the target is not visible at all."""
        target = call.params[0]
        self._count("vlm_side_calls")
        turn["vlm_side"] += 1
        try:
            code, _color, _shape = self.vlm.table_side(target)
        except Exception:
            return SkillOutcome(False, "target not found")
        if code == 4:
            return None
        site = self.env.faced_site()
        if site is None:
            return SkillOutcome(False, "target not found")
        tag = self.env.approach_for_relative_code(site, code)
        nav = self.env.exec_navigate(site.name, side=tag)
        self._count("navigate_calls")
        self.transcript.metrics_samples.append(
            (1.0 if nav.ok else 0.0, nav.optimal or 0.0, nav.traveled or 0.0))
        turn["refined_to_side"] = tag
        return None

    def _descriptor_hint(self, call: SkillCall, turn: dict) -> str | None:
        target = call.params[0]
        site = self.env.faced_site()
        if self.policy.memory_enabled and self.stores is not None and site is not None:
            unit = stm_fresh_unit(self.stores.short_term, resolve_object_name(target), site.name)
            if unit is not None:
                turn["hint_source"] = "memory"
                return unit.img_summary
        if self.vlm is None:
            return None
        self._count("vlm_describe_calls")
        turn["vlm_describe"] += 1
        try:
            hint = self.vlm.describe(target)
        except Exception:
            return None
        turn["hint_source"] = "vlm"
        return hint

    def _execute(self, call: SkillCall, turn: dict) -> SkillOutcome:
        violation = check_preconditions(call, self.env.scene)
        if violation is not None:
            turn["violation"] = violation.code
            return SkillOutcome(False, violation.detail)

        hint: str | None = None
        pre_sides: dict[int, str] = {}
        if call.skill == "pick":
            if self.policy.side_refinement_enabled and self.vlm is not None:
                synthesized = self._refine_side(call, turn)
                if synthesized is not None:
                    return synthesized
            hint = self._descriptor_hint(call, turn)
            site = self.env.faced_site()
            if site is not None:
                pre_sides = {o.object_id: o.side or "close"
                             for o in self.env.scene.objects_at(site.name)}

        held_before = self.env.scene.robot.held
        try:
            outcome = dispatch(call, self.env, descriptor_hint=hint)
        except Unreachable as exc:
            return SkillOutcome(False, f"unreachable: {exc}")
        except UnknownSite as exc:
            return SkillOutcome(False, f"unknown site {exc}")

        if call.skill == "navigate":
            self._count("navigate_calls")
            self.transcript.metrics_samples.append(
                (1.0 if outcome.ok else 0.0, outcome.optimal or 0.0, outcome.traveled or 0.0))
        elif call.skill == "pick":
            self._count("pick_calls")
            if outcome.ok:
                self._after_pick(hint, pre_sides)
        elif call.skill == "place":
            self._count("place_calls")
            if outcome.ok:
                self._after_place(held_before)
        return outcome

    def _after_pick(self, hint: str | None, pre_sides: dict[int, str]) -> None:
        held_id = self.env.scene.robot.held
        if held_id is None:
            return
        obj = self.env.scene.object_by_id(held_id)
        description = hint or f"a {obj.attributes.get('color', '')} {obj.attributes.get('shape', '')} {obj.name}".strip()
        self.carried_description = description
        site = self.env.faced_site()
        if self.policy.memory_enabled and self.stores is not None and site is not None:
            stm_upsert(self.stores.short_term, obj.name,
                       (site.name, pre_sides.get(held_id, "close")),
                       description, self.step_index)

    def _after_place(self, held_before: int | None) -> None:
        if held_before is None:
            return
        obj = self.env.scene.object_by_id(held_before)
        if self.policy.memory_enabled and self.stores is not None and obj.site is not None:
            description = self.carried_description or f"a {obj.name}"
            stm_upsert(self.stores.short_term, obj.name, (obj.site, obj.side or "close"),
                       description, self.step_index)
        self.carried_description = None

    @staticmethod
    def _event_for(call: SkillCall, outcome: SkillOutcome) -> FeedbackEvent:
        family = {"navigate": "nav", "pick": "pick", "place": "place"}[call.skill]
        if outcome.ok:
            if family == "nav":
                return FeedbackEvent("nav_success", observation=tuple(outcome.observation or ()))
            return FeedbackEvent(f"{family}_success")
        return FeedbackEvent(f"{family}_fail", detail=outcome.detail or "failed")

    def _recovery(self, call: SkillCall, outcome: SkillOutcome) -> str:
        """Decide what to do with a finished skill: proceed, retry, or abort."""
        if outcome.ok:
            self.fail_streak = 0
            self.last_fail_sig = None
            return "proceed"
        sig = f"{call.skill}({','.join(call.params)})"
        self.fail_streak = self.fail_streak + 1 if sig == self.last_fail_sig else 1
        self.last_fail_sig = sig
        if self.fail_streak >= self.policy.max_retries_per_subgoal + 1:
            return "abort"
        if outcome.transient:
            return "retry"
        return "proceed"

    def _next_from_feedback(self, event: FeedbackEvent, turn: dict) -> None:
        feedback = render_feedback(event)
        turn["feedback"] = feedback
        if not event.kind.endswith("success"):
            self._count("replans")
        try:
            reply, usage = self._planner_call(feedback, initial=False)
        except BackendError as exc:
            turn["error"] = str(exc)
            self._record(turn)
            raise _Halt(f"BackendError: {exc}")
        try:
            step, reply, usage = self._parse_with_reprompts(feedback, reply, usage,
                                                            parse_step_reply, "step")
        except (PlannerProtocolError, _Halt):
            self._record(turn)
            raise
        turn["reply"] = reply
        turn["usage"] = _usage_dict(usage)
        self.pending = step.next_action

    def _next_blind(self, turn: dict) -> None:
        turn["feedback"] = None
        self.pending = self.blind_queue.pop(0) if self.blind_queue else DONE

    def run_turn(self) -> None:
        call = self.pending
        mark = len(self.env.event_log)
        turn: dict = {
            "kind": "exec",
            "action": call.to_dict(),
            "vlm_side": 0,
            "vlm_describe": 0,
        }
        outcome = self._execute(call, turn)
        turn["outcome"] = outcome.to_dict()
        turn["events"] = self.env.events_since(mark)
        decision = self._recovery(call, outcome)
        if decision == "abort":
            turn["decision"] = "abort"
            self._record(turn)
            raise _Halt("RetryBudget")
        if decision == "retry":
            turn["decision"] = "retry"
            self._count("retries")
            self._record(turn)
            return  # pending unchanged: same skill runs again
        event = self._event_for(call, outcome)
        if self.policy.feedback_enabled:
            turn["decision"] = "feedback"
            self._next_from_feedback(event, turn)
        else:
            turn["decision"] = "blind"
            turn["feedback_suppressed"] = render_feedback(event)
            self._next_blind(turn)
        self._record(turn)

    def finish(self, initial_scene) -> None:
        if self.goals:
            self.transcript.goal_checked = True
            ok = check_goals(initial_scene, self.env.scene, self.goals)
            if ok:
                self.transcript.verdict = "success"
            else:
                self.transcript.verdict = "failure"
                self.transcript.failure_reason = "GoalNotSatisfied"
        else:
            # No goal spec: the planner's own "done" is trusted and flagged.
            self.transcript.goal_checked = False
            self.transcript.verdict = "success"


def _plan_goal_consistent(initial_scene, plan: Plan, goals, arm_range: float) -> bool:
    """Blind-execute the canonical plan on a pristine copy of the scene and
    check the goals; this is what the plan alone would have achieved."""
    env = SimEnv(copy_scene(initial_scene), rng_seed=0, arm_range=arm_range, fault_model=FaultModel())
    vlm = SimulatedVlm(env)
    for call in plan.flat_calls():
        if call.skill == "done":
            break
        if check_preconditions(call, env.scene) is not None:
            continue
        try:
            if call.skill == "pick":
                code, _c, _s = vlm.table_side(call.params[0])
                site = env.faced_site()
                if code != 4 and site is not None:
                    env.exec_navigate(site.name, side=env.approach_for_relative_code(site, code))
            dispatch(call, env, descriptor_hint=None)
        except Exception:
            continue
    return check_goals(initial_scene, env.scene, goals)


def run_episode(env: SimEnv, planner, vlm, stores: MemoryStores | None,
                policy: EpisodePolicy, task: TaskSpec | str,
                on_turn=None, check_ideal: bool = True) -> EpisodeTranscript:
    """Run one instruction to completion; failures become verdicts, not raises."""
    if isinstance(task, str):
        task = TaskSpec(instruction=task)
    if task.perturbations:
        resolved = resolve_perturbations(env.scene, task.perturbations)
        # Trigger steps are episode-relative; the env clock may already be
        # running when episodes share one environment (REPL sessions).
        env.schedule_perturbations([(env.t + step, event) for step, event in resolved])
    episode = _Episode(env, planner, vlm, stores, policy, task, on_turn)
    initial_scene = copy_scene(env.scene)
    transcript = episode.transcript

    try:
        episode.obtain_plan()
        finished = False
        for _ in range(policy.max_steps):
            if episode.pending.skill == "done":
                env.exec_done()
                episode._record({"kind": "exec", "action": DONE.to_dict(),
                                 "vlm_side": 0, "vlm_describe": 0,
                                 "outcome": {"ok": True, "detail": "done"},
                                 "decision": "done", "events": []})
                episode.finish(initial_scene)
                finished = True
                break
            episode.step_index += 1
            episode.run_turn()
        if not finished:
            transcript.verdict = "failure"
            transcript.failure_reason = "StepBudgetExhausted"
    except _Halt as halt:
        transcript.verdict = "failure"
        transcript.failure_reason = halt.reason
    except PlannerProtocolError as exc:
        transcript.verdict = "failure"
        transcript.failure_reason = f"PlannerProtocolError: {exc}"

    if check_ideal and episode.goals and episode.plan is not None:
        transcript.plan_goal_consistent = _plan_goal_consistent(
            initial_scene, episode.plan, episode.goals, env.arm_range)
    elif episode.goals:
        transcript.plan_goal_consistent = False if episode.plan is None else None
    return transcript


# Spec-level aliases for the per-turn machinery, exposed for direct use.
def step_once(episode: _Episode) -> None:
    episode.run_turn()


def recovery_policy(episode: _Episode, call: SkillCall, outcome: SkillOutcome) -> str:
    return episode._recovery(call, outcome)
