"""Skill instruction set: the catalog, precondition checks, and dispatch."""

from __future__ import annotations

from dataclasses import dataclass

from .codec import SkillCall
from .errors import PreconditionBypassed, UnknownSite
from .scene import SceneMap
from .simenv import SimEnv, SkillOutcome


@dataclass(frozen=True)
class SkillSpec:
    name: str
    param_schema: str
    returns: str


_CATALOG = (
    SkillSpec("navigate", "site name | x: number, y: number", "result, observation, traveled"),
    SkillSpec("pick", "name of target object", "result"),
    SkillSpec("place", "none (a target name is accepted and discarded)", "result"),
    SkillSpec("done", "none", "result; terminal, no side effects"),
)


def skill_catalog() -> list[SkillSpec]:
    return list(_CATALOG)


@dataclass(frozen=True)
class PreconditionViolation:
    code: str
    detail: str


def check_preconditions(call: SkillCall, scene: SceneMap) -> PreconditionViolation | None:
    """Return a violation record, or None when the call may be dispatched."""
    if call.skill == "pick":
        if scene.robot.held is not None:
            held = scene.object_by_id(scene.robot.held)
            return PreconditionViolation("HoldOne", f"already holding {held.name}")
    elif call.skill == "place":
        if scene.robot.held is None:
            return PreconditionViolation("NothingHeld", "nothing is held")
    elif call.skill == "navigate":
        if len(call.params) == 1:
            try:
                scene.site_by_name(call.params[0])
            except UnknownSite:
                return PreconditionViolation("UnknownSite", f"unknown site {call.params[0]}")
    return None


def dispatch(call: SkillCall, env: SimEnv, descriptor_hint: str | None = None) -> SkillOutcome:
    """Route a precondition-checked call into the environment."""
    violation = check_preconditions(call, env.scene)
    if violation is not None:
        raise PreconditionBypassed(f"{call.skill}: {violation.code} ({violation.detail})")
    if call.skill == "navigate":
        if len(call.params) == 2:
            return env.exec_navigate((float(call.params[0]), float(call.params[1])))
        return env.exec_navigate(call.params[0])
    if call.skill == "pick":
        return env.exec_pick(call.params[0], descriptor_hint)
    if call.skill == "place":
        return env.exec_place()
    return env.exec_done()
