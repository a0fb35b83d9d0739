from __future__ import annotations

import pytest

from conftest import assert_world_sound
from wareloop.codec import SkillCall
from wareloop.errors import PreconditionBypassed
from wareloop.scene import encode_scene
from wareloop.skills import check_preconditions, dispatch, skill_catalog


def test_catalog_has_exactly_four_skills():
    names = [spec.name for spec in skill_catalog()]
    assert names == ["navigate", "pick", "place", "done"]


def test_navigate_spec_allows_site_or_coordinates():
    spec = next(s for s in skill_catalog() if s.name == "navigate")
    assert "site" in spec.param_schema and "number" in spec.param_schema


def test_place_spec_requires_no_params():
    spec = next(s for s in skill_catalog() if s.name == "place")
    assert spec.param_schema.startswith("none")


def test_pick_while_holding_is_hold_one(env):
    env.exec_navigate("fruit table", side="close")
    env.exec_pick("apple")
    violation = check_preconditions(SkillCall("pick", ("banana",)), env.scene)
    assert violation is not None and violation.code == "HoldOne"


def test_place_with_empty_gripper_is_nothing_held(scene):
    violation = check_preconditions(SkillCall("place"), scene)
    assert violation is not None and violation.code == "NothingHeld"


def test_navigate_unknown_site_precondition(scene):
    violation = check_preconditions(SkillCall("navigate", ("ghost table",)), scene)
    assert violation is not None and violation.code == "UnknownSite"


def test_navigate_known_site_ok(scene):
    assert check_preconditions(SkillCall("navigate", ("fruit table",)), scene) is None


def test_done_always_ok(scene):
    assert check_preconditions(SkillCall("done"), scene) is None


def test_scene_unchanged_by_precondition_check(scene):
    before = encode_scene(scene)
    check_preconditions(SkillCall("place"), scene)
    check_preconditions(SkillCall("navigate", ("nowhere",)), scene)
    assert encode_scene(scene) == before


def test_dispatch_navigate(env):
    outcome = dispatch(SkillCall("navigate", ("fruit table",)), env)
    assert outcome.ok and outcome.traveled > 0
    assert outcome.observation == [o.name for o in env.scene.objects_at("fruit table")]
    assert_world_sound(env, expected_objects=30)


def test_dispatch_navigate_coordinates(env):
    res = env.scene.grid.resolution
    x, y = env.scene.robot.cell
    outcome = dispatch(SkillCall("navigate", (f"{x * res}", f"{y * res}")), env)
    assert outcome.ok and outcome.traveled == 0.0


def test_dispatch_pick_and_place(env):
    dispatch(SkillCall("navigate", ("fruit table",)), env)
    env.exec_navigate("fruit table", side="close")
    outcome = dispatch(SkillCall("pick", ("apple",)), env)
    assert outcome.ok
    dispatch(SkillCall("navigate", ("shipping table",)), env)
    outcome = dispatch(SkillCall("place"), env)
    assert outcome.ok
    assert env.scene.object_by_id(1).site == "shipping table"
    assert_world_sound(env, expected_objects=30)


def test_dispatch_done_is_idempotent_noop(env):
    before = encode_scene(env.scene)
    log_len = len(env.event_log)
    for _ in range(3):
        outcome = dispatch(SkillCall("done"), env)
        assert outcome.ok
    assert encode_scene(env.scene) == before
    assert len(env.event_log) == log_len


def test_dispatch_bypassing_preconditions_raises(env):
    with pytest.raises(PreconditionBypassed):
        dispatch(SkillCall("place"), env)
    env.exec_navigate("fruit table", side="close")
    env.exec_pick("apple")
    with pytest.raises(PreconditionBypassed):
        dispatch(SkillCall("pick", ("banana",)), env)


def test_dispatch_preserves_invariants_across_many_calls(env):
    sequence = [
        SkillCall("navigate", ("fruit table",)),
        SkillCall("pick", ("apple",)),
        SkillCall("navigate", ("drink table",)),
        SkillCall("place"),
        SkillCall("navigate", ("toy rack",)),
        SkillCall("pick", ("shark toy",)),
        SkillCall("place"),
        SkillCall("done"),
    ]
    for call in sequence:
        if check_preconditions(call, env.scene) is None:
            dispatch(call, env)
        assert_world_sound(env, expected_objects=30)
