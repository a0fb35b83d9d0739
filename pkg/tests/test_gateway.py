from __future__ import annotations

import json
import random

import pytest

from wareloop.codec import SkillCall, parse_feedback, parse_initial_plan, parse_step_reply
from wareloop.errors import (
    BadStatus,
    ImpossibleTask,
    ObjectNotVisible,
    ParseFail,
    ScriptExhausted,
    ScriptMismatch,
    Transport,
)
from wareloop.gateway import (
    HttpChat,
    HttpPlanner,
    HttpVlm,
    OraclePlanner,
    Script,
    ScriptStep,
    ScriptedPlanner,
    SimulatedVlm,
    oracle_plan,
)
from wareloop.scene import canonical_scene
from wareloop.simenv import SimEnv
from wareloop.suites import GoalSpec, TaskSpec


# --- scripted backend ---


def two_step_script() -> Script:
    return Script([
        ScriptStep("#instruction", '{"action_list": ["1. Go to the fruit table"], '
                                   '"first_action": "go_to(fruit table)"}'),
        ScriptStep("navigation success", '{"next_action": "pick_up(lemon)"}'),
    ])


def test_scripted_replay_and_usage_proxy():
    planner = ScriptedPlanner(two_step_script())
    prompt = "x" * 400 + " #instruction: find lemon"
    reply, usage = planner.planner_initial(prompt)
    assert "go_to(fruit table)" in reply
    assert usage.prompt_tokens == len(prompt) // 4
    assert usage.completion_tokens == len(reply) // 4
    assert usage.wall_time == 0.0


def test_scripted_mismatch_names_both():
    planner = ScriptedPlanner(two_step_script())
    with pytest.raises(ScriptMismatch) as err:
        planner.planner_initial("totally unexpected stimulus")
    assert "#instruction" in str(err.value)


def test_scripted_exhausted():
    planner = ScriptedPlanner(Script([]))
    with pytest.raises(ScriptExhausted):
        planner.planner_initial("#instruction: anything")


def test_scripted_determinism():
    a = ScriptedPlanner(two_step_script())
    b = ScriptedPlanner(two_step_script())
    stim = "#instruction: find lemon"
    assert a.planner_initial(stim) == b.planner_initial(stim)
    fb = "#feedback: navigation success, there are lemon on the table"
    assert a.planner_step(fb) == b.planner_step(fb)


# --- oracle backend ---


def gather_task() -> TaskSpec:
    return TaskSpec(
        "gather a bottle of water, a toy duck and a persimmon to shipping table",
        [GoalSpec(select="bottle of water", dest="shipping table"),
         GoalSpec(select="toy duck", dest="shipping table"),
         GoalSpec(select="persimmon", dest="shipping table")],
    )


def test_oracle_plan_structure_for_gather_task():
    scene = canonical_scene(0)
    plan = oracle_plan(gather_task(), scene)
    assert len(plan.subtasks) == 12
    calls = plan.flat_calls()
    assert [c.skill for c in calls] == ["navigate", "pick", "navigate", "place"] * 3
    assert calls[0] == SkillCall("navigate", ("drink table",))
    assert plan.first_action == calls[0]


def test_oracle_plan_single_move():
    scene = canonical_scene(0)
    plan = oracle_plan(TaskSpec("x", [GoalSpec(select="apple", dest="storage rack")]), scene)
    assert [c.skill for c in plan.flat_calls()] == ["navigate", "pick", "navigate", "place"]


def test_oracle_plan_reply_parses_through_codec():
    scene = canonical_scene(0)
    planner = OraclePlanner(scene, gather_task())
    reply, _usage = planner.planner_initial("#instruction: gather")
    plan = parse_initial_plan(reply)
    assert len(plan.subtasks) == 12
    assert plan.first_action == SkillCall("navigate", ("drink table",))


def test_oracle_impossible_task():
    scene = canonical_scene(0)
    with pytest.raises(ImpossibleTask):
        oracle_plan(TaskSpec("x", [GoalSpec(select="unicorn", dest="fruit table")]), scene)


def test_oracle_steps_through_happy_path():
    scene = canonical_scene(0)
    task = TaskSpec("x", [GoalSpec(select="apple", dest="storage rack")])
    planner = OraclePlanner(scene, task)
    planner.planner_initial("#instruction: x")
    reply = planner.step("#feedback: navigation success, there are apple and banana on the table")
    assert reply.next_action == SkillCall("pick", ("apple",))
    reply = planner.step("#feedback: pick up success")
    assert reply.next_action == SkillCall("navigate", ("storage rack",))
    reply = planner.step("#feedback: navigation success, there is nothing on the table")
    assert reply.next_action == SkillCall("place")
    reply = planner.step("#feedback: place success")
    assert reply.next_action == SkillCall("done")


def test_oracle_redirects_to_true_site_on_absent_object():
    scene = canonical_scene(0)
    task = TaskSpec("x", [GoalSpec(select="lemon", dest="shipping table")])
    planner = OraclePlanner(scene, task)
    planner.planner_initial("#instruction: x")
    # the lemon is not observed where we landed; ground truth says fruit table
    reply = planner.step("#feedback: navigation success, there are squirrel toy, "
                         "shark toy on the table")
    assert reply.next_action == SkillCall("navigate", ("fruit table",))


def test_oracle_redirect_after_pick_fail_tracks_perturbation():
    scene = canonical_scene(0)
    task = TaskSpec("x", [GoalSpec(select="lemon", dest="shipping table")])
    planner = OraclePlanner(scene, task)
    planner.planner_initial("#instruction: x")
    lemon = next(o for o in scene.objects if o.name == "lemon")
    lemon.site = "storage rack"  # moved behind the planner's back
    reply = planner.step("#feedback: pick up failed, target not found")
    assert reply.next_action == SkillCall("navigate", ("storage rack",))


def test_oracle_side_fix_uses_coordinates():
    scene = canonical_scene(0)
    task = TaskSpec("x", [GoalSpec(select="banana", dest="shipping table")])
    planner = OraclePlanner(scene, task)
    planner.planner_initial("#instruction: x")
    reply = planner.step("#feedback: pick up failed, out of arm range")
    assert reply.next_action.skill == "navigate"
    assert len(reply.next_action.params) == 2
    x, y = float(reply.next_action.params[0]), float(reply.next_action.params[1])
    site = scene.site_by_name("fruit table")
    banana = next(o for o in scene.objects if o.name == "banana")
    cell, _facing = site.approach_points[banana.side]
    assert (round(x / 0.1), round(y / 0.1)) == cell


def test_oracle_skips_vanished_object():
    scene = canonical_scene(0)
    task = TaskSpec("x", [GoalSpec(select="plum", dest="shipping table"),
                          GoalSpec(select="apple", dest="shipping table")])
    planner = OraclePlanner(scene, task)
    planner.planner_initial("#instruction: x")
    scene.objects = [o for o in scene.objects if o.name != "plum"]
    reply = planner.step("#feedback: pick up failed, target not found")
    # the plum is gone everywhere: move on to the apple
    assert reply.next_action == SkillCall("navigate", ("fruit table",))
    reply = planner.step("#feedback: navigation success, there are apple on the table")
    assert reply.next_action == SkillCall("pick", ("apple",))


def test_oracle_robot_at_goal():
    scene = canonical_scene(0)
    task = TaskSpec("Move to the fruit table.", [GoalSpec(robot_at="fruit table")])
    planner = OraclePlanner(scene, task)
    reply_text, _ = planner.planner_initial("#instruction: Move to the fruit table.")
    plan = parse_initial_plan(reply_text)
    assert plan.first_action == SkillCall("navigate", ("fruit table",))
    step = planner.step("#feedback: navigation success, there are apple on the table")
    assert step.next_action == SkillCall("done")


def test_oracle_replies_all_parse_as_step_replies():
    scene = canonical_scene(0)
    planner = OraclePlanner(scene, gather_task())
    planner.planner_initial("#instruction: gather")
    text, _usage = planner.planner_step(
        "#feedback: navigation success, there are bottle of water and pepsi can on the table")
    reply = parse_step_reply(text)
    assert reply.next_action == SkillCall("pick", ("bottle of water",))


# --- simulated VLM ---


def test_vlm_side_agrees_with_env_on_random_placements():
    rng = random.Random(12345)
    sides = ("close", "far", "left", "right")
    for trial in range(100):
        scene = canonical_scene(rng.randint(0, 3))
        env = SimEnv(scene, rng_seed=trial)
        vlm = SimulatedVlm(env)
        site_name = rng.choice(["fruit table", "drink table", "toy rack", "purchase table"])
        env.exec_navigate(site_name, side=rng.choice(sides))
        objects = env.scene.objects_at(site_name)
        target = rng.choice(objects)
        code, color, shape = vlm.table_side(target.name)
        assert code == env.table_side(target.name)
        assert color == target.attributes.get("color")
        assert shape == target.attributes.get("shape")


def test_vlm_describe_template_and_determinism(env):
    env.exec_navigate("fruit table", side="close")
    vlm = SimulatedVlm(env)
    text = vlm.describe("apple")
    assert text == "a red round apple on the close side"
    assert vlm.describe("apple") == text


def test_vlm_object_not_visible_after_removal(env):
    env.exec_navigate("fruit table", side="close")
    vlm = SimulatedVlm(env)
    from wareloop.simenv import PerturbEvent
    env.perturb(PerturbEvent("remove_object", object_id=1))
    with pytest.raises(ObjectNotVisible):
        vlm.describe("apple")
    with pytest.raises(ObjectNotVisible):
        vlm.table_side("apple")


# --- HTTP backend ---


def ok_response(content: str, usage: dict | None = None) -> tuple[int, str]:
    body = {"choices": [{"message": {"role": "assistant", "content": content}}]}
    if usage:
        body["usage"] = usage
    return 200, json.dumps(body)


def test_http_transport_after_retries():
    calls = []
    sleeps = []

    def failing_post(url, headers, body, timeout):
        calls.append(url)
        raise ConnectionError("refused")

    chat = HttpChat("http://example.invalid/v1", post_fn=failing_post,
                    sleep_fn=sleeps.append)
    with pytest.raises(Transport):
        chat.complete([{"role": "user", "content": "hi"}])
    assert len(calls) == 4  # one attempt plus three retries
    assert sleeps == [1.0, 2.0, 4.0]


def test_http_bad_status_no_retry_on_4xx():
    calls = []

    def post(url, headers, body, timeout):
        calls.append(1)
        return 401, "unauthorized"

    chat = HttpChat("http://example.invalid/v1", post_fn=post, sleep_fn=lambda s: None)
    with pytest.raises(BadStatus):
        chat.complete([{"role": "user", "content": "hi"}])
    assert len(calls) == 1


def test_http_5xx_retries_then_succeeds():
    responses = [(503, "busy"), (503, "busy"), ok_response("pong")]

    def post(url, headers, body, timeout):
        return responses.pop(0)

    chat = HttpChat("http://example.invalid/v1", post_fn=post, sleep_fn=lambda s: None)
    reply, usage = chat.complete([{"role": "user", "content": "ping"}])
    assert reply == "pong"
    assert usage.prompt_tokens == len("ping") // 4


def test_http_usage_from_server_when_present():
    def post(url, headers, body, timeout):
        return ok_response("pong", usage={"prompt_tokens": 77, "completion_tokens": 5})

    chat = HttpChat("http://example.invalid/v1", post_fn=post)
    _reply, usage = chat.complete([{"role": "user", "content": "ping"}])
    assert usage.prompt_tokens == 77 and usage.completion_tokens == 5


def test_http_planner_resends_history_and_prompt_tokens_grow():
    seen_bodies = []

    def post(url, headers, body, timeout):
        seen_bodies.append(json.loads(json.dumps(body)))
        return ok_response("reply-" + str(len(seen_bodies)))

    planner = HttpPlanner(HttpChat("http://example.invalid/v1", post_fn=post))
    _r1, u1 = planner.planner_initial("first prompt with some words")
    _r2, u2 = planner.planner_step("#feedback: pick up success")
    _r3, u3 = planner.planner_step("#feedback: place success")
    assert len(seen_bodies[0]["messages"]) == 1
    assert len(seen_bodies[1]["messages"]) == 3  # prompt, reply, feedback
    assert len(seen_bodies[2]["messages"]) == 5
    assert u1.prompt_tokens < u2.prompt_tokens < u3.prompt_tokens


def test_http_request_shape_and_wire_sink():
    wire = []

    def post(url, headers, body, timeout):
        assert url.endswith("/chat/completions")
        assert headers["Authorization"] == "Bearer sekrit"
        assert body["temperature"] == 0.0 and body["max_tokens"] == 512
        return ok_response("not json at all")

    chat = HttpChat("http://example.invalid/v1", api_key="sekrit", model="test-model",
                    post_fn=post, wire_sink=wire.append)
    reply, _usage = chat.complete([{"role": "user", "content": "hi"}])
    # the raw exchange is recorded even though the reply is unparseable JSON
    assert reply == "not json at all"
    assert len(wire) == 1 and wire[0]["status"] == 200


def test_http_vlm_side_parse_and_fail():
    def good_post(url, headers, body, timeout):
        return ok_response('{"side": 4, "color": "red", "shape": "round"}')

    vlm = HttpVlm(HttpChat("http://example.invalid/v1", post_fn=good_post))
    assert vlm.table_side("coke can") == (4, "red", "round")

    def bad_post(url, headers, body, timeout):
        return ok_response("I cannot tell, sorry")

    vlm = HttpVlm(HttpChat("http://example.invalid/v1", post_fn=bad_post))
    with pytest.raises(ParseFail):
        vlm.table_side("coke can")


def test_feedback_text_round_trips_into_oracle():
    # the oracle consumes exactly what the codec renders
    from wareloop.codec import FeedbackEvent, render_feedback
    scene = canonical_scene(0)
    planner = OraclePlanner(scene, TaskSpec("x", [GoalSpec(select="apple", dest="storage rack")]))
    planner.planner_initial("#instruction: x")
    fb = render_feedback(FeedbackEvent("nav_success", observation=("apple", "banana")))
    assert parse_feedback(fb).kind == "nav_success"
    reply = planner.step(fb)
    assert reply.next_action == SkillCall("pick", ("apple",))
