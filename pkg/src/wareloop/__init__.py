"""Closed-loop skill planning engine and benchmark harness for a simulated
warehouse robot: a lean navigate/pick/place instruction set, feedback-driven
replanning, embedding-based object memory, and SPL/FLOPs/latency metrics."""

from .codec import (
    FeedbackEvent,
    Plan,
    SkillCall,
    StepReply,
    parse_feedback,
    parse_initial_plan,
    parse_skill_call,
    parse_step_reply,
    render_feedback,
    render_initial_prompt,
)
from .executor import EpisodePolicy, EpisodeTranscript, run_episode
from .gateway import HttpChat, HttpPlanner, OraclePlanner, ScriptedPlanner, SimulatedVlm
from .memory import LongTermMemory, MemoryStores, ShortTermStore, stm_retrieve, stm_upsert
from .metrics import (
    ComponentCostModel,
    CostBreakdown,
    LatencyBreakdown,
    LatencyModel,
    episode_cost,
    flops_token_model,
    latency_total,
    spl,
    success_rates,
)
from .scene import GridMap, ObjectInstance, RobotState, SceneMap, Site, canonical_scene, validate_scene
from .simenv import FaultModel, PerturbEvent, SimEnv, SkillOutcome, shortest_path
from .skills import check_preconditions, dispatch, skill_catalog
from .suites import GoalSpec, SuiteFile, TaskSpec, builtin_suite, check_goals

__version__ = "0.1.0"

__all__ = [
    "EpisodePolicy",
    "EpisodeTranscript",
    "FaultModel",
    "FeedbackEvent",
    "GoalSpec",
    "GridMap",
    "HttpChat",
    "HttpPlanner",
    "LatencyBreakdown",
    "LatencyModel",
    "LongTermMemory",
    "MemoryStores",
    "ObjectInstance",
    "OraclePlanner",
    "PerturbEvent",
    "Plan",
    "RobotState",
    "SceneMap",
    "ScriptedPlanner",
    "ShortTermStore",
    "SimEnv",
    "SimulatedVlm",
    "Site",
    "SkillCall",
    "SkillOutcome",
    "StepReply",
    "SuiteFile",
    "TaskSpec",
    "ComponentCostModel",
    "CostBreakdown",
    "builtin_suite",
    "canonical_scene",
    "check_goals",
    "check_preconditions",
    "dispatch",
    "episode_cost",
    "flops_token_model",
    "latency_total",
    "parse_feedback",
    "parse_initial_plan",
    "parse_skill_call",
    "parse_step_reply",
    "render_feedback",
    "render_initial_prompt",
    "run_episode",
    "shortest_path",
    "skill_catalog",
    "spl",
    "stm_retrieve",
    "stm_upsert",
    "success_rates",
    "validate_scene",
]
