"""Command-line front end: single episodes, benchmarks, a REPL, and reports.

Exit codes: 0 success (for ``episode``: verdict success; for ``bench``: all
episodes completed), 1 episode failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import ConfigError, WareloopError
from .executor import EpisodePolicy, EpisodeTranscript, run_episode, transcript_from_jsonl
from .gateway import (
    ENV_API_BASE,
    ENV_API_KEY,
    ENV_MODEL,
    ENV_VLM_MODEL,
    HttpChat,
    HttpPlanner,
    HttpVlm,
    OraclePlanner,
    ScriptedPlanner,
    SimulatedVlm,
    load_script,
)
from .memory import MemoryStores
from .metrics import (
    ComponentCostModel,
    LatencyModel,
    ablation_report,
    episode_cost,
    render_report_text,
    spl,
)
from .scene import canonical_scene, copy_scene, scene_from_json
from .simenv import FaultModel, SimEnv
from .suites import SuiteFile, TaskSpec, builtin_suite, load_suite

_BUILTIN_SUITES = ("level1", "level2", "level3", "level4", "perturbation", "repeat", "realworld")


@dataclass
class RunConfig:
    backend: str = "oracle"            # oracle | scripted | http
    script: str | None = None
    feedback: bool = True
    memory: bool = True
    side_refinement: bool = True
    seed: int = 0
    nav_fail: float = 0.0
    grasp_fail: float = 0.0
    misrecognition: float = 0.0
    perturb: bool = True
    out: str = "runs"
    scene_path: str | None = None
    max_steps: int = 40
    retries: int = 3
    workers: int = 1

    def validate(self) -> None:
        if self.backend not in ("oracle", "scripted", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "scripted":
            if not self.script:
                raise ConfigError("scripted backend requires --script PATH")
            if not os.path.exists(self.script):
                raise ConfigError(f"script file not found: {self.script}")
        if self.backend == "http" and not os.environ.get(ENV_API_BASE):
            raise ConfigError(f"http backend requires {ENV_API_BASE} (and usually "
                              f"{ENV_API_KEY}, {ENV_MODEL})")

    def policy(self) -> EpisodePolicy:
        return EpisodePolicy(
            max_steps=self.max_steps,
            max_retries_per_subgoal=self.retries,
            feedback_enabled=self.feedback,
            memory_enabled=self.memory,
            side_refinement_enabled=self.side_refinement,
        )

    def base_scene(self):
        if self.scene_path:
            with open(self.scene_path, "r", encoding="utf-8") as fh:
                return scene_from_json(fh.read())
        return canonical_scene(self.seed)

    def fault_model(self) -> FaultModel:
        return FaultModel(
            misrecognition_prob=self.misrecognition,
            grasp_fail_prob=self.grasp_fail,
            nav_fail_prob=self.nav_fail,
        )

    def make_env(self, scene) -> SimEnv:
        return SimEnv(scene, rng_seed=self.seed, fault_model=self.fault_model())

    def make_planner(self, env: SimEnv, task: TaskSpec):
        if self.backend == "oracle":
            return OraclePlanner(env.scene, task)
        if self.backend == "scripted":
            return ScriptedPlanner(load_script(self.script))  # fresh cursor per episode
        chat = HttpChat(
            base_url=os.environ[ENV_API_BASE],
            api_key=os.environ.get(ENV_API_KEY, ""),
            model=os.environ.get(ENV_MODEL, ""),
        )
        return HttpPlanner(chat)

    def make_vlm(self, env: SimEnv):
        # the remote VLM is opt-in; everything else answers from ground truth
        if self.backend == "http" and os.environ.get(ENV_VLM_MODEL):
            chat = HttpChat(
                base_url=os.environ[ENV_API_BASE],
                api_key=os.environ.get(ENV_API_KEY, ""),
                model=os.environ[ENV_VLM_MODEL],
            )
            return HttpVlm(chat)
        return SimulatedVlm(env)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(
        backend=args.backend,
        script=args.script,
        feedback=args.feedback == "on",
        memory=args.memory == "on",
        side_refinement=args.side_refinement == "on",
        seed=args.seed,
        nav_fail=args.fault_nav,
        grasp_fail=args.fault_grasp,
        misrecognition=args.fault_misrecognition,
        perturb=args.perturb == "on",
        out=args.out,
        scene_path=args.scene,
        max_steps=args.max_steps,
        retries=args.retries,
        workers=getattr(args, "workers", 1),
    )
    config.validate()
    return config


def _episode_task(config: RunConfig, task: TaskSpec, env: SimEnv | None = None,
                  stores: MemoryStores | None = None) -> EpisodeTranscript:
    if not config.perturb:
        task = TaskSpec(task.instruction, task.goals, [])
    if env is None:
        env = config.make_env(config.base_scene())
    if stores is None:
        stores = MemoryStores.for_scene(env.scene)
    planner = config.make_planner(env, task)
    vlm = config.make_vlm(env)
    return run_episode(env, planner, vlm, stores, config.policy(), task)


def _write_transcripts(out_dir: str, transcripts: list[EpisodeTranscript]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cost_model = ComponentCostModel()
    latency_model = LatencyModel()
    for i, transcript in enumerate(transcripts, start=1):
        with open(os.path.join(out_dir, f"transcript_{i:03d}.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(transcript.to_jsonl())
        breakdown, peak = episode_cost(transcript, cost_model)
        latency = latency_model.episode_latency(transcript)
        samples = transcript.metrics_samples
        metrics_doc = {
            "verdict": transcript.verdict,
            "reason": transcript.failure_reason,
            "spl": spl(samples) if samples else None,
            "cost_gflops": breakdown.to_dict(),
            "peak_gflops": peak,
            "latency_s": latency.to_dict(),
            "counters": transcript.counters,
        }
        with open(os.path.join(out_dir, f"metrics_{i:03d}.json"), "w", encoding="utf-8") as fh:
            json.dump(metrics_doc, fh, indent=2, sort_keys=True)


def cmd_episode(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    transcript = _episode_task(config, TaskSpec(instruction=args.instruction))
    _write_transcripts(config.out, [transcript])
    print(f"verdict: {transcript.verdict}"
          + (f" ({transcript.failure_reason})" if transcript.failure_reason else ""))
    return 0 if transcript.success else 1


def _load_bench_suite(args: argparse.Namespace) -> SuiteFile:
    if args.suite:
        if args.suite in _BUILTIN_SUITES:
            return builtin_suite(args.suite)
        return load_suite(args.suite)
    if args.level is None:
        raise ConfigError("bench needs --level 1..4 or --suite NAME")
    if args.level not in (1, 2, 3, 4):
        raise ConfigError(f"--level must be one of 1, 2, 3, 4 (got {args.level})")
    return builtin_suite(f"level{args.level}")


def _run_suite(config: RunConfig, suite: SuiteFile) -> list[EpisodeTranscript]:
    if suite.session:
        env = config.make_env(config.base_scene())
        stores = MemoryStores.for_scene(env.scene)
        return [_episode_task(config, task, env=env, stores=stores) for task in suite.tasks]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(lambda t: _episode_task(config, t), suite.tasks))
    return [_episode_task(config, task) for task in suite.tasks]


def cmd_bench(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    suite = _load_bench_suite(args)
    transcripts = _run_suite(config, suite)
    _write_transcripts(config.out, transcripts)
    report = ablation_report({suite.name: transcripts})
    with open(os.path.join(config.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    text = render_report_text(report)
    with open(os.path.join(config.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_repl(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    env = config.make_env(config.base_scene())
    stores = MemoryStores.for_scene(env.scene)
    transcripts: list[EpisodeTranscript] = []
    stream = sys.stdin
    while True:
        if stream.isatty():
            print("instruction> ", end="", flush=True)
        line = stream.readline()
        if not line:
            break
        instruction = line.strip()
        if not instruction:
            continue
        transcript = _episode_task(config, TaskSpec(instruction=instruction),
                                   env=env, stores=stores)
        transcripts.append(transcript)
        for turn in transcript.turns:
            feedback = turn.get("feedback") or turn.get("feedback_suppressed")
            if feedback:
                print(feedback)
        print(f"verdict: {transcript.verdict}"
              + (f" ({transcript.failure_reason})" if transcript.failure_reason else ""))
    if transcripts:
        _write_transcripts(config.out, transcripts)
    return 0


def _load_run_dir(path: str) -> list[EpisodeTranscript]:
    transcripts = []
    for name in sorted(os.listdir(path)):
        if name.startswith("transcript_") and name.endswith(".jsonl"):
            with open(os.path.join(path, name), "r", encoding="utf-8") as fh:
                transcripts.append(transcript_from_jsonl(fh.read()))
    if not transcripts:
        raise ConfigError(f"no transcript_*.jsonl files in {path}")
    return transcripts


def cmd_report(args: argparse.Namespace) -> int:
    run_sets: dict[str, list[EpisodeTranscript]] = {}
    for entry in args.runs:
        if "=" in entry:
            label, path = entry.split("=", 1)
        else:
            label, path = os.path.basename(os.path.normpath(entry)), entry
        run_sets[label] = _load_run_dir(path)
    report = ablation_report(run_sets)
    text = render_report_text(report)
    if args.out_file:
        with open(args.out_file, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    print(text, end="")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=("oracle", "scripted", "http"), default="oracle")
    parser.add_argument("--script", default=None, help="reply script for --backend scripted")
    parser.add_argument("--feedback", choices=("on", "off"), default="on")
    parser.add_argument("--memory", choices=("on", "off"), default="on")
    parser.add_argument("--side-refinement", dest="side_refinement",
                        choices=("on", "off"), default="on")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--perturb", choices=("on", "off"), default="on",
                        help="apply the suite's scripted perturbations")
    parser.add_argument("--fault-nav", type=float, default=0.0)
    parser.add_argument("--fault-grasp", type=float, default=0.0)
    parser.add_argument("--fault-misrecognition", type=float, default=0.0)
    parser.add_argument("--scene", default=None, help="scene JSON file (default: builtin warehouse)")
    parser.add_argument("--max-steps", type=int, default=40)
    parser.add_argument("--retries", type=int, default=3)
    parser.add_argument("--out", default="runs", help="output directory for transcripts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wareloop",
                                     description="Closed-loop warehouse robot planning benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_episode = sub.add_parser("episode", help="run one instruction")
    p_episode.add_argument("instruction")
    _add_common(p_episode)
    p_episode.set_defaults(func=cmd_episode)

    p_bench = sub.add_parser("bench", help="run a task suite")
    p_bench.add_argument("--level", type=int, default=None)
    p_bench.add_argument("--suite", default=None,
                         help=f"builtin suite name ({', '.join(_BUILTIN_SUITES)}) or a JSON path")
    p_bench.add_argument("--workers", type=int, default=1)
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_repl = sub.add_parser("repl", help="interactive session with persistent scene and memory")
    _add_common(p_repl)
    p_repl.set_defaults(func=cmd_repl)

    p_report = sub.add_parser("report", help="aggregate transcript directories into a report")
    p_report.add_argument("runs", nargs="+", help="run dirs, optionally label=dir")
    p_report.add_argument("--out-file", default=None, help="also write the report JSON here")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except WareloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
