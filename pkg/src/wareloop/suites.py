"""Task suites: goal specs, the object-selector language, and suite files.

A goal names a set of objects (by name or attributes) and a destination
site.  Selectors are resolved against the scene as it was when the episode
started; the verdict checks the final scene.  Free-text instructions
(REPL, ``episode`` command) are reduced to goals by a small pattern
matcher so the rule-based planner can run them; authored suite goals
always win over the parser.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigError, ImpossibleTask
from .scene import (
    OBJECT_ALIASES,
    OBJECT_CATALOG,
    ObjectInstance,
    SITE_ALIASES,
    SceneMap,
    normalize_name,
    resolve_object_name,
    resolve_site_name,
)
from .simenv import PerturbEvent


@dataclass(frozen=True)
class GoalSpec:
    select: str = ""            # "apple" or "color=yellow&category=fruit" or "size=max&..."
    dest: str = ""
    quantifier: str = "any"     # any | all
    transient: bool = False     # waypoint: planned but not checked in the final scene
    from_site: str | None = None
    robot_at: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GoalSpec":
        return cls(
            select=d.get("select", ""),
            dest=d.get("dest", ""),
            quantifier=d.get("quantifier", "any"),
            transient=bool(d.get("transient", False)),
            from_site=d.get("from"),
            robot_at=d.get("robot_at"),
        )

    def to_dict(self) -> dict:
        out: dict = {}
        if self.robot_at:
            out["robot_at"] = self.robot_at
            return out
        out["select"] = self.select
        out["dest"] = self.dest
        if self.quantifier != "any":
            out["quantifier"] = self.quantifier
        if self.transient:
            out["transient"] = True
        if self.from_site:
            out["from"] = self.from_site
        return out


@dataclass
class TaskSpec:
    instruction: str
    goals: list[GoalSpec] = field(default_factory=list)
    perturbations: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            instruction=d["instruction"],
            goals=[GoalSpec.from_dict(g) for g in d.get("goals", [])],
            perturbations=list(d.get("perturbations", [])),
        )


@dataclass
class SuiteFile:
    name: str
    tasks: list[TaskSpec]
    level: int | None = None
    session: bool = False
    scene: str = "canonical"


def load_suite_dict(doc: dict, name: str) -> SuiteFile:
    level = doc.get("level")
    if level is not None and level not in (1, 2, 3, 4):
        raise ConfigError(f"suite level must be in 1..4, got {level!r}")
    return SuiteFile(
        name=name,
        tasks=[TaskSpec.from_dict(t) for t in doc["tasks"]],
        level=level,
        session=bool(doc.get("session", False)),
        scene=doc.get("scene", "canonical"),
    )


def builtin_suite(name: str) -> SuiteFile:
    """Load a suite shipped with the package (level1..level4, perturbation,
    repeat, realworld)."""
    try:
        text = resources.files("wareloop.data").joinpath(f"{name}.json").read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no builtin suite named {name!r}")
    return load_suite_dict(json.loads(text), name)


def load_suite(path: str) -> SuiteFile:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return load_suite_dict(doc, path)


# --- selector resolution ---


def _match_clauses(obj: ObjectInstance, clauses: list[tuple[str, str]]) -> bool:
    for key, value in clauses:
        if key == "name":
            if resolve_object_name(obj.name) != resolve_object_name(value):
                return False
        elif key == "size" and value in ("min", "max"):
            continue  # applied over the candidate set afterwards
        elif obj.attributes.get(key) != value:
            return False
    return True


def select_objects(scene: SceneMap, select: str, from_site: str | None = None) -> list[ObjectInstance]:
    """Objects matching a selector, sorted by id.  Bare words select by name."""
    clauses: list[tuple[str, str]] = []
    for raw in select.split("&"):
        raw = raw.strip()
        if not raw:
            continue
        if "=" in raw:
            key, value = raw.split("=", 1)
            clauses.append((key.strip(), value.strip()))
        else:
            clauses.append(("name", raw))
    found = [o for o in scene.objects if not o.held and _match_clauses(o, clauses)]
    if from_site is not None:
        target = resolve_site_name(from_site)
        found = [o for o in found if resolve_site_name(o.site or "") == target]
    for key, value in clauses:
        if key == "size" and value in ("min", "max") and found:
            sizes = [int(o.attributes.get("size", "0")) for o in found]
            pick = min(sizes) if value == "min" else max(sizes)
            found = [o for o in found if int(o.attributes.get("size", "0")) == pick]
    return sorted(found, key=lambda o: o.object_id)


@dataclass(frozen=True)
class Move:
    object_id: int | None  # None: navigation-only goal
    name: str
    dest: str


def resolve_goal_moves(scene: SceneMap, goals: list[GoalSpec]) -> list[Move]:
    """Ordered moves for a goal list.  Non-transient goals claim distinct
    objects; a later goal may reuse an object a transient goal moved."""
    moves: list[Move] = []
    hard_claims: set[int] = set()
    soft_claims: set[int] = set()
    for goal in goals:
        if goal.robot_at:
            moves.append(Move(None, "", resolve_site_name(goal.robot_at)))
            continue
        candidates = select_objects(scene, goal.select, goal.from_site)
        candidates = [o for o in candidates if o.object_id not in hard_claims]
        if not candidates:
            raise ImpossibleTask(f"nothing in the scene matches {goal.select!r}")
        if goal.quantifier == "all":
            chosen = candidates
        else:
            unclaimed = [o for o in candidates if o.object_id not in soft_claims]
            chosen = [unclaimed[0] if unclaimed else candidates[0]]
        for obj in chosen:
            moves.append(Move(obj.object_id, obj.name, resolve_site_name(goal.dest)))
            (soft_claims if goal.transient else hard_claims).add(obj.object_id)
    return moves


def check_goals(initial_scene: SceneMap, final_scene: SceneMap, goals: list[GoalSpec]) -> bool:
    """Verify the final scene against the non-transient goals, resolving
    selectors on the initial scene."""
    used: set[int] = set()
    for goal in goals:
        if goal.transient:
            continue
        if goal.robot_at:
            if _faced_site_name(final_scene) != resolve_site_name(goal.robot_at):
                return False
            continue
        candidates = select_objects(initial_scene, goal.select, goal.from_site)
        dest = resolve_site_name(goal.dest)
        at_dest = []
        for cand in candidates:
            try:
                now = final_scene.object_by_id(cand.object_id)
            except KeyError:
                continue
            if now.site is not None and resolve_site_name(now.site) == dest:
                at_dest.append(cand.object_id)
        if goal.quantifier == "all":
            if not candidates or len(at_dest) != len(candidates):
                return False
            used.update(at_dest)
        else:
            fresh = [oid for oid in at_dest if oid not in used]
            if not fresh:
                return False
            used.add(fresh[0])
    return True


def _faced_site_name(scene: SceneMap) -> str | None:
    r = scene.robot
    probe = (r.cell[0] + r.facing[0], r.cell[1] + r.facing[1])
    for site in scene.sites:
        if probe in site.footprint:
            return resolve_site_name(site.name)
    return None


def resolve_perturbations(scene: SceneMap, raw: list[dict]) -> list[tuple[int, PerturbEvent]]:
    """Turn authored perturbation dicts (objects referenced by name) into
    concrete events against this scene."""
    out: list[tuple[int, PerturbEvent]] = []
    for item in raw:
        step = int(item.get("step", 1))
        kind = item["kind"]
        if kind in ("move_object", "remove_object"):
            matches = select_objects(scene, item["object"], item.get("from"))
            if not matches:
                raise ConfigError(f"perturbation object {item['object']!r} not in scene")
            event = PerturbEvent(
                kind=kind,
                object_id=matches[0].object_id,
                to_site=item.get("to_site"),
                to_side=item.get("to_side"),
            )
        elif kind == "block_cells":
            event = PerturbEvent(kind=kind, cells=tuple(tuple(c) for c in item["cells"]))
        else:
            raise ConfigError(f"unknown perturbation kind {kind!r}")
        out.append((step, event))
    return out


# --- free-text instruction parsing (rule-based planner / REPL input) ---

_CLAUSE_SPLIT = re.compile(r"\s*(?:,\s*then\s+|\bthen\b|\band finally,?\s*|\bfinally,?\s*|;|\.\s+)\s*")
_COLORS = ("red", "yellow", "green", "blue", "purple", "orange", "white", "gray",
           "brown", "golden", "clear")
_CATEGORIES = {"fruit": "fruit", "fruits": "fruit", "toy": "toy", "toys": "toy",
               "drink": "drink", "drinks": "drink"}


_CANONICAL_SITE_NAMES = (
    "fruit table", "drink table", "toy rack", "shipping table",
    "receiving shelf", "purchase table", "storage rack", "user entry",
)


def _known_site_forms() -> list[str]:
    return sorted(set(_CANONICAL_SITE_NAMES) | set(SITE_ALIASES), key=len, reverse=True)


_OBJECT_FORMS = sorted(set(OBJECT_CATALOG) | set(OBJECT_ALIASES), key=len, reverse=True)


def _find_site(clause: str) -> tuple[str | None, int]:
    best: tuple[str | None, int] = (None, -1)
    for form in _known_site_forms():
        idx = clause.rfind(form)
        if idx > best[1]:
            best = (resolve_site_name(form), idx)
    return best


def _selector_for_phrase(phrase: str) -> str | None:
    for form in _OBJECT_FORMS:
        if re.search(rf"\b{re.escape(form)}\b", phrase):
            return resolve_object_name(form)
    clauses = []
    for color in _COLORS:
        if re.search(rf"\b{color}\b", phrase):
            clauses.append(f"color={color}")
            break
    for word, category in _CATEGORIES.items():
        if re.search(rf"\b{word}\b", phrase):
            clauses.append(f"category={category}")
            break
    if "something to eat" in phrase or "anything to eat" in phrase:
        clauses.append("edible=yes")
    if "vitamin c" in phrase:
        clauses.append("vitamin_c=high")
    if "pick-me-up" in phrase or "pick me up" in phrase:
        clauses.append("caffeine=yes")
    if "gift" in phrase or "birthday" in phrase:
        clauses.append("category=toy")
    if "biggest" in phrase or "largest" in phrase:
        clauses.append("size=max")
    if "smallest" in phrase:
        clauses.append("size=min")
    if "eat" in phrase and "edible=yes" not in clauses and not clauses:
        clauses.append("edible=yes")
    return "&".join(clauses) if clauses else None


def parse_instruction(instruction: str) -> list[GoalSpec]:
    """Pattern-based goals for free text; returns [] when nothing is recognized."""
    goals: list[GoalSpec] = []
    for clause in _CLAUSE_SPLIT.split(normalize_name(instruction)):
        clause = clause.strip().strip(".")
        if not clause:
            continue
        site, site_idx = _find_site(clause)
        nav_only = re.match(r"^(?:move|go|navigate|drive|come|return)\s+(?:to|back to)\b", clause)
        if nav_only and site:
            goals.append(GoalSpec(robot_at=site))
            continue
        phrase = clause[:site_idx] if site_idx > 0 else clause
        selector = _selector_for_phrase(phrase)
        if selector is None:
            continue
        if site is None and ("ship" in clause or "shipment" in clause):
            site = "shipping table"
        if site is None:
            continue
        quantifier = "all" if re.search(r"\ball\b", phrase) else "any"
        goals.append(GoalSpec(select=selector, dest=site, quantifier=quantifier))
    return goals
