"""Deterministic gridworld warehouse executor for the three robot skills.

Navigation runs 4-connected Dijkstra over the occupancy grid with uniform
edge cost equal to the grid resolution.  Perception is symbolic: facing a
site reveals its objects and their table sides.  Faults (navigation stops,
grasp slips, misrecognition) and scripted perturbations are injected from a
seeded RNG so every run replays bit-for-bit.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass, field

from .errors import NotFacingSite, ObjectNotVisible, PreconditionBypassed, Unreachable, UnknownObject, UnknownSite
from .scene import (
    Cell,
    Dir,
    EAST,
    NORTH,
    SIDE_COMPASS,
    SIDES,
    SOUTH,
    SceneMap,
    Site,
    WEST,
    normalize_name,
    resolve_object_name,
)

# Fixed neighbor expansion order: up, right, down, left.
_NEIGHBOR_ORDER: tuple[Dir, ...] = (NORTH, EAST, SOUTH, WEST)

SIDE_CODES = {"left": 1, "right": 2, "far": 3, "close": 4}
CODE_SIDES = {v: k for k, v in SIDE_CODES.items()}

# Outcome details that mark an injected transient fault (safe to retry in place).
TRANSIENT_DETAILS = ("grasp slipped", "navigation fault")


def _ccw(d: Dir) -> Dir:
    return (-d[1], d[0])


def _cw(d: Dir) -> Dir:
    return (d[1], -d[0])


def shortest_path(grid, start: Cell, goal: Cell) -> tuple[list[Cell], float]:
    """Dijkstra on the 4-connected grid; ties expand in up/right/down/left order."""
    for cell, label in ((start, "start"), (goal, "goal")):
        if not grid.in_bounds(cell) or grid.blocked(cell):
            raise Unreachable(f"{label} cell {cell} is blocked or out of bounds")
    if start == goal:
        return [start], 0.0

    dist: dict[Cell, float] = {start: 0.0}
    prev: dict[Cell, Cell] = {}
    counter = 0
    heap: list[tuple[float, int, Cell]] = [(0.0, counter, start)]
    step = grid.resolution
    while heap:
        d, _, cell = heapq.heappop(heap)
        if cell == goal:
            path = [cell]
            while cell != start:
                cell = prev[cell]
                path.append(cell)
            path.reverse()
            return path, round((len(path) - 1) * step, 9)
        if d > dist.get(cell, math.inf):
            continue
        for dd in _NEIGHBOR_ORDER:
            nxt = (cell[0] + dd[0], cell[1] + dd[1])
            if not grid.in_bounds(nxt) or grid.blocked(nxt):
                continue
            nd = d + step
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                prev[nxt] = cell
                counter += 1
                heapq.heappush(heap, (nd, counter, nxt))
    raise Unreachable(f"no path from {start} to {goal}")


@dataclass
class PerturbEvent:
    kind: str  # move_object | remove_object | block_cells
    object_id: int | None = None
    to_site: str | None = None
    to_side: str | None = None
    cells: tuple[Cell, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbEvent":
        return cls(
            kind=d["kind"],
            object_id=d.get("object_id"),
            to_site=d.get("to_site"),
            to_side=d.get("to_side"),
            cells=tuple(tuple(c) for c in d.get("cells", ())),
        )

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.object_id is not None:
            out["object_id"] = self.object_id
        if self.to_site is not None:
            out["to_site"] = self.to_site
        if self.to_side is not None:
            out["to_side"] = self.to_side
        if self.cells:
            out["cells"] = [list(c) for c in self.cells]
        return out


@dataclass
class FaultModel:
    misrecognition_prob: float = 0.0
    grasp_fail_prob: float = 0.0
    nav_fail_prob: float = 0.0
    scripted_perturbations: list[tuple[int, PerturbEvent]] = field(default_factory=list)

    def validate(self) -> None:
        for p in (self.misrecognition_prob, self.grasp_fail_prob, self.nav_fail_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} out of range")


@dataclass
class SkillOutcome:
    ok: bool
    detail: str = ""
    observation: list[str] | None = None
    traveled: float | None = None
    optimal: float | None = None

    @property
    def transient(self) -> bool:
        return not self.ok and self.detail in TRANSIENT_DETAILS

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "detail": self.detail,
            "observation": self.observation,
            "traveled": self.traveled,
            "optimal": self.optimal,
        }


class SimEnv:
    """Owns one scene; all mutation goes through exec_* / perturb."""

    def __init__(self, scene: SceneMap, rng_seed: int = 0, arm_range: float = 0.6,
                 fault_model: FaultModel | None = None):
        self.scene = scene
        self.rng = random.Random(rng_seed)
        self.rng_seed = rng_seed
        self.arm_range = arm_range
        self.fault_model = fault_model or FaultModel()
        self.fault_model.validate()
        self.event_log: list[dict] = []
        self.t = 0
        self._grid_epoch = 0
        self._path_cache: dict[tuple[int, Cell, Cell], tuple[tuple[Cell, ...], float]] = {}
        self._pending_perturbs = sorted(self.fault_model.scripted_perturbations, key=lambda p: p[0])

    # -- bookkeeping --

    def _log(self, kind: str, payload: dict) -> None:
        self.event_log.append({"t": self.t, "kind": kind, "payload": payload})

    def events_since(self, mark: int) -> list[dict]:
        return self.event_log[mark:]

    def event_log_jsonl(self) -> str:
        """Line-delimited {t, kind, payload} records for transcript tooling."""
        return "\n".join(json.dumps(e, ensure_ascii=False) for e in self.event_log) + "\n"

    def schedule_perturbations(self, items: list[tuple[int, PerturbEvent]]) -> None:
        self._pending_perturbs = sorted(self._pending_perturbs + list(items), key=lambda p: p[0])

    def _begin_op(self) -> None:
        self.t += 1
        while self._pending_perturbs and self._pending_perturbs[0][0] <= self.t:
            _, event = self._pending_perturbs.pop(0)
            try:
                self.perturb(event)
            except (UnknownObject, UnknownSite, ValueError) as exc:
                # a scheduled event can go stale (e.g. its object is in the
                # gripper by now); record it instead of crashing the skill
                self._log("perturb_skipped", {"event": event.to_dict(), "reason": str(exc)})

    def _path(self, start: Cell, goal: Cell) -> tuple[list[Cell], float]:
        key = (self._grid_epoch, start, goal)
        hit = self._path_cache.get(key)
        if hit is None:
            path, length = shortest_path(self.scene.grid, start, goal)
            self._path_cache[key] = (tuple(path), length)
            return path, length
        return list(hit[0]), hit[1]

    # -- geometry --

    def faced_site(self) -> Site | None:
        r = self.scene.robot
        probe = (r.cell[0] + r.facing[0], r.cell[1] + r.facing[1])
        for site in self.scene.sites:
            if probe in site.footprint:
                return site
        return None

    def object_slots(self, site: Site) -> dict[int, Cell]:
        """Deterministic cell for each object on the site, spread from each
        edge midpoint outward in object-id order."""
        x0, y0, x1, y1 = site.bbox()
        edges = {
            "close": [(x, y0) for x in range(x0, x1 + 1)],
            "far": [(x, y1) for x in range(x0, x1 + 1)],
            "left": [(x0, y) for y in range(y0, y1 + 1)],
            "right": [(x1, y) for y in range(y0, y1 + 1)],
        }
        slots: dict[int, Cell] = {}
        objs = self.scene.objects_at(site.name)
        for side in SIDES:
            cells = edges[side]
            mid = (len(cells) - 1) // 2
            rank = 0
            for obj in objs:
                if obj.side != side:
                    continue
                offset = (rank + 1) // 2 * (1 if rank % 2 else -1)  # 0, -1, +1, -2, ...
                idx = min(max(mid + offset, 0), len(cells) - 1)
                slots[obj.object_id] = cells[idx]
                rank += 1
        return slots

    def _slot_distance(self, slot: Cell) -> float:
        r = self.scene.robot.cell
        return math.hypot(slot[0] - r[0], slot[1] - r[1]) * self.scene.grid.resolution

    def table_side(self, object_name: str) -> int:
        """Side code of the named object relative to the robot's approach pose:
        1 left, 2 right, 3 far, 4 close; geometric ties take the lowest code."""
        site = self.faced_site()
        if site is None:
            raise NotFacingSite("robot does not face a site")
        target = resolve_object_name(object_name)
        matches = [o for o in self.scene.objects_at(site.name) if resolve_object_name(o.name) == target]
        if not matches:
            raise ObjectNotVisible(object_name)
        slot = self.object_slots(site)[matches[0].object_id]

        f = self.scene.robot.facing
        code_of_compass = {f: 3, (-f[0], -f[1]): 4, _ccw(f): 1, _cw(f): 2}
        x0, y0, x1, y1 = site.bbox()
        refs = {
            SOUTH: ((x0 + x1) / 2.0, float(y0)),
            NORTH: ((x0 + x1) / 2.0, float(y1)),
            WEST: (float(x0), (y0 + y1) / 2.0),
            EAST: (float(x1), (y0 + y1) / 2.0),
        }
        best_code = None
        best_dist = math.inf
        for compass, ref in refs.items():
            code = code_of_compass[compass]
            d = math.hypot(slot[0] - ref[0], slot[1] - ref[1])
            if d < best_dist - 1e-9 or (abs(d - best_dist) <= 1e-9 and (best_code is None or code < best_code)):
                best_dist = d
                best_code = code
        return best_code  # type: ignore[return-value]

    def approach_for_relative_code(self, site: Site, code: int) -> str:
        """Map a robot-relative side code to the site-frame side tag whose
        approach point would put that edge directly in front of the robot."""
        f = self.scene.robot.facing
        edge_normal = {4: (-f[0], -f[1]), 3: f, 1: _ccw(f), 2: _cw(f)}[code]
        for tag, compass in SIDE_COMPASS.items():
            if compass == edge_normal:
                return tag
        raise ValueError(f"no side for code {code}")

    def observe(self) -> list[tuple[str, dict[str, str], str]]:
        site = self.faced_site()
        if site is None:
            raise NotFacingSite("robot does not face a site")
        return [(o.name, dict(o.attributes), o.side or "") for o in self.scene.objects_at(site.name)]

    # -- skills --

    def exec_navigate(self, target: str | tuple[float, float], side: str | None = None) -> SkillOutcome:
        self._begin_op()
        robot = self.scene.robot
        if isinstance(target, str):
            site = self.scene.site_by_name(target)  # raises UnknownSite
            if side is not None:
                goal, facing = site.approach_points[side]
                goal_path, length = self._path(robot.cell, goal)
            else:
                best = None
                for tag in SIDES:
                    if tag not in site.approach_points:
                        continue
                    cell, face = site.approach_points[tag]
                    try:
                        path, plen = self._path(robot.cell, cell)
                    except Unreachable:
                        continue
                    if best is None or plen < best[0]:
                        best = (plen, path, cell, face)
                if best is None:
                    raise Unreachable(f"no approach point of {site.name} is reachable")
                length, goal_path, goal, facing = best
        else:
            x, y = target
            res = self.scene.grid.resolution
            goal = (int(round(x / res)), int(round(y / res)))
            goal_path, length = self._path(robot.cell, goal)
            facing = self._derive_facing(goal, goal_path)

        if self.fault_model.nav_fail_prob > 0 and self.rng.random() < self.fault_model.nav_fail_prob:
            stop_idx = len(goal_path) // 2
            stop = goal_path[stop_idx]
            traveled = round(stop_idx * self.scene.grid.resolution, 9)
            robot.cell = stop
            if stop_idx > 0:
                prev = goal_path[stop_idx - 1]
                robot.facing = (stop[0] - prev[0], stop[1] - prev[1])
            robot.odometer = round(robot.odometer + traveled, 9)
            self._log("navigate", {"target": str(target), "ok": False, "traveled": traveled})
            return SkillOutcome(False, "navigation fault", traveled=traveled, optimal=length)

        robot.cell = goal
        robot.facing = facing
        robot.odometer = round(robot.odometer + length, 9)
        faced = self.faced_site()
        observation = [o.name for o in self.scene.objects_at(faced.name)] if faced else []
        self._log("navigate", {"target": str(target), "ok": True, "traveled": length})
        return SkillOutcome(True, "navigation success", observation=observation,
                            traveled=length, optimal=length)

    def _derive_facing(self, goal: Cell, path: list[Cell]) -> Dir:
        for d in _NEIGHBOR_ORDER:
            probe = (goal[0] + d[0], goal[1] + d[1])
            if any(probe in s.footprint for s in self.scene.sites):
                return d
        if len(path) >= 2:
            prev = path[-2]
            return (goal[0] - prev[0], goal[1] - prev[1])
        return self.scene.robot.facing

    def exec_pick(self, target_name: str, descriptor_hint: str | None = None) -> SkillOutcome:
        if self.scene.robot.held is not None:
            raise PreconditionBypassed("pick while holding")
        self._begin_op()
        site = self.faced_site()
        if site is None:
            self._log("pick", {"target": target_name, "ok": False})
            return SkillOutcome(False, "not facing a site")
        target = resolve_object_name(target_name)
        matches = [o for o in self.scene.objects_at(site.name) if resolve_object_name(o.name) == target]
        if not matches:
            self._log("pick", {"target": target_name, "ok": False})
            return SkillOutcome(False, "target not found")

        slots = self.object_slots(site)
        in_range = [o for o in matches if self._slot_distance(slots[o.object_id]) <= self.arm_range + 1e-9]
        if not in_range:
            self._log("pick", {"target": target_name, "ok": False})
            return SkillOutcome(False, "out of arm range")

        chosen = self._disambiguate(in_range, descriptor_hint)
        # Without a visual description the gripper may lock onto a lookalike.
        if descriptor_hint is None and self.fault_model.misrecognition_prob > 0:
            others = [o for o in self.scene.objects_at(site.name)
                      if o.object_id != chosen.object_id
                      and self._slot_distance(slots[o.object_id]) <= self.arm_range + 1e-9]
            if others and self.rng.random() < self.fault_model.misrecognition_prob:
                chosen = others[0]
        if self.fault_model.grasp_fail_prob > 0 and self.rng.random() < self.fault_model.grasp_fail_prob:
            self._log("pick", {"target": target_name, "ok": False})
            return SkillOutcome(False, "grasp slipped")

        chosen.site = None
        chosen.side = None
        self.scene.robot.held = chosen.object_id
        self._log("pick", {"target": target_name, "ok": True, "object_id": chosen.object_id,
                           "grasped": chosen.name})
        return SkillOutcome(True, f"picked {chosen.name}")

    def _disambiguate(self, candidates: list, hint: str | None):
        if len(candidates) == 1 or not hint:
            return candidates[0]
        hint_tokens = set(normalize_name(hint).split())
        scored = sorted(
            candidates,
            key=lambda o: (-len({o.attributes.get("color", ""), o.attributes.get("shape", "")} & hint_tokens),
                           o.object_id),
        )
        return scored[0]

    def exec_place(self) -> SkillOutcome:
        robot = self.scene.robot
        if robot.held is None:
            raise PreconditionBypassed("place with empty gripper")
        self._begin_op()
        site = self.faced_site()
        if site is None:
            self._log("place", {"ok": False})
            return SkillOutcome(False, "not facing a site")
        side = self._robot_side_of(site)
        obj = self.scene.object_by_id(robot.held)
        obj.site = site.name
        obj.side = side
        robot.held = None
        self._log("place", {"ok": True, "object_id": obj.object_id, "site": site.name, "side": side})
        return SkillOutcome(True, f"placed {obj.name}")

    def _robot_side_of(self, site: Site) -> str:
        x0, y0, x1, y1 = site.bbox()
        rx, ry = self.scene.robot.cell
        deltas = {
            "close": y0 - ry if ry < y0 else math.inf,
            "far": ry - y1 if ry > y1 else math.inf,
            "left": x0 - rx if rx < x0 else math.inf,
            "right": rx - x1 if rx > x1 else math.inf,
        }
        return min(SIDES, key=lambda s: (deltas[s], SIDES.index(s)))

    def exec_done(self) -> SkillOutcome:
        # Terminal token: no side effects, not even an op tick.
        return SkillOutcome(True, "done")

    # -- perturbations --

    def perturb(self, event: PerturbEvent) -> None:
        if event.kind == "move_object":
            obj = self._perturbable_object(event.object_id)
            site = self.scene.site_by_name(event.to_site or "")
            obj.site = site.name
            obj.side = event.to_side if event.to_side in SIDES else "close"
        elif event.kind == "remove_object":
            obj = self._perturbable_object(event.object_id)
            self.scene.objects.remove(obj)
        elif event.kind == "block_cells":
            for cell in event.cells:
                if not self.scene.grid.in_bounds(cell):
                    raise UnknownSite(f"cell {cell} out of bounds")
            self.scene.grid.set_blocked(event.cells)
            self._grid_epoch += 1
        else:
            raise ValueError(f"unknown perturbation kind {event.kind!r}")
        self._log("perturb", event.to_dict())

    def _perturbable_object(self, object_id: int | None):
        try:
            obj = self.scene.object_by_id(object_id if object_id is not None else -1)
        except KeyError:
            raise UnknownObject(f"object {object_id} not in scene")
        if obj.held:
            raise UnknownObject(f"object {object_id} is held; perturbations model the environment")
        return obj
