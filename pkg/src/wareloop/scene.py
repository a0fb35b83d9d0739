"""World data model: occupancy grid, named sites, object inventory, robot pose.

Coordinates are (x, y) grid cells with x growing east and y growing north.
One cell is ``resolution`` meters on a side.  Sites occupy rectangular
footprints of blocked cells and expose four named approach points
(close/far/left/right); by convention close faces the south edge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

from .errors import UnknownSite

Cell = tuple[int, int]
Dir = tuple[int, int]

NORTH: Dir = (0, 1)
EAST: Dir = (1, 0)
SOUTH: Dir = (0, -1)
WEST: Dir = (-1, 0)

SIDES = ("close", "far", "left", "right")

# Compass orientation of each named side of a site footprint.
SIDE_COMPASS: dict[str, Dir] = {"close": SOUTH, "far": NORTH, "left": WEST, "right": EAST}

SITE_KINDS = ("table", "shelf", "rack", "entry")

# Surface forms used interchangeably for one canonical site.
SITE_ALIASES = {
    "shipping shelf": "shipping table",
    "shipping": "shipping table",
    "toy table": "toy rack",
    "toys table": "toy rack",
    "table with the toys": "toy rack",
    "table of toys": "toy rack",
    "toys rack": "toy rack",
    "receiving table": "receiving shelf",
    "receiving": "receiving shelf",
    "dining table": "purchase table",
    "entrance": "user entry",
    "entry": "user entry",
    "user entry point": "user entry",
    "storage shelf": "storage rack",
    "drinks table": "drink table",
    "table of drinks": "drink table",
    "table of fruit": "fruit table",
    "fruits table": "fruit table",
}

# Surface forms of object names appearing in instructions.
OBJECT_ALIASES = {
    "toy shark": "shark toy",
    "fenta can": "fanta can",
    "feta can": "fanta can",
    "fenta": "fanta can",
    "feta": "fanta can",
    "fanta": "fanta can",
    "delicious feta can": "fanta can",
    "delicious fenta can": "fanta can",
    "pepsi": "pepsi can",
    "sprite": "sprite can",
    "can of sprite": "sprite can",
    "coke": "coke can",
    "cola": "coke can",
    "cola can": "coke can",
    "squirrel": "squirrel toy",
    "water": "bottle of water",
    "water bottle": "bottle of water",
    "tea": "tea box",
    "ladybug": "ladybug toy",
    "duck toy": "toy duck",
    "duck": "toy duck",
    "rabbit toy": "toy rabbit",
    "rabbit": "toy rabbit",
    "school bus": "school bus toy",
    "bus toy": "school bus toy",
    "fire truck toy": "fire machine toy",
    "fire machine": "fire machine toy",
    "apples": "apple",
}


def normalize_name(name: str) -> str:
    """Lowercase, squeeze whitespace, and treat underscores as spaces."""
    return " ".join(name.replace("_", " ").lower().split())


def resolve_site_name(name: str) -> str:
    n = normalize_name(name)
    return SITE_ALIASES.get(n, n)


def resolve_object_name(name: str) -> str:
    n = normalize_name(name)
    return OBJECT_ALIASES.get(n, n)


@dataclass
class GridMap:
    width: int
    height: int
    resolution: float
    occupancy: list[bool]

    @classmethod
    def empty(cls, width: int, height: int, resolution: float = 0.1) -> "GridMap":
        return cls(width, height, resolution, [False] * (width * height))

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def blocked(self, cell: Cell) -> bool:
        x, y = cell
        return self.occupancy[y * self.width + x]

    def set_blocked(self, cells: Iterable[Cell], blocked: bool = True) -> None:
        for x, y in cells:
            self.occupancy[y * self.width + x] = blocked

    def blocked_cells(self) -> list[Cell]:
        return sorted(
            (i % self.width, i // self.width) for i, b in enumerate(self.occupancy) if b
        )


@dataclass
class Site:
    name: str
    kind: str
    footprint: tuple[Cell, ...]
    approach_points: dict[str, tuple[Cell, Dir]]

    @classmethod
    def rect(cls, name: str, kind: str, x0: int, y0: int, w: int, h: int) -> "Site":
        """Build a rectangular site with one approach point per side."""
        footprint = tuple(sorted((x, y) for x in range(x0, x0 + w) for y in range(y0, y0 + h)))
        cx = x0 + (w - 1) // 2
        cy = y0 + (h - 1) // 2
        approach = {
            "close": ((cx, y0 - 1), NORTH),
            "far": ((cx, y0 + h), SOUTH),
            "left": ((x0 - 1, cy), EAST),
            "right": ((x0 + w, cy), WEST),
        }
        return cls(name, kind, footprint, approach)

    def bbox(self) -> tuple[int, int, int, int]:
        xs = [c[0] for c in self.footprint]
        ys = [c[1] for c in self.footprint]
        return min(xs), min(ys), max(xs), max(ys)

    def anchor(self) -> Cell:
        x0, y0, x1, y1 = self.bbox()
        return ((x0 + x1) // 2, (y0 + y1) // 2)


@dataclass
class ObjectInstance:
    object_id: int
    name: str
    attributes: dict[str, str]
    site: str | None  # None means held by the robot
    side: str | None

    @property
    def held(self) -> bool:
        return self.site is None


@dataclass
class RobotState:
    cell: Cell
    facing: Dir
    held: int | None = None
    odometer: float = 0.0


@dataclass
class SceneMap:
    grid: GridMap
    sites: list[Site]
    objects: list[ObjectInstance]
    robot: RobotState

    def site_by_name(self, name: str) -> Site:
        canonical = resolve_site_name(name)
        for site in self.sites:
            if normalize_name(site.name) == canonical:
                return site
        raise UnknownSite(name)

    def has_site(self, name: str) -> bool:
        try:
            self.site_by_name(name)
            return True
        except UnknownSite:
            return False

    def objects_at(self, site_name: str) -> list[ObjectInstance]:
        canonical = resolve_site_name(site_name)
        found = [o for o in self.objects if o.site is not None and normalize_name(o.site) == canonical]
        return sorted(found, key=lambda o: o.object_id)

    def object_by_id(self, object_id: int) -> ObjectInstance:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    def held_object(self) -> ObjectInstance | None:
        for o in self.objects:
            if o.held:
                return o
        return None


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    detail: str = ""


def _reachable_from(grid: GridMap, start: Cell) -> set[Cell]:
    if not grid.in_bounds(start) or grid.blocked(start):
        return set()
    seen = {start}
    frontier = [start]
    while frontier:
        x, y = frontier.pop()
        for dx, dy in (NORTH, EAST, SOUTH, WEST):
            nxt = (x + dx, y + dy)
            if nxt not in seen and grid.in_bounds(nxt) and not grid.blocked(nxt):
                seen.add(nxt)
                frontier.append(nxt)
    return seen


def validate_scene(scene: SceneMap) -> list[Violation]:
    """Check every structural invariant; violations are data, not failures."""
    out: list[Violation] = []
    grid = scene.grid
    if grid.width <= 0 or grid.height <= 0 or grid.resolution <= 0:
        out.append(Violation("BadGrid", "grid", f"{grid.width}x{grid.height}@{grid.resolution}"))
        return out
    if len(grid.occupancy) != grid.width * grid.height:
        out.append(Violation("BadOccupancy", "grid", f"{len(grid.occupancy)} cells"))
        return out

    names = [normalize_name(s.name) for s in scene.sites]
    for name in sorted(set(n for n in names if names.count(n) > 1)):
        out.append(Violation("DuplicateSite", name))
    for site in scene.sites:
        if site.kind not in SITE_KINDS:
            out.append(Violation("BadSiteKind", site.name, site.kind))
        if not site.footprint:
            out.append(Violation("EmptyFootprint", site.name))
        for side, (cell, _facing) in site.approach_points.items():
            if side not in SIDES:
                out.append(Violation("BadSide", site.name, side))
            elif not grid.in_bounds(cell) or grid.blocked(cell):
                out.append(Violation("BlockedApproach", site.name, side))

    held_ids = [o.object_id for o in scene.objects if o.held]
    if len(held_ids) > 1:
        out.append(Violation("MultipleHeld", ",".join(map(str, held_ids))))
    ids = [o.object_id for o in scene.objects]
    for oid in sorted(set(i for i in ids if ids.count(i) > 1)):
        out.append(Violation("DuplicateObjectId", str(oid)))
    for obj in scene.objects:
        if obj.held:
            continue
        if not scene.has_site(obj.site or ""):
            out.append(Violation("UnknownSite", f"object {obj.object_id} ({obj.name})", obj.site or ""))
        if obj.side not in SIDES:
            out.append(Violation("BadSide", f"object {obj.object_id} ({obj.name})", str(obj.side)))

    robot = scene.robot
    if not grid.in_bounds(robot.cell) or grid.blocked(robot.cell):
        out.append(Violation("RobotCellBlocked", str(robot.cell)))
    if robot.odometer < 0:
        out.append(Violation("NegativeOdometer", str(robot.odometer)))
    if robot.held is not None:
        if held_ids != [robot.held]:
            out.append(Violation("HeldMismatch", str(robot.held), f"scene holds {held_ids}"))
    elif held_ids:
        out.append(Violation("HeldMismatch", "none", f"scene holds {held_ids}"))

    if not any(v.code == "RobotCellBlocked" for v in out):
        reach = _reachable_from(grid, robot.cell)
        for site in scene.sites:
            for side, (cell, _facing) in site.approach_points.items():
                if grid.in_bounds(cell) and not grid.blocked(cell) and cell not in reach:
                    out.append(Violation("UnreachableSite", site.name, side))
    return out


# --- canonical warehouse ---

OBJECT_CATALOG: dict[str, dict[str, str]] = {
    "apple": {"category": "fruit", "color": "red", "shape": "round", "size": "4", "edible": "yes"},
    "banana": {"category": "fruit", "color": "yellow", "shape": "long", "size": "5", "edible": "yes"},
    "lemon": {"category": "fruit", "color": "yellow", "shape": "oval", "size": "3", "edible": "yes", "vitamin_c": "high"},
    "plum": {"category": "fruit", "color": "purple", "shape": "round", "size": "2", "edible": "yes"},
    "strawberry": {"category": "fruit", "color": "red", "shape": "heart", "size": "1", "edible": "yes", "vitamin_c": "high"},
    "persimmon": {"category": "fruit", "color": "orange", "shape": "round", "size": "4", "edible": "yes", "vitamin_c": "high"},
    "pepsi can": {"category": "drink", "color": "blue", "shape": "cylinder", "size": "3", "caffeine": "yes"},
    "sprite can": {"category": "drink", "color": "green", "shape": "cylinder", "size": "3"},
    "fanta can": {"category": "drink", "color": "orange", "shape": "cylinder", "size": "3"},
    "coke can": {"category": "drink", "color": "red", "shape": "cylinder", "size": "3", "caffeine": "yes"},
    "bottle of water": {"category": "drink", "color": "clear", "shape": "bottle", "size": "4"},
    "tea box": {"category": "drink", "color": "green", "shape": "box", "size": "2", "caffeine": "yes"},
    "beer": {"category": "drink", "color": "golden", "shape": "bottle", "size": "4"},
    "squirrel toy": {"category": "toy", "color": "brown", "shape": "animal", "size": "3"},
    "shark toy": {"category": "toy", "color": "gray", "shape": "animal", "size": "5"},
    "school bus toy": {"category": "toy", "color": "yellow", "shape": "vehicle", "size": "7"},
    "fire machine toy": {"category": "toy", "color": "red", "shape": "vehicle", "size": "6"},
    "ladybug toy": {"category": "toy", "color": "red", "shape": "animal", "size": "1"},
    "toy duck": {"category": "toy", "color": "yellow", "shape": "animal", "size": "2"},
    "toy rabbit": {"category": "toy", "color": "white", "shape": "animal", "size": "4"},
}

# (site, kind, x0, y0, w, h) on the default 64x64 grid.
_CANONICAL_SITES = (
    ("fruit table", "table", 6, 44, 12, 12),
    ("shipping table", "shelf", 16, 6, 12, 12),
    ("toy rack", "rack", 46, 44, 12, 12),
    ("drink table", "table", 26, 44, 12, 12),
    ("receiving shelf", "shelf", 46, 24, 12, 12),
    ("purchase table", "table", 6, 24, 12, 12),
    ("storage rack", "rack", 26, 24, 12, 12),
    ("user entry", "entry", 40, 6, 4, 4),
)

_CANONICAL_INVENTORY = (
    ("fruit table", ("apple", "banana", "lemon", "plum", "strawberry", "persimmon")),
    ("drink table", ("pepsi can", "sprite can", "fanta can", "coke can", "bottle of water", "tea box")),
    ("toy rack", ("squirrel toy", "shark toy", "school bus toy", "fire machine toy",
                  "ladybug toy", "toy duck", "toy rabbit", "squirrel toy")),
    ("purchase table", ("apple", "coke can", "beer", "fanta can", "ladybug toy", "shark toy", "lemon")),
    ("receiving shelf", ("apple", "shark toy", "coke can")),
)


def canonical_scene(seed: int = 0) -> SceneMap:
    """Build the default warehouse; the seed only jitters which table side
    each object starts on, never the inventory or layout."""
    grid = GridMap.empty(64, 64, 0.1)
    sites = [Site.rect(*spec) for spec in _CANONICAL_SITES]
    for site in sites:
        grid.set_blocked(site.footprint)

    objects: list[ObjectInstance] = []
    next_id = 1
    offset = seed % 4
    for site_name, names in _CANONICAL_INVENTORY:
        for i, name in enumerate(names):
            side = SIDES[(i + offset) % 4]
            objects.append(
                ObjectInstance(next_id, name, dict(OBJECT_CATALOG[name]), site_name, side)
            )
            next_id += 1

    entry = next(s for s in sites if s.name == "user entry")
    robot = RobotState(cell=entry.approach_points["close"][0], facing=NORTH)
    return SceneMap(grid=grid, sites=sites, objects=objects, robot=robot)


# --- JSON serialization ---

_TOP_KEYS = {"grid", "sites", "objects", "robot"}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)} in {where}")


def encode_scene(scene: SceneMap) -> dict:
    return {
        "grid": {
            "width": scene.grid.width,
            "height": scene.grid.height,
            "resolution": scene.grid.resolution,
            "blocked": [list(c) for c in scene.grid.blocked_cells()],
        },
        "sites": [
            {
                "name": s.name,
                "kind": s.kind,
                "footprint": [list(c) for c in s.footprint],
                "approach": {
                    side: {"cell": list(cell), "facing": list(facing)}
                    for side, (cell, facing) in sorted(s.approach_points.items())
                },
            }
            for s in scene.sites
        ],
        "objects": [
            {
                "id": o.object_id,
                "name": o.name,
                "attributes": o.attributes,
                "location": "held" if o.held else {"site": o.site, "side": o.side},
            }
            for o in scene.objects
        ],
        "robot": {
            "cell": list(scene.robot.cell),
            "facing": list(scene.robot.facing),
            "held": scene.robot.held,
            "odometer": scene.robot.odometer,
        },
    }


def decode_scene(doc: dict) -> SceneMap:
    if not isinstance(doc, dict):
        raise ValueError("scene document must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "scene document")
    for key in _TOP_KEYS:
        if key not in doc:
            raise ValueError(f"scene document missing key {key!r}")

    g = doc["grid"]
    _check_keys(g, {"width", "height", "resolution", "blocked"}, "grid")
    grid = GridMap.empty(int(g["width"]), int(g["height"]), float(g["resolution"]))
    grid.set_blocked(tuple(c) for c in g.get("blocked", []))

    sites = []
    for s in doc["sites"]:
        _check_keys(s, {"name", "kind", "footprint", "approach"}, f"site {s.get('name')}")
        approach = {}
        for side, ap in s["approach"].items():
            _check_keys(ap, {"cell", "facing"}, f"approach {side}")
            approach[side] = (tuple(ap["cell"]), tuple(ap["facing"]))
        sites.append(Site(s["name"], s["kind"], tuple(sorted(tuple(c) for c in s["footprint"])), approach))

    objects = []
    for o in doc["objects"]:
        _check_keys(o, {"id", "name", "attributes", "location"}, f"object {o.get('id')}")
        loc = o["location"]
        if loc == "held":
            site, side = None, None
        else:
            _check_keys(loc, {"site", "side"}, f"object {o.get('id')} location")
            site, side = loc["site"], loc["side"]
        objects.append(ObjectInstance(int(o["id"]), o["name"], dict(o["attributes"]), site, side))

    r = doc["robot"]
    _check_keys(r, {"cell", "facing", "held", "odometer"}, "robot")
    robot = RobotState(tuple(r["cell"]), tuple(r["facing"]), r["held"], float(r["odometer"]))
    return SceneMap(grid=grid, sites=sites, objects=objects, robot=robot)


def scene_to_json(scene: SceneMap) -> str:
    return json.dumps(encode_scene(scene), indent=2, sort_keys=True)


def scene_from_json(text: str) -> SceneMap:
    return decode_scene(json.loads(text))


def copy_scene(scene: SceneMap) -> SceneMap:
    """Deep, structure-preserving copy (episodes own their scene exclusively)."""
    return decode_scene(encode_scene(scene))
