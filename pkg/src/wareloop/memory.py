"""Short-term object memory with cosine retrieval, plus the static map memory.

Short-term units hold {id, object, position, image summary}; one unit per
object category, replaced whenever the object is seen again.  Retrieval
embeds the instruction and every unit's rendered text and takes the cosine
argmax, rejecting matches below a similarity threshold so unrelated
instructions recall nothing.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownLabel
from .scene import Cell, GridMap, SceneMap, normalize_name, resolve_site_name

RETRIEVAL_THRESHOLD = 0.25

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashedBagOfWords:
    """Deterministic text embedding: token counts hashed into a fixed-size
    vector, L2-normalized.  Equal texts always embed equally."""

    def __init__(self, dimension: int = 256):
        self.dimension = dimension

    def _bucket(self, token: str) -> int:
        digest = hashlib.md5(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens and text:
            tokens = [text.lower()]
        for tok in tokens:
            vec[self._bucket(tok)] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class MemoryUnit:
    unit_id: int
    obj: str
    site: str
    side: str
    img_summary: str
    created_step: int

    def rendered(self) -> str:
        return f"{self.obj} at {self.site}: {self.img_summary}"

    def to_dict(self) -> dict:
        return {
            "id": self.unit_id,
            "object": self.obj,
            "position": {"site": self.site, "side": self.side},
            "img": self.img_summary,
            "step": self.created_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryUnit":
        return cls(d["id"], d["object"], d["position"]["site"], d["position"]["side"],
                   d["img"], d["step"])


@dataclass
class ShortTermStore:
    embedder: HashedBagOfWords = field(default_factory=HashedBagOfWords)
    threshold: float = RETRIEVAL_THRESHOLD
    units: list[MemoryUnit] = field(default_factory=list)
    _next_id: int = 1

    def __len__(self) -> int:
        return len(self.units)


def stm_upsert(store: ShortTermStore, obj: str, position: tuple[str, str],
               img_summary: str, step: int) -> MemoryUnit:
    """Replace any unit of the same object category with a fresh one."""
    category = normalize_name(obj)
    store.units = [u for u in store.units if normalize_name(u.obj) != category]
    unit = MemoryUnit(store._next_id, obj, position[0], position[1], img_summary, step)
    store._next_id += 1
    store.units.append(unit)
    return unit


def retrieval_similarity(store: ShortTermStore, query_vec: np.ndarray, unit: MemoryUnit) -> float:
    """Similarity is compared at 1e-9 resolution so that mathematically equal
    scores reached through different float paths still tie (and ties then
    resolve by unit id)."""
    return round(cosine(query_vec, store.embedder.embed(unit.rendered())), 9)


def stm_retrieve(store: ShortTermStore, instruction: str) -> MemoryUnit | None:
    """Cosine argmax over rendered units; ties resolve to the lowest id;
    None when the store is empty or nothing clears the threshold."""
    if not store.units:
        return None
    query = store.embedder.embed(instruction)
    best: MemoryUnit | None = None
    best_sim = -2.0
    for unit in sorted(store.units, key=lambda u: u.unit_id):
        sim = retrieval_similarity(store, query, unit)
        if sim > best_sim:
            best_sim = sim
            best = unit
    if best is None or best_sim < store.threshold:
        return None
    return best


def stm_fresh_unit(store: ShortTermStore, obj: str, site: str) -> MemoryUnit | None:
    """The unit for this object, but only if it still points at this site."""
    category = normalize_name(obj)
    target_site = resolve_site_name(site)
    for unit in store.units:
        if normalize_name(unit.obj) == category and resolve_site_name(unit.site) == target_site:
            return unit
    return None


def dump_units(store: ShortTermStore) -> str:
    return "\n".join(json.dumps(u.to_dict(), sort_keys=True) for u in store.units)


def load_units(store: ShortTermStore, text: str) -> None:
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        unit = MemoryUnit.from_dict(json.loads(line))
        store.units.append(unit)
        store._next_id = max(store._next_id, unit.unit_id + 1)


@dataclass
class LongTermMemory:
    grid: GridMap
    labels: dict[str, Cell]

    @classmethod
    def from_scene(cls, scene: SceneMap) -> "LongTermMemory":
        return cls(scene.grid, {site.name: site.anchor() for site in scene.sites})


def ltm_lookup(ltm: LongTermMemory, label: str) -> Cell:
    canonical = resolve_site_name(label)
    for name, cell in ltm.labels.items():
        if normalize_name(name) == canonical:
            return cell
    raise UnknownLabel(label)


@dataclass
class MemoryStores:
    short_term: ShortTermStore
    long_term: LongTermMemory

    @classmethod
    def for_scene(cls, scene: SceneMap) -> "MemoryStores":
        return cls(ShortTermStore(), LongTermMemory.from_scene(scene))


def memory_hints(store: ShortTermStore, ltm: LongTermMemory, instruction: str) -> list[str]:
    """Hint lines for prompt injection; empty when nothing relevant is stored."""
    unit = stm_retrieve(store, instruction)
    if unit is None:
        return []
    try:
        ltm_lookup(ltm, unit.site)
    except UnknownLabel:
        return []
    return [f"according to memory, {unit.obj} was last placed at {unit.site}"]
