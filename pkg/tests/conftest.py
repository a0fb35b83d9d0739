from __future__ import annotations

import pytest

from wareloop.memory import MemoryStores
from wareloop.scene import canonical_scene, validate_scene
from wareloop.simenv import FaultModel, SimEnv


@pytest.fixture
def scene():
    return canonical_scene(0)


@pytest.fixture
def env(scene):
    return SimEnv(scene, rng_seed=0)


@pytest.fixture
def stores(scene):
    return MemoryStores.for_scene(scene)


def make_env(seed: int = 0, **fault_kwargs) -> SimEnv:
    return SimEnv(canonical_scene(0), rng_seed=seed,
                  fault_model=FaultModel(**fault_kwargs) if fault_kwargs else None)


def assert_conservation(env: SimEnv, expected_objects: int | None = None) -> None:
    """Hold-one and object-conservation: every object resolves to exactly one
    location, at most one object is held, and the robot agrees about it."""
    scene = env.scene
    held = [o for o in scene.objects if o.held]
    assert len(held) <= 1
    if scene.robot.held is None:
        assert held == []
    else:
        assert [o.object_id for o in held] == [scene.robot.held]
    ids = [o.object_id for o in scene.objects]
    assert len(ids) == len(set(ids))
    for obj in scene.objects:
        if not obj.held:
            assert scene.has_site(obj.site or ""), obj
    if expected_objects is not None:
        assert len(ids) == expected_objects


def assert_world_sound(env: SimEnv, expected_objects: int | None = None) -> None:
    """Conservation plus full structural validity (no perturbation damage)."""
    violations = validate_scene(env.scene)
    assert violations == [], violations
    assert_conservation(env, expected_objects)
