from __future__ import annotations

import json

import pytest

from wareloop.scene import (
    GridMap,
    ObjectInstance,
    canonical_scene,
    copy_scene,
    decode_scene,
    encode_scene,
    resolve_object_name,
    resolve_site_name,
    scene_from_json,
    scene_to_json,
    validate_scene,
)


def codes(violations):
    return sorted(v.code for v in violations)


def test_canonical_scene_is_valid_for_any_seed():
    for seed in (0, 1, 2, 3, 7, 123):
        assert validate_scene(canonical_scene(seed)) == []


def test_canonical_scene_required_sites(scene):
    names = {s.name for s in scene.sites}
    assert {"fruit table", "drink table", "toy rack", "shipping table",
            "receiving shelf", "purchase table", "storage rack", "user entry"} <= names


def test_fruit_table_contents(scene):
    names = {o.name for o in scene.objects_at("fruit table")}
    assert {"apple", "banana", "lemon", "plum", "strawberry"} <= names


def test_toy_rack_contents(scene):
    names = {o.name for o in scene.objects_at("toy rack")}
    assert {"squirrel toy", "shark toy", "school bus toy", "fire machine toy"} <= names


def test_seed_changes_only_sides():
    a, b = canonical_scene(0), canonical_scene(1)
    assert [(o.object_id, o.name, o.site) for o in a.objects] == \
           [(o.object_id, o.name, o.site) for o in b.objects]
    assert [o.side for o in a.objects] != [o.side for o in b.objects]


def test_unknown_site_violation(scene):
    scene.objects[0].site = "ghost table"
    assert "UnknownSite" in codes(validate_scene(scene))


def test_multiple_held_violation(scene):
    scene.objects[0].site = None
    scene.objects[0].side = None
    scene.objects[1].site = None
    scene.objects[1].side = None
    scene.robot.held = scene.objects[0].object_id
    assert "MultipleHeld" in codes(validate_scene(scene))


def test_held_mismatch_violation(scene):
    scene.objects[0].site = None
    scene.objects[0].side = None
    assert "HeldMismatch" in codes(validate_scene(scene))


def test_unreachable_site_violation(scene):
    site = scene.site_by_name("fruit table")
    x0, y0, x1, y1 = site.bbox()
    ring = []
    for x in range(x0 - 2, x1 + 3):
        ring += [(x, y0 - 2), (x, y1 + 2)]
    for y in range(y0 - 2, y1 + 3):
        ring += [(x0 - 2, y), (x1 + 2, y)]
    scene.grid.set_blocked([c for c in ring if scene.grid.in_bounds(c)])
    assert "UnreachableSite" in codes(validate_scene(scene))


def test_bad_grid_violation(scene):
    scene.grid.resolution = 0.0
    assert codes(validate_scene(scene)) == ["BadGrid"]


def test_occupancy_length_violation(scene):
    scene.grid.occupancy.pop()
    assert codes(validate_scene(scene)) == ["BadOccupancy"]


def test_serialization_round_trip(scene):
    assert decode_scene(encode_scene(scene)) == scene
    assert scene_from_json(scene_to_json(scene)) == scene


def test_round_trip_preserves_held_object(scene):
    obj = scene.objects[4]
    obj.site = None
    obj.side = None
    scene.robot.held = obj.object_id
    assert decode_scene(encode_scene(scene)) == scene


def test_unknown_top_level_key_rejected(scene):
    doc = encode_scene(scene)
    doc["extra"] = 1
    with pytest.raises(ValueError, match="unknown keys"):
        decode_scene(doc)


def test_unknown_nested_key_rejected(scene):
    doc = encode_scene(scene)
    doc["robot"]["battery"] = 0.5
    with pytest.raises(ValueError, match="unknown keys"):
        decode_scene(doc)


def test_missing_top_level_key_rejected(scene):
    doc = encode_scene(scene)
    del doc["objects"]
    with pytest.raises(ValueError, match="missing key"):
        decode_scene(doc)


def test_copy_scene_is_independent(scene):
    clone = copy_scene(scene)
    clone.objects[0].site = "drink table"
    assert scene.objects[0].site == "fruit table"


def test_scene_json_is_valid_json(scene):
    json.loads(scene_to_json(scene))


def test_site_alias_resolution(scene):
    assert scene.site_by_name("shipping shelf").name == "shipping table"
    assert scene.site_by_name("toy table").name == "toy rack"
    assert scene.site_by_name("Toys Table").name == "toy rack"
    assert scene.site_by_name("drink_table").name == "drink table"


def test_object_alias_resolution():
    assert resolve_object_name("toy shark") == "shark toy"
    assert resolve_object_name("fenta") == "fanta can"
    assert resolve_object_name("Pepsi_can") == "pepsi can"
    assert resolve_object_name("cola can") == "coke can"


def test_site_name_normalization():
    assert resolve_site_name("Shipping table") == "shipping table"
    assert resolve_site_name("  fruit   table ") == "fruit table"


def test_grid_helpers():
    grid = GridMap.empty(4, 3, 0.5)
    assert grid.in_bounds((3, 2)) and not grid.in_bounds((4, 0))
    grid.set_blocked([(1, 1), (2, 2)])
    assert grid.blocked((1, 1)) and not grid.blocked((0, 0))
    assert grid.blocked_cells() == [(1, 1), (2, 2)]


def test_objects_at_sorted_by_id(scene):
    ids = [o.object_id for o in scene.objects_at("purchase table")]
    assert ids == sorted(ids)


def test_held_object_lookup(scene):
    assert scene.held_object() is None
    scene.objects[2].site = None
    scene.objects[2].side = None
    scene.robot.held = scene.objects[2].object_id
    assert scene.held_object().object_id == scene.objects[2].object_id
