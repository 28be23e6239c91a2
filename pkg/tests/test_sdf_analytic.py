import numpy as np
import pytest

from sdfrecon.sdf_analytic import (
    AnalyticScene,
    Primitive,
    load_scene,
    scene_from_dict,
)
from tests.conftest import two_box_occlusion_scene, two_object_scene


@pytest.fixture()
def sphere_in_box():
    return AnalyticScene(
        [
            Primitive("sphere", 1, center=(0, 0, 0), radius=1.0),
            Primitive("box", 2, center=(0, 0, 0), half_extents=(3, 3, 3)),
        ],
        bounds=[(-3, -3, -3), (3, 3, 3)],
        background_id=2,
    )


def test_sphere_sdf_values(sphere_in_box):
    sv = sphere_in_box.eval_sdf([[0, 0, 0], [1, 1, 1]])
    assert sv.per_object[0, 1] == pytest.approx(-1.0, abs=1e-15)
    assert sv.per_object[1, 1] == pytest.approx(np.sqrt(3) - 1, abs=1e-12)


def test_scene_sdf_is_exact_min(sphere_in_box, rng):
    p = rng.uniform(-3, 3, size=(500, 3))
    sv = sphere_in_box.eval_sdf(p)
    np.testing.assert_array_equal(sv.scene, sv.per_object.min(axis=1))


def test_min_composition_example():
    # two objects with distances (0.5, -0.2) -> scene -0.2
    d = np.array([[0.5, -0.2]])
    assert d.min() == -0.2


def test_background_sign_inverted(sphere_in_box):
    sv = sphere_in_box.eval_sdf([[0, 0, 0], [10, 0, 0]])
    assert sv.per_object[0, 0] == 3.0  # interior of the room is positive
    assert sv.per_object[1, 0] == -7.0


def test_gradient_examples(sphere_in_box):
    g, flags = sphere_in_box.analytic_gradient([[2, 0, 0], [0, 0, 2.0]])
    np.testing.assert_allclose(g[0, 1], [1, 0, 0], atol=1e-15)
    p = np.array([[1, 1, 1]]) / np.sqrt(3) * 2
    g2, _ = sphere_in_box.analytic_gradient(p)
    np.testing.assert_allclose(g2[0, 1], np.ones(3) / np.sqrt(3), atol=1e-12)
    assert not flags.any()


def test_box_face_normal():
    scene = AnalyticScene(
        [
            Primitive("box", 1, center=(0, 0, 0), half_extents=(1, 1, 1)),
            Primitive("box", 2, center=(0, 0, 0), half_extents=(4, 4, 4)),
        ],
        bounds=[(-4, -4, -4), (4, 4, 4)],
        background_id=2,
    )
    g, _ = scene.analytic_gradient([[0, 0, 2.0]])
    np.testing.assert_allclose(g[0, 1], [0, 0, 1], atol=1e-15)


def test_gradient_unit_norm_property(rng):
    scene = two_object_scene()
    p = rng.uniform(-1.2, 1.2, size=(10_000, 3))
    g, flags = scene.analytic_gradient(p)
    norms = np.linalg.norm(g[~flags.any(axis=1)], axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_gradient_discontinuity_flagged():
    scene = two_object_scene()
    g, flags = scene.analytic_gradient([scene.centers[1]])  # sphere center
    assert flags[0, 1]


def test_sign_consistency_with_containment(rng):
    scene = two_object_scene()
    p = rng.uniform(-1.3, 1.3, size=(5000, 3))
    sv = scene.eval_sdf(p)
    # channel 1 sphere containment
    inside_sphere = np.linalg.norm(p - scene.centers[1], axis=1) < scene.params[1, 0]
    np.testing.assert_array_equal(sv.per_object[:, 1] < 0, inside_sphere)
    # indicator of the composed scene: sdf < 0 iff inside any object (with
    # the room interior counted as positive background)
    inside_box = np.all(np.abs(p - scene.centers[2]) < scene.params[2, :3], axis=1)
    outside_room = ~np.all(np.abs(p - scene.centers[0]) < scene.params[0, :3], axis=1)
    np.testing.assert_array_equal(
        sv.scene < 0, inside_sphere | inside_box | outside_room
    )


def test_sphere_trace_closed_form(sphere_in_box):
    tr = sphere_in_box.sphere_trace([[-2.5, 0, 0]], [[1, 0, 0]])
    assert tr.hit[0] and tr.channel[0] == 1
    assert tr.t[0] == pytest.approx(1.5, abs=2e-5)


def test_sphere_trace_miss():
    scene = AnalyticScene(
        [
            Primitive("sphere", 1, center=(0, 0, 0), radius=0.5),
            Primitive("box", 2, center=(0, 0, 0), half_extents=(2, 2, 2)),
        ],
        bounds=[(-2, -2, -2), (2, 2, 2)],
        background_id=2,
    )
    # from outside the room, pointing away from everything
    tr = scene.sphere_trace([[5, 0, 0]], [[1, 0, 0]])
    assert not tr.hit[0] and tr.channel[0] == -1


def test_sphere_trace_two_boxes_nearer_wins():
    scene = two_box_occlusion_scene()
    tr = scene.sphere_trace([[-2.5, 0, 0]], [[1, 0, 0]])
    assert tr.hit[0] and tr.channel[0] == 1
    assert tr.t[0] == pytest.approx(1.1, abs=2e-5)  # closed-form box entry


def test_sphere_trace_box_depth_closed_form(rng):
    scene = two_box_occlusion_scene()
    # random rays aimed at the front box from the left
    n = 100
    targets = scene.centers[1] + rng.uniform(-0.3, 0.3, size=(n, 3))
    origins = np.tile(np.array([-2.8, 0.0, 0.0]), (n, 1))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tr = scene.sphere_trace(origins, dirs, hit_eps=1e-6)
    # closed-form slab intersection with the front box
    lo, hi = scene.centers[1] - 0.4, scene.centers[1] + 0.4
    t0 = np.maximum.reduce(
        np.minimum((lo - origins) / dirs, (hi - origins) / dirs), axis=1
    )
    hits = tr.hit & (tr.channel == 1)
    assert hits.mean() > 0.9
    np.testing.assert_allclose(tr.t[hits], t0[hits], atol=2e-6)


def test_sphere_trace_step_budget_flag():
    scene = two_box_occlusion_scene()
    tr = scene.sphere_trace([[-2.9, 0, 0]], [[1, 0, 0]], max_steps=1)
    assert not tr.hit[0] and tr.exhausted[0]


def test_validation_errors():
    with pytest.raises(ValueError, match="radius"):
        Primitive("sphere", 1, radius=0.0)
    with pytest.raises(ValueError, match="unit length"):
        Primitive("plane", 1, normal=(0, 0, 2))
    with pytest.raises(ValueError, match="object ids"):
        AnalyticScene(
            [Primitive("sphere", 1, radius=1), Primitive("sphere", 3, radius=1)],
            bounds=[(-2, -2, -2), (2, 2, 2)],
            background_id=3,
        )
    with pytest.raises(ValueError, match="background"):
        AnalyticScene(
            [Primitive("sphere", 1, radius=1), Primitive("box", 2, half_extents=(2, 2, 2))],
            bounds=[(-2, -2, -2), (2, 2, 2)],
            background_id=1,
        )
    with pytest.raises(ValueError, match="not inside"):
        AnalyticScene(
            [Primitive("sphere", 1, center=(1.8, 0, 0), radius=0.5),
             Primitive("box", 2, half_extents=(2, 2, 2))],
            bounds=[(-2, -2, -2), (2, 2, 2)],
            background_id=2,
        )


def test_scene_config_roundtrip(tmp_path):
    text = """
bounds = [[-3.0, -3.0, -3.0], [3.0, 3.0, 3.0]]
background = 3

[[primitives]]
kind = "box"
object_id = 1
center = [-1.0, 0.0, 0.0]
half_extents = [0.4, 0.4, 0.4]
albedo = [0.9, 0.3, 0.2]

[[primitives]]
kind = "box"
object_id = 2
center = [1.0, 0.0, 0.0]
half_extents = [0.4, 0.4, 0.4]

[[primitives]]
kind = "box"
object_id = 3
center = [0.0, 0.0, 0.0]
half_extents = [3.0, 3.0, 3.0]
"""
    path = tmp_path / "scene.toml"
    path.write_text(text)
    scene = load_scene(str(path))
    assert scene.k_objects == 3
    assert scene.inverted.tolist() == [True, False, False]
    np.testing.assert_allclose(scene.albedos[1], [0.9, 0.3, 0.2])


def test_scene_config_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown primitive keys"):
        scene_from_dict(
            {
                "bounds": [[-1, -1, -1], [1, 1, 1]],
                "background": 1,
                "primitives": [
                    {"kind": "box", "object_id": 1, "half_extents": [1, 1, 1], "wat": 1}
                ],
            }
        )
