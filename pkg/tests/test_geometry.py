import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsavatar.errors import DegenerateAxis, EmptyMesh, PointBehindCamera
from gsavatar.geometry import (Camera, RigidTransform, build_anchor_layouts, derive_backview_camera,
                               ortho_bounds, project_point, quat_from_axis_angle, quat_to_matrix,
                               rotate_about_axis)

from helpers import pinhole

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
unit3 = st.tuples(finite, finite, finite).filter(lambda v: np.linalg.norm(v) > 1e-3).map(
    lambda v: np.array(v) / np.linalg.norm(v))
angles = st.floats(-2 * np.pi, 2 * np.pi, allow_nan=False)


def random_camera(rng, size=48):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return Camera.from_intrinsics(rng.uniform(20, 80), rng.uniform(20, 80), rng.uniform(0, size - 1),
                                  rng.uniform(0, size - 1), size, size, R=quat_to_matrix(q),
                                  t=rng.uniform(-3, 3, 3))


# --------------------------------------------------------------------------- projection

def test_project_point_on_axis_hits_principal_point():
    cam = Camera.from_intrinsics(50, 50, 16, 16, 32, 32)
    assert np.allclose(project_point([0, 0, 3], cam), [16, 16])


def test_project_point_simple_ratio():
    cam = Camera.from_intrinsics(100, 100, 0, 0, 8, 8)
    assert np.allclose(project_point([1, 0, 2], cam), [50, 0])


def test_project_point_matches_homogeneous_pipeline(rng):
    for _ in range(20):
        cam = random_camera(rng)
        p = cam.center + 4 * cam.R[2] + rng.uniform(-1, 1, 3)
        h = cam.K @ np.hstack([cam.R, cam.t[:, None]]) @ np.append(p, 1.0)
        assert np.allclose(project_point(p, cam), h[:2] / h[2], atol=1e-10)


def test_project_point_behind_camera():
    cam = pinhole()
    with pytest.raises(PointBehindCamera):
        project_point([0, 0, -1], cam)
    with pytest.raises(PointBehindCamera):
        project_point([0, 0, 1e-5], cam)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        Camera.from_intrinsics(-1, 10, 4, 4, 8, 8)
    with pytest.raises(ValueError):
        Camera.from_intrinsics(10, 10, 9, 4, 8, 8)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), 8, 8)


def test_camera_json_round_trip(rng):
    cam = random_camera(rng)
    back = Camera.from_json(cam.to_json())
    assert np.array_equal(back.K, cam.K) and np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t)


def test_scaled_camera_keeps_pixel_centers(rng):
    cam = random_camera(rng, size=64)
    small = cam.scaled(0.5)
    p = cam.center + 5 * cam.R[2] + rng.uniform(-0.5, 0.5, 3)
    big = project_point(p, cam)
    assert np.allclose(project_point(p, small), (big + 0.5) * 0.5 - 0.5)
    assert (small.width, small.height) == (32, 32)


# --------------------------------------------------------------------------- rotations

def test_half_turn_about_y():
    assert np.allclose(rotate_about_axis([0, 0, 5], [0, 0, 0], [0, 1, 0], np.pi), [0, 0, -5], atol=1e-12)


def test_zero_angle_is_identity():
    p = np.array([0.3, -1.2, 4.0])
    assert np.allclose(rotate_about_axis(p, [1, 2, 3], [0, 0, 1], 0.0), p, rtol=0, atol=1e-15)


def test_degenerate_axis():
    with pytest.raises(DegenerateAxis):
        rotate_about_axis([1, 0, 0], [0, 0, 0], [0, 2, 0], 1.0)
    with pytest.raises(DegenerateAxis):
        derive_backview_camera(pinhole(), np.zeros(3), [0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(p=vec3, o=vec3, axis=unit3, angle=angles, s=finite)
def test_rotation_preserves_distance_to_axis_points(p, o, axis, angle, s):
    q = rotate_about_axis(p, o, axis, angle)
    on_axis = o + s * axis
    assert abs(np.linalg.norm(q - on_axis) - np.linalg.norm(p - on_axis)) <= 1e-12 * max(1.0, np.linalg.norm(p - on_axis)) * 50


@settings(max_examples=200, deadline=None)
@given(p=vec3, o=vec3, axis=unit3)
def test_two_half_turns_return(p, o, axis):
    q = rotate_about_axis(rotate_about_axis(p, o, axis, np.pi), o, axis, np.pi)
    assert np.allclose(q, p, atol=1e-12 * 100)


def test_rigid_transform_compose_and_inverse(rng):
    a = RigidTransform(quat_from_axis_angle(rng.standard_normal(3), 0.7), rng.standard_normal(3))
    b = RigidTransform(quat_from_axis_angle(rng.standard_normal(3), -1.3), rng.standard_normal(3))
    p = rng.standard_normal((5, 3))
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    assert np.allclose(a.compose(a.inverse()).apply(p), p)


# --------------------------------------------------------------------------- back-view camera

def looking_at(eye, target=(0, 0, 0), size=32):
    c = (size - 1) / 2
    return Camera.look_at(eye, target, (0, 1, 0), fx=40, fy=40, cx=c, cy=c, width=size, height=size)


def test_backview_of_frontal_camera():
    cam = looking_at((0, 0, 5))
    back = derive_backview_camera(cam, np.zeros(3), np.array([0.0, 1.0, 0.0]))
    assert np.allclose(back.center, [0, 0, -5], atol=1e-12)
    assert np.allclose(project_point([0, 0, 0], back), [cam.cx, cam.cy], atol=1e-12)
    # Rodrigues applied to each world basis vector gives the same orientation
    rot = np.stack([rotate_about_axis(e, np.zeros(3), [0, 1, 0], np.pi) for e in np.eye(3)], axis=1)
    assert np.allclose(back.R, cam.R @ rot.T, atol=1e-12)
    assert np.array_equal(back.K, cam.K) and (back.width, back.height) == (cam.width, cam.height)


def test_backview_involution_random(rng):
    for _ in range(200):
        cam = random_camera(rng)
        root = rng.uniform(-2, 2, 3)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        twice = derive_backview_camera(derive_backview_camera(cam, root, axis), root, axis)
        assert np.max(np.abs(twice.R - cam.R)) < 1e-9 and np.max(np.abs(twice.t - cam.t)) < 1e-9


def test_backview_root_at_camera_center():
    cam = looking_at((1, 2, 5))
    back = derive_backview_camera(cam, cam.center, np.array([0.0, 1.0, 0.0]))
    assert np.allclose(back.center, cam.center, atol=1e-12)
    # optical axis is half-turned: it now points away from the old target
    assert np.allclose(back.R[2], rotate_about_axis(cam.R[2], np.zeros(3), [0, 1, 0], np.pi), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(root=vec3, axis=unit3, seed=st.integers(0, 2**32 - 1))
def test_backview_preserves_distance_to_root(root, axis, seed):
    cam = random_camera(np.random.default_rng(seed))
    back = derive_backview_camera(cam, root, axis)
    d0 = np.linalg.norm(cam.center - root)
    assert abs(np.linalg.norm(back.center - root) - d0) <= 1e-12 * max(1.0, d0) * 100


# --------------------------------------------------------------------------- anchor layouts

def test_single_vertex_lands_on_center_texel():
    front, back = build_anchor_layouts(np.array([[0.0, 0.0, 0.0]]), (5, 5))
    assert front.active[2, 2] and front.n_active == 1 and back.n_active == 0


def test_vertex_behind_midplane_only_in_back():
    v = np.array([[0.0, 0.0, 1.0], [0.3, 0.2, -1.0]])
    front, back = build_anchor_layouts(v, (4, 4))
    assert front.n_active == 1 and back.n_active == 1
    assert np.array_equal(back.active_anchors()[0], v[1])
    assert np.array_equal(front.active_anchors()[0], v[0])


def test_empty_mesh():
    with pytest.raises(EmptyMesh):
        build_anchor_layouts(np.zeros((0, 3)), (4, 4))


def brute_force_layouts(v, res):
    """Per-vertex scan keeping the vertex nearest each plane per texel."""
    h, w = res
    xmin, xmax, ymin, ymax = ortho_bounds(v)
    mid = 0.5 * (v[:, 2].min() + v[:, 2].max())
    best = [{}, {}]
    for i, p in enumerate(v):
        col = min(max(int(np.floor((p[0] - xmin) / (xmax - xmin) * w)), 0), w - 1)
        row = min(max(int(np.floor((ymax - p[1]) / (ymax - ymin) * h)), 0), h - 1)
        side = 0 if p[2] >= mid else 1
        key = -p[2] if side == 0 else p[2]
        cur = best[side].get((row, col))
        if cur is None or key < cur[0]:
            best[side][(row, col)] = (key, i)
    return best


def test_capsule_layouts_match_brute_force(coarse_person):
    v = coarse_person.canonical_vertices
    res = (24, 12)
    layouts = build_anchor_layouts(v, res)
    oracle = brute_force_layouts(v, res)
    for layout, ref in zip(layouts, oracle):
        assert layout.n_active == len(ref)
        for (r, c), (_, i) in ref.items():
            assert layout.source_vertex[r, c] == i
            assert np.array_equal(layout.anchor_position[r, c], v[i])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), h=st.integers(2, 9), w=st.integers(2, 9))
def test_layout_invariants(seed, n, h, w):
    v = np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))
    front, back = build_anchor_layouts(v, (h, w))
    assert front.n_active + back.n_active <= n
    src = np.concatenate([front.active_sources(), back.active_sources()])
    assert len(set(src.tolist())) == len(src)          # no vertex assigned twice
    for lay in (front, back):
        assert np.array_equal(lay.active, lay.source_vertex >= 0)
        assert not np.any(lay.anchor_position[~lay.active])
