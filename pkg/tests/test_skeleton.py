import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsavatar.errors import JointCountMismatch, LayoutTemplateMismatch, WeightRowNotNormalized
from gsavatar.geometry import RigidTransform, build_anchor_layouts, quat_from_axis_angle, quat_normalize
from gsavatar.skeleton import (Pose, SkeletonTemplate, build_position_maps, forward_kinematics, lbs_deform,
                               skinning_transforms)


def chain(n=2, offset=(1.0, 0.0, 0.0)):
    parent = np.arange(-1, n - 1)
    offs = np.zeros((n, 3))
    offs[1:] = offset
    verts = np.zeros((1, 3))
    w = np.zeros((1, n))
    w[0, 0] = 1.0
    return SkeletonTemplate(parent, offs, verts, w)


def random_pose(rng, j, spread=0.6):
    axes = rng.standard_normal((j, 3))
    q = np.stack([quat_from_axis_angle(a, rng.uniform(-spread, spread)) for a in axes])
    return Pose(q, rng.uniform(-0.5, 0.5, 3))


def random_tree(rng, j):
    parent = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, j)])
    return SkeletonTemplate(parent, rng.uniform(-1, 1, (j, 3)), np.zeros((1, 3)), np.eye(j)[:1])


# --------------------------------------------------------------------------- forward kinematics

def test_identity_pose_gives_rest_transforms():
    tpl = chain(3)
    fk = forward_kinematics(tpl, Pose.identity(3))
    assert np.allclose([t.translation for t in fk], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert all(np.allclose(t.rotation, [1, 0, 0, 0]) for t in fk)


def test_root_quarter_turn_moves_child():
    q = np.stack([quat_from_axis_angle([0, 0, 1], np.pi / 2), [1.0, 0, 0, 0]])
    fk = forward_kinematics(chain(2), Pose(q, np.zeros(3)))
    assert np.allclose(fk[1].translation, [0, 1, 0], atol=1e-12)


def test_root_translation_shifts_every_joint(rng):
    tpl = random_tree(rng, 5)
    pose = random_pose(rng, 5)
    d = np.array([0.3, -2.0, 1.5])
    a = forward_kinematics(tpl, pose)
    b = forward_kinematics(tpl, Pose(pose.joint_rotation, pose.root_translation + d))
    for ta, tb in zip(a, b):
        assert np.allclose(tb.translation, ta.translation + d, atol=1e-12)


def test_joint_count_mismatch():
    with pytest.raises(JointCountMismatch):
        forward_kinematics(chain(3), Pose.identity(4))


def test_fk_equals_path_product(rng):
    for _ in range(20):
        tpl = random_tree(rng, 5)
        pose = random_pose(rng, 5, spread=3.0)
        fk = forward_kinematics(tpl, pose)
        for j in range(5):
            path = []
            k = j
            while k >= 0:
                path.append(k)
                k = tpl.parent[k]
            m = np.eye(4)
            m[:3, 3] = pose.root_translation
            for k in reversed(path):
                m = m @ RigidTransform(pose.joint_rotation[k], tpl.rest_offset[k]).matrix()
            assert np.max(np.abs(m - fk[j].matrix())) <= 1e-12


def test_template_rejects_cycles_and_bad_weights():
    with pytest.raises(ValueError):
        SkeletonTemplate([-1, 2, 1], np.zeros((3, 3)), np.zeros((1, 3)), [[1.0, 0, 0]])
    with pytest.raises(WeightRowNotNormalized):
        SkeletonTemplate([-1, 0], np.zeros((2, 3)), np.zeros((1, 3)), [[0.7, 0.7]])


# --------------------------------------------------------------------------- skinning

def test_lbs_identity_transforms(rng):
    p = rng.standard_normal((10, 3))
    w = rng.dirichlet(np.ones(4), size=10)
    assert np.allclose(lbs_deform(p, w, [RigidTransform()] * 4), p, atol=1e-15)


def test_lbs_one_hot_is_rigid(rng):
    p = rng.standard_normal((6, 3))
    ts = [RigidTransform(quat_normalize(rng.standard_normal(4)), rng.standard_normal(3)) for _ in range(3)]
    w = np.zeros((6, 3))
    w[:, 1] = 1.0
    assert np.allclose(lbs_deform(p, w, ts), ts[1].apply(p), atol=1e-14)


def test_lbs_half_blend_of_translation():
    ts = [RigidTransform(), RigidTransform(translation=[0, 0, 1])]
    out = lbs_deform([[1.0, 2.0, 3.0]], [[0.5, 0.5]], ts)
    assert np.allclose(out, [[1.0, 2.0, 3.5]])


def test_lbs_rejects_unnormalized_weights():
    with pytest.raises(WeightRowNotNormalized):
        lbs_deform(np.zeros((1, 3)), [[0.4, 0.4]], [RigidTransform()] * 2)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), j=st.integers(1, 6))
def test_lbs_with_shared_transform_is_that_transform(seed, j):
    rng = np.random.default_rng(seed)
    t = RigidTransform(quat_normalize(rng.standard_normal(4)), rng.uniform(-3, 3, 3))
    p = rng.uniform(-2, 2, (8, 3))
    w = rng.dirichlet(np.ones(j), size=8)
    assert np.allclose(lbs_deform(p, w, [t] * j), t.apply(p), atol=1e-12)


def test_rest_pose_skinning_is_identity(coarse_person):
    mats = skinning_transforms(coarse_person, Pose.identity(coarse_person.n_joints))
    assert np.allclose(mats, np.broadcast_to(np.eye(4)[:3], mats.shape), atol=1e-15)


# --------------------------------------------------------------------------- position maps

@pytest.fixture(scope="module")
def person_layouts(coarse_person):
    return build_anchor_layouts(coarse_person.canonical_vertices, (16, 8))


def test_canonical_pose_maps_equal_anchors(coarse_person, person_layouts):
    maps = build_position_maps(coarse_person, Pose.identity(6), person_layouts)
    for plane, lay in ((maps.front, person_layouts[0]), (maps.back, person_layouts[1])):
        assert np.allclose(plane[lay.active], lay.active_anchors(), atol=1e-15)
        assert not np.any(plane[~lay.active])


def test_root_translation_shifts_maps(coarse_person, person_layouts):
    d = np.array([0.2, -0.1, 0.7])
    pose = Pose(Pose.identity(6).joint_rotation, d)
    maps = build_position_maps(coarse_person, pose, person_layouts)
    assert np.allclose(maps.front[person_layouts[0].active], person_layouts[0].active_anchors() + d)
    rel_f, _ = maps.root_relative()
    assert np.allclose(rel_f[person_layouts[0].active], person_layouts[0].active_anchors())


def test_posed_maps_match_per_vertex_lbs(coarse_person, person_layouts, rng):
    pose = random_pose(rng, 6)
    maps = build_position_maps(coarse_person, pose, person_layouts)
    fk = forward_kinematics(coarse_person, pose)
    rest = forward_kinematics(coarse_person, Pose.identity(6))
    rel = [p.compose(r.inverse()) for p, r in zip(fk, rest)]
    posed = np.array([sum(wj * t.apply(v) for wj, t in zip(w, rel))
                      for v, w in zip(coarse_person.canonical_vertices, coarse_person.skinning_weights)])
    for plane, lay in ((maps.front, person_layouts[0]), (maps.back, person_layouts[1])):
        for r, c in zip(*np.nonzero(lay.active)):
            assert np.allclose(plane[r, c], posed[lay.source_vertex[r, c]], atol=1e-12)


def test_support_invariant_under_pose(coarse_person, person_layouts, rng):
    a = build_position_maps(coarse_person, Pose.identity(6), person_layouts)
    b = build_position_maps(coarse_person, random_pose(rng, 6), person_layouts)
    assert np.array_equal(a.front_mask, b.front_mask) and np.array_equal(a.back_mask, b.back_mask)


def test_foreign_layout_is_rejected(coarse_person):
    other = build_anchor_layouts(coarse_person.canonical_vertices + 0.01, (16, 8))
    with pytest.raises(LayoutTemplateMismatch):
        build_position_maps(coarse_person, Pose.identity(6), other)


def test_pose_json_round_trip(rng):
    pose = random_pose(rng, 6)
    back = Pose.from_json(pose.to_json())
    assert np.array_equal(back.joint_rotation, pose.joint_rotation)
    assert np.array_equal(back.root_translation, pose.root_translation)
