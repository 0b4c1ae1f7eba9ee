import numpy as np
import pytest

from gsavatar.config import Config, load_config, parse_config
from gsavatar.errors import EmptyDataset, EmptyInput, InvalidConfig, JointCountMismatch, MissingFile, ShapeMismatch
from gsavatar.optim import AdamState, adam_step, load_adam, save_adam
from gsavatar.skeleton import Pose
from gsavatar.synth import FrameSample
from gsavatar.train import (LossWeights, frame_loss_and_grads, l1_loss, log_to_csv, offset_reg, scale_reg,
                            total_loss, train, write_log)

from fdcases import total_loss_case
from helpers import fd_verdict


# --------------------------------------------------------------------------- losses

def test_l1_examples():
    img = np.zeros((2, 2, 3))
    assert l1_loss(img, img, np.ones((2, 2), bool)) == 0.0
    assert np.isclose(l1_loss(img + 0.25, img, np.ones((2, 2), bool)), 0.25)
    # outside the mask the target is white
    assert np.isclose(l1_loss(img, img, np.zeros((2, 2), bool)), 1.0)


def test_l1_matches_loop(rng):
    r, t = rng.uniform(size=(5, 4, 3)), rng.uniform(size=(5, 4, 3))
    m = rng.uniform(size=(5, 4)) > 0.5
    acc = 0.0
    for i in range(5):
        for j in range(4):
            for c in range(3):
                acc += abs(r[i, j, c] - (t[i, j, c] if m[i, j] else 1.0))
    assert np.isclose(l1_loss(r, t, m), acc / 60, rtol=1e-12)


def test_l1_shape_checks():
    with pytest.raises(ShapeMismatch):
        l1_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)), np.ones((2, 2), bool))


def test_offset_reg_examples_and_loop(rng):
    assert offset_reg([[3.0, 4.0, 0.0], [0, 0, 0]]) == 2.5
    o = rng.standard_normal((9, 3))
    assert np.isclose(offset_reg(o), sum(np.sqrt(sum(x * x for x in row)) for row in o) / 9, rtol=1e-12)


def test_scale_reg_examples_and_loop(rng):
    assert scale_reg([[0.25, 0.25, 0.25]]) == 0.0
    assert np.isclose(scale_reg([[0.0, 0.0, 0.3]]), (0.1 + 0.1 + 0.2) / 3)
    s = rng.uniform(0.01, 0.5, (7, 3))
    ref = 0.0
    for row in s:
        mu = (row[0] + row[1] + row[2]) / 3
        ref += (abs(row[0] - mu) + abs(row[1] - mu) + abs(row[2] - mu)) / 3
    assert np.isclose(scale_reg(s), ref / 7, rtol=1e-12)


def test_regularizers_need_gaussians():
    with pytest.raises(EmptyInput):
        offset_reg(np.zeros((0, 3)))
    with pytest.raises(EmptyInput):
        scale_reg(np.zeros((0, 3)))


def test_zero_weights_leave_pure_l1(rng):
    r, t = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    m = np.ones((4, 4), bool)
    terms = total_loss(r, t, m, rng.standard_normal((5, 3)), rng.uniform(0.1, 1, (5, 3)), LossWeights(0, 0, 0))
    assert terms.total == l1_loss(r, t, m)
    assert not np.any(terms.d_offsets) and not np.any(terms.d_scales)


def test_weights_validation():
    with pytest.raises(InvalidConfig):
        LossWeights(0.0, -1.0, 1.0)
    with pytest.raises(InvalidConfig):
        LossWeights(0.5, 0.01, 1.0)


def test_total_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    ok, frac, worst = fd_verdict(np.concatenate([total_loss_case(rng) for _ in range(5)]))
    assert ok, (frac, worst)


# --------------------------------------------------------------------------- Adam

def test_adam_zero_gradient_is_fixed_point(rng):
    p = {"w": rng.standard_normal((3, 2))}
    out, st = adam_step(p, {"w": np.zeros((3, 2))}, AdamState.for_params(p, lr=0.1))
    assert np.array_equal(out["w"], p["w"]) and st.step == 1


def test_adam_first_step_is_signed_lr(rng):
    p = {"w": rng.standard_normal(10)}
    g = rng.standard_normal(10) * 10 ** rng.uniform(-3, 3, 10)
    out, _ = adam_step(p, {"w": g}, AdamState.for_params(p, lr=0.01, eps=0.0))
    assert np.allclose(out["w"] - p["w"], -0.01 * np.sign(g), rtol=1e-12)


def test_adam_matches_scalar_trace(rng):
    lr, b1, b2, eps = 0.05, 0.8, 0.95, 1e-8
    p = {"x": np.array([1.5])}
    st = AdamState.for_params(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
    x, m, v = 1.5, 0.0, 0.0
    for t in range(1, 30):
        g = 2 * x - 1 + np.sin(t)     # any scalar sequence
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        p, st = adam_step(p, {"x": np.array([2 * p["x"][0] - 1 + np.sin(t)])}, st)
        assert np.isclose(p["x"][0], x, rtol=1e-13)


def test_adam_leaves_inputs_and_frozen_keys(rng):
    p = {"a": rng.standard_normal(4), "b": rng.standard_normal(4)}
    before = {k: v.copy() for k, v in p.items()}
    st = AdamState.for_params(p, lr=0.1)
    out, st2 = adam_step(p, {"a": np.ones(4)}, st)
    assert np.array_equal(p["a"], before["a"]) and out["b"] is p["b"] and st.step == 0
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"a": np.ones(3)}, st)


def test_adam_round_trip(tmp_path, rng):
    p = {"w": rng.standard_normal((2, 3)), "b": rng.standard_normal(3)}
    st = AdamState.for_params(p, lr=0.02)
    for _ in range(3):
        p, st = adam_step(p, {k: rng.standard_normal(v.shape) for k, v in p.items()}, st)
    save_adam(tmp_path / "adam.gsav", st)
    back = load_adam(tmp_path / "adam.gsav")
    assert (back.lr, back.step) == (st.lr, st.step)
    g = {k: np.ones_like(v) for k, v in p.items()}
    a, _ = adam_step(p, g, st)
    b, _ = adam_step(p, g, back)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


# --------------------------------------------------------------------------- loop

def cfg(**kw):
    base = dict(iterations=10, map_height=16, map_width=8, backend="conv_unet", seed=3)
    base.update(kw)
    return Config(**base)


def test_zero_learning_rate_changes_nothing(small_scene):
    s = small_scene
    res = train(cfg(lr=0.0), s.template, s.layouts, s.frames)
    first = train(cfg(iterations=0), s.template, s.layouts, s.frames).params
    assert all(res.params.tensors[k].tobytes() == v.tobytes() for k, v in first.tensors.items())


def test_training_reduces_the_loss(small_scene):
    s = small_scene
    c = cfg(iterations=200, lr=2e-3)
    res = train(c, s.template, s.layouts, s.frames)

    def mean_loss(params):
        return np.mean([frame_loss_and_grads(params, s.template, s.layouts, f, c.weights)[0].total
                        for f in s.frames])

    start = train(cfg(iterations=0), s.template, s.layouts, s.frames).params
    assert mean_loss(res.params) < 0.8 * mean_loss(start)
    assert len(res.log) == 200 and res.adam.step == 200


def test_training_is_deterministic(small_scene):
    s = small_scene
    a = train(cfg(), s.template, s.layouts, s.frames)
    b = train(cfg(), s.template, s.layouts, s.frames)
    assert all(a.params.tensors[k].tobytes() == b.params.tensors[k].tobytes() for k in a.params.tensors)
    assert log_to_csv(a.log) == log_to_csv(b.log)


def test_empty_dataset(small_scene):
    with pytest.raises(EmptyDataset):
        train(cfg(), small_scene.template, small_scene.layouts, [])


def test_joint_count_checked(small_scene):
    f = small_scene.frames[0]
    bad = FrameSample(f.image, f.mask, Pose.identity(4), f.camera)
    with pytest.raises(JointCountMismatch):
        train(cfg(), small_scene.template, small_scene.layouts, [bad])


def test_loss_log_csv(small_scene, tmp_path):
    res = train(cfg(iterations=3), small_scene.template, small_scene.layouts, small_scene.frames)
    write_log(tmp_path / "log.csv", res.log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,l_rgb,l_offset,l_scale,total" and len(lines) == 4
    assert float(lines[1].split(",")[4]) == res.log[0].total


# --------------------------------------------------------------------------- config

def test_config_parsing(tmp_path):
    c = parse_config("iterations = 7  # short\nlr=0.01\n\nbackend = texel_mlp\n")
    assert (c.iterations, c.lr, c.backend) == (7, 0.01, "texel_mlp")
    assert parse_config(c.to_text()) == c
    for bad in ("nonsense = 1", "iterations = many", "just a line", "workers = 0", "azimuths = a,b"):
        with pytest.raises(InvalidConfig):
            parse_config(bad)
    with pytest.raises(MissingFile):
        load_config(tmp_path / "absent.cfg")
