import numpy as np
import pytest

from gsavatar.decoder import (N_CHANNELS, DecoderConfig, decode, decoder_backward, init_decoder, load_decoder,
                              save_decoder)
from gsavatar.errors import ResolutionMismatch, SchemaViolation, ShapeMismatch
from gsavatar.geometry import build_anchor_layouts, quat_from_axis_angle
from gsavatar.skeleton import Pose, build_position_maps
from gsavatar.tensorfile import save_tensors

from fdcases import decoder_case
from helpers import fd_verdict


@pytest.fixture(scope="module")
def setup(coarse_person):
    layouts = build_anchor_layouts(coarse_person.canonical_vertices, (8, 4))
    q = np.stack([quat_from_axis_angle([0.3, 1, 0.2], 0.3 * i) for i in range(6)])
    maps = build_position_maps(coarse_person, Pose(q, [0.1, 0.0, -0.2]), layouts)
    return coarse_person, layouts, maps


def config(tpl, layouts, backend):
    return DecoderConfig.for_template(backend, layouts[0].resolution, tpl.n_joints, tpl.height)


@pytest.mark.parametrize("backend", ["texel_mlp", "conv_unet"])
def test_zero_params_give_neutral_avatar(setup, backend):
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, backend), np.random.default_rng(0))
    params = params.replace_tensors({k: np.zeros_like(v) for k, v in params.tensors.items()})
    for g in decode(params, maps):
        m = g.mask
        assert g.channels().shape == (8, 4, N_CHANNELS)
        assert np.all(g.offset[m] == 0) and np.allclose(g.quat[m], [1, 0, 0, 0])
        assert np.allclose(g.opacity[m], 0.5) and np.allclose(g.color[m], 0.5)
        cfg = params.config
        assert np.allclose(g.scale[m], 0.5 * (cfg.s_min + cfg.s_max))
        assert not np.any(g.channels()[~m])


@pytest.mark.parametrize("backend", ["texel_mlp", "conv_unet"])
def test_fresh_decoder_is_neutral_too(setup, backend):
    # zero final layers: the initial avatar is the neutral one regardless of the other weights
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, backend), np.random.default_rng(3))
    f, _ = decode(params, maps)
    assert np.allclose(f.opacity[f.mask], 0.5)


@pytest.mark.parametrize("backend", ["texel_mlp", "conv_unet"])
def test_outputs_respect_constraints_for_wild_params(setup, backend, rng):
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, backend), rng)
    params = params.replace_tensors({k: v + rng.normal(0, 3.0, v.shape) for k, v in params.tensors.items()})
    cfg = params.config
    for g in decode(params, maps):
        m = g.mask
        assert np.all(np.linalg.norm(g.offset[m], axis=-1) <= np.sqrt(3) * cfg.delta_max + 1e-12)
        assert np.all(np.abs(g.offset[m]) <= cfg.delta_max)
        assert np.allclose(np.linalg.norm(g.quat[m], axis=-1), 1.0, atol=1e-12)
        assert np.all(g.scale[m] >= cfg.s_min) and np.all(g.scale[m] <= cfg.s_max)
        for a in (g.opacity[m], g.color[m]):
            assert np.all((a >= 0) & (a <= 1))


def test_decode_is_deterministic(setup, rng):
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, "conv_unet"), rng)
    params = params.replace_tensors({k: v + rng.normal(0, 0.1, v.shape) for k, v in params.tensors.items()})
    a, b = decode(params, maps)[0].channels(), decode(params, maps)[0].channels()
    assert a.tobytes() == b.tobytes()


def test_resolution_mismatch(setup, coarse_person):
    tpl, layouts, maps = setup
    params = init_decoder(DecoderConfig.for_template("texel_mlp", (16, 8), 6, tpl.height), np.random.default_rng(0))
    with pytest.raises(ResolutionMismatch):
        decode(params, maps)


def test_zero_upstream_gives_zero_gradients(setup, rng):
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, "conv_unet"), rng)
    z = np.zeros((8, 4, N_CHANNELS))
    grads = decoder_backward(params, maps, (z, z))
    assert all(not np.any(g) for g in grads.values())


def test_upstream_shape_checked(setup, rng):
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, "texel_mlp"), rng)
    with pytest.raises(ShapeMismatch):
        decoder_backward(params, maps, (np.zeros((8, 4, 13)), np.zeros((8, 4, 14))))


def test_single_texel_chain_rule_by_hand(setup, rng):
    """One live unit per hidden layer and the opacity output, worked out by hand."""
    tpl, layouts, maps = setup
    params = init_decoder(config(tpl, layouts, "texel_mlp"), rng)
    t = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    d_in = t["w0"].shape[0]
    t["w0"][:, 0] = rng.uniform(-0.5, 0.5, d_in)
    t["b0"][0] = 0.7
    t["w1"][0, 0], t["b1"][0] = 1.3, 0.2
    t["w2"][0, 10], t["b2"][10] = -0.8, 0.1
    params = params.replace_tensors(t)

    r, c = map(int, np.argwhere(layouts[0].active)[0])
    x = np.concatenate([maps.front[r, c] - maps.pose.root_translation, maps.front_anchor[r, c], maps.pose.flat()])
    h1 = max(0.0, x @ t["w0"][:, 0] + 0.7)
    h2 = max(0.0, 1.3 * h1 + 0.2)
    raw = -0.8 * h2 + 0.1
    sig = 1.0 / (1.0 + np.exp(-raw))
    d_raw = sig * (1 - sig)                      # upstream 1 on the opacity channel
    up_f = np.zeros((8, 4, N_CHANNELS))
    up_f[r, c, 10] = 1.0
    g = decoder_backward(params, maps, (up_f, np.zeros_like(up_f)))

    assert h1 > 0 and h2 > 0
    assert np.isclose(g["b2"][10], d_raw, rtol=1e-12)
    assert np.isclose(g["w2"][0, 10], h2 * d_raw, rtol=1e-12)
    assert np.isclose(g["w1"][0, 0], h1 * -0.8 * d_raw, rtol=1e-12)
    assert np.allclose(g["w0"][:, 0], x * 1.3 * -0.8 * d_raw, rtol=1e-12)
    assert np.count_nonzero(g["w2"]) == 1


@pytest.mark.parametrize("backend", ["texel_mlp", "conv_unet"])
def test_gradients_match_finite_differences(backend):
    rng = np.random.default_rng(11)
    errs = np.concatenate([decoder_case(rng, backend) for _ in range(3)])
    ok, frac, worst = fd_verdict(errs)
    assert ok, (frac, worst)


def test_save_load_round_trip(setup, tmp_path, rng):
    tpl, layouts, _ = setup
    params = init_decoder(config(tpl, layouts, "conv_unet"), rng)
    save_decoder(tmp_path / "d.gsav", params)
    back = load_decoder(tmp_path / "d.gsav")
    assert back.config == params.config
    assert all(back.tensors[k].tobytes() == v.tobytes() for k, v in params.tensors.items())


def test_load_rejects_wrong_architecture(setup, tmp_path, rng):
    tpl, layouts, _ = setup
    params = init_decoder(config(tpl, layouts, "texel_mlp"), rng)
    c = params.config
    meta = {"backend": "conv_unet", "resolution": list(c.resolution), "n_joints": c.n_joints,
            "delta_max": c.delta_max, "s_min": c.s_min, "s_max": c.s_max}
    save_tensors(tmp_path / "bad.gsav", params.tensors, kind="decoder_params", meta=meta)
    with pytest.raises(SchemaViolation):
        load_decoder(tmp_path / "bad.gsav")
