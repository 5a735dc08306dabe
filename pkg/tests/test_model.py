import dataclasses

import numpy as np
import pytest

from salmod import model as M
from salmod.layers import softmax_cross_entropy
from salmod.saliency import white_map
from salmod.tensor import backward

from conftest import rel_error


def cfg(**kw):
    base = dict(num_classes=5, height=64, width=64)
    base.update(kw)
    return M.NetworkConfig(**base)


def inputs(rng, n=2, h=64, w=64):
    return rng.random((n, 3, h, w)), rng.uniform(0, 1, (n, h, w))


# -- configuration -----------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(variant="late_fusion"),
    dict(fusion_level=6),
    dict(saliency_depth=4),
    dict(saliency_width=0.6),
    dict(variant="baseline_rgb", pool_position="after_fusion"),
    dict(pool_position="sideways"),
    dict(init="imagenet"),
    dict(variant="baseline_rgb", init="pretrained"),
    dict(num_classes=1),
])
def test_config_validation_errors(kw):
    with pytest.raises(M.ConfigError):
        cfg(**kw).validate()


def test_default_pool_is_after_fusion():
    assert cfg().pool == "after_fusion"
    assert cfg(variant="baseline_rgb").pool is None


def test_digest_tracks_config():
    assert cfg().digest() == cfg().digest()
    assert cfg().digest() != cfg(fusion_level=3).digest()


# -- parameters ----------------------------------------------------------------------

def test_rgb_shapes_default():
    assert M.rgb_shapes(cfg()) == [(30, 30), (15, 15), (7, 7), (7, 7), (7, 7)]


def test_xavier_bounds_and_zero_bias():
    c = cfg()
    state = M.build(c, seed=3)
    for name, (shape, fi, fo) in M.param_shapes(c).items():
        value = state.params[name]
        assert value.shape == shape
        if name.endswith(".b"):
            assert np.all(value == 0.0)
        else:
            bound = np.sqrt(6.0 / (fi + fo))
            assert np.abs(value).max() <= bound
            assert np.abs(value).max() > 0.8 * bound


def test_build_is_deterministic_and_seeded():
    a, b, other = M.build(cfg(), 1), M.build(cfg(), 1), M.build(cfg(), 2)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["conv1.w"], other.params["conv1.w"])


def test_rgb_weights_independent_of_branch():
    base = M.build(cfg(variant="baseline_rgb"), 4)
    fused = M.build(cfg(), 4)
    for k, v in base.params.items():
        np.testing.assert_array_equal(fused.params[k], v)


def test_saliency_branch_shapes_and_width():
    c = cfg(saliency_depth=3, saliency_width=0.5)
    shapes = M.param_shapes(c)
    assert shapes["sal1.w"][0] == (4, 1, 5, 5)
    assert shapes["sal2.w"][0] == (4, 4, 3, 3)
    assert shapes["sal3.w"][0] == (1, 4, 3, 3)
    assert "sal1.w" not in M.param_shapes(cfg(variant="early_fusion"))
    assert M.param_shapes(cfg(variant="early_fusion"))["conv1.w"][0] == (16, 4, 5, 5)


# -- forward -------------------------------------------------------------------------

@pytest.mark.parametrize("level", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("pool", ["before_fusion", "after_fusion"])
def test_delayed_fusion_all_levels(level, pool, rng):
    c = cfg(fusion_level=level, pool_position=pool)
    images, sal = inputs(rng)
    fr = M.forward(M.build(c, 0), c, images, sal, record_fusion_input=True)
    assert fr.logits.shape == (2, 5)
    assert fr.modulation.shape[2:] == fr.features.shape[2:]
    assert 0.0 <= fr.modulation.value.min() and fr.modulation.value.max() <= 1.0
    h = fr.features.shape[2]
    assert h * fr.feature_stride <= 64 < (h + 3) * fr.feature_stride


@pytest.mark.parametrize("variant", ["baseline_rgb", "early_fusion"])
def test_other_variants_forward(variant, rng):
    c = cfg(variant=variant)
    images, sal = inputs(rng)
    fr = M.forward(M.build(c, 0), c, images, sal)
    assert fr.logits.shape == (2, 5)
    assert fr.modulation is None


def test_missing_or_misshapen_saliency(rng):
    c = cfg()
    images, sal = inputs(rng)
    with pytest.raises(M.ConfigError):
        M.forward(M.build(c, 0), c, images, None)
    with pytest.raises(M.ConfigError):
        M.forward(M.build(c, 0), c, images, sal[:, :32])
    with pytest.raises(M.ConfigError):
        M.forward(M.build(c, 0), c, images[:, :, :32], sal)


def test_white_map_gives_same_modulation_for_any_image(rng):
    c = cfg()
    state = M.build(c, 0)
    white = white_map(64, 64)[None]
    a = M.forward(state, c, rng.random((1, 3, 64, 64)), white).modulation.value
    b = M.forward(state, c, rng.random((1, 3, 64, 64)), white).modulation.value
    np.testing.assert_array_equal(a, b)


def test_silenced_branch_reproduces_baseline_logits(rng):
    c = cfg()
    base_cfg = cfg(variant="baseline_rgb")
    images, sal = inputs(rng, 3)
    silent = M.silence_saliency(M.build(c, 5), c)
    fused = M.forward(silent, c, images, sal).logits.value
    plain = M.forward(M.build(base_cfg, 5), base_cfg, images).logits.value
    np.testing.assert_array_equal(fused, plain)


def test_whole_network_gradient_check():
    # 8x8 inputs, 2 classes; a sample of coordinates per parameter
    c = M.NetworkConfig(num_classes=2, height=8, width=8, fusion_level=2)
    rng = np.random.default_rng(0)
    state = M.build(c, 7)
    for k in state.params:  # nonzero biases exercise every path
        if k.endswith(".b"):
            state.params[k] = rng.uniform(0.05, 0.2, state.params[k].shape)
    images, sal = rng.random((2, 3, 8, 8)), rng.random((2, 8, 8))
    labels = [0, 1]

    def loss_value(st):
        return float(softmax_cross_entropy(M.forward(st, c, images, sal).logits, labels).value[0])

    fr = M.forward(state, c, images, sal)
    backward(softmax_cross_entropy(fr.logits, labels))
    h, worst = 1e-5, 0.0
    for name, node in fr.params.items():
        flat = state.params[name].reshape(-1)
        coords = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            up = loss_value(state)
            flat[i] = old - h
            down = loss_value(state)
            flat[i] = old
            worst = max(worst, rel_error(node.grad.reshape(-1)[i], (up - down) / (2 * h)))
    assert worst < 1e-3


# -- transfer and checkpoints ---------------------------------------------------------

def test_transfer_keeps_all_but_head():
    src_cfg = cfg(num_classes=50)
    src = M.build(src_cfg, 1)
    dst_cfg = cfg(num_classes=20)
    out = M.transfer(src, dst_cfg, seed=9)
    for k, v in out.params.items():
        if k.startswith("fc8"):
            assert v.shape[0] == 20
        else:
            np.testing.assert_array_equal(v, src.params[k])
    fresh = M.transfer(src, dst_cfg, seed=9, skip_saliency=True)
    assert not np.array_equal(fresh.params["sal1.w"], src.params["sal1.w"])
    np.testing.assert_array_equal(fresh.params["sal1.w"], M.build(dst_cfg, 9).params["sal1.w"])


def test_transfer_into_early_fusion_keeps_rgb_slice():
    src = M.build(cfg(variant="baseline_rgb"), 1)
    out = M.transfer(src, cfg(variant="early_fusion"), seed=2)
    np.testing.assert_array_equal(out.params["conv1.w"][:, :3], src.params["conv1.w"])


def test_checkpoint_roundtrip_and_errors(tmp_path):
    c = cfg()
    state = M.build(c, 3)
    M.save_checkpoint(tmp_path / "a.ckpt", state, c)
    M.save_checkpoint(tmp_path / "b.ckpt", M.load_checkpoint(tmp_path / "a.ckpt", c), c)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded = M.load_checkpoint(tmp_path / "a.ckpt")
    for k in state.params:
        np.testing.assert_array_equal(loaded.params[k], state.params[k])
    with pytest.raises(M.ConfigError, match="different config"):
        M.load_checkpoint(tmp_path / "a.ckpt", cfg(fusion_level=3))
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(M.ConfigError):
        M.load_checkpoint(tmp_path / "bad.ckpt")


def test_silence_requires_delayed_fusion():
    c = cfg(variant="baseline_rgb")
    with pytest.raises(M.ConfigError):
        M.silence_saliency(M.build(c, 0), c)


def test_state_count_and_copy():
    state = M.build(cfg(), 0)
    dup = state.copy()
    dup.params["conv1.w"][0, 0, 0, 0] += 1.0
    assert state.params["conv1.w"][0, 0, 0, 0] != dup.params["conv1.w"][0, 0, 0, 0]
    assert state.count("sal") == sum(v.size for k, v in state.params.items() if k.startswith("sal"))
    assert dataclasses.is_dataclass(state)
