import numpy as np
import pytest

from xcit.errors import ConfigError, FormatError
from xcit.harness.invariants import check_presets
from xcit.model import (
    PRESET_NAMES,
    REFERENCE_SIZES,
    XcitConfig,
    build,
    count_flops,
    count_params,
    flops_breakdown,
    forward,
    load_checkpoint,
    param_count,
    preset,
    read_checkpoint,
    save_checkpoint,
    state_dict,
    reference_check,
)
from xcit.tensor import no_tape


def tiny(**kw):
    base = dict(depth=2, d=16, h=4, patch_size=8, n_classes=3)
    base.update(kw)
    return XcitConfig(**base)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        XcitConfig(depth=1, d=10, h=3)
    with pytest.raises(ConfigError):
        XcitConfig(depth=0, d=16, h=4)
    with pytest.raises(ConfigError):
        XcitConfig(depth=1, d=16, h=4, d_r=1.0)
    with pytest.raises(ConfigError):
        XcitConfig(depth=1, d=16, h=4, embed="pixels")


def test_unknown_preset_lists_names():
    with pytest.raises(ConfigError) as e:
        preset("XL99")
    for name in PRESET_NAMES:
        assert name in str(e.value)


def test_preset_regularization():
    assert preset("S12").eps_ls == 1.0 and preset("S12").d_r == 0.05
    assert preset("S24").eps_ls == 1e-5
    assert preset("L24", 8).d_r == 0.3


# ---------------------------------------------------------------- build / forward


def test_build_deterministic():
    a, b = build(tiny(), 3), build(tiny(), 3)
    sa, sb = state_dict(a), state_dict(b)
    assert sa.keys() == sb.keys()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not np.array_equal(build(tiny(), 4).head.weight.data, a.head.weight.data)


def test_param_names_unique_and_readable():
    names = [n for n, _ in build(tiny()).named_params()]
    assert len(names) == len(set(names))
    assert "layer0.xca.temp" in names and "cls_layer1.ls.gamma_attn" in names
    assert "embed.conv0.weight" in names


def test_analytic_param_count_matches_built():
    for cfg in (tiny(), tiny(embed="linear"), tiny(patch_size=16, d=32), tiny(n_cls_layers=0)):
        assert count_params(build(cfg)) == param_count(cfg)


def test_n12_built_param_count():
    n = count_params(build(preset("N12"), 0, np.float32))
    assert 2.7e6 <= n <= 3.3e6
    assert n == param_count(preset("N12"))


def test_s12_param_count():
    assert 24e6 <= param_count(preset("S12")) <= 28e6


@pytest.mark.parametrize("name", ["S12", "M24", "L24"])
def test_param_counts_within_ten_percent(name):
    assert abs(param_count(preset(name)) / REFERENCE_SIZES[name][0] - 1) <= 0.10


@pytest.mark.parametrize("name,res,patch,ref", [
    ("S12", 224, 16, 4.8e9), ("S12", 384, 8, 55.6e9), ("N12", 224, 16, 0.5e9)])
def test_flop_counts(name, res, patch, ref):
    assert abs(count_flops(preset(name, patch), res) / ref - 1) <= 0.15


def test_flop_ratio_invariant():
    for r in check_presets():
        assert r.passed, r.line()


def test_flops_breakdown_parts():
    parts = flops_breakdown(preset("S12"), 224, 224)
    assert set(parts) >= {"embed", "xca", "lpi", "ffn", "cls", "head"}
    assert sum(parts.values()) == count_flops(preset("S12"), 224)


def test_reference_check_unknown_resolution_only_checks_params():
    r = reference_check("T12", 256, 16)
    assert r["macs_ref"] is None and r["ok"]


def test_forward_shapes_and_collect():
    m = build(tiny())
    col = {}
    with no_tape():
        y = forward(m, np.random.default_rng(0).standard_normal((2, 3, 16, 24)), collect=col)
    assert y.shape == (2, 3)
    assert col["grid"].shape == (2, 3)
    assert [t.shape for t in col["xca_maps"]] == [(2, 4, 4, 4)] * 2
    assert [t.shape for t in col["cls_weights"]] == [(2, 4, 7)] * 2


def test_zero_head_gives_zero_logits():
    m = build(tiny())
    m.head.weight.data[...] = 0.0
    y = forward(m, np.random.default_rng(0).standard_normal((3, 3, 16, 16))).data
    assert np.array_equal(y, np.zeros((3, 3)))


def test_identical_images_identical_rows():
    m = build(tiny())
    img = np.random.default_rng(1).standard_normal((1, 3, 16, 16))
    y = forward(m, np.repeat(img, 3, axis=0)).data
    assert np.array_equal(y[0], y[1]) and np.array_equal(y[0], y[2])


def test_resolution_robustness_same_weights():
    m = build(XcitConfig(depth=1, d=16, h=4, patch_size=16, n_classes=4))
    n = count_params(m)
    maps = []
    for res, tokens in ((224, 196), (384, 576)):
        col = {}
        with no_tape():
            y = forward(m, np.random.default_rng(res).standard_normal((1, 3, res, res)), collect=col)
        assert col["grid"].N == tokens
        assert np.all(np.isfinite(y.data))
        maps.append(col["xca_maps"][0].shape)
    assert maps[0] == maps[1] == (1, 4, 4, 4)
    assert count_params(m) == n


def test_train_mode_drop_path_runs():
    m = build(tiny(d_r=0.5))
    y = forward(m, np.random.default_rng(0).standard_normal((4, 3, 16, 16)), "train",
                np.random.default_rng(1))
    assert y.shape == (4, 3)


def test_forward_rejects_bad_resolution():
    with pytest.raises(ConfigError):
        forward(build(tiny()), np.zeros((1, 3, 20, 16)))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m = build(tiny(), 0, np.float32)
    m.layers[0].lpi.bn.mean[...] = 0.5
    save_checkpoint(m, tmp_path / "m.ckpt")
    m2 = build(tiny(), 1, np.float32)
    load_checkpoint(m2, tmp_path / "m.ckpt")
    s1, s2 = state_dict(m), state_dict(m2)
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)
    assert "layer0.lpi.bn.running_mean" in read_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_errors(tmp_path):
    m = build(tiny())
    save_checkpoint(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="payload"):
        read_checkpoint(tmp_path / "cut.ckpt")
    with pytest.raises(FormatError, match="shape"):
        load_checkpoint(build(tiny(d=32)), tmp_path / "m.ckpt")
