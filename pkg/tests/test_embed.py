import numpy as np
import pytest

from xcit.embed import (
    ConvPatchEmbed,
    LinearPatchEmbed,
    PatchGrid,
    PosEncoder,
    conv_patch_embed,
    linear_patch_embed,
    positional_encoding,
    read_raw_image,
    sinusoid_codes,
    stem_channels,
    synthetic_image,
    write_raw_image,
)
from xcit.errors import ConfigError, FormatError
from xcit.gradcheck import gradcheck, random_projection_loss
from xcit.harness.oracles import linear_patch_embed_oracle
from xcit.tensor import Param


def test_token_counts():
    assert PatchGrid.for_image(224, 224, 16).N == 196
    assert PatchGrid.for_image(384, 384, 8).N == 2304
    assert PatchGrid.for_image(384, 384, 16).N == 576
    with pytest.raises(ConfigError):
        PatchGrid.for_image(225, 224, 16)


def test_conv_embed_token_count_and_width():
    emb = ConvPatchEmbed(32, 16, np.random.default_rng(0))
    tok, grid = conv_patch_embed(np.zeros((1, 3, 64, 48)), emb)
    assert tok.shape == (1, 12, 32)
    assert grid.shape == (4, 3)


def test_conv_embed_patch8():
    emb = ConvPatchEmbed(16, 8, np.random.default_rng(0))
    tok, grid = conv_patch_embed(np.random.default_rng(1).standard_normal((2, 3, 32, 32)), emb)
    assert tok.shape == (2, 16, 16) and grid.N == 16


def test_conv_embed_zero_image_zero_bias():
    emb = ConvPatchEmbed(16, 16, np.random.default_rng(0))
    tok, _ = conv_patch_embed(np.zeros((1, 3, 32, 32)), emb)
    assert np.array_equal(tok.data, np.zeros((1, 4, 16)))


def test_stem_channels():
    assert stem_channels(384, 16) == [3, 48, 96, 192, 384]
    assert stem_channels(384, 8) == [3, 96, 192, 384]
    with pytest.raises(ConfigError):
        stem_channels(20, 16)
    with pytest.raises(ConfigError):
        stem_channels(32, 12)


def test_linear_embed_locality():
    rng = np.random.default_rng(0)
    emb = LinearPatchEmbed(8, 4, rng)
    img = rng.standard_normal((1, 3, 8, 12))
    base = linear_patch_embed(img, emb)[0].data
    img2 = img.copy()
    img2[0, 1, 5, 9] += 1.0  # patch row 1, col 2 -> token 5
    changed = np.any(linear_patch_embed(img2, emb)[0].data != base, axis=-1)[0]
    assert list(np.flatnonzero(changed)) == [5]


def test_linear_embed_width():
    emb = LinearPatchEmbed(8, 16, np.random.default_rng(0))
    assert emb.proj.weight.shape == (768, 8)


def test_linear_embed_vs_oracle():
    rng = np.random.default_rng(1)
    emb = LinearPatchEmbed(6, 2, rng)
    emb.proj.bias.data[...] = rng.standard_normal(6)
    img = rng.standard_normal((2, 3, 4, 6))
    want = linear_patch_embed_oracle(img, emb.proj.weight.data, emb.proj.bias.data, 2)
    np.testing.assert_allclose(linear_patch_embed(img, emb)[0].data, want, atol=1e-12)


def test_embed_gradients():
    rng = np.random.default_rng(2)
    emb = ConvPatchEmbed(8, 4, rng)
    for p in emb.params():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    img = Param(rng.standard_normal((1, 3, 8, 8)))
    f = lambda: random_projection_loss(conv_patch_embed(img, emb)[0])
    assert gradcheck(f, [img, *emb.params()], max_coords=40).max_rel_error < 1e-4


def test_bad_image_rank():
    with pytest.raises(ConfigError):
        conv_patch_embed(np.zeros((3, 32, 32)), ConvPatchEmbed(16, 16, np.random.default_rng(0)))


# ---------------------------------------------------------------- positional codes


def test_codes_bounded_and_shaped():
    c = sinusoid_codes(5, 7)
    assert c.shape == (35, 64)
    assert np.abs(c).max() <= 1.0


def _min_pair_dist(c):
    sq = (c * c).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * c @ c.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def test_codes_injective_up_to_64():
    # every axis length 1..64 separates its positions, hence every grid does
    for side in range(2, 65):
        assert _min_pair_dist(sinusoid_codes(1, side)) > 1e-3
        assert _min_pair_dist(sinusoid_codes(side, 1)) > 1e-3
    assert _min_pair_dist(sinusoid_codes(64, 64)) > 1e-3


def test_codes_rotation_law():
    # along x, the (sin, cos) pair of each frequency advances by a fixed rotation
    W, k = 9, 3
    c = sinusoid_codes(1, W)
    freqs = 10000.0 ** (2.0 * np.arange(16) / 32)
    step = k / W * 2 * np.pi / freqs
    for p in range(W - k):
        s, co = c[p, :16], c[p, 16:32]
        s2 = s * np.cos(step) + co * np.sin(step)
        c2 = co * np.cos(step) - s * np.sin(step)
        np.testing.assert_allclose(c[p + k, :16], s2, atol=1e-12)
        np.testing.assert_allclose(c[p + k, 16:32], c2, atol=1e-12)


def test_codes_axis_layout():
    c = sinusoid_codes(3, 4).reshape(3, 4, 64)
    # x part constant down a column, y part constant along a row
    assert np.array_equal(c[0, :, :32], c[2, :, :32])
    assert np.array_equal(c[:, 0, 32:], c[:, 3, 32:])


def test_positional_encoding_deterministic():
    enc = PosEncoder(16, np.random.default_rng(0))
    a = positional_encoding(PatchGrid(3, 5), enc).data
    b = positional_encoding(PatchGrid(3, 5, 8), enc).data
    assert a.shape == (15, 16) and np.array_equal(a, b)


# ---------------------------------------------------------------- raw images


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_raw_roundtrip(tmp_path, dtype):
    img = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(dtype)
    write_raw_image(tmp_path / "x.raw", img)
    assert (tmp_path / "x.raw").stat().st_size == 24 + img.nbytes
    np.testing.assert_array_equal(read_raw_image(tmp_path / "x.raw"), img.astype(np.float64))


def test_raw_uint8_scaled(tmp_path):
    img = np.array([0, 51, 255], dtype=np.uint8).reshape(1, 1, 1, 3)
    write_raw_image(tmp_path / "u.raw", img)
    np.testing.assert_allclose(read_raw_image(tmp_path / "u.raw").ravel(), [0.0, 0.2, 1.0])


@pytest.mark.parametrize("mutate,field", [
    (lambda b: b"NOPE" + b[4:], "magic"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "dtype"),
    (lambda b: b[:8] + (0).to_bytes(4, "little") + b[12:], "B"),
    (lambda b: b[:16] + (0).to_bytes(4, "little") + b[20:], "H"),
    (lambda b: b[:-3], "payload"),
    (lambda b: b[:10], "header"),
])
def test_raw_format_errors_name_field(tmp_path, mutate, field):
    write_raw_image(tmp_path / "x.raw", np.zeros((1, 3, 2, 2), np.float32))
    (tmp_path / "y.raw").write_bytes(mutate((tmp_path / "x.raw").read_bytes()))
    with pytest.raises(FormatError, match=f"^{field}"):
        read_raw_image(tmp_path / "y.raw")


def test_synthetic_image_deterministic():
    a, b = synthetic_image(2, 32, 48, seed=3), synthetic_image(2, 32, 48, seed=3)
    assert a.shape == (2, 3, 32, 48) and np.array_equal(a, b)
    assert not np.array_equal(a, synthetic_image(2, 32, 48, seed=4))
