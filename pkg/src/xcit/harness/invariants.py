"""Seeded invariant checks across all modules, reported as pass/fail rows
with the measured value next to its limit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import ops
from ..attention import XcaHeadWeights, xca_flops, xca_parts
from ..embed import sinusoid_codes
from ..gradcheck import gradcheck, random_projection_loss
from ..layers import XcitLayer, drop_path, xcit_layer_forward
from ..linalg import spectrum_gap
from ..model import PRESET_NAMES, REFERENCE_SIZES, build, count_flops, count_params, param_count, preset, XcitConfig
from ..tensor import Param, Tensor, no_tape
from .bench import loglog_slope
from .oracles import depthwise_conv3x3_oracle


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{tag}] {self.name}: {self.value:.3e} (limit {self.limit:.1e}){extra}"


def _below(name, value, limit, detail="") -> CheckResult:
    return CheckResult(name, bool(np.isfinite(value) and value < limit), float(value), limit, detail)


# ---------------------------------------------------------------- tensor core


def check_softmax(rng, trials: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((3, int(rng.integers(1, 20)))) * 10
        y = ops.softmax_last_axis(Tensor(x)).data
        y2 = ops.softmax_last_axis(Tensor(x + rng.uniform(-50, 50))).data
        worst = max(worst, np.abs(y.sum(-1) - 1).max(), np.abs(y - y2).max(), -y.min())
    return _below("softmax rows sum to 1, shift invariant", worst, 1e-12)


def naive_softmax(x) -> Tensor:
    """Softmax without max-subtraction: the mutant the stability check must
    catch."""
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(Tensor(x).data)
        return Tensor(e / e.sum(axis=-1, keepdims=True), _trusted=True)


def check_softmax_stability(softmax: Callable = ops.softmax_last_axis) -> CheckResult:
    y = np.asarray(softmax(Tensor(np.array([1000.0, 0.0]))).data)
    err = np.abs(y - np.array([1.0, 0.0])).max() if np.all(np.isfinite(y)) else np.inf
    return _below("softmax([1000, 0]) == [1, 0]", err, 1e-12)


def check_l2_normalize(rng, trials: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((int(rng.integers(1, 10)), int(rng.integers(1, 10))))
        axis = int(rng.integers(0, 2))
        y = ops.l2_normalize_axis(Tensor(x), axis).data
        yy = ops.l2_normalize_axis(Tensor(y), axis).data
        worst = max(worst, np.abs(np.linalg.norm(y, axis=axis) - 1).max(), np.abs(yy - y).max())
    return _below("l2 normalize: unit slices, idempotent", worst, 1e-12)


def check_spectrum(rng, trials: int = 100, max_extent: int = 32) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        N, d = (int(v) for v in rng.integers(1, max_extent + 1, size=2))
        worst = max(worst, spectrum_gap(rng.standard_normal((N, d))))
    return _below(f"Gram/covariance spectra agree ({trials} random X)", worst, 1e-9)


def check_depthwise_conv(rng) -> CheckResult:
    x = rng.standard_normal((2, 3, 4, 5))
    w, b = rng.standard_normal((3, 3, 3)), rng.standard_normal(3)
    got = ops.depthwise_conv3x3(Tensor(x), Tensor(w), Tensor(b)).data
    err = np.abs(got - depthwise_conv3x3_oracle(x, w, b)).max()
    return _below("depthwise conv matches loop oracle", err, 1e-12)


def _prim_cases(rng):
    x = Param(rng.standard_normal((3, 5)))
    g, bb = Param(1 + 0.1 * rng.standard_normal(5)), Param(rng.standard_normal(5))
    img = Param(rng.standard_normal((2, 3, 4, 4)))
    wd, bd = Param(rng.standard_normal((3, 3, 3))), Param(rng.standard_normal(3))
    wc = Param(rng.standard_normal((4, 3, 3, 3)))
    bc = Param(rng.standard_normal(4))
    stats = ops.BatchNormStats.init(3)
    sat = Param(rng.choice([-30.0, 30.0], size=(2, 4)) + 0.1 * rng.standard_normal((2, 4)))
    a, m = Param(rng.standard_normal((2, 3, 4))), Param(rng.standard_normal((4, 2)))
    L = lambda t, s=0: random_projection_loss(t, s)
    return {
        "matmul": (lambda: L(ops.matmul(a, m)), [a, m]),
        "softmax": (lambda: L(ops.softmax_last_axis(x)), [x]),
        "softmax saturated": (lambda: L(ops.softmax_last_axis(sat)), [sat]),
        "l2_normalize": (lambda: L(ops.l2_normalize_axis(x, 0)), [x]),
        "layer_norm": (lambda: L(ops.layer_norm(x, g, bb)), [x, g, bb]),
        "gelu": (lambda: L(ops.gelu(x)), [x]),
        "batch_norm train": (lambda: L(ops.batch_norm_2d(img, Param(np.ones(3)), bd, stats, "train")),
                             [img, bd]),
        "batch_norm eval": (lambda: L(ops.batch_norm_2d(img, Param(np.ones(3)), bd, stats, "eval")),
                            [img, bd]),
        "depthwise_conv3x3": (lambda: L(ops.depthwise_conv3x3(img, wd, bd)), [img, wd, bd]),
        "conv2d": (lambda: L(ops.conv2d(img, wc, bc)), [img, wc, bc]),
        "cross_entropy": (lambda: ops.cross_entropy(x, np.array([0, 3, 1])), [x]),
    }


def check_primitive_grads(rng) -> list[CheckResult]:
    out = []
    for name, (f, ps) in _prim_cases(rng).items():
        tol = 1e-3 if name == "softmax saturated" else 1e-4
        r = gradcheck(f, ps)
        out.append(_below(f"gradcheck {name}", r.max_rel_error, tol))
    return out


# ---------------------------------------------------------------- attention


def check_xca(rng, trials: int = 200, max_n: int = 64, max_d: int = 64) -> list[CheckResult]:
    """Row-stochasticity, boundedness, head-block equivalence, permutation
    equivariance and N-independent map shape on random instances."""
    stoch = bound = block = perm = 0.0
    shapes_ok = True
    for _ in range(trials):
        h = int(rng.choice([1, 2, 4, 8]))
        d = h * int(rng.integers(1, max_d // h + 1))
        N = int(rng.integers(1, max_n + 1))
        w = XcaHeadWeights(d, h, rng)
        w.temp.data[...] = rng.uniform(0.2, 3.0, size=h)
        X = rng.standard_normal((N, d))
        parts = xca_parts(Tensor(X), w)
        maps, cc = parts.maps.data, parts.crosscov.data
        stoch = max(stoch, np.abs(maps.sum(-1) - 1).max(), -maps.min())
        bound = max(bound, np.abs(cc).max() - 1.0)
        heads = np.concatenate([xca_parts(Tensor(X), w.head_slice(i)).mixed.data for i in range(h)],
                               axis=-1)
        block = max(block, np.abs(heads - parts.mixed.data).max())
        p = rng.permutation(N)
        Y = w.proj(parts.mixed).data
        pp = xca_parts(Tensor(X[p]), w)
        perm = max(perm, np.abs(w.proj(pp.mixed).data - Y[p]).max(), np.abs(pp.maps.data - maps).max())
        N2 = int(rng.integers(1, max_n + 1))
        shapes_ok &= xca_parts(Tensor(rng.standard_normal((N2, d))), w).maps.shape == maps.shape
    return [
        _below("XCA maps row-stochastic", stoch, 1e-12),
        CheckResult("XCA cross-covariance in [-1, 1]", bound <= 1e-12, bound, 1e-12),
        _below("XCA h heads == concatenated single heads", block, 1e-12),
        _below("XCA token-permutation equivariance", perm, 1e-12),
        CheckResult("XCA map shape independent of N", shapes_ok, float(not shapes_ok), 0.5),
    ]


def check_xca_mac_linearity() -> CheckResult:
    Ns = [64, 128, 256, 512, 1024, 2048, 4096, 8192]
    slope = loglog_slope(Ns, [xca_flops(n, 384, 8) for n in Ns])
    return _below("XCA MAC count log-log slope == 1", abs(slope - 1.0), 1e-9)


# ---------------------------------------------------------------- layers and model


def check_residual_identity(rng) -> CheckResult:
    layer = XcitLayer(16, 4, rng)
    for g in layer.ls.params():
        g.data[...] = 0.0
    x = rng.standard_normal((2, 6, 16))
    y = xcit_layer_forward(Tensor(x), (2, 3), layer, "eval").data
    return CheckResult("zero LayerScale layer is the identity", bool(np.array_equal(x, y)),
                       float(np.abs(x - y).max()), 0.0)


def check_drop_path_expectation(rng, n: int = 10_000, p: float = 0.5) -> CheckResult:
    branch = rng.standard_normal((1, 4, 8))
    samples = drop_path(Tensor(np.broadcast_to(branch, (n, 4, 8)).copy()), p, "train", rng).data
    # a fixed linear statistic of the branch; compare its sample mean to the eval value
    proj = rng.standard_normal(32)
    stat = samples.reshape(n, -1) @ proj
    target = branch.reshape(-1) @ proj
    z = abs(stat.mean() - target) / (stat.std(ddof=1) / np.sqrt(n))
    return _below("drop path mean within 3 standard errors", z, 3.0)


def check_layer_gradcheck(rng) -> CheckResult:
    layer = XcitLayer(8, 2, rng)
    for p in layer.params():
        p.data[...] += 0.1 * rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    r = gradcheck(lambda: random_projection_loss(xcit_layer_forward(x, (2, 2), layer, "eval")),
                  layer.params())
    return _below("gradcheck full XCiT layer", r.max_rel_error, 1e-4)


def check_grid_freedom(rng) -> CheckResult:
    layer = XcitLayer(8, 2, rng)
    ok = True
    for hp, wp in [(1, 1), (2, 3), (5, 4), (7, 7)]:
        y = xcit_layer_forward(Tensor(rng.standard_normal((1, hp * wp, 8))), (hp, wp), layer)
        ok &= y.shape == (1, hp * wp, 8) and bool(np.all(np.isfinite(y.data)))
    return CheckResult("one layer handles any patch grid", ok, float(not ok), 0.5)


def check_positional_injective(max_side: int = 64) -> CheckResult:
    worst_dup = 0
    for side in (1, 7, 14, 33, max_side):
        codes = np.round(sinusoid_codes(side, side), 9)
        worst_dup = max(worst_dup, len(codes) - len(np.unique(codes, axis=0)))
    return CheckResult("positional codes distinct per grid position", worst_dup == 0,
                       float(worst_dup), 0.5)


def check_presets(half_unit: float = 0.05) -> list[CheckResult]:
    """Parameter band per preset, and the 384/8 : 224/16 MAC ratio against the
    one implied by the reference sizes. Those print GMACs to one decimal, so the
    implied ratio is an interval; the measured value is the relative distance
    from our ratio to that interval."""
    out = []
    for name in PRESET_NAMES:
        ref_p, g224, g384 = REFERENCE_SIZES[name]
        p = param_count(preset(name))
        out.append(_below(f"{name} params vs {ref_p / 1e6:g}M", abs(p / ref_p - 1), 0.10))
        ratio = count_flops(preset(name, 8), 384) / count_flops(preset(name), 224)
        lo, hi = (g384 - half_unit) / (g224 + half_unit), (g384 + half_unit) / (g224 - half_unit)
        gap = 0.0 if lo <= ratio <= hi else min(abs(ratio / lo - 1), abs(ratio / hi - 1))
        out.append(_below(f"{name} MAC ratio @384/8 : @224/16 = {ratio:.2f} vs [{lo:.2f}, {hi:.2f}]",
                          gap, 0.10))
    return out


def check_resolution_weights(rng) -> CheckResult:
    m = build(XcitConfig(depth=1, d=16, h=4, patch_size=16, n_classes=3), rng)
    n_before = count_params(m)
    with no_tape():
        from ..model import forward

        a = forward(m, rng.standard_normal((1, 3, 32, 32))).data
        b = forward(m, rng.standard_normal((1, 3, 48, 64))).data
    ok = count_params(m) == n_before and bool(np.all(np.isfinite(a)) and np.all(np.isfinite(b)))
    return CheckResult("same weights serve every resolution", ok, float(not ok), 0.5)


def run_invariant_suite(seed: int = 0, softmax: Callable = ops.softmax_last_axis,
                        quick: bool = False) -> list[CheckResult]:
    """Every module's properties with fixed seeds. ``softmax`` can be swapped
    for a mutant to confirm the stability check bites."""
    rng = np.random.default_rng(seed)
    res = [check_softmax(rng), check_softmax_stability(softmax), check_l2_normalize(rng),
           check_spectrum(rng, trials=20 if quick else 100), check_depthwise_conv(rng)]
    res += check_primitive_grads(rng)
    res += check_xca(rng, trials=50 if quick else 200)
    res += [check_xca_mac_linearity(), check_residual_identity(rng), check_drop_path_expectation(rng),
            check_layer_gradcheck(rng), check_grid_freedom(rng), check_positional_injective()]
    res += check_presets()
    res.append(check_resolution_weights(rng))
    return res
