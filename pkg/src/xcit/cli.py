"""``xcit`` command line: benchmarks, counts, gradchecks, toy training,
attention dumps and the invariant suite.

Exit codes: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MAC_NOTE = "# macs: one multiply-accumulate counts as one FLOP unit"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _n_list(text: str) -> list[int]:
    try:
        ns = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--n-list must be comma-separated integers, got {text!r}") from None
    if len(ns) < 2:
        raise UsageError("--n-list needs at least two token counts to fit a slope")
    if any(n < 1 for n in ns):
        raise UsageError(f"--n-list entries must be positive, got {ns}")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise UsageError(f"--n-list must be strictly increasing, got {ns}")
    return ns


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- subcommands


def cmd_bench(a) -> int:
    from .harness.bench import bench_scaling, fit_slopes, records_to_csv

    ns = _n_list(a.n_list)
    if a.d % a.heads:
        raise UsageError(f"--d {a.d} is not divisible by --heads {a.heads}")
    dtype = np.float32 if a.dtype == "float32" else np.float64
    recs = bench_scaling(a.op, a.d, a.heads, ns, reps=a.reps, dtype=dtype, seed=a.seed,
                         head_chunk=a.head_chunk or None)
    _emit(records_to_csv(recs), a.out)
    print(MAC_NOTE)
    slopes = fit_slopes(recs)
    print("# log-log slopes: " + ", ".join(
        f"{k}={'n/a' if v is None else f'{v:.3f}'}" for k, v in slopes.items()))
    if len(ns) < 4 or ns[-1] < 16 * ns[0]:
        print("# note: a reliable slope fit wants >= 4 points spanning >= 16x")
    return EXIT_OK


def cmd_count(a) -> int:
    from .model import reference_check

    try:
        r = reference_check(a.preset, a.res, a.patch)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(MAC_NOTE)
    print(f"preset={a.preset} res={a.res} patch={a.patch}")
    print(f"params={r['params']} ({r['params'] / 1e6:.2f}M)")
    print(f"macs={r['macs']} ({r['macs'] / 1e9:.3f}G)")
    for key in ("params", "macs"):
        ref = r.get(f"{key}_ref")
        if ref is not None:
            print(f"{key}_ref={ref:g} rel_err={r[f'{key}_rel_err']:+.4f} "
                  f"band=+-{r[f'{key}_tol']:.0%} {'PASS' if r[f'{key}_ok'] else 'FAIL'}")
    return EXIT_OK if r["ok"] else EXIT_FAIL


def _gradcheck_units(config: str, seed: int, max_coords: int | None):
    from .gradcheck import gradcheck, random_projection_loss
    from .harness.invariants import _prim_cases
    from .layers import XcitLayer, xcit_layer_forward
    from .model import XcitConfig, build, forward
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    if config == "op":
        for name, (f, ps) in _prim_cases(rng).items():
            yield name, gradcheck(f, ps), (1e-3 if name == "softmax saturated" else 1e-4)
    elif config == "layer":
        layer = XcitLayer(16, 4, rng)
        for p in layer.params():
            p.data[...] += 0.1 * rng.standard_normal(p.shape)
        x = Tensor(rng.standard_normal((2, 6, 16)))
        f = lambda: random_projection_loss(xcit_layer_forward(x, (2, 3), layer, "eval"), seed)
        yield "xcit_layer d=16 h=4", gradcheck(f, layer.params(), max_coords=max_coords, rng=rng), 1e-4
    else:
        model = small_gradcheck_model(seed)
        img = Tensor(rng.standard_normal((2, 3, 16, 16)))
        f = lambda: random_projection_loss(forward(model, img, "eval"), seed)
        yield ("model depth=2 d=16 h=4",
               gradcheck(f, model.params(), max_coords=max_coords, rng=rng), 1e-4)


def small_gradcheck_model(seed: int = 0):
    """2-layer d=16 h=4 model with every weight perturbed off its init, so no
    gradient is trivially zero (zero-init head, unit gains and so on)."""
    from .model import XcitConfig, build

    cfg = XcitConfig(depth=2, d=16, h=4, patch_size=8, n_classes=5)
    model = build(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.params():
        p.data[...] += 0.1 * rng.standard_normal(p.shape)
    for layer in model.layers:
        layer.lpi.bn.mean[...] = 0.1 * rng.standard_normal(layer.lpi.bn.mean.shape)
        layer.lpi.bn.var[...] = 1.0 + 0.1 * rng.random(layer.lpi.bn.var.shape)
    return model


def cmd_gradcheck(a) -> int:
    max_coords = a.max_coords if a.max_coords > 0 else None
    ok = True
    for name, res, tol in _gradcheck_units(a.config, a.seed, max_coords):
        passed = res.max_rel_error < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max_rel_error={res.max_rel_error:.3e} "
              f"tol={tol:g} coords={res.n_checked} worst={res.worst_param}{list(res.worst_index)}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train_toy(a) -> int:
    from .harness.toy import ToyTask, history_to_csv, toy_config, train_toy

    if not 2 <= a.classes <= 10:
        raise UsageError(f"--classes must be in [2, 10], got {a.classes}")
    if a.epochs < 1:
        raise UsageError(f"--epochs must be positive, got {a.epochs}")
    task = ToyTask(n_classes=a.classes, seed=a.seed)
    hist = train_toy(toy_config(a.classes), task, a.epochs, seed=a.seed, ablate_xca=a.ablate_xca)
    _emit(history_to_csv(hist), a.out)
    if a.out:
        last = hist[-1]
        print(f"epoch {last.epoch}: loss={last.loss:.6f} holdout_acc={last.holdout_acc:.4f}")
    return EXIT_OK


def _dump_config(a):
    from .model import XcitConfig, preset

    if a.preset:
        return preset(a.preset, a.patch)
    if None in (a.depth, a.d, a.heads):
        raise UsageError("give --preset or all of --depth, --d, --heads")
    return XcitConfig(depth=a.depth, d=a.d, h=a.heads, patch_size=a.patch)


def cmd_dump_attn(a) -> int:
    from .embed import read_raw_image, synthetic_image
    from .export import class_attention_grid, maps_to_csv, write_pgm_stack
    from .model import build, forward
    from .tensor import no_tape

    try:
        cfg = _dump_config(a)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if a.image:
        img = read_raw_image(a.image)[:1]
    else:
        img = synthetic_image(1, a.res, a.res, a.seed)
    if cfg.n_cls_layers < 1:
        raise UsageError("the model has no class-attention layer to dump")
    model = build(cfg, a.seed)
    col: dict = {}
    with no_tape():
        forward(model, img.astype(np.float64), "eval", collect=col)
    w = col["cls_weights"][-1]
    w = np.asarray(getattr(w, "data", w))[0]
    maps = class_attention_grid(w, col["grid"])
    if a.format == "csv":
        _emit(maps_to_csv(maps), a.out)
    else:
        if not a.out:
            raise UsageError("--format pgm needs --out DIR")
        for p in write_pgm_stack(maps, a.out):
            print(p)
    return EXIT_OK


def cmd_check(a) -> int:
    from .harness.invariants import run_invariant_suite

    results = run_invariant_suite(a.seed, quick=a.quick)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .harness.bench import OPS
    from .model import PRESET_NAMES

    p = _Parser(prog="xcit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="token-count scaling of one attention op")
    b.add_argument("--op", choices=OPS, required=True)
    b.add_argument("--d", type=int, default=384)
    b.add_argument("--heads", type=int, default=8)
    b.add_argument("--n-list", required=True, help="comma-separated, increasing token counts")
    b.add_argument("--out")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    b.add_argument("--head-chunk", type=int, default=2,
                   help="token attention: heads per chunk (0 = all at once)")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("count", help="parameter and MAC counts for a preset")
    c.add_argument("--preset", required=True, help=f"one of {', '.join(PRESET_NAMES)}")
    c.add_argument("--res", type=int, default=224)
    c.add_argument("--patch", type=int, choices=(8, 16), default=16)
    c.set_defaults(fn=cmd_count)

    g = sub.add_parser("gradcheck", help="tape gradients vs central differences")
    g.add_argument("--config", choices=("small", "layer", "op"), default="small")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-coords", type=int, default=0,
                   help="sample this many coordinates per parameter (0 = all)")
    g.set_defaults(fn=cmd_gradcheck)

    t = sub.add_parser("train-toy", help="train a small model on the synthetic grating task")
    t.add_argument("--classes", type=int, default=2)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.add_argument("--ablate-xca", action="store_true", help="zero and freeze every XCA gain")
    t.set_defaults(fn=cmd_train_toy)

    d = sub.add_parser("dump-attn", help="class-attention weights over the patch grid")
    d.add_argument("--preset", help=f"one of {', '.join(PRESET_NAMES)}")
    d.add_argument("--depth", type=int)
    d.add_argument("--d", type=int)
    d.add_argument("--heads", type=int)
    d.add_argument("--patch", type=int, choices=(8, 16), default=16)
    d.add_argument("--image", help="raw image file; a seeded synthetic image when omitted")
    d.add_argument("--res", type=int, default=224, help="synthetic image side")
    d.add_argument("--out")
    d.add_argument("--format", choices=("csv", "pgm"), default="csv")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_dump_attn)

    k = sub.add_parser("check", help="run the invariant suite")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--quick", action="store_true", help="fewer random trials")
    k.set_defaults(fn=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
