import math

import numpy as np
import pytest

from xcit.harness.bench import (
    CSV_FIELDS,
    bench_scaling,
    fit_slopes,
    loglog_slope,
    measure_peak_bytes,
    near_square_grid,
    records_to_csv,
)
from xcit.harness.invariants import check_softmax_stability, naive_softmax, run_invariant_suite
from xcit.harness.optim import AdamWState, adamw_step, cosine_lr
from xcit.harness.toy import (
    ToyTask,
    TrainHyper,
    history_to_csv,
    toy_config,
    train_toy,
)
from xcit.model import build, count_params, param_count


# ---------------------------------------------------------------- AdamW


def test_adamw_zero_grad_zero_decay_is_noop():
    p = np.array([1.0, -2.0, 3.0])
    adamw_step([p], [np.zeros(3)], AdamWState(), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adamw_first_step_is_lr():
    p = np.array([0.5])
    adamw_step([p], [np.array([1.0])], AdamWState(), lr=0.1, beta1=0.9, beta2=0.999)
    assert p[0] - 0.5 == pytest.approx(-0.1, abs=1e-8)


def test_adamw_decay_is_decoupled():
    p = np.array([2.0, -4.0])
    state = AdamWState()
    adamw_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p, [2.0 * (1 - 0.001), -4.0 * (1 - 0.001)], rtol=1e-15)
    # moments never saw the decay
    np.testing.assert_array_equal(state.m[0], 0.0)
    np.testing.assert_array_equal(state.v[0], 0.0)


def test_adamw_per_param_decay():
    a, b = np.ones(2), np.ones(2)
    adamw_step([a, b], [np.zeros(2)] * 2, AdamWState(), lr=1.0, weight_decay=[0.5, 0.0])
    assert a[0] == 0.5 and b[0] == 1.0


def test_adamw_matches_closed_form_two_steps():
    p, lr, b1, b2, eps = np.array([0.0]), 0.01, 0.9, 0.999, 1e-8
    g1, g2 = 0.3, -0.7
    state = AdamWState()
    adamw_step([p], [np.array([g1])], state, lr, b1, b2, eps)
    adamw_step([p], [np.array([g2])], state, lr, b1, b2, eps)
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x = -lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x -= lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert p[0] == pytest.approx(x, abs=1e-15)


def test_cosine_lr():
    assert cosine_lr(0, 100, 5e-4, 1e-6) == pytest.approx(5e-4)
    assert cosine_lr(50, 100, 5e-4, 1e-6) == pytest.approx((5e-4 + 1e-6) / 2)
    assert cosine_lr(100, 100, 5e-4, 1e-6) == pytest.approx(1e-6)
    lrs = [cosine_lr(s, 20, 1.0) for s in range(21)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------- toy task


def test_toy_task_deterministic_and_shaped():
    t = ToyTask(n_classes=3, n_train=16, n_holdout=8, seed=2)
    a, b = t.generate(), t.generate()
    assert a[0].shape == (16, 3, 32, 32) and a[2].shape == (8, 3, 32, 32)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert set(np.unique(a[1])) <= {0, 1, 2}


def test_toy_task_bayes_separable():
    # a linear probe (nearest centroid on log power) on oracle features beats 99%
    for k in (2, 10):
        t = ToyTask(n_classes=k, n_train=1000, n_holdout=500, seed=0)
        Xtr, ytr, Xho, yho = t.generate()
        ftr, fho = np.log(t.oracle_features(Xtr)), np.log(t.oracle_features(Xho))
        cent = np.stack([ftr[ytr == c].mean(0) for c in range(k)])
        pred = np.argmin(((fho[:, None, :] - cent[None]) ** 2).sum(-1), axis=1)
        assert (pred == yho).mean() > 0.99


def test_toy_task_class_range():
    with pytest.raises(ValueError):
        ToyTask(n_classes=1)
    with pytest.raises(ValueError):
        ToyTask(n_classes=11)


def test_toy_config_budget():
    cfg = toy_config(2)
    assert count_params(build(cfg)) == param_count(cfg) <= 200_000


def test_epoch0_loss_is_log_classes():
    for k in (2, 5):
        task = ToyTask(n_classes=k, n_train=64, n_holdout=32)
        hist = train_toy(toy_config(k), task, epochs=1)
        assert hist[0].loss == pytest.approx(math.log(k), rel=0.05)


def test_training_deterministic_and_learning():
    task = ToyTask(n_train=96, n_holdout=32, seed=3)
    h1 = train_toy(toy_config(), task, epochs=3, seed=3)
    h2 = train_toy(toy_config(), task, epochs=3, seed=3)
    assert history_to_csv(h1) == history_to_csv(h2)
    assert [r.epoch for r in h1] == [0, 1, 2, 3]


def test_ablation_freezes_xca_gain():
    task = ToyTask(n_train=32, n_holdout=16)
    model = build(toy_config(), 0)
    train_toy(toy_config(), task, epochs=2, ablate_xca=True, model=model)
    for layer in model.layers:
        assert np.all(layer.ls.gamma_xca.data == 0.0)
        assert np.any(layer.ls.gamma_lpi.data != 1.0)


def test_train_rejects_large_config():
    with pytest.raises(ValueError, match="200k"):
        train_toy(toy_config(d=96, h=4), ToyTask(n_train=8, n_holdout=8), epochs=1)


def test_train_divergence_diagnostic():
    from xcit.harness.toy import TrainingDiverged

    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="epoch"):
        train_toy(toy_config(), ToyTask(n_train=32, n_holdout=8),
                  hyper=TrainHyper(lr=1e200, zero_head=False), epochs=2)


def test_history_csv_schema():
    text = history_to_csv(train_toy(toy_config(), ToyTask(n_train=16, n_holdout=8), epochs=1))
    assert text.splitlines()[0] == "epoch,loss,holdout_acc"
    assert len(text.splitlines()) == 3


# ---------------------------------------------------------------- benchmarks


def test_near_square_grid():
    assert near_square_grid(196) == (14, 14)
    assert near_square_grid(8192) == (64, 128)
    assert near_square_grid(13) == (1, 13)


def test_loglog_slope_exact():
    assert loglog_slope([1, 2, 4, 8], [3, 12, 48, 192]) == pytest.approx(2.0, abs=1e-12)


def test_peak_bytes_sees_allocations():
    assert measure_peak_bytes(lambda: np.ones(1_000_000)) >= 8_000_000
    assert measure_peak_bytes(lambda: None) < 10_000


def test_bench_small_sweep_and_csv():
    recs = bench_scaling("xca", 32, 4, [64, 128, 256, 1024], reps=5)
    assert [r.N for r in recs] == [64, 128, 256, 1024]
    s = fit_slopes(recs)
    assert s["macs"] == pytest.approx(1.0, abs=1e-12)
    assert 0.8 < s["peak_bytes"] < 1.2
    lines = records_to_csv(recs).splitlines()
    assert lines[0] == ",".join(CSV_FIELDS) and len(lines) == 5


def test_bench_xcit_layer_op():
    recs = bench_scaling("xcit_layer", 16, 4, [16, 64], reps=5, timing=False)
    assert all(r.peak_bytes > 0 for r in recs)


def test_bench_oom_cells_continue():
    recs = bench_scaling("token_attn", 16, 2, [16, 4096], reps=5, mem_budget=2_000_000)
    assert not recs[0].oom and recs[1].oom
    assert records_to_csv(recs).splitlines()[2].split(",")[4:6] == ["OOM", "OOM"]
    assert fit_slopes(recs)["peak_bytes"] is None


def test_bench_validation():
    with pytest.raises(ValueError):
        bench_scaling("conv", 8, 2, [4, 8])
    with pytest.raises(ValueError):
        bench_scaling("xca", 8, 2, [4, 8], reps=3)


def test_bench_records_deterministic_except_time():
    a = bench_scaling("xca", 16, 2, [32, 64], reps=5)
    b = bench_scaling("xca", 16, 2, [32, 64], reps=5)
    strip = lambda rs: [(r.op, r.N, r.d, r.h, r.peak_bytes, r.macs) for r in rs]
    assert strip(a) == strip(b)


# ---------------------------------------------------------------- invariant suite


def test_invariant_suite_quick_all_pass():
    results = run_invariant_suite(seed=0, quick=True)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_naive_softmax_mutant_is_caught():
    assert check_softmax_stability().passed
    mutant = check_softmax_stability(naive_softmax)
    assert not mutant.passed
    results = run_invariant_suite(seed=0, softmax=naive_softmax, quick=True)
    failed = [r.name for r in results if not r.passed]
    assert failed == ["softmax([1000, 0]) == [1, 0]"]
