"""Exit criteria. Each test prints one PASS/FAIL line, repeated in the terminal summary.

The MNIST criteria need the IDX files (``INCAY_MNIST_DIR``, default
``/root/data/mnist``) and are skipped without them.
"""

import time

import numpy as np
import pytest

from _oracles import (GRAD_TOL, check_grad, composite_grad_errors, composite_instance, conv_grad_errors,
                      fc_grad_errors, incay_instance, loss_grad_errors, maxpool_grad_errors, relu_grad_errors,
                      report_criterion, sample_loss_instance)
from incay import losses, trainer
from incay.data import load_mnist, preprocess
from incay.losses import ClassifierState, LossConfig
from incay.numerics import make_rng
from incay.propcheck import run_verification
from incay.trainer import TrainConfig, evaluate, train

pytestmark = pytest.mark.acceptance

INSTANCES = 100


def _loss_case(kind, m=2):
    def run(rng):
        f, y, cls = sample_loss_instance(rng, kind, m)
        return max(loss_grad_errors(kind, f, y, cls, m))
    return run


def _incay_case(rng):
    f, mask, eps = incay_instance(rng)
    value, grad = losses.feature_incay(f, mask, eps)
    raw = losses.feature_incay(f, mask, eps, clip=None)[1]
    assert np.array_equal(grad, raw), "clipping must be inactive on oracle instances"
    return check_grad(lambda t: losses.feature_incay(t, mask, eps)[0], f, grad)


def _composite_case(rng):
    return max(composite_grad_errors(*composite_instance(rng)))


GRADIENT_CASES = {
    "layer fc": fc_grad_errors,
    "layer conv2d": conv_grad_errors,
    "layer maxpool": maxpool_grad_errors,
    "layer relu": relu_grad_errors,
    "loss softmax": _loss_case("softmax"),
    **{f"loss lsoftmax m={m}": _loss_case("lsoftmax", m) for m in (2, 3, 4)},
    **{f"loss asoftmax m={m}": _loss_case("asoftmax", m) for m in (2, 3, 4)},
    "loss center": _loss_case("center"),
    "loss coco": _loss_case("coco"),
    "loss l2softmax": _loss_case("l2softmax"),
    "feature incay": _incay_case,
    "reciprocal-norm composite": _composite_case,
}


def test_gradient_oracle_suite():
    start = time.perf_counter()
    worst = {}
    for i, (name, case) in enumerate(GRADIENT_CASES.items()):
        rng = make_rng(1000 + i)
        worst[name] = max(case(rng) for _ in range(INSTANCES))
    elapsed = time.perf_counter() - start
    failing = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    ok = not failing and elapsed < 120
    overall = max(worst.values())
    report_criterion("gradient oracle suite", ok,
                     f"{len(worst)} cases x {INSTANCES} instances, worst rel err {overall:.2e} "
                     f"(tol {GRAD_TOL:g}), {elapsed:.1f}s (limit 120s)"
                     + (f", failing {failing}" if failing else ""))
    assert ok


def test_property_suite():
    start = time.perf_counter()
    reports = run_verification(0)
    elapsed = time.perf_counter() - start
    for r in reports:
        print(r.summary())
    ok = all(r.passed for r in reports) and elapsed < 60
    ids = ", ".join(f"{r.property_id} {r.violations}/{r.instances}" for r in reports)
    report_criterion("property suite", ok, f"violations/instances: {ids}; {elapsed:.1f}s (limit 60s)")
    assert ok


def test_equivalences():
    rng = make_rng(7)
    lsm_gap = coco_gap = 0.0
    for _ in range(INSTANCES):
        f, y, cls = sample_loss_instance(rng, "softmax")
        a, b = losses.lsoftmax_loss(f, y, cls, 1), losses.softmax_loss(f, y, cls)
        lsm_gap = max(lsm_gap, abs(a.base_loss - b.base_loss), float(np.max(np.abs(a.d_features - b.d_features))))
        base = losses.coco_loss(f, y, cls).base_loss
        w = cls.weights * rng.uniform(0.1, 10.0, size=(cls.weights.shape[0], 1))
        scaled_f = losses.coco_loss(f * rng.uniform(0.1, 10.0), y, cls).base_loss
        scaled_w = losses.coco_loss(f, y, ClassifierState(w)).base_loss
        coco_gap = max(coco_gap, abs(scaled_f - base), abs(scaled_w - base))

    # lambda = 0, mu = 0: the composite objective must train exactly like the bare base loss
    from incay.data import synth_gaussian_blobs
    data = synth_gaussian_blobs(4, 4, 50, 1.0, make_rng(3))
    cfg = TrainConfig(arch="mlp", base_lr=0.01, batch_size=16, total_iters=50, eval_every=1, seed=5,
                      loss=LossConfig(incay_lambda=0.0, decay_mu=0.0))

    def snapshots():
        out = []
        train(cfg, data, on_eval=lambda it, m: out.append(
            [p.weights.copy() for p in m.params if p is not None] + [m.classifier.weights.copy()]))
        return out

    composite = snapshots()
    patched = trainer.reciprocal_norm_total
    trainer.reciprocal_norm_total = lambda f, y, cls, c, mask=None: losses.base_loss(f, y, cls, c)
    try:
        bare = snapshots()
    finally:
        trainer.reciprocal_norm_total = patched
    step_gap = max(float(np.max(np.abs(a - b))) for sa, sb in zip(composite, bare) for a, b in zip(sa, sb))
    ok = lsm_gap <= 1e-12 and coco_gap <= 1e-12 and step_gap == 0.0 and len(composite) == 50
    report_criterion("equivalences", ok,
                     f"lsoftmax(m=1) vs softmax max gap {lsm_gap:.1e}; COCO rescaling gap {coco_gap:.1e}; "
                     f"lambda=mu=0 composite vs base over {len(composite)} steps max param gap {step_gap:.1e}")
    assert ok


# --------------------------------------------------------------------------
# MNIST runs


@pytest.fixture(scope="module")
def mnist(mnist_dir_module):
    train_ds = load_mnist(mnist_dir_module, "train")
    test_ds = load_mnist(mnist_dir_module, "test")
    return preprocess(train_ds, test_ds)[1:]


@pytest.fixture(scope="module")
def mnist_dir_module():
    from conftest import MNIST_DIR, mnist_available
    if not mnist_available():
        pytest.skip(f"MNIST not found under {MNIST_DIR} (set INCAY_MNIST_DIR)")
    return MNIST_DIR


SEEDS = (0, 1, 2)


def run_once(arch, loss, seed, train_ds, test_ds, iters):
    cfg = TrainConfig(arch=arch, loss=loss, total_iters=iters, eval_every=iters, seed=seed, eval_train_limit=1000)
    res = train(cfg, train_ds, test_ds)
    final = evaluate(res.model, test_ds, loss, iters)
    return 100.0 * final.accuracy, final.mean_feature_norm


@pytest.fixture(scope="module")
def quick_runs(mnist):
    train_ds, test_ds = mnist
    out = {}
    for seed in SEEDS:
        for name, lam in (("softmax", 0.0), ("rn", 0.1)):
            start = time.perf_counter()
            acc, norm = run_once("mnist2d", LossConfig(incay_lambda=lam, decay_mu=5e-4), seed, train_ds, test_ds, 10_000)
            out[name, seed] = (acc, norm, time.perf_counter() - start)
            print(f"mnist2d {name} seed={seed}: acc={acc:.2f} norm={norm:.4g} ({out[name, seed][2]:.0f}s)")
    return out


@pytest.mark.slow
class TestQuickExperiment:
    def test_softmax_accuracy(self, quick_runs):
        accs = [quick_runs["softmax", s][0] for s in SEEDS]
        mean = float(np.mean(accs))
        ok = abs(mean - 88.62) <= 2.0
        report_criterion("MNIST-2D softmax accuracy 88.62 +/- 2.0", ok,
                         f"mean {mean:.2f} over seeds {SEEDS} (per seed {', '.join(f'{a:.2f}' for a in accs)})")
        assert ok

    def test_rn_accuracy(self, quick_runs):
        accs = [quick_runs["rn", s][0] for s in SEEDS]
        mean = float(np.mean(accs))
        ok = abs(mean - 89.44) <= 2.0
        report_criterion("MNIST-2D RN+softmax accuracy 89.44 +/- 2.0", ok,
                         f"mean {mean:.2f} over seeds {SEEDS} (per seed {', '.join(f'{a:.2f}' for a in accs)})")
        assert ok

    def test_rn_beats_softmax_on_majority(self, quick_runs):
        wins = [quick_runs["rn", s][0] >= quick_runs["softmax", s][0] for s in SEEDS]
        ok = sum(wins) * 2 > len(SEEDS)
        diffs = ", ".join(f"{quick_runs['rn', s][0] - quick_runs['softmax', s][0]:+.2f}" for s in SEEDS)
        report_criterion("MNIST-2D RN+softmax >= softmax on matched seeds (majority)", ok,
                         f"{sum(wins)}/{len(SEEDS)} seeds; RN minus softmax: {diffs} points")
        assert ok

    def test_rn_norm_ratio(self, quick_runs):
        ratios = [quick_runs["rn", s][1] / quick_runs["softmax", s][1] for s in SEEDS]
        ratio = float(np.mean([quick_runs["rn", s][1] for s in SEEDS]) / np.mean([quick_runs["softmax", s][1] for s in SEEDS]))
        slowest = max(v[2] for v in quick_runs.values())
        ok = ratio >= 1.2 and slowest <= 45 * 60
        report_criterion("MNIST-2D RN+softmax mean feature norm >= 1.2x softmax", ok,
                         f"ratio of seed means {ratio:.3f} (per seed {', '.join(f'{r:.3f}' for r in ratios)}); "
                         f"slowest run {slowest / 60:.1f} min (limit 45)")
        assert ok


@pytest.mark.slow
def test_lambda_trend(mnist):
    train_ds, test_ds = mnist
    train_ds, test_ds = train_ds.subset(10_000), test_ds.subset(2_000)
    start = time.perf_counter()
    acc = {}
    for seed in SEEDS:
        for lam in (0.0, 1.0, 0.1, 0.01):
            acc[lam, seed] = run_once("mlp", LossConfig(incay_lambda=lam, decay_mu=5e-4), seed, train_ds, test_ds, 3000)[0]
    elapsed = time.perf_counter() - start
    parts, ok = [], elapsed <= 600
    for lam in (1.0, 0.1, 0.01):
        diff = float(np.mean([acc[lam, s] - acc[0.0, s] for s in SEEDS]))
        ok &= diff >= -0.5
        parts.append(f"lambda={lam:g}: {diff:+.2f}")
    base = ", ".join(f"{acc[0.0, s]:.2f}" for s in SEEDS)
    report_criterion("lambda trend (MLP, 10k/2k subset, 3000 iters)", ok,
                     f"mean matched-seed gap vs softmax ({base}): {'; '.join(parts)} (limit -0.5); "
                     f"{elapsed:.0f}s (limit 600s)")
    assert ok
