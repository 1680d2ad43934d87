from dataclasses import replace

import numpy as np
import pytest

from incay import trainer
from incay.data import Dataset, synth_gaussian_blobs
from incay.layers import LayerParams
from incay.losses import LossConfig
from incay.numerics import make_rng
from incay.trainer import TrainConfig, TrainingDiverged, evaluate, lr_at, sgd_momentum_step, train


def blobs(k=2, d=2, n=100, spread=0.1, seed=1, split="train"):
    return replace(synth_gaussian_blobs(k, d, n, spread, make_rng(seed)), split=split)


def small_config(**kw):
    base = dict(arch="mlp", base_lr=0.01, batch_size=16, total_iters=200, eval_every=50, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    cfg = TrainConfig(total_iters=10000)

    def test_default_drops(self):
        assert self.cfg.lr_drop_iters == (5000, 7500, 9000)

    def test_before_first_drop(self):
        assert lr_at(self.cfg, 0) == 0.1 and lr_at(self.cfg, 4999) == 0.1

    def test_inclusive_boundary(self):
        assert lr_at(self.cfg, 5000) == pytest.approx(0.01)

    def test_past_all_drops(self):
        assert lr_at(self.cfg, 9999) == pytest.approx(1e-4)

    @pytest.mark.parametrize("drops", [(5, 3), (-1,), (10,)])
    def test_bad_drops(self, drops):
        with pytest.raises(ValueError):
            TrainConfig(total_iters=10, lr_drop_iters=drops)


class TestSgd:
    def test_zero_gradient(self):
        p, v = sgd_momentum_step([np.ones(3)], [np.zeros(3)], [np.zeros(3)], 0.1, 0.9)
        np.testing.assert_array_equal(p[0], np.ones(3))

    def test_plain_step(self):
        p, _ = sgd_momentum_step([np.zeros(1)], [np.ones(1)], [np.zeros(1)], 0.1, 0.0)
        assert p[0].item() == pytest.approx(-0.1)

    def test_two_momentum_steps(self):
        p, v = [np.zeros(1)], [np.zeros(1)]
        p, v = sgd_momentum_step(p, [np.ones(1)], v, 0.1, 0.9)
        assert p[0].item() == pytest.approx(-0.1)
        p, v = sgd_momentum_step(p, [np.ones(1)], v, 0.1, 0.9)
        assert p[0].item() == pytest.approx(-0.29)

    def test_weight_decay_only_on_flagged(self):
        p, _ = sgd_momentum_step([np.ones(1), np.ones(1)], [np.zeros(1)] * 2, [np.zeros(1)] * 2, 1.0, 0.0,
                                 mu=0.5, decayed=[True, False])
        assert p[0].item() == 0.0 and p[1].item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9)


class TestTrain:
    def test_no_eval_interval(self):
        res = train(small_config(total_iters=10, eval_every=50), blobs())
        assert res.records == []

    def test_separable_blobs(self):
        data = blobs(n=200)
        res = train(small_config(total_iters=500, eval_every=500), data)
        assert res.records[-1].accuracy >= 0.99

    def test_deterministic(self):
        cfg = small_config(loss=LossConfig(incay_lambda=0.1, decay_mu=5e-4))
        a = train(cfg, blobs(k=4, d=3, spread=1.0), blobs(k=4, d=3, spread=1.0, seed=2))
        b = train(cfg, blobs(k=4, d=3, spread=1.0), blobs(k=4, d=3, spread=1.0, seed=2))
        assert a.records == b.records
        for pa, pb in zip(a.model.params, b.model.params):
            if pa is not None:
                np.testing.assert_array_equal(pa.weights, pb.weights)

    def test_records_train_then_test(self):
        res = train(small_config(total_iters=100), blobs(), blobs(seed=2, split="test"))
        assert [(r.iter, r.split) for r in res.records] == [(50, "train"), (50, "test"), (100, "train"), (100, "test")]

    def test_zero_lambda_zero_mu_matches_base_loss(self, monkeypatch):
        data = blobs(k=3, d=2, spread=1.0)
        cfg = small_config(total_iters=60, eval_every=20)
        plain = train(cfg, data)
        # swap the composite objective for the bare base loss
        from incay import losses
        monkeypatch.setattr(trainer, "reciprocal_norm_total", lambda f, y, cls, c, mask=None: losses.base_loss(f, y, cls, c))
        bare = train(cfg, data)
        for pa, pb in zip(plain.model.params, bare.model.params):
            if pa is not None:
                np.testing.assert_array_equal(pa.weights, pb.weights)
                np.testing.assert_array_equal(pa.bias, pb.bias)
        np.testing.assert_array_equal(plain.model.classifier.weights, bare.model.classifier.weights)
        assert [r.accuracy for r in plain.records] == [r.accuracy for r in bare.records]

    def test_center_loss_moves_centers(self):
        res = train(small_config(loss=LossConfig(kind="center", center_weight=0.1)), blobs())
        assert np.abs(res.model.classifier.centers).sum() > 0

    @pytest.mark.parametrize("kind", ["lsoftmax", "asoftmax", "coco", "l2softmax"])
    def test_other_losses_learn(self, kind):
        res = train(small_config(loss=LossConfig(kind=kind, alpha=4.0), total_iters=300, eval_every=300), blobs())
        assert res.records[-1].accuracy >= 0.95

    def test_incay_raises_feature_norm(self):
        data = blobs(k=4, d=4, n=100, spread=0.5)
        plain = train(small_config(total_iters=400, eval_every=400), data)
        rn = train(small_config(total_iters=400, eval_every=400, loss=LossConfig(incay_lambda=1.0)), data)
        assert rn.records[-1].mean_feature_norm >= 1.1 * plain.records[-1].mean_feature_norm

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_iteration(self):
        data = Dataset(np.full((8, 2), 1e200), np.array([0, 1] * 4), num_classes=2)
        with pytest.raises(TrainingDiverged) as err:
            train(small_config(total_iters=5), data)
        assert 0 <= err.value.iteration < 5
        assert f"iteration {err.value.iteration}" in str(err.value)

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train(small_config(), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))


class TestEvaluate:
    def model(self, data, seed=0):
        cfg = small_config(seed=seed)
        return trainer.build_model(cfg, data.images.shape[1:], data.num_classes)

    def test_zero_features(self):
        data = blobs()
        m = self.model(data)
        last = m.params[-1]
        m.params[-1] = LayerParams(np.zeros_like(last.weights), np.zeros_like(last.bias))
        rec = evaluate(m, data, LossConfig())
        assert rec.mean_feature_norm == 0.0 and rec.accuracy == 0.0

    def test_perfect_classifier(self):
        data = blobs(n=200)
        res = train(small_config(total_iters=500, eval_every=500), data)
        assert evaluate(res.model, data, LossConfig()).accuracy == 1.0

    def test_chance_level(self):
        rng = make_rng(3)
        labels = np.repeat(np.arange(10), 300)
        data = Dataset(rng.standard_normal((3000, 20)), labels)
        accs = [evaluate(self.model(data, s), data, LossConfig()).accuracy for s in range(5)]
        assert abs(np.mean(accs) - 0.1) <= 0.05

    def test_empty_split(self):
        data = blobs()
        with pytest.raises(ValueError):
            evaluate(self.model(data), data.subset(0), LossConfig())
