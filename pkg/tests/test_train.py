"""Loss, training loop behavior, and evaluation plumbing."""

import numpy as np
import pytest

from plumeseg import tensor as T
from plumeseg.data import AugmentConfig, SynthConfig, write_synth_dataset
from plumeseg.model import Model, tiny_config
from plumeseg.train import (ScheduleConfig, TrainConfig, cross_entropy,
                            evaluate, train)


class TestCrossEntropy:
    def test_perfect_logits_near_zero_loss(self, rng):
        target = rng.integers(0, 3, (6, 6))
        logits = np.zeros((3, 6, 6), dtype=np.float64)
        for c in range(3):
            logits[c][target == c] = 100.0
        loss = cross_entropy(T.Tensor(logits), target)
        assert loss.item() <= 1e-6

    def test_uniform_logits_log_k(self, rng):
        target = rng.integers(0, 5, (4, 4))
        loss = cross_entropy(T.Tensor(np.zeros((5, 4, 4))), target)
        assert loss.item() == pytest.approx(np.log(5), rel=1e-12)

    def test_ignored_pixels_do_not_contribute(self, rng):
        logits = rng.standard_normal((3, 2, 2))
        target = np.array([[0, 255], [255, 2]])
        loss = cross_entropy(T.Tensor(logits), target)
        z = logits - logits.max(0)
        p = np.exp(z) / np.exp(z).sum(0)
        expected = (-np.log(p[0, 0, 0]) - np.log(p[2, 1, 1])) / 2
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_all_ignored_is_zero_with_warning(self, caplog):
        import logging
        target = np.full((3, 3), 255)
        with caplog.at_level(logging.WARNING, logger="plumeseg.train"):
            loss = cross_entropy(T.Tensor(np.zeros((2, 3, 3))), target)
        assert loss.item() == 0.0
        assert any("ignored" in r.message for r in caplog.records)

    def test_resizes_logits_to_target_grid(self, rng):
        logits = rng.standard_normal((3, 4, 4))
        target = rng.integers(0, 3, (8, 8))
        loss = cross_entropy(T.Tensor(logits), target)
        assert np.isfinite(loss.item())


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    scfg = SynthConfig(amplitude_per_class=50.0, noise_sigma=1.5,
                       background_range=(60.0, 90.0))
    return write_synth_dataset(root, 20, 3, 32, seed=2, cfg=scfg)


def desk_hyper(total=100):
    return TrainConfig(
        schedule=ScheduleConfig(base_lr=1e-3, warmup_iters=min(10, total // 2),
                                total_iters=total),
        batch_size=2,
        augment=AugmentConfig(base_scale=(32, 32), ratio_range=(0.75, 1.333),
                              crop_size=(32, 32)),
        val_every=total,
    )


class TestTrainLoop:
    def test_loss_decreases(self, small_dataset):
        model = Model(tiny_config(num_classes=3), seed=1)
        log = train(model, small_dataset, desk_hyper(100), seed=4)
        assert np.mean(log.losses[-10:]) < np.mean(log.losses[:10])

    def test_deterministic_given_seed(self, small_dataset):
        logs = []
        for _ in range(2):
            model = Model(tiny_config(num_classes=3), seed=1)
            logs.append(train(model, small_dataset, desk_hyper(30), seed=4))
        assert logs[0].losses == logs[1].losses
        assert logs[0].lines == logs[1].lines

    def test_first_logged_lr_is_warmup_start(self, small_dataset):
        model = Model(tiny_config(num_classes=3), seed=1)
        hyper = desk_hyper(12)
        log = train(model, small_dataset, hyper, seed=4)
        first_lr = float(log.lines[0].split(",")[1])
        sched = hyper.schedule
        assert first_lr == pytest.approx(
            sched.base_lr * sched.warmup_start_factor, rel=1e-9)

    def test_log_file_lines(self, small_dataset, tmp_path):
        model = Model(tiny_config(num_classes=3), seed=1)
        hyper = desk_hyper(10)
        hyper.log_path = str(tmp_path / "train.log")
        log = train(model, small_dataset, hyper, seed=4)
        lines = (tmp_path / "train.log").read_text().strip().split("\n")
        assert lines == log.lines
        assert all(len(ln.split(",")) == 3 for ln in lines)


class TestEvaluate:
    def test_oracle_predictor_scores_one(self, small_dataset, monkeypatch):
        from plumeseg.data import load_sample
        model = Model(tiny_config(num_classes=3), seed=1)
        truth = {}
        for e in small_dataset.split("val"):
            s = load_sample(small_dataset, e, 3)
            truth[s.image.tobytes()] = s.mask

        def fake_infer(image):
            mask = truth[np.asarray(image, dtype=np.float32).tobytes()]
            return mask.astype(np.int64), None

        monkeypatch.setattr(model, "infer", fake_infer)
        rep = evaluate(model, small_dataset, "val")
        assert rep.miou == 1.0

    def test_constant_background_predictor(self, small_dataset):
        model = Model(tiny_config(num_classes=3), seed=1)
        model.store["decoder.classifier.bias"].data[:] = \
            np.array([1000.0, 0.0, 0.0], dtype=np.float32)
        rep = evaluate(model, small_dataset, "val")
        assert rep.iou[1] == 0.0 and rep.iou[2] == 0.0
        assert rep.miou < 0.5
