import csv
import math

import numpy as np
import pytest
import torch

from cxrnorm.geometry import SimilarityParams
from cxrnorm.train import (
    DivergenceDetected,
    InvalidTarget,
    LossReport,
    TensorDataset,
    TrainConfig,
    fit,
    load_checkpoint,
    lr_at_epoch,
    mask_to_pm_one,
    mse_loss,
    save_checkpoint,
    soft_margin_loss,
    split_indices,
    total_loss,
)
from cxrnorm.ynet import NetConfig, ShapeMismatch, build

from reference import soft_margin_scalar

LN2 = math.log(2.0)


def random_dataset(n=16, size=64, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, size, size)).astype(np.float32)
    targets = rng.uniform(0.1, 0.9, size=(n, 4)).astype(np.float32)
    masks = np.where(rng.random((n, size, size)) < 0.2, 1.0, -1.0).astype(np.float32)
    return TensorDataset(images=images, targets=targets, masks=masks)


def toy_model(seed=0):
    torch.manual_seed(seed)
    return build(NetConfig.toy())


class TestMseLoss:
    def test_equal_is_zero(self):
        x = torch.rand(3, 4)
        assert float(mse_loss(x, x)) == 0.0

    def test_constant_offset(self):
        t = torch.zeros(5, 4)
        assert float(mse_loss(t + 0.5, t)) == pytest.approx(0.25, abs=1e-7)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(7, 4))
        target = rng.normal(size=(7, 4))
        total = 0.0
        for i in range(7):
            for j in range(4):
                total += (pred[i, j] - target[i, j]) ** 2
        want = total / 28.0
        got = float(mse_loss(torch.from_numpy(pred), torch.from_numpy(target)))
        assert got == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mse_loss(torch.zeros(2, 4), torch.zeros(3, 4))


class TestSoftMarginLoss:
    def test_zero_logits_give_ln2(self):
        logits = torch.zeros(2, 1, 4, 4)
        target = torch.ones(2, 1, 4, 4)
        assert float(soft_margin_loss(logits, target)) == pytest.approx(LN2, rel=1e-7)

    def test_saturation(self):
        logits = torch.full((1, 1, 1, 1), 100.0, dtype=torch.float64)
        target = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        assert float(soft_margin_loss(logits, target)) < 1e-40

    def test_unit_logit_wrong_sign(self):
        logits = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        target = -torch.ones(1, 1, 1, 1, dtype=torch.float64)
        want = math.log(1.0 + math.e)
        assert float(soft_margin_loss(logits, target)) == pytest.approx(want, rel=1e-12)
        assert float(soft_margin_loss(logits, target)) == pytest.approx(1.3133, abs=1e-4)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(scale=5.0, size=(2, 1, 3, 3))
        target = np.where(rng.random((2, 1, 3, 3)) < 0.5, 1.0, -1.0)
        want = np.mean([soft_margin_scalar(x, y)
                        for x, y in zip(logits.ravel(), target.ravel())])
        got = float(soft_margin_loss(torch.from_numpy(logits), torch.from_numpy(target)))
        assert got == pytest.approx(want, rel=1e-12)

    def test_invalid_target_rejected(self):
        logits = torch.zeros(1, 1, 2, 2)
        bad = torch.zeros(1, 1, 2, 2)
        with pytest.raises(InvalidTarget):
            soft_margin_loss(logits, bad)
        with pytest.raises(InvalidTarget):
            soft_margin_loss(logits, torch.full((1, 1, 2, 2), 0.5))

    def test_mask_to_pm_one(self):
        bits = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        out = mask_to_pm_one(bits)
        assert out.dtype == np.float32
        assert np.array_equal(out, [[-1.0, 1.0], [1.0, -1.0]])


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(0.0, 0.0) == 0.0

    def test_declared_norms(self):
        assert total_loss(0.2, LN2) == pytest.approx(0.6, rel=1e-12)

    def test_zero_logit_baseline_maps_to_one(self):
        assert total_loss(0.0, LN2) == pytest.approx(0.5)


class TestLrSchedule:
    def test_anchors(self):
        cfg = TrainConfig()
        assert lr_at_epoch(cfg, 0) == pytest.approx(1e-3, rel=1e-12)
        assert lr_at_epoch(cfg, 20) == pytest.approx(2e-4, rel=1e-12)
        assert lr_at_epoch(cfg, 40) == pytest.approx(4e-5, rel=1e-12)
        assert lr_at_epoch(cfg, 41) == pytest.approx(4e-5, rel=1e-12)

    def test_constant_within_step(self):
        cfg = TrainConfig()
        assert lr_at_epoch(cfg, 19) == lr_at_epoch(cfg, 0)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), -1)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr0 == 1e-3
        assert cfg.momentum == 0.9
        assert cfg.val_fraction == 0.05
        assert cfg.loss_weights == (0.5, 0.5)

    def test_invalid_lr(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)

    def test_invalid_split(self):
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_weights=(0.7, 0.4))


class TestSplit:
    def test_disjoint_and_complete(self):
        train, val = split_indices(400, 0.05, seed=0)
        assert len(val) == 20
        assert len(train) == 380
        assert set(train) & set(val) == set()
        assert set(train) | set(val) == set(range(400))

    def test_stable_given_seed(self):
        a = split_indices(100, 0.05, seed=7)
        b = split_indices(100, 0.05, seed=7)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_seed_changes_split(self):
        a = split_indices(100, 0.05, seed=1)
        b = split_indices(100, 0.05, seed=2)
        assert not np.array_equal(a[1], b[1])


class TestMomentumRecurrence:
    def test_matches_hand_stepped_quadratic(self):
        # loss = 0.5*(3*w0^2 + 5*w1^2); grad = (3*w0, 5*w1)
        coef = torch.tensor([3.0, 5.0], dtype=torch.float64)
        w = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        opt = torch.optim.SGD([w], lr=0.01, momentum=0.9)

        ref_w = np.array([1.0, -2.0])
        ref_v = np.zeros(2)
        for _ in range(5):
            opt.zero_grad()
            loss = 0.5 * (coef * w * w).sum()
            loss.backward()
            opt.step()
            g = np.array([3.0, 5.0]) * ref_w
            ref_v = 0.9 * ref_v + g
            ref_w = ref_w - 0.01 * ref_v
        assert np.allclose(w.detach().numpy(), ref_w, rtol=1e-12, atol=1e-15)

    def test_single_step_descends(self):
        model = toy_model()
        model.eval()  # no dropout; gradients still flow
        data = random_dataset(n=4)
        x = torch.from_numpy(data.images).unsqueeze(1)
        tg = torch.from_numpy(data.targets)
        tm = torch.from_numpy(data.masks).unsqueeze(1)

        def batch_loss():
            out = model(x)
            return total_loss(mse_loss(out.geo, tg), soft_margin_loss(out.seg_logits, tm))

        opt = torch.optim.SGD(model.parameters(), lr=1e-5, momentum=0.0)
        before = batch_loss()
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = batch_loss()
        assert float(after) < float(before.detach())


class TestFit:
    def test_zero_lr_leaves_weights_bitwise(self, monkeypatch):
        model = toy_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        monkeypatch.setattr("cxrnorm.train.lr_at_epoch", lambda cfg, epoch: 0.0)
        cfg = TrainConfig(epochs=1, batch_size=4, val_fraction=0.25, seed=0)
        fit(model, random_dataset(n=8), cfg)
        after = model.state_dict()
        for key in before:
            assert torch.equal(before[key], after[key]), key

    def test_same_seed_identical_curves(self, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=4, val_fraction=0.25, seed=5)
        reports = []
        for _ in range(2):
            model = toy_model(seed=1)
            _, report = fit(model, random_dataset(n=8), cfg)
            reports.append(report)
        assert reports[0].train_total == reports[1].train_total
        assert reports[0].val_total == reports[1].val_total

    def test_loss_decreases_and_artifacts_written(self, tmp_path):
        cfg = TrainConfig(epochs=5, batch_size=8, val_fraction=0.1, seed=0)
        model = toy_model(seed=0)
        _, report = fit(model, random_dataset(n=20, seed=2), cfg,
                        out_dir=tmp_path, config_hash="abc123")
        assert len(report.train_total) == 5
        assert all(np.isfinite(report.train_total))
        assert report.train_total[-1] < report.train_total[0]
        for epoch in range(5):
            assert (tmp_path / f"checkpoint_epoch{epoch:03d}.cxwm").exists()
        with open(tmp_path / "loss_curves.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_cls", "train_seg", "train_total",
                           "val_cls", "val_seg", "val_total"]
        assert len(rows) == 6
        assert float(rows[1][3]) == pytest.approx(report.train_total[0], abs=1e-7)

    def test_total_is_mean_of_normed_branches(self):
        cfg = TrainConfig(epochs=1, batch_size=4, val_fraction=0.25, seed=3)
        _, report = fit(toy_model(), random_dataset(n=8), cfg)
        want = 0.5 * (report.train_cls[0] + report.train_seg[0])
        assert report.train_total[0] == pytest.approx(want, rel=1e-9)

    def test_divergence_detected_and_weights_restored(self):
        model = toy_model()
        cfg = TrainConfig(lr0=1e12, epochs=3, batch_size=4, val_fraction=0.25, seed=0)
        with pytest.raises(DivergenceDetected) as err:
            fit(model, random_dataset(n=8), cfg)
        assert err.value.last_good_epoch == -1
        for p in model.parameters():
            assert torch.isfinite(p).all()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "ckpt.cxwm"
        src = toy_model(seed=1)
        opt = torch.optim.SGD(src.parameters(), lr=1e-3, momentum=0.9)
        data = random_dataset(n=4)
        x = torch.from_numpy(data.images).unsqueeze(1)
        out = src(x)
        loss = total_loss(mse_loss(out.geo, torch.from_numpy(data.targets)),
                          soft_margin_loss(out.seg_logits,
                                           torch.from_numpy(data.masks).unsqueeze(1)))
        loss.backward()
        opt.step()
        save_checkpoint(path, src, opt, epoch=7, config_hash="deadbeef")

        dst = toy_model(seed=2)
        opt2 = torch.optim.SGD(dst.parameters(), lr=1e-3, momentum=0.9)
        meta = load_checkpoint(path, dst, opt2)
        assert meta["epoch"] == 7
        assert meta["config_hash"] == "deadbeef"
        for a, b in zip(src.state_dict().values(), dst.state_dict().values()):
            assert torch.equal(a, b)
        s1 = opt.state_dict()["state"]
        s2 = opt2.state_dict()["state"]
        assert set(s1) == set(s2)
        for idx in s1:
            assert torch.equal(s1[idx]["momentum_buffer"], s2[idx]["momentum_buffer"])


class TestDatasetBuild:
    def test_from_samples(self):
        from cxrnorm.augment import AugmentedSample, Provenance, AugmentSpec
        from cxrnorm.raster import BinaryMask, GrayImage

        img = GrayImage(np.zeros((64, 64), dtype=np.float32))
        params = SimilarityParams(cx=32.0, cy=32.0, theta=0.0, size=48.0)
        mask = BinaryMask(np.ones((64, 64), dtype=np.uint8))
        prov = Provenance(source_id="p0", seed=0, index=0,
                          spec=AugmentSpec(rotation_deg=0.0, scale=1.0,
                                           translate_x=0.0, translate_y=0.0))
        sample = AugmentedSample(image=img, params=params, mask=mask, provenance=prov)
        data = TensorDataset.from_samples([sample, sample])
        assert data.images.shape == (2, 64, 64)
        assert np.allclose(data.targets[0], [0.5, 0.5, 0.0, 0.75])
        assert np.all(data.masks == 1.0)
        assert len(data) == 2
