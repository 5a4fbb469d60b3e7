import json

import numpy as np
import pytest
import torch

from qbae import factory
from qbae.data import generate_synthetic_corpus
from qbae.errors import TrainingDiverged, ValidationError
from qbae.perceptual import perceptual_loss
from qbae.training import (
    TrainConfig,
    compute_loss,
    load_checkpoint,
    onecycle_lr,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(
        root, side=64, n_train=12, n_test_normal=4, n_test_anomalous=4, seed=3
    )


def tiny_cfg(**kw):
    cfg = factory.toy_run_config(side=64)
    cfg.train.epochs = kw.pop("epochs", 2)
    cfg.train.batch_size = kw.pop("batch_size", 6)
    for k, v in kw.items():
        setattr(cfg.optimizer, k, v) if hasattr(cfg.optimizer, k) else setattr(cfg.train, k, v)
    return cfg


class TestOneCycle:
    def test_peak_at_phase_boundary(self):
        total, max_lr = 1000, 8e-5
        peak = int(round(0.3 * total))
        assert onecycle_lr(peak, total, max_lr) == pytest.approx(max_lr, abs=0.0)

    def test_start_is_max_over_div(self):
        # closed form at step 0: cos(0) term vanishes -> initial lr exactly
        assert onecycle_lr(0, 1000, 8e-5) == pytest.approx(8e-5 / 25, rel=1e-12)

    def test_tail_below_thousandth(self):
        lr = onecycle_lr(999, 1000, 8e-5)
        assert lr <= 8e-5 / 1e3
        assert lr == pytest.approx(8e-5 / 1e4, rel=1e-9)

    def test_continuous_and_single_peak(self):
        total = 400
        values = [onecycle_lr(s, total, 1e-3) for s in range(total)]
        diffs = np.abs(np.diff(values))
        assert diffs.max() < 1e-3 * 0.02  # no jumps
        assert np.argmax(values) == int(round(0.3 * total))

    def test_matches_closed_form_oracle(self):
        # independent evaluation of the two cosine segments
        total, max_lr, wf, div, fdiv = 200, 1e-3, 0.3, 25.0, 1e4
        peak = int(round(wf * total))
        for step in range(total):
            if step <= peak:
                expected = max_lr / div + (max_lr - max_lr / div) * (1 - np.cos(np.pi * step / peak)) / 2
            else:
                t = (step - peak) / (total - 1 - peak)
                expected = max_lr / fdiv + (max_lr - max_lr / fdiv) * (1 + np.cos(np.pi * t)) / 2
            assert onecycle_lr(step, total, max_lr, wf, div, fdiv) == pytest.approx(expected, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            onecycle_lr(10, 10, 1e-3)
        with pytest.raises(ValidationError):
            onecycle_lr(-1, 10, 1e-3)


class TestTrainConfig:
    def test_bad_lr(self):
        with pytest.raises(ValidationError):
            TrainConfig(max_lr=-1.0)

    def test_bad_loss(self):
        with pytest.raises(ValidationError):
            TrainConfig(loss="mse")


class TestTrainLoop:
    def test_two_runs_identical_loss_trajectories(self, tiny_corpus):
        cfg = tiny_cfg()
        tcfg = factory.train_config(cfg)
        runs = []
        for _ in range(2):
            detector = factory.build_detector(cfg, seed=42)
            result = train(tcfg, tiny_corpus, detector, seed=42)
            runs.append([(r["step"], r["lr"], r["loss"]) for r in result.records])
        assert runs[0] == runs[1]

    def test_loss_decreases_over_200_steps(self, tiny_corpus):
        cfg = tiny_cfg(epochs=100)  # 2 steps/epoch -> 200 steps
        cfg.optimizer.max_lr = 3e-3
        detector = factory.build_detector(cfg, seed=1)
        result = train(factory.train_config(cfg), tiny_corpus, detector, seed=1)
        assert len(result.records) == 200
        first = np.mean([r["loss"] for r in result.records[:10]])
        last = np.mean([r["loss"] for r in result.records[-10:]])
        assert last < first

    def test_determinism_with_augmentation(self, tiny_corpus):
        cfg = tiny_cfg()
        cfg.train.augment = True
        tcfg = factory.train_config(cfg)
        runs = []
        for _ in range(2):
            detector = factory.build_detector(cfg, seed=8)
            result = train(tcfg, tiny_corpus, detector, seed=8)
            runs.append([r["loss"] for r in result.records])
        assert runs[0] == runs[1]

    def test_frozen_checksums_unchanged(self, tiny_corpus):
        cfg = tiny_cfg()
        detector = factory.build_detector(cfg, seed=2)
        result = train(factory.train_config(cfg), tiny_corpus, detector, seed=2)
        assert result.frozen_before == result.frozen_after

    def test_perfect_reconstruction_zero_loss_zero_grad(self, toy_backbone):
        from qbae.perceptual import MultiScalePerceptual, PerceptualConfig

        model = MultiScalePerceptual(toy_backbone)
        pcfg = PerceptualConfig(tap_layers=(1, 3), patch_sizes=(8, 16))
        x = torch.rand(2, 3, 64, 64)
        x_rec = x.clone().requires_grad_(True)
        loss = perceptual_loss(model, x, x_rec, pcfg)
        assert float(loss.detach()) == 0.0
        loss.backward()
        assert bool((x_rec.grad == 0).all())

    def test_loss_mode_algebra(self, toy_backbone):
        from qbae.model import AnomalyDetector, build_trainable_parts
        from qbae.perceptual import MultiScalePerceptual, PerceptualConfig

        parts = build_trainable_parts([64], side=64, seed=0, proj_dim=64, qformer_heads=4,
                                      decoder_depth=1, decoder_heads=4, decoder_patch=8)
        detector = AnomalyDetector([toy_backbone], parts, MultiScalePerceptual(toy_backbone))
        pcfg = PerceptualConfig(tap_layers=(1, 3), patch_sizes=(8, 16))
        g = torch.Generator().manual_seed(0)
        x = torch.rand(2, 3, 64, 64, generator=g)
        y = torch.rand(2, 3, 64, 64, generator=g)
        mae = compute_loss(detector, x, y, "mae", pcfg)
        perc = compute_loss(detector, x, y, "perceptual", pcfg)
        both = compute_loss(detector, x, y, "mae+perceptual", pcfg)
        # unit weights: the combined loss is exactly the sum of the two terms
        assert torch.equal(both, mae + perc)

    def test_nan_loss_aborts_with_step(self, tiny_corpus):
        cfg = tiny_cfg()
        cfg.optimizer.max_lr = 1e6  # blow up quickly
        detector = factory.build_detector(cfg, seed=3)
        with pytest.raises(TrainingDiverged) as err:
            train(factory.train_config(cfg), tiny_corpus, detector, seed=3)
        assert err.value.step >= 0

    def test_empty_corpus(self, tiny_corpus):
        from dataclasses import replace as dc_replace

        cfg = tiny_cfg()
        detector = factory.build_detector(cfg, seed=4)
        empty = dc_replace(tiny_corpus, train=[])
        with pytest.raises(ValidationError):
            train(factory.train_config(cfg), empty, detector, seed=4)

    def test_log_schema_and_checkpoint(self, tiny_corpus, tmp_path):
        from qbae.archive import load_archive

        cfg = tiny_cfg()
        detector = factory.build_detector(cfg, seed=5)
        result = train(factory.train_config(cfg), tiny_corpus, detector, seed=5, out_dir=tmp_path)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == len(result.records)
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "lr", "loss", "wall_ms"}
        assert result.checkpoint_path.exists()
        _, meta = load_archive(result.checkpoint_path)
        assert {"config", "seed", "final_loss", "frozen_checksums"} <= set(meta)
        assert json.loads(meta["config"])["loss"] == "perceptual"


class TestCheckpoint:
    def test_roundtrip_restores_parameters(self, tmp_path):
        from qbae.model import build_trainable_parts

        parts = build_trainable_parts([32], side=32, seed=9, proj_dim=16, qformer_heads=2,
                                      decoder_depth=1, decoder_heads=2, decoder_patch=8)
        save_checkpoint(tmp_path / "c.qfa", parts, metadata={"seed": "9"})
        fresh = build_trainable_parts([32], side=32, seed=77, proj_dim=16, qformer_heads=2,
                                      decoder_depth=1, decoder_heads=2, decoder_patch=8)
        meta = load_checkpoint(tmp_path / "c.qfa", fresh)
        assert meta["seed"] == "9"
        for a, b in zip(parts.state_dict().values(), fresh.state_dict().values()):
            assert torch.equal(a, b)

    def test_prefixes(self, tmp_path):
        from qbae.archive import load_archive
        from qbae.model import build_trainable_parts

        parts = build_trainable_parts([32], side=32, seed=9, proj_dim=16, qformer_heads=2,
                                      decoder_depth=1, decoder_heads=2, decoder_patch=8)
        save_checkpoint(tmp_path / "c.qfa", parts)
        tensors, _ = load_archive(tmp_path / "c.qfa")
        prefixes = {name.split(".")[0] for name in tensors}
        assert prefixes == {"proj", "queries", "qformer", "decoder"}
