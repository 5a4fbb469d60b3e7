"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured numbers (run with -s to stream them).

The desk-scale end-to-end criterion trains the full toy stack on synthetic
textures with planted high-contrast squares; its 0.85 AUROC floor was set
by pilot runs of this implementation (typical values land near 0.92-0.95).
"""

import time

import numpy as np
import pytest
import torch

from qbae import factory
from qbae.data import generate_synthetic_corpus
from qbae.decoder import TokenDecoder
from qbae.evaluation import EvalProfile, auroc, evaluate
from qbae.gradcheck import run_all
from qbae.imaging import ImageTensor, liver_roi_preprocess, nonzero_bbox, patchify, unpatchify
from qbae.perceptual import (
    PerceptualConfig,
    combine_across_scales,
    image_score,
    layer_anomaly_map,
    perceptual_loss,
    pixel_map,
)
from qbae.qformer import QFormerBlock, init_queries
from qbae.training import train


def report(line: str) -> None:
    print(f"\n[acceptance] {line}")


def np_bilinear_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent bilinear resize, half-pixel-center convention."""
    in_h, in_w = m.shape
    out = np.empty((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        src_y = (i + 0.5) * in_h / out_h - 0.5
        y0 = int(np.floor(src_y))
        ty = src_y - y0
        y0c, y1c = min(max(y0, 0), in_h - 1), min(max(y0 + 1, 0), in_h - 1)
        for j in range(out_w):
            src_x = (j + 0.5) * in_w / out_w - 0.5
            x0 = int(np.floor(src_x))
            tx = src_x - x0
            x0c, x1c = min(max(x0, 0), in_w - 1), min(max(x0 + 1, 0), in_w - 1)
            out[i, j] = (
                m[y0c, x0c] * (1 - ty) * (1 - tx)
                + m[y0c, x1c] * (1 - ty) * tx
                + m[y1c, x0c] * ty * (1 - tx)
                + m[y1c, x1c] * ty * tx
            )
    return out


class TestStructuralInvariance:
    def test_latent_length_equals_query_count(self):
        t0 = time.time()
        block = QFormerBlock(dim=64, heads=8)
        for m in (4, 49, 784):
            queries = init_queries(m, 64, seed=m).queries
            for n in (1, 50, 261, 512, 2080):
                z = block(queries, torch.randn(n, 64))
                assert tuple(z.shape) == (m, 64)
        elapsed = time.time() - t0
        assert elapsed < 10.0
        report(f"structural invariance: |Z| = m for all 15 (m, |E|) combos in {elapsed:.1f}s PASS")


class TestRoundtrip:
    def test_patchify_unpatchify_bitwise(self):
        t0 = time.time()
        rng = np.random.default_rng(0)
        for side, patch in [(224, 8), (224, 16), (224, 32), (64, 8)]:
            img = ImageTensor(rng.random((3, side, side), dtype=np.float32))
            tokens, grid = patchify(img, patch)
            back = unpatchify(tokens, grid, normalized=False)
            assert np.array_equal(back.data, img.data)
        elapsed = time.time() - t0
        assert elapsed < 5.0
        report(f"patch roundtrip: bitwise identity for 4 geometries in {elapsed:.1f}s PASS")


class TestGradientChecks:
    def test_all_gradients_match_finite_differences(self):
        t0 = time.time()
        errors = run_all(seed=0)
        elapsed = time.time() - t0
        worst = max(errors.values())
        assert worst < 1e-4, errors
        assert elapsed < 60.0
        detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
        report(f"gradient checks: {detail} (< 1e-4) in {elapsed:.0f}s PASS")


class TestAggregationOracle:
    def test_1000_random_stacks(self):
        t0 = time.time()
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(1000):
            n_layers = int(rng.integers(1, 4))
            n_scales = int(rng.integers(1, 4))
            grids = [int(rng.integers(2, 13)) for _ in range(n_scales)]
            stacks = {
                (i, p): rng.random((grids[p], grids[p])) * 2.0
                for i in range(n_layers)
                for p in range(n_scales)
            }
            maps = list(stacks.values())

            # image scores vs direct enumeration
            mtm = image_score(maps, "max_then_mean")
            expected = float(np.mean([m.max() for m in maps]))
            worst = max(worst, abs(mtm - expected))
            mtx = image_score(maps, "mean_then_max")
            expected = float(np.max([m.mean() for m in maps]))
            worst = max(worst, abs(mtx - expected))

            # pixel maps vs independent resize + reduce
            target = max(grids)
            resized = np.stack([np_bilinear_resize(m, target, target) for m in maps])
            got_mean = pixel_map(maps, "mean", target_hw=(target, target))
            got_max = pixel_map(maps, "max", target_hw=(target, target))
            worst = max(worst, float(np.abs(got_mean - resized.mean(axis=0)).max()))
            worst = max(worst, float(np.abs(got_max - resized.max(axis=0)).max()))

            # hierarchical aggregation vs brute force
            finest = max(grids)
            per_layer = []
            for i in range(n_layers):
                prod = np.ones((finest, finest))
                for p in range(n_scales):
                    prod = prod * np_bilinear_resize(stacks[(i, p)], finest, finest)
                per_layer.append(prod.mean())
            expected_loss = float(np.mean(per_layer))
            got_loss = float(
                np.mean(
                    [
                        combine_across_scales(
                            [torch.from_numpy(stacks[(i, p)]) for p in range(n_scales)],
                            target_hw=(finest, finest),
                        )
                        .mean()
                        .item()
                        for i in range(n_layers)
                    ]
                )
            )
            worst = max(worst, abs(got_loss - expected_loss))
        elapsed = time.time() - t0
        assert worst < 1e-6
        assert elapsed < 30.0
        report(f"aggregation oracle: 1000 stacks, worst dev {worst:.2e} (< 1e-6) in {elapsed:.0f}s PASS")


class TestCosineFixedPoints:
    def test_bounds_and_exact_fixed_points(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            f = torch.from_numpy(rng.standard_normal((5, 5, 7)).astype(np.float32))
            g = torch.from_numpy(rng.standard_normal((5, 5, 7)).astype(np.float32))
            m = layer_anomaly_map(f, g)
            assert float(m.min()) >= 0.0 and float(m.max()) <= 2.0
            assert torch.equal(layer_anomaly_map(f, f), torch.zeros(5, 5))
            assert torch.equal(layer_anomaly_map(f, -f), torch.full((5, 5), 2.0))

        from qbae.encoder import BackboneSpec, make_toy_backbone
        from qbae.perceptual import MultiScalePerceptual

        spec = BackboneSpec(depth=2, width=16, heads=2, patch_size=8, special_tokens=1,
                            tap_layers=(0, 1), pos_grid=4)
        model = MultiScalePerceptual(make_toy_backbone(5, spec))
        cfg = PerceptualConfig(tap_layers=(0, 1), patch_sizes=(8, 16))
        x = torch.rand(1, 3, 32, 32)
        assert float(perceptual_loss(model, x, x.clone(), cfg)) == 0.0
        report("cosine maps: bounds in [0,2], self = 0 exactly, anti-parallel = 2 exactly, "
               "identical-input loss = 0 exactly PASS")


class TestAurocSuite:
    def test_hand_cases_and_invariance(self):
        t0 = time.time()
        assert auroc([0.1, 0.9], [0, 1]) == 1.0
        assert auroc([0.9, 0.1], [0, 1]) == 0.0
        assert auroc([0.5, 0.5], [0, 1]) == 0.5
        rng = np.random.default_rng(11)
        scores = rng.standard_normal(80)
        labels = (rng.random(80) < 0.5).astype(int)
        labels[:2] = [0, 1]
        base = auroc(scores, labels)
        for trial in range(100):
            r = np.random.default_rng(1000 + trial)
            a = float(r.uniform(0.2, 3.0))
            b = float(r.uniform(-2.0, 2.0))
            transformed = np.exp(a * scores) + a * scores**3 + b
            assert auroc(transformed, labels) == base
        elapsed = time.time() - t0
        assert elapsed < 5.0
        report(f"auroc: 3 hand cases exact + invariance under 100 monotone maps in {elapsed:.1f}s PASS")


@pytest.fixture(scope="module")
def bench_corpus(tmp_path_factory):
    torch.set_num_threads(1)  # avoid sync overhead on tiny tensors
    root = tmp_path_factory.mktemp("bench")
    return generate_synthetic_corpus(
        root, side=64, n_train=256, n_test_normal=64, n_test_anomalous=64, square=12, seed=0
    )


class TestFrozenContract:
    def test_checksums_unchanged_after_50_steps(self, tmp_path):
        corpus = generate_synthetic_corpus(
            tmp_path, side=64, n_train=16, n_test_normal=2, n_test_anomalous=2, seed=4
        )
        cfg = factory.toy_run_config(side=64)
        cfg.train.epochs = 25
        cfg.train.batch_size = 8  # 2 steps/epoch * 25 epochs = 50 steps
        detector = factory.build_detector(cfg, seed=42)
        result = train(factory.train_config(cfg), corpus, detector, seed=42)
        assert len(result.records) == 50
        assert result.frozen_before == result.frozen_after
        assert detector.frozen_checksums() == result.frozen_before
        report("frozen contract: encoder + perceptual checksums bitwise-identical after 50 steps PASS")


class TestDeskScaleEndToEnd:
    def test_three_seeds_auroc(self, bench_corpus):
        cfg = factory.toy_run_config(side=64)
        profile = EvalProfile(
            name="bench", perceptual=factory.metric_perceptual_config(cfg), side=64
        )
        assert profile.perceptual.score_mode == "max_then_mean"
        lines = []
        for seed in (42, 7, 13):
            detector = factory.build_detector(cfg, seed=seed)
            t0 = time.time()
            train(factory.train_config(cfg), bench_corpus, detector, seed=seed)
            train_s = time.time() - t0
            result = evaluate(detector, bench_corpus, profile, batch_size=32)
            lines.append(f"seed {seed}: AUROC {result['auroc']:.4f} (train {train_s:.0f}s)")
            assert train_s < 300.0, f"training exceeded 5 minutes: {train_s:.0f}s"
            assert result["auroc"] >= 0.85, lines[-1]
        report("desk-scale end-to-end: " + "; ".join(lines) + " (floor 0.85) PASS")


class TestDeterminism:
    def test_identical_logs_and_reports(self, tmp_path):
        corpus = generate_synthetic_corpus(
            tmp_path / "data", side=64, n_train=16, n_test_normal=4, n_test_anomalous=4, seed=6
        )
        cfg = factory.toy_run_config(side=64)
        cfg.train.epochs = 3
        cfg.train.batch_size = 8
        profile = EvalProfile(
            name="bench", perceptual=factory.metric_perceptual_config(cfg), side=64
        )
        logs, reports = [], []
        for run in range(2):
            detector = factory.build_detector(cfg, seed=42)
            result = train(factory.train_config(cfg), corpus, detector, seed=42)
            # wall_ms is timing telemetry; the log contract is the
            # (step, lr, loss) sequence
            logs.append([(r["step"], r["lr"], r["loss"]) for r in result.records])
            reports.append(evaluate(detector, corpus, profile, batch_size=8))
        assert logs[0] == logs[1]
        assert reports[0] == reports[1]
        report("determinism: seed-42 loss logs and evaluation reports identical across runs PASS")


class TestLiverRoi:
    def test_50_random_masks_against_exhaustive_oracle(self):
        for trial in range(50):
            rng = np.random.default_rng(trial)
            data = np.zeros((96, 96), dtype=np.float32)
            n = int(rng.integers(1, 60))
            ys, xs = rng.integers(0, 96, n), rng.integers(0, 96, n)
            data[ys, xs] = rng.uniform(0.05, 1.0, n).astype(np.float32)
            # oracle: exhaustive nonzero scan
            r0 = c0 = 10**9
            r1 = c1 = -1
            for y in range(96):
                for x in range(96):
                    if data[y, x] != 0:
                        r0, r1 = min(r0, y), max(r1, y)
                        c0, c1 = min(c0, x), max(c1, x)
            assert nonzero_bbox(data) == (r0, r1, c0, c1)
            out = liver_roi_preprocess(ImageTensor(data[None], colorspace="gray"), 224)
            assert out.data.shape == (1, 224, 224)
            h, w = r1 - r0 + 1, c1 - c0 + 1
            top, left = (224 - h) // 2, (224 - w) // 2
            assert np.array_equal(out.data[0, top : top + h, left : left + w], data[r0 : r1 + 1, c0 : c1 + 1])
        report("liver ROI: 50 random masks match exhaustive bbox oracle, output always 224x224 PASS")
