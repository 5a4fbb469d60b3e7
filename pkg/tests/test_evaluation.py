import numpy as np
import pytest

from qbae import factory
from qbae.data import generate_synthetic_corpus
from qbae.errors import ValidationError
from qbae.evaluation import (
    EvalPipeline,
    EvalProfile,
    aggregate_reports,
    auroc,
    evaluate,
    named_profile,
)


def brute_force_auroc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc([0.1, 0.9], [0, 1]) == 1.0

    def test_inverted_ranking(self):
        assert auroc([0.9, 0.1], [0, 1]) == 0.0

    def test_tie_convention(self):
        assert auroc([0.5, 0.5], [0, 1]) == 0.5

    def test_against_pairwise_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(4, 40))
            scores = rng.integers(0, 6, size=n).astype(float)  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            assert auroc(scores, labels) == pytest.approx(brute_force_auroc(scores, labels), abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        scores = rng.standard_normal(60)
        labels = (rng.random(60) < 0.4).astype(int)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        for trial in range(100):
            r = np.random.default_rng(trial)
            a = r.uniform(0.1, 5.0)
            b = r.uniform(-3.0, 3.0)
            c = r.uniform(0.01, 2.0)
            transformed = c * np.exp(a * scores) + b * 0  # strictly increasing
            transformed = transformed + np.tanh(scores) * r.uniform(0.0, 0.5)
            assert auroc(transformed, labels) == pytest.approx(base, abs=1e-12)

    def test_negation_complement(self, rng):
        scores = rng.standard_normal(50)  # ties almost surely absent
        labels = (rng.random(50) < 0.5).astype(int)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            auroc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            auroc([0.1, 0.2, 0.3], [0, 1])


class TestProfiles:
    def test_named_profiles(self):
        brats = named_profile("brats")
        assert brats.perceptual.score_mode == "max_then_mean"
        assert brats.perceptual.tap_layers == (12, 16, 20)
        assert brats.perceptual.patch_sizes == (16, 32, 56)
        rsna = named_profile("rsna")
        assert rsna.perceptual.score_mode == "mean_then_max"
        liver = named_profile("liver")
        assert liver.perceptual.patch_sizes == (8, 16)
        assert liver.preprocess == "liver"

    def test_unknown_profile(self):
        with pytest.raises(ValidationError):
            named_profile("imagenet")

    def test_pipeline_is_deterministic_flagged(self):
        pipeline = EvalPipeline(named_profile("brats"))
        assert pipeline.stochastic is False


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_corpus")
    corpus = generate_synthetic_corpus(
        root, side=64, n_train=4, n_test_normal=6, n_test_anomalous=6, seed=5
    )
    cfg = factory.toy_run_config(side=64)
    detector = factory.build_detector(cfg, seed=42)
    profile = EvalProfile(
        name="custom", perceptual=factory.metric_perceptual_config(cfg), side=64
    )
    return corpus, detector, profile


class TestEvaluate:
    def test_report_fields(self, setup):
        corpus, detector, profile = setup
        report = evaluate(detector, corpus, profile, batch_size=8)
        assert report["n_images"] == 12
        assert 0.0 <= report["auroc"] <= 1.0
        assert len(report["scores"]) == 12

    def test_identical_evaluations(self, setup):
        corpus, detector, profile = setup
        a = evaluate(detector, corpus, profile, batch_size=8)
        b = evaluate(detector, corpus, profile, batch_size=8)
        assert a == b

    def test_map_export(self, setup, tmp_path):
        corpus, detector, profile = setup
        evaluate(detector, corpus, profile, export_dir=tmp_path, batch_size=8)
        assert len(list(tmp_path.glob("*_map.png"))) == 12
        assert len(list(tmp_path.glob("*_map.f32"))) == 12

    def test_profile_resolution_mismatch(self, setup):
        corpus, detector, _ = setup
        bad = EvalProfile(name="custom", side=60)  # 16/32/56 do not divide 60
        with pytest.raises(ValidationError):
            evaluate(detector, corpus, bad, batch_size=8)


class TestAggregate:
    def test_mean_and_population_std(self):
        reports = [
            {"profile": "p", "n_images": 3, "auroc": a, "scores": [], "labels": []}
            for a in (0.8, 0.9, 1.0)
        ]
        agg = aggregate_reports(reports)
        assert agg["per_seed"] == [0.8, 0.9, 1.0]
        assert agg["mean"] == pytest.approx(0.9)
        # population std: sqrt(mean((x - mean)^2)), n divisor
        assert agg["std"] == pytest.approx(np.sqrt(((0.1) ** 2 + 0 + (0.1) ** 2) / 3))

    def test_five_run_report_shape(self):
        # one report per default seed -> 5 AUROCs + mean +- std
        values = [0.91, 0.93, 0.92, 0.94, 0.90]
        reports = [
            {"profile": "brats", "n_images": 10, "auroc": a, "scores": [], "labels": []}
            for a in values
        ]
        agg = aggregate_reports(reports)
        assert len(agg["per_seed"]) == 5
        assert set(agg) >= {"profile", "n_images", "auroc", "per_seed", "mean", "std"}
        assert agg["auroc"] == agg["mean"] == pytest.approx(np.mean(values))
