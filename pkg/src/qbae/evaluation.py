"""AUROC and dataset-level evaluation.

AUROC uses the exact Mann-Whitney rank statistic (ties count one half), so
it is invariant under any strictly increasing transform of the scores.
Evaluation applies no stochastic augmentation: the preprocessing pipeline
is constructed resize+normalize only and carries a `stochastic = False`
flag that evaluate() asserts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Corpus
from .errors import ValidationError
from .imaging import ImageTensor, liver_preprocess_pipeline, load_image, normalize, resize, to_rgb
from .model import AnomalyDetector
from .perceptual import (
    EVAL_PERCEPTUAL,
    LIVER_EVAL_PERCEPTUAL,
    PerceptualConfig,
    export_map_png,
    export_map_raw,
)


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValidationError(f"scores and labels must be equal-length 1D, got {s.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be binary")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("both classes must be present")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    cum = np.concatenate(([0], np.cumsum(counts)))
    avg_rank = cum[:-1] + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = avg_rank[inverse]
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalProfile:
    name: str = "custom"
    perceptual: PerceptualConfig = field(default_factory=lambda: replace(EVAL_PERCEPTUAL))
    preprocess: str = "none"  # "none" | "liver"
    side: int = 224
    norm_mean: float = 0.449
    norm_std: float = 0.226
    bilateral_spatial_sigma: float = 3.0
    bilateral_range_sigma: float = 0.1

    def __post_init__(self):
        if self.preprocess not in ("none", "liver"):
            raise ValidationError(f"unknown preprocess hook {self.preprocess!r}")


def named_profile(name: str, side: int = 224) -> EvalProfile:
    """Per-dataset presets from the evaluation tables."""
    if name in ("brats", "resc"):
        return EvalProfile(name=name, perceptual=replace(EVAL_PERCEPTUAL), side=side)
    if name == "rsna":
        return EvalProfile(
            name=name, perceptual=replace(EVAL_PERCEPTUAL, score_mode="mean_then_max"), side=side
        )
    if name == "liver":
        return EvalProfile(
            name=name, perceptual=replace(LIVER_EVAL_PERCEPTUAL), preprocess="liver", side=side
        )
    raise ValidationError(f"unknown profile {name!r}")


class EvalPipeline:
    """Deterministic test-time preprocessing: optional hook, resize, normalize."""

    stochastic = False

    def __init__(self, profile: EvalProfile):
        self.profile = profile

    def __call__(self, path) -> ImageTensor:
        img = load_image(path)
        if self.profile.preprocess == "liver":
            if img.channels != 1:
                raise ValidationError("liver preprocessing expects grayscale slices")
            img = liver_preprocess_pipeline(
                img,
                self.profile.side,
                self.profile.bilateral_spatial_sigma,
                self.profile.bilateral_range_sigma,
            )
        img = to_rgb(resize(img, self.profile.side, self.profile.side))
        return normalize(img, self.profile.norm_mean, self.profile.norm_std)


def evaluate(
    detector: AnomalyDetector,
    corpus: Corpus,
    profile: EvalProfile,
    export_dir=None,
    batch_size: int = 64,
) -> dict:
    """Score every test image, compute AUROC, optionally export pixel maps."""
    import torch

    if not corpus.test:
        raise ValidationError("empty test corpus")
    for p in profile.perceptual.patch_sizes:
        if profile.side % p:
            raise ValidationError(f"profile patch size {p} does not divide side {profile.side}")
    pipeline = EvalPipeline(profile)
    assert not pipeline.stochastic

    if export_dir is not None:
        export_dir = Path(export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)

    scores: list[float] = []
    for start in range(0, len(corpus.test), batch_size):
        paths = corpus.test[start : start + batch_size]
        batch = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(pipeline(p).data)) for p in paths], dim=0
        )
        results = detector.score_batch(batch, profile.perceptual, with_map=export_dir is not None)
        for path, res in zip(paths, results):
            scores.append(res.score)
            if export_dir is not None:
                # parent dir disambiguates test/good/x.png from test/ungood/x.png
                stem = f"{Path(path).parent.name}_{Path(path).stem}"
                export_map_png(res.final_map, export_dir / f"{stem}_map.png")
                export_map_raw(res.final_map, export_dir / f"{stem}_map.f32")

    value = auroc(scores, corpus.test_labels)
    return {
        "profile": profile.name,
        "n_images": len(corpus.test),
        "auroc": value,
        "per_seed": [value],
        "mean": value,
        "std": 0.0,
        "scores": scores,
        "labels": list(corpus.test_labels),
    }


def aggregate_reports(reports: list[dict]) -> dict:
    """Multi-run aggregation: per-run AUROCs plus mean and population std."""
    if not reports:
        raise ValidationError("no reports to aggregate")
    aurocs = [r["auroc"] for r in reports]
    mean = float(np.mean(aurocs))
    return {
        "profile": reports[0]["profile"],
        "n_images": reports[0]["n_images"],
        "auroc": mean,
        "per_seed": aurocs,
        "mean": mean,
        "std": float(np.std(aurocs)),  # population std over runs
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
