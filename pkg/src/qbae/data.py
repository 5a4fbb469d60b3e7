"""Corpus layout and synthetic desk-scale data.

A corpus directory follows the benchmark convention:

    root/
      train/good/*.png
      test/good/*.png
      test/ungood/*.png
      test/masks/          (optional)
      index.json           (written on generation; derived from the
                            directory scan when absent)

The synthetic generator produces smooth procedural textures as normals and
plants a high-contrast square into each anomalous test image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .imaging import ImageTensor, save_image


@dataclass
class Corpus:
    root: Path
    train: list[Path]
    test: list[Path]
    test_labels: list[int]  # 1 = anomalous

    def __post_init__(self):
        if len(self.test) != len(self.test_labels):
            raise ValidationError("test paths and labels disagree in length")


def load_corpus(root) -> Corpus:
    root = Path(root)
    index = root / "index.json"
    if index.exists():
        spec = json.loads(index.read_text())
        train = [root / p for p in spec["train"]]
        test = [root / e["path"] for e in spec["test"]]
        labels = [int(e["label"]) for e in spec["test"]]
    else:
        train = sorted((root / "train" / "good").glob("*.png"))
        good = sorted((root / "test" / "good").glob("*.png"))
        bad = sorted((root / "test" / "ungood").glob("*.png"))
        test = good + bad
        labels = [0] * len(good) + [1] * len(bad)
    if not train:
        raise ValidationError(f"no training images under {root}")
    missing = [p for p in train + test if not p.exists()]
    if missing:
        raise ValidationError(f"index references missing files, e.g. {missing[0]}")
    return Corpus(root=root, train=train, test=test, test_labels=labels)


def write_index(root) -> Path:
    root = Path(root)
    train = sorted((root / "train" / "good").glob("*.png"))
    good = sorted((root / "test" / "good").glob("*.png"))
    bad = sorted((root / "test" / "ungood").glob("*.png"))
    spec = {
        "train": [str(p.relative_to(root)) for p in train],
        "test": [{"path": str(p.relative_to(root)), "label": 0} for p in good]
        + [{"path": str(p.relative_to(root)), "label": 1} for p in bad],
    }
    out = root / "index.json"
    out.write_text(json.dumps(spec, indent=1))
    return out


def smooth_texture(side: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural smooth texture in [0.15, 0.85]: a few random low-frequency
    sinusoids plus a gentle gradient."""
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    acc = np.zeros((side, side), dtype=np.float64)
    n_waves = int(rng.integers(3, 6))
    for _ in range(n_waves):
        fx = rng.uniform(0.5, 2.5) / side
        fy = rng.uniform(0.5, 2.5) / side
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        acc += amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    acc += rng.uniform(-0.5, 0.5) * (xx + yy) / (2.0 * side)
    lo, hi = acc.min(), acc.max()
    if hi > lo:
        acc = (acc - lo) / (hi - lo)
    return (0.15 + 0.7 * acc).astype(np.float32)


def plant_square(texture: np.ndarray, square: int, rng: np.random.Generator) -> np.ndarray:
    """Insert one high-contrast square at a random position."""
    side = texture.shape[0]
    if square >= side:
        raise ValidationError(f"square {square} does not fit in side {side}")
    top = int(rng.integers(0, side - square + 1))
    left = int(rng.integers(0, side - square + 1))
    region = texture[top : top + square, left : left + square]
    value = 0.98 if float(region.mean()) < 0.5 else 0.02
    out = texture.copy()
    out[top : top + square, left : left + square] = value
    return out


def generate_synthetic_corpus(
    root,
    side: int = 64,
    n_train: int = 256,
    n_test_normal: int = 64,
    n_test_anomalous: int = 64,
    square: int = 12,
    seed: int = 0,
) -> Corpus:
    root = Path(root)
    for sub in ("train/good", "test/good", "test/ungood"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    for i in range(n_train):
        tex = smooth_texture(side, rng)
        save_image(ImageTensor(tex[None], colorspace="gray"), root / "train" / "good" / f"{i:04d}.png")
    for i in range(n_test_normal):
        tex = smooth_texture(side, rng)
        save_image(ImageTensor(tex[None], colorspace="gray"), root / "test" / "good" / f"{i:04d}.png")
    for i in range(n_test_anomalous):
        tex = plant_square(smooth_texture(side, rng), square, rng)
        save_image(ImageTensor(tex[None], colorspace="gray"), root / "test" / "ungood" / f"{i:04d}.png")
    write_index(root)
    return load_corpus(root)
