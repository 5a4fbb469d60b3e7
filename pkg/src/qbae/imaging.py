"""Image I/O, resizing, normalization, patch reshaping, augmentation,
liver-slice ROI preprocessing and a bilateral filter.

Images are carried as `ImageTensor`: a float32 array of shape [C, H, W]
with C in {1, 3}. Values of un-normalized images live in [0, 1]. All
stochastic operations draw exclusively from an explicit numpy Generator,
so (input, seed) fully determines the output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import ValidationError


@dataclass
class ImageTensor:
    data: np.ndarray  # [C, H, W] float32
    colorspace: str = "rgb"  # "gray" | "rgb"
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError(f"image data must be [C,H,W], got shape {self.data.shape}")
        c, h, w = self.data.shape
        if c not in (1, 3):
            raise ValidationError(f"channel count must be 1 or 3, got {c}")
        if h <= 0 or w <= 0:
            raise ValidationError(f"zero-area image: {h}x{w}")
        if self.colorspace not in ("gray", "rgb"):
            raise ValidationError(f"unknown colorspace {self.colorspace!r}")
        if not self.normalized:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1e-6 or hi > 1 + 1e-6:
                raise ValidationError(f"un-normalized image out of [0,1]: [{lo}, {hi}]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class PatchGrid:
    patch_size: int
    grid_h: int
    grid_w: int
    channels: int


@dataclass
class AugmentConfig:
    side: int = 224
    crop_scale: tuple[float, float] = (0.90, 1.00)
    crop_aspect: tuple[float, float] = (0.80, 1.20)
    rotation_deg: float = 10.0
    vflip_prob: float = 0.5
    jitter: float = 0.1
    norm_mean: float = 0.449
    norm_std: float = 0.226

    def __post_init__(self):
        if self.crop_scale[0] > self.crop_scale[1] or self.crop_aspect[0] > self.crop_aspect[1]:
            raise ValidationError("augment ranges must be nonempty")
        if not 0.0 <= self.vflip_prob <= 1.0:
            raise ValidationError(f"vflip_prob must be in [0,1], got {self.vflip_prob}")
        if self.norm_std <= 0:
            raise ValidationError("norm_std must be positive")


def load_image(path) -> ImageTensor:
    """Decode a raster file into [0,1] floats. Handles 8/16-bit grayscale
    and 8-bit RGB; other modes are converted via RGB."""
    with Image.open(path) as im:
        im.load()
        if im.width == 0 or im.height == 0:
            raise ValidationError(f"{path}: zero-area image")
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float32) / 65535.0
            data = arr[None, :, :]
            space = "gray"
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float32) / 255.0
            data = arr[None, :, :]
            space = "gray"
        else:
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
            data = arr.transpose(2, 0, 1)
            space = "rgb"
    return ImageTensor(np.ascontiguousarray(np.clip(data, 0.0, 1.0)), colorspace=space, normalized=False)


def save_image(img: ImageTensor, path) -> None:
    """Write an un-normalized image as 8-bit PNG (or 16-bit for grayscale .png)."""
    if img.normalized:
        raise ValidationError("de-normalize before saving")
    data = np.clip(img.data, 0.0, 1.0)
    if img.channels == 1:
        Image.fromarray(np.round(data[0] * 65535.0).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(data.transpose(1, 2, 0) * 255.0).astype(np.uint8), mode="RGB").save(path)


def _resize_plane(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    im = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32), mode="F")
    return np.asarray(im.resize((out_w, out_h), Image.Resampling.BILINEAR), dtype=np.float32)


def resize(img: ImageTensor, out_h: int, out_w: int | None = None) -> ImageTensor:
    """Bilinear, antialiased resize. Same-size inputs pass through bitwise."""
    if out_w is None:
        out_w = out_h
    if out_h <= 0 or out_w <= 0:
        raise ValidationError(f"invalid target size {out_h}x{out_w}")
    if (img.height, img.width) == (out_h, out_w):
        return replace(img, data=img.data.copy())
    planes = [_resize_plane(img.data[c], out_h, out_w) for c in range(img.channels)]
    data = np.stack(planes, axis=0)
    if not img.normalized:
        data = np.clip(data, 0.0, 1.0)
    return replace(img, data=data)


def to_rgb(img: ImageTensor) -> ImageTensor:
    """Replicate a grayscale image to 3 channels; RGB passes through."""
    if img.channels == 3:
        return img
    return replace(img, data=np.repeat(img.data, 3, axis=0), colorspace="rgb")


def load_and_resize(path, side: int) -> ImageTensor:
    """Decode, resize to side x side, replicate grayscale to 3 channels."""
    return to_rgb(resize(load_image(path), side, side))


def normalize(img: ImageTensor, mean: float = 0.449, std: float = 0.226) -> ImageTensor:
    if std <= 0:
        raise ValidationError(f"std must be positive, got {std}")
    if img.normalized:
        raise ValidationError("image already normalized")
    return replace(img, data=(img.data - np.float32(mean)) / np.float32(std), normalized=True)


def denormalize(img: ImageTensor, mean: float = 0.449, std: float = 0.226) -> ImageTensor:
    if not img.normalized:
        raise ValidationError("image not normalized")
    data = np.clip(img.data * np.float32(std) + np.float32(mean), 0.0, 1.0)
    return replace(img, data=data, normalized=False)


def patchify(img: ImageTensor, patch_size: int) -> tuple[np.ndarray, PatchGrid]:
    """Split into non-overlapping patches, row-major over the grid.

    Each token flattens one patch in (row, col, channel) order, giving
    dimension patch_size**2 * C. Exact inverse of `unpatchify`.
    """
    c, h, w = img.data.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise ValidationError(f"patch size {patch_size} does not divide {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    # [C,H,W] -> [gh, gw, p, p, C] -> [L, p*p*C]
    x = img.data.reshape(c, gh, patch_size, gw, patch_size)
    x = x.transpose(1, 3, 2, 4, 0)
    tokens = np.ascontiguousarray(x).reshape(gh * gw, patch_size * patch_size * c)
    return tokens, PatchGrid(patch_size=patch_size, grid_h=gh, grid_w=gw, channels=c)


def unpatchify(tokens: np.ndarray, grid: PatchGrid, normalized: bool = True) -> ImageTensor:
    """Reassemble patch tokens into an image. Exact inverse of `patchify`."""
    p, gh, gw, c = grid.patch_size, grid.grid_h, grid.grid_w, grid.channels
    if tokens.ndim != 2 or tokens.shape[0] != gh * gw or tokens.shape[1] != p * p * c:
        raise ValidationError(
            f"token shape {tokens.shape} inconsistent with grid {gh}x{gw}, patch {p}, channels {c}"
        )
    x = tokens.reshape(gh, gw, p, p, c).transpose(4, 0, 2, 1, 3)
    data = np.ascontiguousarray(x).reshape(c, gh * p, gw * p).astype(np.float32)
    return ImageTensor(data, colorspace="gray" if c == 1 else "rgb", normalized=normalized)


def _rotate(data: np.ndarray, angle_deg: float) -> np.ndarray:
    planes = []
    for c in range(data.shape[0]):
        im = Image.fromarray(np.ascontiguousarray(data[c]), mode="F")
        im = im.rotate(angle_deg, resample=Image.Resampling.BILINEAR, expand=False, fillcolor=0.0)
        planes.append(np.asarray(im, dtype=np.float32))
    return np.stack(planes, axis=0)


def augment(img: ImageTensor, cfg: AugmentConfig, rng: np.random.Generator) -> ImageTensor:
    """Training augmentation: random resized crop, rotation, vertical flip,
    brightness/contrast jitter, then normalization.

    The eight random draws happen in a fixed order regardless of which are
    active, and no-op draws (angle 0, factors exactly 1) skip their resample
    or arithmetic entirely, so the degenerate config reproduces
    normalize(resize(img)) bit for bit.
    """
    if img.normalized:
        raise ValidationError("augment expects an un-normalized image")
    h, w = img.height, img.width

    area_frac = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
    aspect = rng.uniform(cfg.crop_aspect[0], cfg.crop_aspect[1])
    u_top = rng.random()
    u_left = rng.random()
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg else 0.0
    u_flip = rng.random()
    brightness = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
    contrast = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)

    if cfg.crop_scale == (1.0, 1.0) and cfg.crop_aspect == (1.0, 1.0):
        crop = img
    else:
        target_area = area_frac * h * w
        cw = min(w, max(1, int(round(np.sqrt(target_area * aspect)))))
        ch = min(h, max(1, int(round(np.sqrt(target_area / aspect)))))
        top = int(u_top * (h - ch + 1))
        left = int(u_left * (w - cw + 1))
        crop = replace(img, data=np.ascontiguousarray(img.data[:, top : top + ch, left : left + cw]))

    out = resize(crop, cfg.side, cfg.side)
    data = out.data

    if angle != 0.0:
        data = np.clip(_rotate(data, angle), 0.0, 1.0)
    if u_flip < cfg.vflip_prob:
        data = np.ascontiguousarray(data[:, ::-1, :])
    if brightness != 1.0:
        data = data * np.float32(brightness)
    if contrast != 1.0:
        mean = np.float32(data.mean())
        data = (data - mean) * np.float32(contrast) + mean
    data = np.clip(data, 0.0, 1.0)

    return normalize(replace(out, data=data), cfg.norm_mean, cfg.norm_std)


def nonzero_bbox(plane: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight bounding box (r0, r1, c0, c1), inclusive, of nonzero pixels."""
    rows = np.flatnonzero(plane.any(axis=1))
    cols = np.flatnonzero(plane.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _place_on_canvas(roi: np.ndarray, side: int) -> np.ndarray:
    """Center an ROI on a black side x side canvas, downscaling only when it
    does not fit (aspect ratio preserved)."""
    rh, rw = roi.shape
    if rh > side or rw > side:
        scale = min(side / rh, side / rw)
        nh = max(1, min(side, int(round(rh * scale))))
        nw = max(1, min(side, int(round(rw * scale))))
        roi = _resize_plane(roi, nh, nw)
        roi = np.clip(roi, 0.0, 1.0)
        rh, rw = nh, nw
    canvas = np.zeros((side, side), dtype=np.float32)
    top = (side - rh) // 2
    left = (side - rw) // 2
    canvas[top : top + rh, left : left + rw] = roi
    return canvas


def liver_roi_preprocess(img: ImageTensor, side: int = 224) -> ImageTensor:
    """Crop a CT slice to the bounding box of its nonzero pixels and center
    it on a black side x side canvas; ROIs larger than the canvas are
    downscaled preserving aspect ratio. An all-zero slice yields an all-zero
    canvas and a warning (empty slices are legitimate, the pipeline must not
    abort)."""
    if img.channels != 1:
        raise ValidationError("ROI preprocessing expects a single-channel image")
    if img.normalized:
        raise ValidationError("ROI preprocessing expects an un-normalized image")
    plane = img.data[0]
    bbox = nonzero_bbox(plane)
    if bbox is None:
        warnings.warn("all-zero slice: emitting black canvas", RuntimeWarning, stacklevel=2)
        return ImageTensor(np.zeros((1, side, side), dtype=np.float32), colorspace="gray")
    r0, r1, c0, c1 = bbox
    roi = np.ascontiguousarray(plane[r0 : r1 + 1, c0 : c1 + 1])
    return ImageTensor(_place_on_canvas(roi, side)[None], colorspace="gray")


def bilateral_filter(img: ImageTensor, spatial_sigma: float = 3.0, range_sigma: float = 0.1) -> ImageTensor:
    """Edge-preserving smoothing, applied per channel.

    Window is 2*ceil(3*spatial_sigma)+1; border pixels renormalize over
    their in-bounds neighbors. The output is a convex combination of input
    values, so the input range is preserved exactly.
    """
    if spatial_sigma <= 0 or range_sigma <= 0:
        raise ValidationError("bilateral sigmas must be positive")
    radius = int(np.ceil(3.0 * spatial_sigma))
    out = np.empty_like(img.data)
    for c in range(img.channels):
        plane = img.data[c].astype(np.float64)
        h, w = plane.shape
        padded = np.zeros((h + 2 * radius, w + 2 * radius))
        valid = np.zeros_like(padded)
        padded[radius : radius + h, radius : radius + w] = plane
        valid[radius : radius + h, radius : radius + w] = 1.0
        num = np.zeros_like(plane)
        den = np.zeros_like(plane)
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                ws = np.exp(-(dy * dy + dx * dx) / (2.0 * spatial_sigma**2))
                shifted = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
                mask = valid[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
                wr = np.exp(-((shifted - plane) ** 2) / (2.0 * range_sigma**2))
                wgt = ws * wr * mask
                num += wgt * shifted
                den += wgt
        out[c] = np.clip(num / den, plane.min(), plane.max()).astype(np.float32)
    return replace(img, data=out)


def liver_preprocess_pipeline(
    img: ImageTensor, side: int = 224, spatial_sigma: float = 3.0, range_sigma: float = 0.1
) -> ImageTensor:
    """Full liver-slice preprocessing: bbox crop, bilateral filter on the
    cropped ROI, then center/downscale placement on the black canvas."""
    if img.channels != 1:
        raise ValidationError("ROI preprocessing expects a single-channel image")
    bbox = nonzero_bbox(img.data[0])
    if bbox is None:
        warnings.warn("all-zero slice: emitting black canvas", RuntimeWarning, stacklevel=2)
        return ImageTensor(np.zeros((1, side, side), dtype=np.float32), colorspace="gray")
    r0, r1, c0, c1 = bbox
    roi = ImageTensor(np.ascontiguousarray(img.data[:, r0 : r1 + 1, c0 : c1 + 1]), colorspace="gray")
    roi = bilateral_filter(roi, spatial_sigma, range_sigma)
    return ImageTensor(_place_on_canvas(roi.data[0], side)[None], colorspace="gray")
