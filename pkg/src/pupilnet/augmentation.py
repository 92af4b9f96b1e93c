"""Label-consistent augmentations: color (Lab shift), corneal reflection, flip/rotate."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from skimage import color

from .errors import ConfigError, DimensionMismatch, UnsupportedOp
from .geometry import AffineTransform2D, transform_ellipse
from .sample import Sample

FR_OPS = ("horizontal-flip", "vertical-flip", "rotate-90", "rotate-180", "rotate-270")


@dataclass
class AugmentationConfig:
    # (low, high) bounds of the global L, a, b shifts
    ca_ranges: tuple = ((-50.0, 10.0), (-20.0, 20.0), (-20.0, 20.0))
    cra_alpha_range: tuple = (0.98, 1.0)
    scene_images: list = field(default_factory=list)
    fr_ops: tuple = ("identity",) + FR_OPS
    seed: int = 0
    copies_per_original: int = 1

    def __post_init__(self):
        self.ca_ranges = tuple(tuple(float(v) for v in r) for r in self.ca_ranges)
        self.cra_alpha_range = tuple(float(v) for v in self.cra_alpha_range)
        self.fr_ops = tuple(self.fr_ops)
        if len(self.ca_ranges) != 3 or any(lo > hi for lo, hi in self.ca_ranges):
            raise ConfigError(f"ca_ranges must be three ordered (low, high) pairs, got {self.ca_ranges}")
        lo, hi = self.cra_alpha_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"cra_alpha_range must lie in (0, 1], got {self.cra_alpha_range}")
        for op in self.fr_ops:
            if op != "identity" and op not in FR_OPS:
                raise UnsupportedOp(op)
        if self.copies_per_original < 1:
            raise ConfigError("copies_per_original must be >= 1")

    def to_dict(self) -> dict:
        return {
            "ca_ranges": [list(r) for r in self.ca_ranges],
            "cra_alpha_range": list(self.cra_alpha_range),
            "fr_ops": list(self.fr_ops),
            "seed": self.seed,
            "copies_per_original": self.copies_per_original,
        }


# --- color ------------------------------------------------------------------

def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """8-bit sRGB to CIE L*a*b* (D65)."""
    return color.rgb2lab(np.asarray(image, dtype=np.uint8))


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """CIE L*a*b* (D65) to 8-bit sRGB, clamping out-of-gamut values."""
    with warnings.catch_warnings():
        # out-of-gamut colors are clipped on purpose
        warnings.simplefilter("ignore", UserWarning)
        rgb = color.lab2rgb(lab)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def sample_color_shift(cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in cfg.ca_ranges])


def color_augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator, shift=None) -> np.ndarray:
    """Add one (dL, da, db) triple to every pixel in Lab space."""
    shift = sample_color_shift(cfg, rng) if shift is None else np.asarray(shift, dtype=np.float64)
    if not shift.any():
        return np.array(image, dtype=np.uint8, copy=True)
    lab = rgb_to_lab(image)
    lab += shift
    return lab_to_rgb(lab)


# --- corneal reflection -----------------------------------------------------

def fit_scene(scene: np.ndarray, height: int, width: int) -> np.ndarray:
    if scene.shape[:2] == (height, width):
        return scene
    return cv2.resize(scene, (width, height), interpolation=cv2.INTER_LINEAR)


def corneal_reflection_augment(image, iris_mask, scene, alpha: float, cfg: AugmentationConfig | None = None):
    """Blend a scene into the iris region: ``alpha * I + (1 - alpha) * M_iris * I_scene``."""
    image = np.asarray(image)
    mask = np.asarray(iris_mask)
    scene = np.asarray(scene)
    if mask.shape != image.shape[:2] or scene.shape != image.shape:
        raise DimensionMismatch(
            f"image {image.shape}, iris mask {mask.shape} and scene {scene.shape} must share dimensions"
        )
    if cfg is not None:
        lo, hi = cfg.cra_alpha_range
        if not lo <= alpha <= hi:
            raise ConfigError(f"alpha {alpha} outside configured range {cfg.cra_alpha_range}")
    if alpha == 1.0:
        return image.astype(np.uint8, copy=True)
    m = (mask > 0).astype(np.float64)[..., None]
    out = alpha * image.astype(np.float64) + (1.0 - alpha) * m * scene.astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def procedural_scenes(height: int = 224, width: int = 224) -> list[np.ndarray]:
    """Stand-ins for photographed light sources: window, ring light, point flash."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    cx, cy = width / 2, height / 2
    r = np.hypot(x - cx, y - cy) / min(width, height)

    window = np.full((height, width, 3), 40.0)
    pane = (np.abs(x - cx) < 0.3 * width) & (np.abs(y - cy) < 0.35 * height)
    bars = (np.abs(x - cx) < 0.02 * width) | (np.abs(y - cy) < 0.02 * height)
    window[pane & ~bars] = (250, 250, 240)

    ring = np.full((height, width, 3), 20.0)
    ring[(r > 0.25) & (r < 0.33)] = 255

    flash = 255.0 * np.exp(-((r / 0.12) ** 2))[..., None] * np.array([1.0, 0.97, 0.9])

    return [np.clip(s, 0, 255).astype(np.uint8) for s in (window, ring, flash)]


def load_scene(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(path)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


# --- flip / rotate ------------------------------------------------------------

def _pixel_op(op: str):
    if op == "horizontal-flip":
        return lambda a: a[:, ::-1], lambda h, w: AffineTransform2D.hflip(w)
    if op == "vertical-flip":
        return lambda a: a[::-1, :], lambda h, w: AffineTransform2D.vflip(h)
    if op.startswith("rotate-") and op in FR_OPS:
        k = int(op.split("-")[1]) // 90
        return lambda a: np.rot90(a, k), lambda h, w: AffineTransform2D.rot90(k, w, h)
    if op == "identity":
        return lambda a: a, lambda h, w: AffineTransform2D.identity()
    raise UnsupportedOp(f"{op!r}: only axis flips and multiples of 90 degrees are supported")


def flip_rotate_augment(sample: Sample, op: str | None = None, rng: np.random.Generator | None = None,
                        ops=FR_OPS) -> Sample:
    """Apply a lossless pixel permutation to image and masks, and the matching map to the ellipse.

    With ``op=None`` one operation is drawn from ``ops`` using ``rng``.
    """
    if op is None:
        if rng is None:
            raise ValueError("either op or rng must be given")
        op = ops[int(rng.integers(len(ops)))]
    permute, transform = _pixel_op(op)
    h, w = sample.height, sample.width
    return sample.with_(
        image=np.ascontiguousarray(permute(sample.image)),
        pupil_mask=np.ascontiguousarray(permute(sample.pupil_mask)),
        iris_mask=np.ascontiguousarray(permute(sample.iris_mask)),
        ellipse=transform_ellipse(sample.ellipse, transform(h, w)),
    )


# --- pipeline -----------------------------------------------------------------

def augment_sample(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator,
                   scenes: list[np.ndarray] | None = None) -> Sample:
    """CA, then CRA with a random scene, then a random flip/rotate."""
    image = color_augment(sample.image, cfg, rng)
    scenes = scenes if scenes is not None else (cfg.scene_images or procedural_scenes(sample.height, sample.width))
    scene = fit_scene(scenes[int(rng.integers(len(scenes)))], sample.height, sample.width)
    alpha = rng.uniform(*cfg.cra_alpha_range)
    image = corneal_reflection_augment(image, sample.iris_mask, scene, alpha)
    out = sample.with_(image=image)
    op = cfg.fr_ops[int(rng.integers(len(cfg.fr_ops)))] if cfg.fr_ops else "identity"
    return flip_rotate_augment(out, op)
