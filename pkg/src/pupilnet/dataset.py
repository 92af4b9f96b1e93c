"""Ingestion, preparation, splitting and batching of eye images, plus a synthetic eye renderer."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np
from scipy import ndimage

from . import SCHEMA_VERSION
from .augmentation import AugmentationConfig, augment_sample, procedural_scenes
from .errors import (
    GeometryViolation,
    MissingRegion,
    PupilnetError,
    RejectedByFilter,
    TooFewSamples,
    UnknownLabel,
    ValidationError,
)
from .geometry import (
    AffineTransform2D,
    Ellipse,
    mask_to_ellipse,
    normalize_params,
    rasterize_ellipse,
    transform_ellipse,
)
from .sample import Sample

log = logging.getLogger(__name__)

BACKGROUND, IRIS, PUPIL = 0, 1, 2
DEFAULT_PALETTE = {0: BACKGROUND, 1: IRIS, 2: PUPIL}
CONSISTENCY_DSC = 0.9


def binary_dice(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x) > 0
    y = np.asarray(y) > 0
    total = x.sum() + y.sum()
    return 1.0 if total == 0 else 2.0 * np.logical_and(x, y).sum() / total


# --- annotations --------------------------------------------------------------

def _label_codes(annotation: np.ndarray) -> np.ndarray:
    a = np.asarray(annotation)
    if a.ndim == 3:
        if a.shape[2] == 1 or (np.all(a[..., 0] == a[..., 1]) and np.all(a[..., 1] == a[..., 2])):
            return a[..., 0].astype(np.int64)
        # packed RGB code so that colored palettes can be remapped
        return (a[..., 0].astype(np.int64) << 16) | (a[..., 1].astype(np.int64) << 8) | a[..., 2].astype(np.int64)
    return a.astype(np.int64)


def parse_palette(remap: dict | None) -> dict[int, int]:
    """Normalize a remap table. Keys are gray values or ``"r,g,b"`` strings; values are class ids."""
    if remap is None:
        return dict(DEFAULT_PALETTE)
    names = {"background": BACKGROUND, "iris": IRIS, "pupil": PUPIL}
    out = {}
    for key, cls in remap.items():
        if isinstance(key, str) and "," in key:
            r, g, b = (int(v) for v in key.split(","))
            code = (r << 16) | (g << 8) | b
        else:
            code = int(key)
        out[code] = names.get(cls, cls) if isinstance(cls, str) else int(cls)
    return out


def load_annotation(annotation: np.ndarray, palette: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split a combined iris/pupil annotation into (pupil_mask, iris_mask).

    The iris mask covers the pupil as well, with interior holes filled.
    """
    palette = parse_palette(palette)
    codes = _label_codes(annotation)
    values = np.unique(codes)
    unknown = [int(v) for v in values if int(v) not in palette]
    if unknown:
        raise UnknownLabel(f"annotation contains labels outside the palette: {unknown[:8]}")
    classes = np.zeros(codes.shape, dtype=np.uint8)
    for code, cls in palette.items():
        classes[codes == code] = cls
    pupil = (classes == PUPIL).astype(np.uint8)
    if not pupil.any():
        raise MissingRegion("pupil")
    iris = ndimage.binary_fill_holes(classes >= IRIS).astype(np.uint8)
    return pupil, iris


# --- preparation ----------------------------------------------------------------

def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(mask, (size, size), interpolation=cv2.INTER_NEAREST_EXACT)


class InconsistentLabel(ValidationError):
    def __init__(self, dsc: float):
        self.value = dsc
        super().__init__(f"ellipse/mask agreement DSC {dsc:.3f} < {CONSISTENCY_DSC}")


def prepare_sample(raw_image: np.ndarray, annotation: np.ndarray, size: int = 224,
                   palette: dict | None = None, sample_id: str = "") -> Sample:
    """Resize one raw image/annotation pair to the square network input.

    The ellipse is fitted on the original-resolution pupil mask and then mapped
    through the exact anisotropic scaling, so no resampling error enters the
    ground truth. Raises a filter rejection if the pupil fails the outlier test.
    """
    pupil, iris = load_annotation(annotation, palette)
    h, w = pupil.shape
    if raw_image.shape[:2] != (h, w):
        raise ValidationError(f"image {raw_image.shape[:2]} and annotation {(h, w)} sizes differ")
    ellipse = mask_to_ellipse(pupil)
    ellipse = transform_ellipse(ellipse, AffineTransform2D.scale(size / w, size / h))
    pupil_s = resize_mask(pupil, size)
    dsc = binary_dice(rasterize_ellipse(ellipse, size, size), pupil_s)
    if dsc < CONSISTENCY_DSC:
        raise InconsistentLabel(dsc)
    return Sample(
        image=resize_image(np.asarray(raw_image, dtype=np.uint8), size),
        pupil_mask=pupil_s,
        iris_mask=resize_mask(iris, size),
        ellipse=ellipse,
        id=sample_id,
    )


@dataclass
class PrepareReport:
    total: int = 0
    accepted: int = 0
    rejections: Counter = field(default_factory=Counter)
    rejected_ids: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "total": self.total,
            "accepted": self.accepted,
            "rejected": self.total - self.accepted,
            "rejections": dict(sorted(self.rejections.items())),
            "rejected_ids": dict(sorted(self.rejected_ids.items())),
        }


def _rejection_reason(exc: Exception) -> str:
    if isinstance(exc, RejectedByFilter):
        return exc.measure.replace(" ", "_")
    if isinstance(exc, InconsistentLabel):
        return "inconsistent"
    return type(exc).__name__


def read_manifest(path: str | Path) -> list[tuple[str, Path, Path]]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            missing = {"id", "image_path", "annotation_path"} - set(row)
            if missing:
                raise ValidationError(f"manifest {path} lacks columns {sorted(missing)}")
            rows.append((row["id"], path.parent / row["image_path"], path.parent / row["annotation_path"]))
    return rows


def read_rgb(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ValidationError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def read_annotation(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValidationError(f"cannot read annotation {path}")
    if img.ndim == 3:
        img = cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2RGB)
    return img


def prepare_from_manifest(manifest: str | Path, size: int = 224,
                          palette: dict | None = None) -> tuple[list[Sample], PrepareReport]:
    report = PrepareReport()
    samples = []
    for sid, image_path, ann_path in read_manifest(manifest):
        report.total += 1
        try:
            s = prepare_sample(read_rgb(image_path), read_annotation(ann_path), size, palette, sid)
        except (PupilnetError, np.linalg.LinAlgError) as exc:
            reason = _rejection_reason(exc)
            report.rejections[reason] += 1
            report.rejected_ids[sid] = f"{reason}: {exc}"
            log.info("dropping %s: %s", sid, exc)
            continue
        report.accepted += 1
        samples.append(s)
    return samples, report


# --- split and batches ------------------------------------------------------------

def split(samples: list, train_fraction: float = 0.9, seed: int = 0) -> tuple[list, list]:
    n = len(samples)
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(train_fraction * n)), 1), n - 1)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


@dataclass
class Batch:
    images: np.ndarray  # N x H x W x 3 float32 in [0, 1]
    masks: np.ndarray  # N x H x W x 1 float32 in {0, 1}
    targets: np.ndarray  # N x 5 normalized ellipse parameters
    ids: list

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(samples: list[Sample]) -> Batch:
    images = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
    masks = np.stack([s.pupil_mask for s in samples]).astype(np.float32)[..., None]
    targets = np.stack([normalize_params(s.ellipse, s.width, s.height).as_array() for s in samples])
    return Batch(images, masks, targets.astype(np.float32), [s.id for s in samples])


def batch_generator(samples: list[Sample], batch_size: int = 64, shuffle: bool = True,
                    augmentation: AugmentationConfig | None = None, seed: int = 0,
                    epoch: int = 0) -> Iterator[Batch]:
    """Yield one epoch of batches; the order depends only on (seed, epoch)."""
    if not samples:
        raise TooFewSamples("batch_generator needs at least one sample")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    aug_rng = np.random.default_rng([seed, epoch, 1])
    scenes = None
    if augmentation is not None:
        s0 = samples[0]
        scenes = augmentation.scene_images or procedural_scenes(s0.height, s0.width)
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if augmentation is not None:
            chunk = [augment_sample(s, augmentation, aug_rng, scenes) for s in chunk]
        yield make_batch(chunk)


def augment_dataset(samples: list[Sample], cfg: AugmentationConfig) -> list[Sample]:
    """Originals followed by ``copies_per_original`` augmented copies of each."""
    rng = np.random.default_rng(cfg.seed)
    out = list(samples)
    by_size = {}
    for copy in range(cfg.copies_per_original):
        for s in samples:
            key = (s.height, s.width)
            if key not in by_size:
                by_size[key] = cfg.scene_images or procedural_scenes(*key)
            aug = augment_sample(s, cfg, rng, by_size[key])
            out.append(aug.with_(id=f"{s.id}_aug{copy}"))
    return out


# --- synthetic eyes -----------------------------------------------------------------

@dataclass
class SynthSpec:
    height: int
    width: int
    iris_center: tuple
    iris_radius: float
    pupil: Ellipse
    iris_color: tuple = (90, 60, 40)
    sclera_color: tuple = (225, 215, 210)
    skin_color: tuple = (190, 140, 120)
    pupil_color: tuple = (18, 14, 14)
    # (x, y, radius) bright specular blobs
    reflections: list = field(default_factory=list)
    noise_sigma: float = 3.0


def _check_geometry(spec: SynthSpec) -> None:
    cx, cy = spec.iris_center
    r = spec.iris_radius
    if not (r > 0 and cx - r > 0 and cy - r > 0 and cx + r < spec.width and cy + r < spec.height):
        raise GeometryViolation("iris disk must lie strictly inside the image")
    e = spec.pupil
    t = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    u = e.major_direction()
    v = np.array([-u[1], u[0]])
    pts = e.center + np.outer(e.a * np.cos(t), u) + np.outer(e.b * np.sin(t), v)
    if np.hypot(pts[:, 0] - cx, pts[:, 1] - cy).max() >= r:
        raise GeometryViolation("pupil ellipse must lie strictly inside the iris disk")


def synth_eye(spec: SynthSpec, rng: np.random.Generator, sample_id: str = "synth") -> Sample:
    """Render sclera, iris and pupil with optional reflections; labels come from the drawn geometry exactly."""
    _check_geometry(spec)
    h, w = spec.height, spec.width
    y, x = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cx, cy = spec.iris_center
    r_iris = spec.iris_radius

    img = np.empty((h, w, 3))
    shade = 1.0 - 0.25 * ((y - h / 2) / h) ** 2
    img[:] = np.array(spec.skin_color) * shade[..., None]
    sclera = ((x - cx) / (2.2 * r_iris)) ** 2 + ((y - cy) / (1.15 * r_iris)) ** 2 <= 1
    img[sclera] = spec.sclera_color

    dist = np.hypot(x - cx, y - cy)
    iris = dist < r_iris
    angle = np.arctan2(y - cy, x - cx)
    streaks = 1.0 + 0.12 * np.sin(angle * rng.integers(12, 40) + rng.uniform(0, 2 * np.pi))
    limbus = 1.0 - 0.35 * np.clip((dist / r_iris - 0.8) / 0.2, 0, 1)
    img[iris] = (np.array(spec.iris_color) * (streaks * limbus)[..., None])[iris]

    pupil_mask = rasterize_ellipse(spec.pupil, h, w)
    img[pupil_mask == 1] = spec.pupil_color

    img = cv2.GaussianBlur(img, (0, 0), 0.8)
    for rx, ry, rr in spec.reflections:
        blob = np.exp(-(((x - rx) ** 2 + (y - ry) ** 2) / (rr**2)) ** 2)[..., None]
        img = img * (1 - blob) + 252.0 * blob
    img += rng.normal(0.0, spec.noise_sigma, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    return Sample(
        image=image,
        pupil_mask=pupil_mask,
        iris_mask=iris.astype(np.uint8),
        ellipse=spec.pupil,
        id=sample_id,
    )


def random_synth_spec(rng: np.random.Generator, height: int = 224, width: int = 224) -> SynthSpec:
    """Draw a plausible eye: iris 30-40% of the short side, pupil 25-65% of the iris."""
    s = min(height, width)
    r_iris = rng.uniform(0.26, 0.36) * s
    cx = rng.uniform(r_iris + 0.04 * s, width - r_iris - 0.04 * s)
    cy = rng.uniform(r_iris + 0.04 * s, height - r_iris - 0.04 * s)
    a = rng.uniform(0.25, 0.62) * r_iris
    b = a * rng.uniform(0.7, 1.0)
    theta = rng.uniform(0, 180)
    slack = r_iris - a - 1.5
    off = rng.uniform(0, 0.4) * slack
    phi = rng.uniform(0, 2 * np.pi)
    pupil = Ellipse.canonical(cx + off * np.cos(phi), cy + off * np.sin(phi), a, b, theta)

    iris_color = tuple(float(v) for v in rng.uniform([50, 30, 15], [150, 120, 90]))
    skin = tuple(float(v) for v in rng.uniform([120, 80, 60], [230, 190, 170]))
    sclera = tuple(float(v) for v in rng.uniform([200, 190, 185], [245, 240, 235]))
    pupil_color = tuple(float(v) for v in rng.uniform(5, 30, 3))
    reflections = []
    for _ in range(int(rng.integers(0, 3))):
        rr = rng.uniform(0.01, 0.03) * s
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0, 0.8) * r_iris
        reflections.append((cx + dist * np.cos(ang), cy + dist * np.sin(ang), rr))
    return SynthSpec(height, width, (cx, cy), r_iris, pupil, iris_color, sclera, skin, pupil_color,
                     reflections, float(rng.uniform(1.0, 5.0)))


def synth_dataset(count: int, seed: int = 0, height: int = 224, width: int = 224) -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        spec = random_synth_spec(rng, height, width)
        out.append(synth_eye(spec, rng, sample_id=f"synth_{i:05d}"))
    return out


def synth_annotation(sample: Sample) -> np.ndarray:
    """Combined palette annotation (0 background, 1 iris, 2 pupil) for a sample."""
    ann = np.zeros(sample.pupil_mask.shape, dtype=np.uint8)
    ann[sample.iris_mask == 1] = IRIS
    ann[sample.pupil_mask == 1] = PUPIL
    return ann


# --- prepared dataset on disk ---------------------------------------------------------

def _write_png(path: Path, array: np.ndarray) -> None:
    if not cv2.imwrite(str(path), array):
        raise OSError(f"failed to write {path}")


def save_dataset(directory: str | Path, samples: list[Sample], report: dict | None = None) -> None:
    d = Path(directory)
    for sub in ("images", "pupil_masks", "iris_masks"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    ellipses = {}
    for s in samples:
        _write_png(d / "images" / f"{s.id}.png", cv2.cvtColor(s.image, cv2.COLOR_RGB2BGR))
        _write_png(d / "pupil_masks" / f"{s.id}.png", s.pupil_mask * 255)
        _write_png(d / "iris_masks" / f"{s.id}.png", s.iris_mask * 255)
        ellipses[s.id] = s.ellipse.to_dict()
    with open(d / "ellipses.json", "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "ellipses": ellipses}, fh, indent=2, sort_keys=True)
    if report is None:
        report = {"schema_version": SCHEMA_VERSION, "total": len(samples), "accepted": len(samples),
                  "rejected": 0, "rejections": {}, "rejected_ids": {}}
    with open(d / "prepare_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


def _read_mask(path: Path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise ValidationError(f"cannot read mask {path}")
    return (m > 127).astype(np.uint8)


def load_dataset(directory: str | Path) -> list[Sample]:
    d = Path(directory)
    path = d / "ellipses.json"
    if not path.exists():
        raise ValidationError(f"{d} is not a prepared dataset (no ellipses.json)")
    with open(path) as fh:
        ellipses = json.load(fh)["ellipses"]
    samples = []
    for sid in sorted(ellipses):
        samples.append(Sample(
            image=read_rgb(d / "images" / f"{sid}.png"),
            pupil_mask=_read_mask(d / "pupil_masks" / f"{sid}.png"),
            iris_mask=_read_mask(d / "iris_masks" / f"{sid}.png"),
            ellipse=Ellipse.from_dict(ellipses[sid]),
            id=sid,
        ))
    return samples
