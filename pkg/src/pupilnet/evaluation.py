"""Segmentation and ellipse metrics, two-step vs joint comparison, and pipeline timing."""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import SCHEMA_VERSION
from .errors import ConfigError, PupilnetError, ShapeMismatch, TooFewSamples, ValidationError
from .geometry import (
    Ellipse,
    decode_prediction,
    mask_to_ellipse,
    normalize_params,
    pupil_diameter,
)
from .losses import dice_score
from .model import CHECKPOINT_FORMAT, UNet, _to_nchw, load_checkpoint, predict_arrays, read_checkpoint
from .sample import Sample

MODES = ("two-step", "joint")
THRESHOLD = 0.5
METRICS = ("dsc", "accuracy", "diameter_error", "position_error_x", "position_error_y")


def pixel_accuracy(pred, gt) -> float:
    """(TP + TN) / (P + N) with the prediction binarized at 0.5."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {gt.shape} differ")
    return float(np.mean((pred >= THRESHOLD) == (gt >= THRESHOLD)))


# --- predictors ----------------------------------------------------------------------

class NetworkPredictor:
    def __init__(self, model: UNet, batch_size: int = 16):
        self.model = model
        self.batch_size = batch_size

    @property
    def has_head(self) -> bool:
        return self.model.head is not None

    def predict(self, samples: list[Sample]) -> tuple[np.ndarray, np.ndarray | None]:
        masks, params = [], []
        for i in range(0, len(samples), self.batch_size):
            chunk = samples[i:i + self.batch_size]
            m, p = predict_arrays(self.model, np.stack([s.image for s in chunk]).astype(np.float32) / 255.0)
            masks.append(m)
            params.append(p)
        return np.concatenate(masks), (None if params[0] is None else np.concatenate(params))


class OraclePredictor:
    """Returns the ground truth of each sample, optionally translated by ``shift`` pixels."""

    has_head = True

    def __init__(self, shift: tuple[int, int] = (0, 0)):
        self.shift = (int(shift[0]), int(shift[1]))

    def predict(self, samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
        dx, dy = self.shift
        masks, params = [], []
        for s in samples:
            m = np.zeros(s.pupil_mask.shape, np.float32)
            h, w = m.shape
            src = s.pupil_mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            m[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
            e = s.ellipse
            moved = Ellipse(e.xc + dx, e.yc + dy, e.a, e.b, e.theta)
            masks.append(m)
            params.append(normalize_params(moved, w, h).as_array())
        return np.stack(masks), np.stack(params)


def save_oracle_checkpoint(path: str | Path, shift: tuple[int, int] = (0, 0)) -> None:
    buf = io.BytesIO()
    torch.save({"format": CHECKPOINT_FORMAT, "kind": "oracle", "config": json.dumps({"shift": list(shift)}),
                "extra": "{}", "state_dict": {}}, buf)
    Path(path).write_bytes(buf.getvalue())


def load_predictor(path: str | Path):
    payload = read_checkpoint(path)
    if payload.get("kind") == "oracle":
        return OraclePredictor(tuple(json.loads(payload["config"]).get("shift", (0, 0))))
    return NetworkPredictor(load_checkpoint(path))


def as_predictor(model):
    return NetworkPredictor(model) if isinstance(model, UNet) else model


# --- reports -------------------------------------------------------------------------

@dataclass
class ImageMetrics:
    id: str
    dsc: float
    accuracy: float
    diameter_error: float | None = None
    position_error_x: float | None = None
    position_error_y: float | None = None
    fit_failure: str = ""


def aggregate(values: list[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {
        "n": int(v.size),
        "mean": float(v.mean()) if v.size else None,
        "sd": float(v.std(ddof=1)) if v.size > 1 else None,
    }


@dataclass
class MetricsReport:
    pipeline: str
    rows: list[ImageMetrics] = field(default_factory=list)
    unit: str = "px"
    threshold: float = THRESHOLD

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def n_failures(self) -> int:
        return sum(bool(r.fit_failure) for r in self.rows)

    @property
    def n_effective(self) -> int:
        return self.n - self.n_failures

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows if getattr(r, name) is not None]

    @property
    def aggregates(self) -> dict:
        return {m: aggregate(self.column(m)) for m in METRICS}

    def mean(self, name: str) -> float | None:
        return self.aggregates[name]["mean"]

    def to_dict(self) -> dict:
        failures: dict[str, int] = {}
        for r in self.rows:
            if r.fit_failure:
                failures[r.fit_failure] = failures.get(r.fit_failure, 0) + 1
        return {
            "schema_version": SCHEMA_VERSION,
            "pipeline": self.pipeline,
            "unit": self.unit,
            "threshold": self.threshold,
            "sd": "sample (n-1)",
            "n": self.n,
            "n_effective": self.n_effective,
            "n_failures": self.n_failures,
            "failures": dict(sorted(failures.items())),
            "aggregates": self.aggregates,
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                cols = ("id",) + METRICS + ("fit_failure",)
                writer.writerow(cols)
                for r in self.rows:
                    d = asdict(r)
                    writer.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c])
                                     for c in cols])


def predicted_ellipse(mask: np.ndarray, params: np.ndarray | None, mode: str, width: int) -> Ellipse:
    """Ellipse from one prediction; raises ValidationError when the two-step fit fails."""
    if mode == "joint":
        if params is None:
            raise ConfigError("joint mode needs a model with a regression head")
        return decode_prediction(params, width)
    return mask_to_ellipse(mask, THRESHOLD)


def _failure_name(exc: Exception) -> str:
    return type(exc).__name__


def evaluate_pipeline(model, samples: list[Sample], mode: str = "two-step") -> MetricsReport:
    """Score a model (or predictor) on prepared samples; errors in pixels at the samples' resolution."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if not samples:
        raise TooFewSamples("no samples to evaluate")
    predictor = as_predictor(model)
    if mode == "joint" and not predictor.has_head:
        raise ConfigError("joint mode needs a model with a regression head")
    masks, params = predictor.predict(samples)
    report = MetricsReport(mode, unit=f"px at {samples[0].width}x{samples[0].height}")
    for i, s in enumerate(samples):
        binary = (masks[i] >= THRESHOLD).astype(np.float64)
        row = ImageMetrics(s.id, dice_score(binary, s.pupil_mask.astype(np.float64)),
                           pixel_accuracy(masks[i], s.pupil_mask))
        try:
            e = predicted_ellipse(masks[i], None if params is None else params[i], mode, s.width)
        except ValidationError as exc:
            row.fit_failure = _failure_name(exc)
        else:
            gt = s.ellipse
            row.diameter_error = abs(pupil_diameter(gt) - pupil_diameter(e))
            row.position_error_x = abs(gt.xc - e.xc)
            row.position_error_y = abs(gt.yc - e.yc)
        report.rows.append(row)
    return report


# --- timing --------------------------------------------------------------------------

@dataclass
class TimingReport:
    joint_ms_per_frame: float
    twostep_nn_ms: float
    twostep_fit_ms: float
    twostep_total_ms: float
    n_frames: int
    repetitions: int
    fit_failures: int
    hardware: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["platform"] = platform.platform()
        d["torch_threads"] = torch.get_num_threads()
        return d


def time_pipelines(model: UNet, frames, repetitions: int = 5, hardware: str = "") -> TimingReport:
    """Per-frame wall time of both pipelines, timed independently and interleaved.

    Each frame runs through the joint path (network plus decoding of the head output)
    and, separately, the two-step path (network, then mask_to_ellipse). Every frame
    contributes its median over repetitions; reported values are the mean of these
    medians. A full untimed pass precedes the measurement.
    """
    if len(frames) < 10:
        raise TooFewSamples("timing needs at least 10 frames")
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if model.head is None:
        raise ConfigError("timing the joint pipeline needs a regression head")
    width = model.cfg.input_size
    xs = []
    for f in frames:
        f = np.asarray(f)
        f = f.astype(np.float32) / 255.0 if f.dtype == np.uint8 else f.astype(np.float32)
        xs.append(_to_nchw(model, f[None]))
    was_training = model.training
    model.eval()
    clock = time.perf_counter

    def joint(x):
        _, params = model(x)
        try:
            decode_prediction(params[0].numpy(), width)
        except PupilnetError:
            pass

    def twostep(x):
        t0 = clock()
        mask, _ = model(x)
        m = mask[0, 0].numpy()
        t1 = clock()
        failed = False
        try:
            mask_to_ellipse(m, THRESHOLD)
        except ValidationError:
            failed = True
        return t1 - t0, clock() - t1, failed

    try:
        with torch.no_grad():
            for x in xs:
                joint(x)
                twostep(x)
            tj = np.zeros((repetitions, len(xs)))
            tn = np.zeros_like(tj)
            tf = np.zeros_like(tj)
            failures = 0
            for r in range(repetitions):
                for i, x in enumerate(xs):
                    order = (0, 1) if (r + i) % 2 == 0 else (1, 0)
                    for which in order:
                        if which == 0:
                            t0 = clock()
                            joint(x)
                            tj[r, i] = clock() - t0
                        else:
                            tn[r, i], tf[r, i], failed = twostep(x)
                            failures += failed and r == 0
    finally:
        model.train(was_training)
    ms = lambda a: float(np.median(a, axis=0).mean() * 1000)  # noqa: E731
    nn_ms, fit_ms = ms(tn), ms(tf)
    return TimingReport(ms(tj), nn_ms, fit_ms, nn_ms + fit_ms, len(xs), repetitions, int(failures), hardware)
