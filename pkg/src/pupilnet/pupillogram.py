"""Pupil diameter traces and pupillary light reflex (PLR) metrics.

The dynamic metrics use these definitions:

* D0: mean diameter before the stimulus onset.
* Dmin: smallest diameter at or after the onset, capped at D0, so MCA = D0 - Dmin >= 0.
* Constriction onset: first sample at or after the stimulus whose centered-difference
  velocity falls below ``-k * D0`` per second. tL is measured from the stimulus to this onset.
* tC: time from the constriction onset to the minimum that follows it.
* MCV: largest constriction speed between the constriction onset and that minimum.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from . import SCHEMA_VERSION
from .errors import ConfigError, NoBaseline, NoConstriction, NonMonotoneTime, OutOfRange, ValidationError
from .geometry import Ellipse, pupil_diameter

DEFAULT_WINDOW = 3
DEFAULT_K = 0.05
MIN_BASELINE = 2


def median_smooth(d, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"median window must be a positive odd number, got {window}")
    d = np.asarray(d, dtype=np.float64)
    return d.copy() if window == 1 else median_filter(d, size=window, mode="nearest")


@dataclass
class PupillogramTrace:
    t: np.ndarray
    d: np.ndarray
    stimulus_onset: float
    stimulus_offset: float | None = None
    unit: str = "px"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.t.ndim != 1 or self.t.shape != self.d.shape:
            raise ValidationError("t and d must be 1-D arrays of equal length")
        if self.t.size < 3:
            raise ValidationError("a trace needs at least 3 samples")
        if not (np.isfinite(self.t).all() and np.isfinite(self.d).all()):
            raise ValidationError("trace contains non-finite values")
        if np.any(np.diff(self.t) <= 0):
            raise NonMonotoneTime("timestamps must be strictly increasing")
        if np.any(self.d <= 0):
            raise ValidationError("diameters must be positive")
        if not self.t[0] <= self.stimulus_onset <= self.t[-1]:
            raise OutOfRange(f"stimulus onset {self.stimulus_onset} outside [{self.t[0]}, {self.t[-1]}]")

    def sidecar(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "stimulus_onset": self.stimulus_onset,
            "stimulus_offset": self.stimulus_offset,
            "unit": self.unit,
            "n_samples": int(self.t.size),
            **self.metadata,
        }


def trace_from_predictions(predictions, stimulus_onset: float, stimulus_offset: float | None = None,
                           window: int = DEFAULT_WINDOW, mm_per_px: float | None = None) -> PupillogramTrace:
    """Diameter series from ``(timestamp, Ellipse)`` pairs, median-filtered with ``window`` samples."""
    predictions = list(predictions)
    if len(predictions) < 3:
        raise ValidationError("need at least 3 predictions")
    t = np.array([float(p[0]) for p in predictions])
    if np.any(np.diff(t) <= 0):
        raise NonMonotoneTime("prediction timestamps must be strictly increasing")
    d = np.array([pupil_diameter(p[1]) for p in predictions])
    unit = "px"
    if mm_per_px is not None:
        if not mm_per_px > 0:
            raise ConfigError("mm_per_px must be positive")
        d = d * mm_per_px
        unit = "mm"
    meta = {"filter": {"type": "median", "window": window}, "mm_per_px": mm_per_px}
    return PupillogramTrace(t, median_smooth(d, window), stimulus_onset, stimulus_offset, unit, meta)


@dataclass
class PLRMetrics:
    D0: float
    Dmin: float
    MCA: float
    tL: float | None
    MCV: float | None
    tC: float | None
    constriction_detected: bool
    constriction_onset: float | None = None
    unit: str = "px"

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


def centered_velocity(t: np.ndarray, d: np.ndarray) -> np.ndarray:
    """(d[i+1] - d[i-1]) / (t[i+1] - t[i-1]) inside; one-sided differences at the ends."""
    v = np.empty_like(d)
    v[1:-1] = (d[2:] - d[:-2]) / (t[2:] - t[:-2])
    v[0] = (d[1] - d[0]) / (t[1] - t[0])
    v[-1] = (d[-1] - d[-2]) / (t[-1] - t[-2])
    return v


def compute_plr_metrics(trace: PupillogramTrace, k: float = DEFAULT_K, strict: bool = False) -> PLRMetrics:
    """PLR metrics of a trace; with ``strict`` a missing constriction raises NoConstriction."""
    if k <= 0:
        raise ConfigError("velocity threshold k must be positive")
    t, d, onset = trace.t, trace.d, trace.stimulus_onset
    pre = t < onset
    if pre.sum() < MIN_BASELINE:
        raise NoBaseline(f"{int(pre.sum())} samples before the stimulus onset; need {MIN_BASELINE}")
    d0 = float(d[pre].mean())
    dmin = min(d0, float(d[~pre].min()))
    v = centered_velocity(t, d)
    crossing = np.flatnonzero(~pre & (v < -k * d0))
    if crossing.size == 0:
        metrics = PLRMetrics(d0, dmin, d0 - dmin, None, None, None, False, unit=trace.unit)
        if strict:
            raise NoConstriction(metrics)
        return metrics
    i_on = int(crossing[0])
    i_min = i_on + int(np.argmin(d[i_on:]))
    mcv = float(max(0.0, np.max(-v[i_on:i_min + 1])))
    return PLRMetrics(d0, dmin, d0 - dmin, float(t[i_on] - onset), mcv, float(t[i_min] - t[i_on]), True,
                      float(t[i_on]), trace.unit)


# --- I/O -------------------------------------------------------------------------------

def write_trace(trace: PupillogramTrace, csv_path: str | Path, sidecar_path: str | Path | None = None) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t_seconds", f"diameter_{trace.unit}"])
        for ti, di in zip(trace.t, trace.d):
            writer.writerow([repr(float(ti)), repr(float(di))])
    if sidecar_path is not None:
        Path(sidecar_path).write_text(json.dumps(trace.sidecar(), indent=2, sort_keys=True) + "\n")


def read_trace(csv_path: str | Path, stimulus_onset: float | None = None,
               sidecar_path: str | Path | None = None) -> PupillogramTrace:
    """Read a trace CSV; stimulus times come from the sidecar unless given explicitly."""
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or len(rows[0]) < 2 or rows[0][0] != "t_seconds":
        raise ValidationError(f"{csv_path}: expected a t_seconds,diameter_<unit> header")
    unit = rows[0][1].split("_", 1)[1] if "_" in rows[0][1] else "px"
    data = np.array([[float(x) for x in r[:2]] for r in rows[1:] if r], dtype=np.float64).reshape(-1, 2)
    side = json.loads(Path(sidecar_path).read_text()) if sidecar_path else {}
    onset = stimulus_onset if stimulus_onset is not None else side.get("stimulus_onset")
    if onset is None:
        raise ConfigError("stimulus onset not given and no sidecar provides it")
    meta = {k: v for k, v in side.items()
            if k not in ("schema_version", "stimulus_onset", "stimulus_offset", "unit", "n_samples")}
    return PupillogramTrace(data[:, 0], data[:, 1], float(onset), side.get("stimulus_offset"), unit, meta)


def write_metrics(metrics: PLRMetrics, path: str | Path, k: float = DEFAULT_K) -> None:
    d = metrics.to_dict()
    d["velocity_threshold_k"] = k
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def plot_trace(trace: PupillogramTrace, metrics: PLRMetrics | None, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5), dpi=100)
    ax.plot(trace.t, trace.d, color="k", lw=1.2)
    ax.axvline(trace.stimulus_onset, color="tab:orange", ls="--", lw=1, label="stimulus")
    if trace.stimulus_offset is not None:
        ax.axvline(trace.stimulus_offset, color="tab:orange", ls=":", lw=1)
    if metrics is not None:
        ax.axhline(metrics.D0, color="tab:blue", lw=0.8, label="D0")
        ax.axhline(metrics.Dmin, color="tab:green", lw=0.8, label="Dmin")
        if metrics.constriction_onset is not None:
            ax.axvline(metrics.constriction_onset, color="tab:red", lw=0.8, label="constriction onset")
    ax.set_xlabel("time (s)")
    ax.set_ylabel(f"pupil diameter ({trace.unit})")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def piecewise_trace(d0: float = 6.0, dmin: float = 4.0, stimulus: float = 1.0, fall_start: float = 1.2,
                    fall_end: float = 2.2, duration: float = 4.0, rate: float = 30.0) -> PupillogramTrace:
    """Flat baseline, linear fall from d0 to dmin over [fall_start, fall_end], flat after."""
    n = int(round(duration * rate)) + 1
    t = np.arange(n) / rate
    d = np.interp(t, [fall_start, fall_end], [d0, dmin])
    return PupillogramTrace(t, d, stimulus)


def predictions_from_json(data: dict, fps: float | None = None) -> list[tuple[float, Ellipse]]:
    """Parse ``{"frames": [{"t": s, "ellipse": {...}}, ...]}``; missing ``t`` uses ``index / fps``."""
    frames = data.get("frames")
    if not isinstance(frames, list):
        raise ValidationError("prediction JSON needs a 'frames' list")
    out = []
    for i, fr in enumerate(frames):
        if "t" in fr:
            t = float(fr["t"])
        elif fps:
            t = i / fps
        else:
            raise ConfigError("frames without timestamps need a frame rate")
        if not math.isfinite(t):
            raise NonMonotoneTime(f"frame {i} has a non-finite timestamp")
        out.append((t, Ellipse.from_dict(fr["ellipse"])))
    return out
