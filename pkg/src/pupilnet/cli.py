"""Command-line entry point.

Settings resolve in three layers: built-in defaults, then the YAML file given with
``--config``, then explicit command-line flags. Every command writes its outputs
into a staging directory that is moved into place only on success, together with a
``run_manifest.json`` holding the resolved configuration.

Exit status: 0 on success, 1 on invalid input or configuration, 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import yaml

from . import SCHEMA_VERSION, __version__
from .augmentation import AugmentationConfig, load_scene
from .dataset import (
    PrepareReport,
    augment_dataset,
    load_dataset,
    prepare_from_manifest,
    read_rgb,
    resize_image,
    save_dataset,
    split,
    synth_dataset,
)
from .errors import ConfigError, PupilnetError, ValidationError
from .evaluation import MODES, NetworkPredictor, evaluate_pipeline, load_predictor, predicted_ellipse, time_pipelines
from .geometry import AffineTransform2D, Ellipse, transform_ellipse
from .model import ModelConfig, build_model, predict_arrays
from .pupillogram import (
    compute_plr_metrics,
    plot_trace,
    predictions_from_json,
    read_trace,
    trace_from_predictions,
    write_metrics,
    write_trace,
)
from .training import TrainConfig, train

log = logging.getLogger("pupilnet")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class DataOptions:
    size: int = 224
    count: int = 100
    palette: dict | None = None
    train_fraction: float = 0.9
    scene_dir: str | None = None


@dataclass
class EvalOptions:
    mode: str = "both"
    repetitions: int = 5
    hardware: str = ""


@dataclass
class PupillogramOptions:
    window: int = 3
    k: float = 0.05
    mm_per_px: float | None = None
    fps: float | None = None
    stimulus_onset: float | None = None
    stimulus_offset: float | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataOptions = field(default_factory=DataOptions)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    pupillogram: PupillogramOptions = field(default_factory=PupillogramOptions)

    SECTIONS = ("data", "augmentation", "model", "train", "evaluation", "pupillogram")

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in self.SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        return out

    @classmethod
    def from_dict(cls, d: dict | None) -> RunConfig:
        d = dict(d or {})
        unknown = set(d) - {"seed", *cls.SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        cfg.seed = int(d.get("seed", cfg.seed))
        for name in cls.SECTIONS:
            if name in d:
                cfg.set_section(name, d[name] or {})
        return cfg

    def set_section(self, name: str, values: dict) -> None:
        current = getattr(self, name)
        merged = {**(current.to_dict() if hasattr(current, "to_dict") else asdict(current)), **values}
        kind = type(current)
        unknown = set(merged) - set(kind.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
        try:
            setattr(self, name, kind(**merged))
        except TypeError as exc:
            raise ConfigError(f"bad '{name}' section: {exc}") from exc

    def resolved(self) -> RunConfig:
        """Propagate the global seed into the sections that carry their own."""
        self.set_section("train", {"seed": self.seed})
        self.set_section("augmentation", {"seed": self.seed})
        return self


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# --- argument parsing -------------------------------------------------------------

class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# flag name -> (config section, key); applied on top of the config file
OVERRIDES = {
    "size": ("data", "size"),
    "count": ("data", "count"),
    "train_fraction": ("data", "train_fraction"),
    "scene_dir": ("data", "scene_dir"),
    "copies": ("augmentation", "copies_per_original"),
    "input_size": ("model", "input_size"),
    "encoder_depth": ("model", "encoder_depth"),
    "base_channels": ("model", "base_channels"),
    "head_hidden": ("model", "head_hidden"),
    "no_head": ("model", "regression_head"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "optimizer": ("train", "optimizer"),
    "lr": ("train", "lr"),
    "lr_min": ("train", "lr_min"),
    "lr_max": ("train", "lr_max"),
    "no_cyclic": ("train", "cyclic_lr"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "mode": ("evaluation", "mode"),
    "repetitions": ("evaluation", "repetitions"),
    "hardware": ("evaluation", "hardware"),
    "window": ("pupillogram", "window"),
    "k": ("pupillogram", "k"),
    "mm_per_px": ("pupillogram", "mm_per_px"),
    "fps": ("pupillogram", "fps"),
    "onset": ("pupillogram", "stimulus_onset"),
    "offset": ("pupillogram", "stimulus_offset"),
}
NEGATED = {"no_head", "no_cyclic"}


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="pupilnet", description="Pupil segmentation and ellipse regression toolkit.")
    p.add_argument("--version", action="version", version=f"pupilnet {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic eye samples")
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int)

    s = sub.add_parser("prepare", parents=[common], help="manifest to prepared dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--size", type=int)

    s = sub.add_parser("augment", parents=[common], help="augment a prepared dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--copies", type=int)
    s.add_argument("--scene-dir")

    s = sub.add_parser("train", parents=[common], help="train on a prepared dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--train-fraction", type=float)
    s.add_argument("--input-size", type=int)
    s.add_argument("--encoder-depth", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--head-hidden", type=int, nargs="*")
    s.add_argument("--no-head", action="store_true", default=None, help="segmentation-only model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--optimizer", choices=("rmsprop", "adam"))
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-min", type=float)
    s.add_argument("--lr-max", type=float)
    s.add_argument("--no-cyclic", action="store_true", default=None)
    s.add_argument("--checkpoint-every", type=int)

    s = sub.add_parser("predict", parents=[common], help="predict masks and ellipses for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("images", nargs="+", help="image files or directories")
    s.add_argument("--mode", choices=MODES)

    s = sub.add_parser("evaluate", parents=[common], help="metrics on a prepared dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=MODES + ("both",))

    s = sub.add_parser("bench", parents=[common], help="time the two pipelines")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="prepared dataset whose images are the frames")
    s.add_argument("--frames", help="directory of frame images")
    s.add_argument("--repetitions", type=int)
    s.add_argument("--hardware")

    s = sub.add_parser("pupillogram", parents=[common], help="pupillogram and PLR metrics")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", help="trace CSV (t_seconds, diameter_<unit>)")
    src.add_argument("--predictions", help="prediction JSON with a 'frames' list")
    src.add_argument("--frames", help="directory of frames in time order (needs --checkpoint and --fps)")
    s.add_argument("--checkpoint")
    s.add_argument("--sidecar", help="JSON sidecar of a trace CSV")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--onset", type=float)
    s.add_argument("--offset", type=float)
    s.add_argument("--fps", type=float)
    s.add_argument("--window", type=int)
    s.add_argument("--k", type=float)
    s.add_argument("--mm-per-px", type=float)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    updates: dict[str, dict] = {}
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag in NEGATED:
            value = not value
        updates.setdefault(section, {})[key] = value
    for section, values in updates.items():
        cfg.set_section(section, values)
    return cfg.resolved()


# --- helpers ----------------------------------------------------------------------

def write_json(path: Path, data: dict) -> None:
    data = {"schema_version": SCHEMA_VERSION, **data}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def list_images(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        elif p.exists():
            out.append(p)
        else:
            raise ValidationError(f"no such image or directory: {p}")
    if not out:
        raise ValidationError("no input images found")
    return out


def load_scenes(scene_dir: str | None) -> list[np.ndarray]:
    return [load_scene(p) for p in list_images([scene_dir])] if scene_dir else []


def network_from(path: str):
    predictor = load_predictor(path)
    if not isinstance(predictor, NetworkPredictor):
        raise ConfigError(f"{path} holds an oracle, which needs ground truth; use it with 'evaluate'")
    return predictor.model


def predict_images(model, paths: list[Path], mode: str) -> list[dict]:
    """Run the model on raw images; ellipses are reported at model and original resolution."""
    size = model.cfg.input_size
    records = []
    for path in paths:
        raw = read_rgb(path)
        h, w = raw.shape[:2]
        masks, params = predict_arrays(model, resize_image(raw, size)[None].astype(np.float32) / 255.0)
        rec = {"id": path.stem, "file": path.name, "mask": masks[0]}
        try:
            e = predicted_ellipse(masks[0], None if params is None else params[0], mode, size)
        except ValidationError as exc:
            rec.update(ellipse=None, ellipse_original=None, failure=type(exc).__name__)
        else:
            back = transform_ellipse(e, AffineTransform2D.scale(w / size, h / size))
            rec.update(ellipse=e.to_dict(), ellipse_original=back.to_dict(), failure="")
        records.append(rec)
    return records


# --- commands ---------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> dict:
    samples = synth_dataset(cfg.data.count, seed=cfg.seed, height=cfg.data.size, width=cfg.data.size)
    save_dataset(out, samples)
    return {"samples": len(samples)}


def cmd_prepare(args, cfg: RunConfig, out: Path) -> dict:
    samples, report = prepare_from_manifest(args.manifest, cfg.data.size, cfg.data.palette)
    save_dataset(out, samples, report.to_dict())
    return {"accepted": report.accepted, "total": report.total}


def cmd_augment(args, cfg: RunConfig, out: Path) -> dict:
    samples = load_dataset(args.data)
    aug = cfg.augmentation
    scenes = load_scenes(cfg.data.scene_dir)
    if scenes:
        aug = AugmentationConfig(**{**aug.to_dict(), "scene_images": scenes})
    result = augment_dataset(samples, aug)
    report = PrepareReport(total=len(result), accepted=len(result)).to_dict()
    save_dataset(out, result, report)
    return {"originals": len(samples), "samples": len(result)}


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    samples = load_dataset(args.data)
    if samples and samples[0].width != cfg.model.input_size:
        raise ConfigError(f"dataset resolution {samples[0].width} differs from model input_size "
                          f"{cfg.model.input_size}")
    train_set, val_set = split(samples, cfg.data.train_fraction, cfg.seed)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model)
    log_fn = lambda r: log.info("epoch %d loss %.4f val_dsc %.4f", r.epoch, r.train_total, r.val_dsc)  # noqa: E731
    _, history = train(model, train_set, val_set, cfg.train, out, log=log_fn)
    return {"train": len(train_set), "val": len(val_set), "best_epoch": history.best_epoch}


def cmd_predict(args, cfg: RunConfig, out: Path) -> dict:
    model = network_from(args.checkpoint)
    mode = args.mode or "two-step"
    records = predict_images(model, list_images(args.images), mode)
    (out / "masks").mkdir()
    for rec in records:
        cv2.imwrite(str(out / "masks" / f"{rec['id']}.png"), ((rec.pop("mask") >= 0.5) * 255).astype(np.uint8))
    write_json(out / "ellipses.json", {"mode": mode, "frames": records})
    return {"images": len(records), "failures": sum(bool(r["failure"]) for r in records)}


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> dict:
    predictor = load_predictor(args.checkpoint)
    samples = load_dataset(args.data)
    modes = MODES if cfg.evaluation.mode == "both" else (cfg.evaluation.mode,)
    summary = {}
    for mode in modes:
        report = evaluate_pipeline(predictor, samples, mode)
        report.write(out / f"metrics_{mode}.json", out / f"metrics_{mode}.csv")
        summary[mode] = report.aggregates["dsc"]["mean"]
    return {"dsc": summary}


def cmd_bench(args, cfg: RunConfig, out: Path) -> dict:
    model = network_from(args.checkpoint)
    if args.data:
        frames = [s.image for s in load_dataset(args.data)]
    elif args.frames:
        size = model.cfg.input_size
        frames = [resize_image(read_rgb(p), size) for p in list_images([args.frames])]
    else:
        raise ConfigError("bench needs --data or --frames")
    report = time_pipelines(model, frames, cfg.evaluation.repetitions, cfg.evaluation.hardware)
    write_json(out / "timing.json", report.to_dict())
    return {"joint_ms": report.joint_ms_per_frame, "twostep_ms": report.twostep_total_ms}


def cmd_pupillogram(args, cfg: RunConfig, out: Path) -> dict:
    opts = cfg.pupillogram
    if args.trace:
        trace = read_trace(args.trace, opts.stimulus_onset, args.sidecar)
    else:
        if opts.stimulus_onset is None:
            raise ConfigError("--onset is required")
        if args.predictions:
            preds = predictions_from_json(json.loads(Path(args.predictions).read_text()), opts.fps)
        else:
            if not (args.checkpoint and opts.fps):
                raise ConfigError("--frames needs --checkpoint and --fps")
            records = predict_images(network_from(args.checkpoint), list_images([args.frames]),
                                     args.mode or "two-step")
            failed = [r["id"] for r in records if r["failure"]]
            if failed:
                log.warning("dropping %d frames without an ellipse", len(failed))
            preds = [(i / opts.fps, Ellipse.from_dict(r["ellipse"])) for i, r in enumerate(records) if r["ellipse"]]
        trace = trace_from_predictions(preds, opts.stimulus_onset, opts.stimulus_offset, opts.window, opts.mm_per_px)
    metrics = compute_plr_metrics(trace, opts.k)
    write_trace(trace, out / "trace.csv", out / "trace.json")
    write_metrics(metrics, out / "metrics.json", opts.k)
    plot_trace(trace, metrics, out / "pupillogram.png")
    return {"MCA": metrics.MCA, "constriction_detected": metrics.constriction_detected}


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "augment": cmd_augment,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "pupillogram": cmd_pupillogram,
}


def run(args: argparse.Namespace) -> dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        summary = COMMANDS[args.command](args, cfg, stage)
        write_json(stage / "run_manifest.json", {
            "command": args.command,
            "version": __version__,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "summary": summary,
        })
        out.mkdir(exist_ok=True)
        for item in sorted(stage.iterdir()):
            target = out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            item.replace(target)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return summary


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help and --version 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (ValidationError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"pupilnet {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    except (PupilnetError, RuntimeError, OSError) as exc:
        print(f"pupilnet {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
