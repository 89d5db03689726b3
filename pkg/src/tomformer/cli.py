"""Command-line entry point: ``tomformer <subcommand> [--config FILE] [--out DIR] ...``.

Exit codes are 0 on success, 1 for internal or numerical failures and 2 for
bad user input (missing files, malformed configs or manifests, mismatched
checkpoints).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from tomformer import __version__
from tomformer.checkpoint import load_checkpoint, read_checkpoint
from tomformer.data import CLASSES, SynthConfig, decode_image, denormalize, load_annotations, normalize_and_resize, synth_dataset
from tomformer.errors import ConfigError, ContractError, NumericalError, TomFormerError
from tomformer.evaluation import DEFAULT_IOU_THRESHOLD, detections_from_output, mean_ap
from tomformer.matching import LossWeights
from tomformer.model import ModelConfig, count_parameters, forward, parameter_shapes
from tomformer.trainer import TrainConfig, fit, lr_schedule

log = logging.getLogger("tomformer")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
SECTIONS = ("model", "train", "loss", "synth", "eval")


class UsageError(Exception):
    """Bad invocation detected before any work starts."""


def load_run_config(path: str | None) -> dict:
    """Read the JSON run file; every section is optional."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}, expected some of {list(SECTIONS)}")
    return raw


def _model_config(run: dict) -> ModelConfig:
    return ModelConfig.from_dict(run.get("model", {}))


def _train_config(run: dict, args) -> TrainConfig:
    d = dict(run.get("train", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def _loss_weights(run: dict) -> LossWeights:
    d = run.get("loss", {})
    unknown = set(d) - {f.name for f in fields(LossWeights)}
    if unknown:
        raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
    weights = LossWeights(**{k: float(v) for k, v in d.items()})
    if min(weights.cls, weights.l1, weights.giou, weights.no_object) < 0:
        raise ConfigError("loss weights must be non-negative")
    return weights


def _synth_config(run: dict, args) -> SynthConfig:
    d = dict(run.get("synth", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    return SynthConfig.from_dict(d)


def _iou_threshold(run: dict) -> float:
    ev = run.get("eval", {})
    unknown = set(ev) - {"iou_threshold"}
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    thr = ev.get("iou_threshold", DEFAULT_IOU_THRESHOLD)
    if not 0 < thr <= 1:
        raise ConfigError("eval.iou_threshold must be in (0, 1]")
    return float(thr)


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path: str | None, default: str) -> Path:
    out = Path(path or default)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path exists and is not a directory: {out}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _checkpoint_and_config(args, run: dict):
    ckpt = _existing(args.checkpoint, "checkpoint")
    expected = _model_config(run) if "model" in run else None
    return load_checkpoint(ckpt, expected)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, run) -> int:
    cfg = _synth_config(run, args)
    out = _out_dir(args.out, "synth")
    manifest, path = synth_dataset(cfg, out)
    print(f"wrote {len(manifest)} images, {len(manifest.annotations)} objects")
    print(f"manifest: {path}")
    return EXIT_OK


def cmd_train(args, run) -> int:
    manifest_path = _existing(args.manifest, "manifest")
    resume = _existing(args.resume, "resume") if args.resume else None
    model_cfg = _model_config(run)
    train_cfg = _train_config(run, args)
    weights = _loss_weights(run)
    out = _out_dir(args.out, "run")
    manifest = load_annotations(manifest_path)
    if resume is not None:
        epoch = int(read_checkpoint(resume)[0]["meta"].get("epoch", 0))
        print(f"resuming at epoch {epoch}, lr {lr_schedule(epoch, train_cfg)!r}")
    (out / "run_config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "loss": asdict(weights)}, indent=2) + "\n", encoding="utf-8"
    )
    _, ckpt = fit(model_cfg, train_cfg, manifest, out, resume=resume, weights=weights)
    print(f"checkpoint: {ckpt}")
    print(f"log: {out / 'train_log.jsonl'}")
    return EXIT_OK


def cmd_eval(args, run) -> int:
    manifest_path = _existing(args.manifest, "manifest")
    threshold = _iou_threshold(run)
    params, config = _checkpoint_and_config(args, run)
    out = _out_dir(args.out, "eval")
    manifest = load_annotations(manifest_path, split=args.split)
    dets = []
    for record in manifest.records:
        image = normalize_and_resize(decode_image(record.path), config.image_height, config.image_width)
        dets += detections_from_output(forward(image, params, config), record.image_id)
    report = mean_ap(dets, manifest.annotations, threshold)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "pr_curves.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text(), end="")
    if report.empty:
        log.warning("split %r has no ground-truth objects; mAP reported as 0", args.split)
    return EXIT_OK


def cmd_infer(args, run) -> int:
    image_path = _existing(args.image, "image")
    params, config = _checkpoint_and_config(args, run)
    raw = decode_image(image_path)
    _, height, width = raw.shape
    image = normalize_and_resize(raw, config.image_height, config.image_width)
    dets = detections_from_output(forward(image, params, config), image_path.stem)
    names = CLASSES if config.num_classes == len(CLASSES) else tuple(f"class_{k}" for k in range(config.num_classes))
    rows = []
    for d in sorted(dets, key=lambda d: -d.score):
        x, y, w, h = denormalize(d.box, width, height)
        rows.append(
            {
                "class_id": d.class_id,
                "class": names[d.class_id],
                "score": d.score,
                "box": dict(zip(("cx", "cy", "w", "h"), d.box.as_array().tolist())),
                "pixel_box": {"x": x, "y": y, "w": w, "h": h},
            }
        )
    doc = {"image": str(image_path), "width": width, "height": height, "detections": rows}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_gradcheck(args, run) -> int:
    from tomformer.gradcheck import format_table, run_suite

    rows = run_suite(seed=args.seed or 0)
    print(format_table(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_INTERNAL
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def cmd_count_params(args, run) -> int:
    config = _model_config(run)
    groups: dict[str, int] = {}
    for name, shape in parameter_shapes(config):
        key = ".".join(name.split(".")[:2]) if name.startswith("layers.") else name.split(".")[0]
        size = 1
        for n in shape:
            size *= n
        groups[key] = groups.get(key, 0) + size
    width = max(len(k) for k in groups)
    for key, size in groups.items():
        print(f"{key:<{width}}  {size:>10,}")
    print(f"{'total':<{width}}  {count_parameters(config):>10,}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic leaf-disease dataset"),
    "train": (cmd_train, "train a model on a manifest"),
    "eval": (cmd_eval, "mAP report for a checkpoint on a manifest"),
    "infer": (cmd_infer, "detections for a single PPM image"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op and a tiny model"),
    "count-params": (cmd_count_params, "parameter count of the configured model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomformer", description="Detection transformer on numpy.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run file with optional model/train/loss/synth/eval sections")
        p.add_argument("--seed", type=int, help="override the seed of the section this command uses")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name in ("eval", "infer"):
            p.add_argument("--checkpoint", help="checkpoint file written by train")
        if name in ("train", "eval"):
            p.add_argument("--manifest", help="manifest.json written by synth or exported by an annotator")
        if name == "train":
            p.add_argument("--resume", help="continue from this checkpoint up to train.epochs")
            p.add_argument("--epochs", type=int, help="override train.epochs")
        if name == "eval":
            p.add_argument("--split", default="train", help="split tag recorded in the report (default: train)")
        if name == "infer":
            p.add_argument("--image", help="binary PPM (P6) image")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler, _ = COMMANDS[args.command]
    try:
        run = load_run_config(args.config)
        return handler(args, run)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, NumericalError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except TomFormerError as exc:
        # config, schema, record, vocabulary, image-format, shape and checkpoint errors are input problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort guard, report and exit 1
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
