"""``asd`` command line: synth, train, calibrate, eval, predict, gradcheck.

Every command prints a one-line JSON summary on stdout. Failures print a JSON
object ``{"error": kind, "message": ..., "exit_code": n}`` on stderr and exit
with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import container
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .data import dataset_digest, generate_synthetic, read_dataset, tracks_from_scenes, write_dataset
from .evaluation import breakdown, write_predictions, write_report
from .features import AttributeEncoders
from .gradcheck import gradient_suite
from .model import FUSION_MODES, ActiveSpeakerNet, ModelConfig
from .pipeline import multimodal_scores, predict_tracks, prepare
from .training import TrainingDiverged, calibrate_model, fit, latest_checkpoint, load_checkpoint, multi_objective

log = logging.getLogger("asd")


class CheckpointMismatch(RuntimeError):
    """The stored run does not fit the requested configuration."""


class CheckFailed(RuntimeError):
    pass


EXIT_CODES = {
    "failed_check": 1,
    "invalid_config": 2,
    "missing_file": 3,
    "malformed_file": 4,
    "checkpoint_mismatch": 5,
    "diverged": 6,
}


def _classify(exc: BaseException) -> str | None:
    if isinstance(exc, ConfigError):
        return "invalid_config"
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, (container.ContainerError, json.JSONDecodeError)):
        return "malformed_file"
    if isinstance(exc, CheckpointMismatch):
        return "checkpoint_mismatch"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, CheckFailed):
        return "failed_check"
    return None


# ---------------------------------------------------------------------------
# helpers


def _stamp(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _load_scenes(manifest: Path):
    if not manifest.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest} (run `asd synth` first)")
    try:
        return read_dataset(manifest)
    except KeyError as exc:
        raise container.ContainerError(str(exc)) from exc


def _prepare(cfg: ExperimentConfig, scenes):
    return prepare(scenes, cfg.model.resolution, cfg.val_fraction, cfg.train.calibration_fraction, cfg.seed, cfg.train.smoothing)


def _load_run(cfg: ExperimentConfig, checkpoint: str | None):
    """Network, encoders and stored model document for ``cfg.run_dir``."""
    run_dir = cfg.run_dir
    model_path = run_dir / "model.json"
    if not model_path.is_file():
        raise FileNotFoundError(f"no trained run at {run_dir} (missing model.json)")
    doc = json.loads(model_path.read_text())
    stored = ModelConfig.from_dict(doc["model"])
    if stored.architecture_hash() != cfg.model.architecture_hash():
        raise CheckpointMismatch(
            f"run at {run_dir} was trained with architecture {stored.architecture_hash()} "
            f"but the configuration asks for {cfg.model.architecture_hash()}"
        )
    enc_path = run_dir / "encoders.json"
    if not enc_path.is_file():
        raise FileNotFoundError(f"missing encoders file {enc_path}")
    encoders = AttributeEncoders.from_json(enc_path.read_text())
    ckpt = Path(checkpoint) if checkpoint else latest_checkpoint(run_dir)
    if ckpt is None or not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt or run_dir / 'checkpoint_epoch*.asdt'}")
    net = ActiveSpeakerNet(stored, seed=cfg.seed)
    try:
        epoch = load_checkpoint(ckpt, net.store)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, container.ContainerError):
            raise
        raise CheckpointMismatch(f"{ckpt}: {exc}") from exc
    return net, encoders, doc, ckpt, epoch


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig, args) -> dict:
    if cfg.synthetic is None:
        raise ConfigError("config has no [synthetic] section")
    scenes = generate_synthetic(cfg.synthetic)
    digest = dataset_digest(scenes)
    manifest = write_dataset(scenes, cfg.dataset_dir, _stamp(cfg, dataset_sha256=digest, num_scenes=len(scenes)))
    return _stamp(cfg, command="synth", manifest=str(manifest), num_scenes=len(scenes), dataset_sha256=digest)


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    prep = _prepare(cfg, _load_scenes(cfg.manifest))
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in run_dir.glob("checkpoint_epoch*.asdt"):
        stale.unlink()
    _write_json(
        run_dir / "model.json",
        _stamp(cfg, model=cfg.model.to_dict(), architecture_hash=cfg.model.architecture_hash(), calibrated=False),
    )
    enc = json.loads(prep.encoders.to_json())
    _write_json(run_dir / "encoders.json", {**enc, "meta": _stamp(cfg)})
    net = ActiveSpeakerNet(cfg.model, seed=cfg.seed)
    samples = prep.train_samples(cfg.train.sequence_length)
    log.info("training %s on %d sequences from %d scenes", cfg.model.fusion_mode, len(samples), len(prep.splits.train))
    result = fit(net, samples, cfg.train, prep.encoders, multi_objective, run_dir)
    summary = _stamp(
        cfg,
        command="train",
        fusion_mode=cfg.model.fusion_mode,
        checkpoint=str(result.checkpoint),
        epochs=len(result.history),
        first_L_f=result.history[0].L_f,
        final_L_f=result.history[-1].L_f,
    )
    _write_json(run_dir / "train.json", summary)
    return summary


def cmd_calibrate(cfg: ExperimentConfig, args) -> dict:
    net, encoders, doc, ckpt, epoch = _load_run(cfg, args.checkpoint)
    prep = _prepare(cfg, _load_scenes(cfg.manifest))
    updated = calibrate_model(net, prep.calibration_samples(cfg.train.sequence_length), encoders)
    doc.update(_stamp(cfg, model=updated.to_dict(), calibrated=True, calibration_checkpoint=str(ckpt)))
    _write_json(cfg.run_dir / "model.json", doc)
    return _stamp(
        cfg,
        command="calibrate",
        fusion_mode=cfg.model.fusion_mode,
        temperature_video=updated.temperature_video,
        temperature_audio=updated.temperature_audio,
        checkpoint=str(ckpt),
    )


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    net, encoders, doc, ckpt, epoch = _load_run(cfg, args.checkpoint)
    prep = _prepare(cfg, _load_scenes(cfg.manifest))
    tracks = prep.val_tracks if args.split == "val" else prep.train_tracks
    records = predict_tracks(multimodal_scores(net), tracks, encoders, cfg.train.sequence_length)
    meta = _stamp(
        cfg,
        fusion_mode=cfg.model.fusion_mode,
        fusion_override=args.fusion,
        split=args.split,
        checkpoint=str(ckpt),
        epoch=epoch,
        temperature_video=net.config.temperature_video,
        temperature_audio=net.config.temperature_audio,
    )
    report = breakdown(records, meta)
    out = cfg.run_dir / f"eval_{args.split}"
    js, plot = write_report(report, out)
    write_predictions(out / "predictions.csv", records)
    _write_json(out / "predictions.json", meta)
    return {**meta, "command": "eval", "report": str(js), "mAP": report.mAP, "AUC": report.AUC}


def cmd_predict(cfg: ExperimentConfig, args) -> dict:
    net, encoders, doc, ckpt, epoch = _load_run(cfg, args.checkpoint)
    manifest = Path(args.manifest) if args.manifest else cfg.manifest
    tracks = tracks_from_scenes(_load_scenes(manifest), cfg.model.resolution)
    records = predict_tracks(multimodal_scores(net), tracks, encoders, cfg.train.sequence_length)
    out = cfg.run_dir / "predict"
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.csv", records)
    meta = _stamp(cfg, fusion_mode=cfg.model.fusion_mode, manifest=str(manifest), checkpoint=str(ckpt), epoch=epoch)
    _write_json(out / "predictions.json", meta)
    return {**meta, "command": "predict", "predictions": str(out / "predictions.csv"), "count": len(records)}


def cmd_gradcheck(cfg: ExperimentConfig, args) -> dict:
    suite = gradient_suite(seed=cfg.seed)
    for name, report in suite.reports.items():
        print(f"{name:22s} {report.summary()}", file=sys.stderr)
    payload = {**suite.to_dict(), **_stamp(cfg)}
    path = _write_json(Path(cfg.paths.out) / "gradcheck.json", payload)
    summary = _stamp(cfg, command="gradcheck", passed=suite.passed, max_rel_error=suite.max_rel_error, report=str(path))
    if not suite.passed:
        raise CheckFailed(f"gradient check failed; see {path}")
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="experiment TOML file")
    common.add_argument("--seed", type=int)
    common.add_argument("--fusion", choices=FUSION_MODES)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output root; runs land in <out>/<fusion_mode>/")
    parser = argparse.ArgumentParser(prog="asd", description="Audiovisual active speaker detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train a model")
    for name in ("calibrate", "eval", "predict"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="checkpoint file (default: latest in the run directory)")
        if name == "eval":
            p.add_argument("--split", choices=("train", "val"), default="val")
        if name == "predict":
            p.add_argument("--manifest", help="manifest to score (default: the configured dataset)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite on a tiny model")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("ASD_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.command == "gradcheck":
        cfg = ExperimentConfig()
    else:
        raise ConfigError(f"`asd {args.command}` needs -c/--config")
    return with_overrides(cfg, seed=args.seed, fusion=args.fusion, threads=args.threads, out=args.out)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        cfg = _resolve_config(args)
        torch.set_num_threads(cfg.threads)
        summary = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to structured errors below
        kind = _classify(exc)
        if kind is None:
            raise
        code = EXIT_CODES[kind]
        print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
        return code
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
