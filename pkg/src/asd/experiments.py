"""Synthetic studies: training smoke run, audio-label ablation, fusion comparison.

Each function is deterministic in its seeds and returns plain dictionaries so
that the scripts in ``scripts/`` and the acceptance tests share one code path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticConfig, generate_synthetic
from .evaluation import FACE_COUNT_SUBSETS, FACE_SIZE_SUBSETS, breakdown
from .model import FUSION_MODES, ActiveSpeakerNet, ModelConfig, StreamNet
from .pipeline import multimodal_scores, predict_tracks, prepare
from .training import TrainConfig, calibrate_model, fit, multi_objective, stream_objective

log = logging.getLogger(__name__)


def _pct(x: float | None) -> float | None:
    return None if x is None else 100.0 * x


# ---------------------------------------------------------------------------
# training smoke run


SMOKE_DATA = SyntheticConfig(num_scenes=200, frames_per_scene=28, seed=0)
SMOKE_MODEL = ModelConfig(resolution=32)
SMOKE_TRAIN = TrainConfig(epochs=20, batch_size=16, learning_rate=0.015, seed=0)


def smoke_run(
    data: SyntheticConfig = SMOKE_DATA,
    model: ModelConfig = SMOKE_MODEL,
    train: TrainConfig = SMOKE_TRAIN,
    out_dir: str | Path | None = None,
) -> dict:
    """Train on every scene and report the loss trajectory plus a checkpoint digest."""
    start = time.perf_counter()
    scenes = generate_synthetic(data)
    prep = prepare(scenes, model.resolution, val_fraction=0.0, calibration_fraction=train.calibration_fraction, seed=train.seed)
    net = ActiveSpeakerNet(model, seed=train.seed)
    result = fit(net, prep.train_samples(train.sequence_length), train, prep.encoders, multi_objective, out_dir)
    digest = hashlib.sha256()
    for name, arr in net.store.state_arrays().items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return {
        "loss_history": [h.L_f for h in result.history],
        "first_L_f": result.history[0].L_f,
        "final_L_f": result.history[-1].L_f,
        "checkpoint_sha256": digest.hexdigest(),
        "num_sequences": len(prep.train_samples(train.sequence_length)),
        "runtime_s": time.perf_counter() - start,
    }


# ---------------------------------------------------------------------------
# audio stream trained on audio vs video labels


AUDIO_STUDY_DATA = SyntheticConfig(
    num_scenes=150,
    frames_per_scene=28,
    face_count_distribution=(1 / 3, 1 / 3, 1 / 3, 0.0, 0.0),
    timbre_leak=0.0,
)
AUDIO_STUDY_MODEL = ModelConfig(audio_channels=(8, 16, 32), embedding_dim=32, prefusion_dim=32)
AUDIO_STUDY_TRAIN = TrainConfig(epochs=8, batch_size=16, learning_rate=0.015)


def audio_label_study(
    seeds=(0, 1, 2),
    data: SyntheticConfig = AUDIO_STUDY_DATA,
    model: ModelConfig = AUDIO_STUDY_MODEL,
    train: TrainConfig = AUDIO_STUDY_TRAIN,
    val_fraction: float = 0.3,
) -> dict:
    """Per face-count mAP of an audio-only network trained towards each label type.

    Each network is scored against the labels it was trained on.
    """
    runs = {"audio": [], "video": []}
    for seed in seeds:
        scenes = generate_synthetic(dataclasses.replace(data, seed=seed))
        prep = prepare(scenes, 8, val_fraction, train.calibration_fraction, seed)
        samples = prep.train_samples(train.sequence_length)
        for target in ("audio", "video"):
            net = StreamNet(model, "audio", seed=seed)
            fit(net, samples, dataclasses.replace(train, seed=seed), None, stream_objective(target))
            records = predict_tracks(lambda b, n=net: n.forward(b)[..., 1], prep.val_tracks, None, train.sequence_length, label=target)
            rep = breakdown(records)
            runs[target].append({str(k): _pct(rep.by_face_count[str(k)].mAP) for k in FACE_COUNT_SUBSETS if str(k) in rep.by_face_count})
            log.info("seed %d target %s: %s", seed, target, runs[target][-1])
    median = {
        target: {str(k): statistics.median(r[str(k)] for r in runs[target]) for k in FACE_COUNT_SUBSETS}
        for target in runs
    }
    return {"runs": runs, "median": median}


# ---------------------------------------------------------------------------
# fusion comparison on ambiguous scenes


FUSION_STUDY_DATA = SyntheticConfig(
    num_scenes=160,
    frames_per_scene=28,
    face_count_distribution=(0.3, 0.2, 0.1, 0.1, 0.3),
    face_size_range=(2.0, 32.0),
    timbre_leak=0.0,
)
FUSION_STUDY_MODEL = ModelConfig(
    resolution=16,
    video_channels=(8, 16, 32),
    audio_channels=(8, 16, 32),
    embedding_dim=32,
    aux_hidden=32,
    prefusion_dim=32,
    postfusion_dim=24,
)
FUSION_STUDY_TRAIN = TrainConfig(epochs=20, batch_size=16, learning_rate=0.015)


@dataclass
class FusionRun:
    seed: int
    mode: str
    overall: float | None
    by_size: dict[str, float | None] = field(default_factory=dict)
    by_count: dict[str, float | None] = field(default_factory=dict)
    temperatures: tuple[float, float] = (1.0, 1.0)


def fusion_study(
    seeds=(0, 1, 2),
    modes=FUSION_MODES,
    data: SyntheticConfig = FUSION_STUDY_DATA,
    model: ModelConfig = FUSION_STUDY_MODEL,
    train: TrainConfig = FUSION_STUDY_TRAIN,
    val_fraction: float = 0.3,
    calibrate: bool = True,
) -> dict:
    """Train every fusion mode on the same data per seed; report mAP overall and by face size."""
    runs: list[FusionRun] = []
    for seed in seeds:
        scenes = generate_synthetic(dataclasses.replace(data, seed=seed))
        prep = prepare(scenes, model.resolution, val_fraction, train.calibration_fraction, seed)
        samples = prep.train_samples(train.sequence_length)
        for mode in modes:
            net = ActiveSpeakerNet(dataclasses.replace(model, fusion_mode=mode), seed=seed)
            fit(net, samples, dataclasses.replace(train, seed=seed), prep.encoders, multi_objective)
            if calibrate:
                calibrate_model(net, prep.calibration_samples(train.sequence_length), prep.encoders)
            records = predict_tracks(multimodal_scores(net), prep.val_tracks, prep.encoders, train.sequence_length)
            rep = breakdown(records)
            run = FusionRun(
                seed,
                mode,
                _pct(rep.mAP),
                {k: _pct(v.mAP) for k, v in rep.by_face_size.items()},
                {k: _pct(v.mAP) for k, v in rep.by_face_count.items()},
                (net.config.temperature_video, net.config.temperature_audio),
            )
            runs.append(run)
            log.info("seed %d %-12s mAP %.2f  by size %s", seed, mode, run.overall, run.by_size)
    median = {}
    for mode in modes:
        mine = [r for r in runs if r.mode == mode]
        median[mode] = {
            "overall": statistics.median(r.overall for r in mine),
            **{k: statistics.median(r.by_size[k] for r in mine) for k in FACE_SIZE_SUBSETS},
        }
    return {"runs": [dataclasses.asdict(r) for r in runs], "median": median}
