"""Glue between scenes, splits, encoders, training and per-frame predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Scene, Track, sequences_from_tracks, split_scenes, tracks_from_scenes
from .evaluation import PredictionRecord
from .features import AttributeEncoders, fit_attribute_encoders
from .model import Batch, collate
from .training import batches


@dataclass
class Splits:
    train: list[Scene]
    calibration: list[Scene]
    val: list[Scene]


def make_splits(scenes: Sequence[Scene], val_fraction: float, calibration_fraction: float, seed: int) -> Splits:
    """Scene-level split: validation first, then a calibration hold-out from the rest."""
    rest, val = split_scenes(scenes, val_fraction, seed)
    train, calib = split_scenes(rest, calibration_fraction, seed + 1)
    return Splits(train, calib, val)


def fit_encoders(tracks: Sequence[Track], smoothing: float = 100.0) -> AttributeEncoders:
    eta = np.concatenate([t.face_count for t in tracks])
    mu = np.concatenate([t.face_area for t in tracks])
    yv = np.concatenate([t.labels_video for t in tracks])
    return fit_attribute_encoders(eta, mu, yv, smoothing)


ScoreFn = Callable[[Batch], torch.Tensor]


def predict_tracks(
    score_fn: ScoreFn,
    tracks: Sequence[Track],
    encoders: AttributeEncoders | None,
    length: int = 28,
    batch_size: int = 16,
    label: str = "video",
) -> list[PredictionRecord]:
    """One record per (track, frame) from eval-mode windows.

    ``score_fn`` maps a batch to speaking probabilities ``(B, T)``; ``label``
    picks which ground truth goes into the records.
    """
    samples = sequences_from_tracks(tracks, length, eval_mode=True)
    records: list[PredictionRecord] = []
    with torch.no_grad():
        for group in batches(samples, batch_size, None):
            scores = score_fn(collate(group, encoders)).numpy()
            for s, row in zip(group, scores):
                labels = s.labels_video if label == "video" else s.labels_audio
                for t in np.flatnonzero(s.owned):
                    records.append(
                        PredictionRecord(
                            s.track_id, int(s.frame_indices[t]), s.face_index, float(row[t]),
                            int(labels[t]), int(s.face_count[t]), int(s.face_area[t]),
                        )
                    )
    records.sort(key=lambda r: (r.track_id, r.frame_index))
    return records


def multimodal_scores(net) -> ScoreFn:
    return lambda batch: net.forward(batch).multimodal[..., 1]


@dataclass
class PreparedData:
    splits: Splits
    train_tracks: list[Track]
    calibration_tracks: list[Track]
    val_tracks: list[Track]
    encoders: AttributeEncoders

    def train_samples(self, length: int = 28):
        return sequences_from_tracks(self.train_tracks, length, eval_mode=False)

    def calibration_samples(self, length: int = 28):
        return sequences_from_tracks(self.calibration_tracks, length, eval_mode=True)


def prepare(
    scenes: Sequence[Scene],
    resolution: int,
    val_fraction: float,
    calibration_fraction: float,
    seed: int,
    smoothing: float = 100.0,
) -> PreparedData:
    splits = make_splits(scenes, val_fraction, calibration_fraction, seed)
    train = tracks_from_scenes(splits.train, resolution)
    return PreparedData(
        splits,
        train,
        tracks_from_scenes(splits.calibration, resolution),
        tracks_from_scenes(splits.val, resolution),
        fit_encoders(train, smoothing),
    )
