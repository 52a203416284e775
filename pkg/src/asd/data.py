"""Dataset model, audio-label aggregation, sequence windowing and a synthetic scene generator.

A *scene* is a run of frames showing a fixed set of faces that share one
audio track. A *track* is one face followed through its scene; the network
consumes fixed-length windows of tracks (:class:`MultimodalSample`).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import container

NUM_COEFFICIENTS = 13
AUDIO_FRAMES = 48
STACK_DEPTH = 3
DEFAULT_SEQUENCE_LENGTH = 28
CANONICAL_FACE = 8
MOUTH_ROWS = slice(5, 7)  # 2x2 mouth patch, a quarter of the face width
MOUTH_COLS = slice(3, 5)


def aggregate_audio_label(frame_video_labels: Iterable[int]) -> int:
    """Audio label of a frame: 0 iff no visible face is speaking."""
    total = 0
    for y in frame_video_labels:
        if y not in (0, 1):
            raise ValueError(f"video labels must be 0 or 1, got {y!r}")
        total += int(y)
    return 0 if total == 0 else 1


# ---------------------------------------------------------------------------
# records


@dataclass
class FaceObservation:
    track_id: str
    frame_index: int
    face_pixels: np.ndarray  # raw grayscale thumbnail in [0, 1]
    face_area: int
    video_label: int

    def __post_init__(self):
        if self.face_pixels.size == 0:
            raise ValueError("face_pixels must be nonempty")
        if self.face_area < 1:
            raise ValueError("face_area must be >= 1")
        if self.video_label not in (0, 1):
            raise ValueError("video_label must be 0 or 1")


@dataclass
class FrameRecord:
    frame_index: int
    faces: list[FaceObservation]
    audio_label: int

    @property
    def face_count(self) -> int:
        return len(self.faces)


@dataclass
class Scene:
    scene_id: str
    frames: list[FrameRecord]
    audio: np.ndarray  # (num_frames, 13, 48)

    def track_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for fr in self.frames:
            for face in fr.faces:
                seen.setdefault(face.track_id)
        return list(seen)


@dataclass
class Track:
    """One face through its scene, thumbnails already resized for the model."""

    track_id: str
    scene_id: str
    frame_indices: np.ndarray
    faces: np.ndarray  # (n, R, R) float32
    audio: np.ndarray  # (n, 13, 48) float32
    labels_video: np.ndarray
    labels_audio: np.ndarray
    face_count: np.ndarray
    face_area: np.ndarray
    face_index: int = 0

    def __len__(self) -> int:
        return len(self.frame_indices)


@dataclass
class MultimodalSample:
    """A window of ``T`` timesteps of one track.

    ``mask`` is False on left padding. ``owned`` marks the timesteps whose
    predictions this window contributes in eval mode.
    """

    track_id: str
    scene_id: str
    frame_indices: np.ndarray  # (T,), -1 on padding
    video: np.ndarray  # (T, 3, R, R)
    audio: np.ndarray  # (T, 13, 48)
    labels_video: np.ndarray
    labels_audio: np.ndarray
    face_count: np.ndarray
    face_area: np.ndarray
    mask: np.ndarray
    owned: np.ndarray
    face_index: int = 0

    def __len__(self) -> int:
        return len(self.frame_indices)


# ---------------------------------------------------------------------------
# windowing


def window_starts(n: int, length: int, eval_mode: bool) -> list[int]:
    """Start offsets of the windows cut from an ``n``-frame track."""
    if n <= length:
        return [0]
    stride = length if eval_mode else max(1, length // 2)
    starts = list(range(0, n - length + 1, stride))
    if starts[-1] + length < n:
        starts.append(n - length)
    return starts


def stack_indices(n: int) -> np.ndarray:
    """For each frame t, indices (t-2, t-1, t), replicating frame 0 at the start."""
    t = np.arange(n)[:, None]
    return np.clip(t + np.arange(-(STACK_DEPTH - 1), 1)[None, :], 0, None)


def build_sequences(track: Track, length: int = DEFAULT_SEQUENCE_LENGTH, eval_mode: bool = False) -> list[MultimodalSample]:
    n = len(track)
    if n < STACK_DEPTH:
        raise ValueError(f"track {track.track_id!r} has {n} frames; at least {STACK_DEPTH} are needed for frame stacks")
    if np.any(np.diff(track.frame_indices) != 1):
        raise ValueError(f"track {track.track_id!r} frames are not contiguous")
    stacks = track.faces[stack_indices(n)]  # (n, 3, R, R)
    starts = window_starts(n, length, eval_mode)
    samples = []
    for i, s in enumerate(starts):
        if n >= length:
            sl = slice(s, s + length)
            pad = 0
        else:
            sl = slice(0, n)
            pad = length - n

        def take(a: np.ndarray, fill=0) -> np.ndarray:
            part = a[sl]
            if pad:
                part = np.concatenate([np.full((pad,) + part.shape[1:], fill, dtype=part.dtype), part])
            return part

        mask = np.ones(length, dtype=bool)
        mask[:pad] = False
        owned = mask.copy()
        if eval_mode and i + 1 < len(starts):
            owned[starts[i + 1] - s :] = False
        samples.append(
            MultimodalSample(
                track_id=track.track_id,
                scene_id=track.scene_id,
                frame_indices=take(track.frame_indices, fill=-1),
                video=take(stacks),
                audio=take(track.audio),
                labels_video=take(track.labels_video),
                labels_audio=take(track.labels_audio),
                face_count=take(track.face_count, fill=1),
                face_area=take(track.face_area, fill=1),
                mask=mask,
                owned=owned,
                face_index=track.face_index,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticConfig:
    num_scenes: int = 200
    frames_per_scene: int = 28
    face_count_distribution: tuple[float, ...] = (0.4, 0.3, 0.2, 0.05, 0.05)
    face_size_range: tuple[float, float] = (4.0, 64.0)  # thumbnail side in pixels, log-uniform
    speech_persistence: float = 1.0 - 1.0 / 28.0  # stay-probability of the speaking state
    turn_taking: bool = True  # silent runs last (face count) times as long as speech runs
    video_noise_sigma: float = 0.1  # static per-face texture on the canonical face
    video_flicker_sigma: float = 0.1  # per-frame sensor noise at thumbnail size
    audio_noise_sigma: float = 0.5
    timbre_leak: float = 0.0
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.face_count_distribution, dtype=np.float64)
        if len(p) != 5 or np.any(p < 0) or np.any(p > 1) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("face_count_distribution must be 5 probabilities over {1..5} summing to 1")
        lo, hi = self.face_size_range
        if not (1 <= lo <= hi):
            raise ValueError("face_size_range must satisfy 1 <= min <= max")
        if not (0 <= self.speech_persistence < 1):
            raise ValueError("speech_persistence must be in [0, 1)")
        if not (0 <= self.timbre_leak <= 1):
            raise ValueError("timbre_leak must be in [0, 1]")
        if self.num_scenes < 1 or self.frames_per_scene < STACK_DEPTH:
            raise ValueError("need at least one scene and frames_per_scene >= 3")


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a square grayscale image (antialiased when shrinking)."""
    if img.shape == (size, size):
        return img.astype(np.float64, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))[None, None]
    shrink = size < max(img.shape)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=shrink)
    return out[0, 0].numpy()


def render_face(texture: np.ndarray, mouth_intensity: float, side: int, noise: np.ndarray) -> np.ndarray:
    """Paint the mouth on the canonical face, resample to ``side`` x ``side``, add pixel noise.

    The 2x2 mouth lives on the 8-pixel canonical grid, so below that side it
    is averaged into its surroundings and drowned by the noise.
    """
    canon = texture.copy()
    canon[MOUTH_ROWS, MOUTH_COLS] = mouth_intensity
    return np.clip(resize_image(canon, side) + noise, 0.0, 1.0)


def render_audio(
    speaking: np.ndarray,
    speech_signature: np.ndarray,
    face_signatures: np.ndarray,
    loudness: np.ndarray,
    timbre_leak: float,
    frame_noise: np.ndarray,
    column_jitter: np.ndarray,
) -> np.ndarray:
    """Audio features ``(F, 13, 48)`` for a ``(F, N)`` speaking-state matrix.

    Speech presence scales a shared signature; ``timbre_leak`` adds the
    signature of the loudest active speaker, the only cue to *who* speaks.
    """
    speaking = np.asarray(speaking, dtype=bool)
    anyone = speaking.any(axis=1).astype(np.float64)
    feats = anyone[:, None] * speech_signature[None, :] + frame_noise
    if timbre_leak > 0:
        masked = np.where(speaking, loudness[None, :], -np.inf)
        loudest = np.argmax(masked, axis=1)
        feats = feats + timbre_leak * anyone[:, None] * face_signatures[loudest]
    return feats[:, :, None] + column_jitter


def _markov_states(rng: np.random.Generator, frames: int, faces: int, stay_speak: float, stay_silent: float) -> np.ndarray:
    p_speak = (1 - stay_silent) / ((1 - stay_silent) + (1 - stay_speak))
    states = np.zeros((frames, faces), dtype=bool)
    states[0] = rng.random(faces) < p_speak
    u = rng.random((frames, faces))
    for t in range(1, frames):
        stay = np.where(states[t - 1], stay_speak, stay_silent)
        states[t] = np.where(u[t] < stay, states[t - 1], ~states[t - 1])
    return states


def speech_signature(seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x5EED]).normal(size=NUM_COEFFICIENTS)


def generate_scene(cfg: SyntheticConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    F_ = cfg.frames_per_scene
    n = int(rng.choice(np.arange(1, 6), p=np.asarray(cfg.face_count_distribution)))
    lo, hi = cfg.face_size_range
    sides = np.maximum(1, np.rint(np.exp(rng.uniform(math.log(lo), math.log(hi), size=n)))).astype(int)
    speech_run = 1.0 / (1.0 - cfg.speech_persistence)
    silence_run = speech_run * (n if cfg.turn_taking else 1)
    speaking = _markov_states(rng, F_, n, cfg.speech_persistence, 1.0 - 1.0 / silence_run)
    skin = rng.uniform(0.3, 0.7, size=n)
    textures = skin[:, None, None] + rng.normal(scale=cfg.video_noise_sigma, size=(n, CANONICAL_FACE, CANONICAL_FACE))
    omega = rng.uniform(0.9, 1.3, size=n)
    phase0 = rng.uniform(0, 2 * np.pi, size=n)
    face_sigs = rng.normal(size=(n, NUM_COEFFICIENTS))
    loudness = rng.uniform(0.5, 1.0, size=n)
    frame_noise = rng.normal(scale=cfg.audio_noise_sigma, size=(F_, NUM_COEFFICIENTS))
    jitter = rng.normal(scale=0.5 * cfg.audio_noise_sigma, size=(F_, NUM_COEFFICIENTS, AUDIO_FRAMES))
    audio = render_audio(speaking, speech_signature(cfg.seed), face_sigs, loudness, cfg.timbre_leak, frame_noise, jitter)

    # mouth phase only advances while the face speaks
    phase = phase0[None, :] + omega[None, :] * np.cumsum(speaking, axis=0)
    mouth = 0.5 + 0.4 * np.sin(phase)
    scene_id = f"s{index:04d}"
    frames = []
    for t in range(F_):
        faces = []
        for k in range(n):
            noise = rng.normal(scale=cfg.video_flicker_sigma, size=(sides[k], sides[k]))
            faces.append(
                FaceObservation(
                    track_id=f"{scene_id}_f{k}",
                    frame_index=t,
                    face_pixels=render_face(textures[k], mouth[t, k], int(sides[k]), noise),
                    face_area=int(sides[k] * sides[k]),
                    video_label=int(speaking[t, k]),
                )
            )
        frames.append(FrameRecord(t, faces, aggregate_audio_label(f.video_label for f in faces)))
    return Scene(scene_id, frames, audio)


def generate_synthetic(cfg: SyntheticConfig) -> list[Scene]:
    """Scenes are generated independently from ``(seed, scene index)``."""
    return [generate_scene(cfg, i) for i in range(cfg.num_scenes)]


def dataset_digest(scenes: Sequence[Scene]) -> str:
    h = hashlib.sha256()
    for sc in scenes:
        h.update(sc.scene_id.encode())
        h.update(np.ascontiguousarray(sc.audio, dtype="<f8").tobytes())
        for fr in sc.frames:
            h.update(f"{fr.frame_index}:{fr.audio_label}".encode())
            for f in fr.faces:
                h.update(f"{f.track_id}:{f.frame_index}:{f.face_area}:{f.video_label}".encode())
                h.update(np.ascontiguousarray(f.face_pixels, dtype="<f8").tobytes())
    return h.hexdigest()


def split_scenes(scenes: Sequence[Scene], fraction: float, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Deterministically move ``fraction`` of the scenes (at least one) into the second part."""
    if not scenes:
        return [], []
    order = np.random.default_rng([seed, 0x5B17]).permutation(len(scenes))
    k = min(len(scenes) - 1, max(1, int(round(fraction * len(scenes))))) if len(scenes) > 1 else 0
    held = set(order[:k].tolist())
    return [s for i, s in enumerate(scenes) if i not in held], [s for i, s in enumerate(scenes) if i in held]


def tracks_from_scenes(scenes: Sequence[Scene], resolution: int) -> list[Track]:
    tracks = []
    for sc in scenes:
        per_track: dict[str, list[tuple[FrameRecord, FaceObservation]]] = {}
        for fr in sc.frames:
            for face in fr.faces:
                per_track.setdefault(face.track_id, []).append((fr, face))
        for face_index, (tid, rows) in enumerate(per_track.items()):
            rows.sort(key=lambda r: r[1].frame_index)
            fidx = np.array([face.frame_index for _, face in rows])
            tracks.append(
                Track(
                    track_id=tid,
                    scene_id=sc.scene_id,
                    frame_indices=fidx,
                    faces=np.stack([resize_image(face.face_pixels, resolution) for _, face in rows]).astype(np.float32),
                    audio=sc.audio[fidx].astype(np.float32),
                    labels_video=np.array([face.video_label for _, face in rows], dtype=np.int64),
                    labels_audio=np.array([fr.audio_label for fr, _ in rows], dtype=np.int64),
                    face_count=np.array([fr.face_count for fr, _ in rows], dtype=np.int64),
                    face_area=np.array([face.face_area for _, face in rows], dtype=np.int64),
                    face_index=face_index,
                )
            )
    return tracks


def sequences_from_tracks(tracks: Iterable[Track], length: int = DEFAULT_SEQUENCE_LENGTH, eval_mode: bool = False) -> list[MultimodalSample]:
    return [s for tr in tracks if len(tr) >= STACK_DEPTH for s in build_sequences(tr, length, eval_mode)]


# ---------------------------------------------------------------------------
# on-disk format: JSON-lines manifest plus one tensor container per scene


def write_dataset(scenes: Sequence[Scene], out_dir: str | Path, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    lines = []
    for sc in scenes:
        rel = f"scenes/{sc.scene_id}.asdt"
        entries: dict[str, np.ndarray] = {}
        for fr in sc.frames:
            entries[f"audio/{fr.frame_index}"] = sc.audio[fr.frame_index]
            for face in fr.faces:
                key = f"face/{face.track_id}/{face.frame_index}"
                entries[key] = face.face_pixels
                lines.append(
                    json.dumps(
                        {
                            "track_id": face.track_id,
                            "frame_index": face.frame_index,
                            "face_file": f"{rel}#{key}",
                            "face_area": face.face_area,
                            "video_label": face.video_label,
                            "scene_id": sc.scene_id,
                            "audio_file": f"{rel}#audio/{fr.frame_index}",
                        },
                        sort_keys=True,
                    )
                )
        container.save(out / rel, entries)
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    if meta is not None:
        (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(manifest: str | Path) -> list[Scene]:
    """Rebuild scenes from a manifest; face count is the number of faces sharing (scene, frame)."""
    manifest = Path(manifest)
    root = manifest.parent
    cache: dict[str, dict[str, np.ndarray]] = {}

    def fetch(ref: str) -> np.ndarray:
        path, _, key = ref.partition("#")
        if path not in cache:
            cache[path] = container.load(root / path)
        try:
            return cache[path][key]
        except KeyError:
            raise KeyError(f"{ref!r}: entry not found in {path}") from None

    rows = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    by_scene: dict[str, dict[int, list[dict]]] = {}
    for r in rows:
        by_scene.setdefault(r.get("scene_id", r["track_id"]), {}).setdefault(int(r["frame_index"]), []).append(r)
    scenes = []
    for sid, frames in by_scene.items():
        indices = sorted(frames)
        records = []
        audio = np.zeros((max(indices) + 1, NUM_COEFFICIENTS, AUDIO_FRAMES))
        for fi in indices:
            faces = [
                FaceObservation(r["track_id"], fi, fetch(r["face_file"]), int(r["face_area"]), int(r["video_label"]))
                for r in frames[fi]
            ]
            audio[fi] = fetch(frames[fi][0]["audio_file"])
            records.append(FrameRecord(fi, faces, aggregate_audio_label(f.video_label for f in faces)))
        scenes.append(Scene(sid, records, audio))
    return scenes
