"""Audio MFCC front-end and the face-count / face-size attribute encoders."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.fft import dct


AttributeKind = Literal["face_count", "face_size"]

FACE_COUNT_BOUNDARIES = (1.5, 2.5, 3.5, 4.5)  # bins {1},{2},{3},{4},{>=5}
FACE_SIZE_BINS = 8


# ---------------------------------------------------------------------------
# MFCC


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    window: float = 0.025
    step: float = 0.010
    num_coefficients: int = 13
    num_mel_filters: int = 26
    fft_size: int = 512
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    context: float = 0.5  # seconds of audio preceding each video frame

    def __post_init__(self):
        if not (self.window >= self.step > 0):
            raise ValueError("MFCC config needs window >= step > 0")
        if self.num_coefficients > self.num_mel_filters:
            raise ValueError("num_coefficients cannot exceed num_mel_filters")
        if self.fft_size < self.win_length:
            raise ValueError(f"fft_size {self.fft_size} shorter than the {self.win_length}-sample window")

    @property
    def win_length(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def step_length(self) -> int:
        return int(round(self.step * self.sample_rate))

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.win_length) // self.step_length + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular HTK-mel filters over 0..Nyquist, shape ``(num_mel_filters, fft_size//2 + 1)``."""
    n_bins = cfg.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.num_mel_filters + 2))
    bank = np.zeros((cfg.num_mel_filters, n_bins))
    for i in range(cfg.num_mel_filters):
        lo, mid, hi = edges[i : i + 3]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def _frames(waveform: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be one-dimensional")
    if len(x) < cfg.win_length:
        raise ValueError(f"waveform has {len(x)} samples, shorter than one {cfg.win_length}-sample window")
    emphasized = np.append(x[:1], x[1:] - cfg.pre_emphasis * x[:-1])
    n = cfg.num_frames(len(x))
    idx = np.arange(cfg.win_length)[None, :] + cfg.step_length * np.arange(n)[:, None]
    return emphasized[idx] * np.hamming(cfg.win_length)


def log_mel_energies(waveform: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Log mel filterbank energies before the DCT, shape ``(num_frames, num_mel_filters)``."""
    spectrum = np.abs(np.fft.rfft(_frames(waveform, cfg), n=cfg.fft_size, axis=1))
    energies = spectrum @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def compute_mfcc(waveform: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCC matrix of shape ``(num_frames, num_coefficients)``."""
    logmel = log_mel_energies(waveform, cfg)
    return dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.num_coefficients]


def audio_context_features(waveform: np.ndarray, end_sample: int, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCCs of the ``cfg.context`` seconds ending at ``end_sample``, as ``(coefficients, frames)``.

    Missing history at the start of a recording is zero-filled.
    """
    span = int(round(cfg.context * cfg.sample_rate))
    x = np.asarray(waveform, dtype=np.float64)[max(0, end_sample - span) : end_sample]
    if len(x) < span:
        x = np.concatenate([np.zeros(span - len(x)), x])
    return compute_mfcc(x, cfg).T


# ---------------------------------------------------------------------------
# binning and target encoding


@dataclass(frozen=True)
class BinningSpec:
    attribute: AttributeKind
    boundaries: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if len(b) > 1 and not np.all(np.diff(b) > 0):
            raise ValueError("bin boundaries must be strictly ascending")

    @property
    def num_bins(self) -> int:
        return len(self.boundaries) + 1

    def bin_index(self, values) -> np.ndarray:
        """Interval ``i`` is ``[b_{i-1}, b_i)``; the outer two are open-ended."""
        return np.searchsorted(np.asarray(self.boundaries, dtype=np.float64), np.asarray(values, dtype=np.float64), side="right")


def fit_bins(values: Sequence[float], attribute: AttributeKind) -> BinningSpec:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit bins on an empty training set")
    if attribute == "face_count":
        return BinningSpec("face_count", FACE_COUNT_BOUNDARIES)
    if attribute != "face_size":
        raise ValueError(f"unknown attribute kind {attribute!r}")
    cuts = np.quantile(values, np.arange(1, FACE_SIZE_BINS) / FACE_SIZE_BINS)
    merged = np.unique(cuts)
    if len(merged) < len(cuts):
        warnings.warn(
            f"face_size: {len(cuts) - len(merged)} duplicate octile boundaries merged "
            f"({len(merged) + 1} effective bins)",
            stacklevel=2,
        )
    if len(np.unique(values)) == 1:
        merged = merged[:0]
    return BinningSpec("face_size", tuple(float(c) for c in merged))


@dataclass(frozen=True)
class TargetEncoder:
    spec: BinningSpec
    counts: tuple[int, ...]
    means: tuple[float, ...]
    prior: float
    smoothing: float = 100.0

    @property
    def encodings(self) -> np.ndarray:
        n = np.asarray(self.counts, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        enc = np.full(len(n), self.prior)
        seen = n > 0
        enc[seen] = (n[seen] * m[seen] + self.smoothing * self.prior) / (n[seen] + self.smoothing)
        return enc

    def encode(self, values) -> np.ndarray:
        return self.encodings[self.spec.bin_index(values)]

    def to_dict(self) -> dict:
        return {
            "attribute": self.spec.attribute,
            "boundaries": list(self.spec.boundaries),
            "n_b": list(self.counts),
            "m_b": list(self.means),
            "p": self.prior,
            "k": self.smoothing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetEncoder":
        return cls(
            spec=BinningSpec(d["attribute"], tuple(float(b) for b in d["boundaries"])),
            counts=tuple(int(n) for n in d["n_b"]),
            means=tuple(float(m) for m in d["m_b"]),
            prior=float(d["p"]),
            smoothing=float(d["k"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TargetEncoder":
        return cls.from_dict(json.loads(text))


def fit_target_encoder(spec: BinningSpec, values: Iterable[float], labels: Iterable[int], smoothing: float = 100.0) -> TargetEncoder:
    """Per-bin blend ``(n_b*m_b + k*p) / (n_b + k)`` of bin mean and global prior."""
    values = np.asarray(list(values), dtype=np.float64)
    labels = np.asarray(list(labels), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit a target encoder on an empty training set")
    if values.shape != labels.shape:
        raise ValueError("values and labels must have the same length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if smoothing < 0:
        raise ValueError("smoothing weight must be >= 0")
    prior = float(labels.mean())
    bins = spec.bin_index(values)
    counts = np.bincount(bins, minlength=spec.num_bins)
    sums = np.bincount(bins, weights=labels, minlength=spec.num_bins)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), prior)
    return TargetEncoder(spec, tuple(int(c) for c in counts), tuple(float(m) for m in means), prior, float(smoothing))


def encode_attribute(encoder: TargetEncoder, value) -> float:
    return float(encoder.encode(value))


@dataclass
class AttributeEncoders:
    """The fitted face-count and face-size encoders used together by the model."""

    face_count: TargetEncoder
    face_size: TargetEncoder
    meta: dict = field(default_factory=dict)

    def encode(self, eta, mu) -> tuple[np.ndarray, np.ndarray]:
        return self.face_count.encode(eta), self.face_size.encode(mu)

    def to_json(self) -> str:
        return json.dumps({"face_count": self.face_count.to_dict(), "face_size": self.face_size.to_dict()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AttributeEncoders":
        d = json.loads(text)
        return cls(TargetEncoder.from_dict(d["face_count"]), TargetEncoder.from_dict(d["face_size"]))


def fit_attribute_encoders(face_counts, face_areas, video_labels, smoothing: float = 100.0) -> AttributeEncoders:
    """Fit both encoders against the video label."""
    face_counts = np.asarray(face_counts)
    face_areas = np.asarray(face_areas)
    eta = fit_target_encoder(fit_bins(face_counts, "face_count"), face_counts, video_labels, smoothing)
    mu = fit_target_encoder(fit_bins(face_areas, "face_size"), face_areas, video_labels, smoothing)
    return AttributeEncoders(eta, mu)
