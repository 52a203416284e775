"""Two-stream audiovisual network with uncertainty-weighted fusion.

Dataflow per timestep::

    video stack -> conv encoder -> u_V -> aux head (y_V), BiGRU -> h_V
    audio MFCC  -> conv encoder -> u_A -> aux head (y_A), BiGRU -> h_A
    v = (enc_eta, enc_mu, delta_V, delta_A, a_V, a_A);  lambda = W v + b
    u_M = lambda_V h_V (+) lambda_A h_A -> BiGRU -> dense(2) -> softmax (y_M)

``fusion_mode`` swaps the last step for plain concatenation (``naive``) or a
sigmoid gate computed from the hidden states (``hierarchical``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Literal, Sequence

import numpy as np
import torch

from .data import AUDIO_FRAMES, NUM_COEFFICIENTS, STACK_DEPTH, MultimodalSample
from .features import AttributeEncoders
from .nnkernels import (
    DTYPE,
    GRUParams,
    ParameterStore,
    Tensor,
    bigru,
    conv2d,
    dense,
    glorot_uniform,
    init_gru,
    maxpool2,
    relu,
    softmax,
)

FusionMode = Literal["proposed", "naive", "hierarchical"]
FUSION_MODES = ("proposed", "naive", "hierarchical")
MASK_VALUE = -1e9
NUM_INDICATORS = 6


@dataclass(frozen=True)
class EncoderConfig:
    modality: Literal["video", "audio"]
    channels: tuple[int, ...]
    embedding_dim: int
    in_channels: int
    height: int
    width: int
    input_shift: float = 0.0  # subtracted before the first conv; centres [0,1] pixels

    def __post_init__(self):
        if not self.channels:
            raise ValueError("encoder needs at least one block")


@dataclass(frozen=True)
class ModelConfig:
    fusion_mode: FusionMode = "proposed"
    resolution: int = 64
    video_channels: tuple[int, ...] = (8, 16, 32, 64)
    audio_channels: tuple[int, ...] = (8, 16, 32)
    embedding_dim: int = 128
    aux_hidden: int = 128
    prefusion_dim: int = 128
    postfusion_dim: int = 100
    attention_window: int = 4
    temperature_video: float = 1.0
    temperature_audio: float = 1.0

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.prefusion_dim % 2 or self.postfusion_dim % 2:
            raise ValueError("BiGRU dimensions must be even (split across two directions)")
        if self.temperature_video <= 0 or self.temperature_audio <= 0:
            raise ValueError("temperatures must be > 0")
        if self.attention_window < 1:
            raise ValueError("attention_window must be >= 1")

    def encoder(self, modality: str) -> EncoderConfig:
        if modality == "video":
            return EncoderConfig("video", tuple(self.video_channels), self.embedding_dim, STACK_DEPTH, self.resolution, self.resolution, 0.5)
        if modality == "audio":
            return EncoderConfig("audio", tuple(self.audio_channels), self.embedding_dim, 1, NUM_COEFFICIENTS, AUDIO_FRAMES)
        raise ValueError(f"unknown modality {modality!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["video_channels"] = list(self.video_channels)
        d["audio_channels"] = list(self.audio_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("video_channels", "audio_channels"):
            if key in d:
                d[key] = tuple(int(c) for c in d[key])
        return cls(**d)

    def architecture_hash(self) -> str:
        """Hash of the fields that determine parameter shapes and dataflow."""
        d = self.to_dict()
        d.pop("temperature_video")
        d.pop("temperature_audio")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    video: Tensor  # (B, T, 3, R, R)
    audio: Tensor  # (B, T, 13, 48)
    enc_eta: Tensor  # (B, T)
    enc_mu: Tensor
    labels_video: Tensor
    labels_audio: Tensor
    mask: Tensor  # bool
    samples: list[MultimodalSample] = field(default_factory=list, repr=False)

    @property
    def size(self) -> int:
        return self.video.shape[0]


def collate(samples: Sequence[MultimodalSample], encoders: AttributeEncoders | None) -> Batch:
    eta = np.stack([s.face_count for s in samples])
    mu = np.stack([s.face_area for s in samples])
    if encoders is None:
        enc_eta = np.zeros(eta.shape)
        enc_mu = np.zeros(mu.shape)
    else:
        enc_eta, enc_mu = encoders.encode(eta, mu)

    def t(a) -> Tensor:
        return torch.from_numpy(np.asarray(a, dtype=np.float64))

    return Batch(
        video=t(np.stack([s.video for s in samples])),
        audio=t(np.stack([s.audio for s in samples])),
        enc_eta=t(enc_eta),
        enc_mu=t(enc_mu),
        labels_video=t(np.stack([s.labels_video for s in samples])),
        labels_audio=t(np.stack([s.labels_audio for s in samples])),
        mask=torch.from_numpy(np.stack([s.mask for s in samples])),
        samples=list(samples),
    )


# ---------------------------------------------------------------------------
# fusion primitives


def attention_bias(length: int, window: int = 4, key_mask: Tensor | None = None) -> Tensor:
    """Additive mask: 0 where ``i - window < j <= i``, ``MASK_VALUE`` elsewhere.

    With ``key_mask`` of shape ``(B, T)``, padded keys are blocked too, except
    on the diagonal so that no row is entirely blocked.
    """
    i = torch.arange(length)[:, None]
    j = torch.arange(length)[None, :]
    allowed = (j <= i) & (j > i - window)
    if key_mask is not None:
        allowed = allowed[None] & (key_mask[:, None, :].bool() | (i == j)[None])
    return torch.where(allowed, torch.zeros((), dtype=DTYPE), torch.full((), MASK_VALUE, dtype=DTYPE))


def attention_scores(H: Tensor, window: int = 4, key_mask: Tensor | None = None) -> Tensor:
    """Row-softmax of ``H H^T + B`` for ``H`` of shape ``(T, d)`` or ``(B, T, d)``."""
    logits = H @ H.transpose(-1, -2) + attention_bias(H.shape[-2], window, key_mask)
    return softmax(logits, dim=-1)


def self_attention_diag(H: Tensor, window: int = 4, key_mask: Tensor | None = None) -> Tensor:
    return torch.diagonal(attention_scores(H, window, key_mask), dim1=-2, dim2=-1)


def delta_from_probs(probs: Tensor) -> Tensor:
    """Confidence ``2 * (max p - 0.5)`` of already temperature-scaled probabilities."""
    return 2.0 * (probs.max(dim=-1).values - 0.5)


def delta_from_logits(logits: Tensor, temperature: float) -> Tensor:
    """Confidence of the temperature-scaled softmax; carries no gradient."""
    with torch.no_grad():
        return delta_from_probs(softmax(logits.detach(), temperature))


def compute_lambda(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine modality weight ``W v + b`` over the trailing indicator axis."""
    if v.shape[-1] != weight.shape[0]:
        raise ValueError(f"indicator vector has {v.shape[-1]} entries, weight expects {weight.shape[0]}")
    return v @ weight + bias


def _check_pair(h_v: Tensor, h_a: Tensor) -> None:
    if h_v.shape != h_a.shape:
        raise ValueError(f"hidden states differ in shape: {tuple(h_v.shape)} vs {tuple(h_a.shape)}")


def fuse_proposed(h_v: Tensor, h_a: Tensor, lam_v: Tensor, lam_a: Tensor) -> Tensor:
    _check_pair(h_v, h_a)
    return torch.cat([lam_v[..., None] * h_v, lam_a[..., None] * h_a], dim=-1)


def fuse_naive(h_v: Tensor, h_a: Tensor) -> Tensor:
    _check_pair(h_v, h_a)
    return torch.cat([h_v, h_a], dim=-1)


def fuse_hierarchical(h_v: Tensor, h_a: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Sigmoid gates from the concatenated states; returns ``(u_M, gate_V, gate_A)``."""
    _check_pair(h_v, h_a)
    gates = torch.sigmoid(dense(torch.cat([h_v, h_a], dim=-1), weight, bias))
    return fuse_proposed(h_v, h_a, gates[..., 0], gates[..., 1]), gates[..., 0], gates[..., 1]


@dataclass
class FusionState:
    h_video: Tensor
    h_audio: Tensor
    delta_video: Tensor
    delta_audio: Tensor
    attn_video: Tensor
    attn_audio: Tensor
    enc_eta: Tensor
    enc_mu: Tensor
    lambda_video: Tensor
    lambda_audio: Tensor
    fused: Tensor


@dataclass
class Outputs:
    """Two-class probabilities ``(B, T, 2)``; index 1 is 'speaking'."""

    multimodal: Tensor
    video: Tensor
    audio: Tensor
    logits_video: Tensor
    logits_audio: Tensor
    state: FusionState | None = None


# ---------------------------------------------------------------------------
# networks


class _EncoderMixin:
    store: ParameterStore

    def _add_encoder(self, rng: np.random.Generator, cfg: EncoderConfig) -> None:
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            self.store.add(f"{cfg.modality}.conv{i}.w", glorot_uniform(rng, (c, c_in, 3, 3), c_in * 9, c * 9))
            self.store.add(f"{cfg.modality}.conv{i}.b", torch.zeros(c, dtype=DTYPE))
            c_in = c
        self.store.add(f"{cfg.modality}.proj.w", glorot_uniform(rng, (cfg.embedding_dim, c_in), c_in, cfg.embedding_dim))
        self.store.add(f"{cfg.modality}.proj.b", torch.zeros(cfg.embedding_dim, dtype=DTYPE))

    def _add_gru(self, rng: np.random.Generator, prefix: str, n_in: int, hidden: int) -> None:
        for direction in ("fwd", "bwd"):
            g = init_gru(rng, n_in, hidden // 2)
            self.store.add(f"{prefix}.{direction}.W", g.W)
            self.store.add(f"{prefix}.{direction}.U", g.U)
            self.store.add(f"{prefix}.{direction}.b", g.b)

    def _gru(self, prefix: str, direction: str) -> GRUParams:
        s = self.store
        return GRUParams(s[f"{prefix}.{direction}.W"], s[f"{prefix}.{direction}.U"], s[f"{prefix}.{direction}.b"])

    def run_bigru(self, prefix: str, seq: Tensor) -> Tensor:
        return bigru(seq, self._gru(prefix, "fwd"), self._gru(prefix, "bwd"))

    def embed(self, x: Tensor, cfg: EncoderConfig) -> Tensor:
        """Per-timestep conv encoder: ``(B, T, C, H, W)`` or ``(B, T, H, W)`` -> ``(B, T, emb)``."""
        if x.dim() == 4 and cfg.in_channels == 1:
            x = x.unsqueeze(2)
        if x.dim() != 5 or tuple(x.shape[2:]) != (cfg.in_channels, cfg.height, cfg.width):
            raise ValueError(
                f"{cfg.modality} input {tuple(x.shape)} does not match geometry "
                f"{(cfg.in_channels, cfg.height, cfg.width)}"
            )
        B, T = x.shape[:2]
        z = x.reshape(B * T, *x.shape[2:]) - cfg.input_shift
        for i in range(len(cfg.channels)):
            z = maxpool2(relu(conv2d(z, self.store[f"{cfg.modality}.conv{i}.w"], self.store[f"{cfg.modality}.conv{i}.b"])))
        z = z.mean(dim=(2, 3))
        u = dense(z, self.store[f"{cfg.modality}.proj.w"], self.store[f"{cfg.modality}.proj.b"])
        return u.reshape(B, T, -1)


class ActiveSpeakerNet(_EncoderMixin):
    """Full multi-objective network; parameters live in ``self.store``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        for modality in ("video", "audio"):
            self._add_encoder(rng, c.encoder(modality))
            self.store.add(f"{modality}.aux.fc1.w", glorot_uniform(rng, (c.aux_hidden, c.embedding_dim), c.embedding_dim, c.aux_hidden))
            self.store.add(f"{modality}.aux.fc1.b", torch.zeros(c.aux_hidden, dtype=DTYPE))
            self.store.add(f"{modality}.aux.fc2.w", glorot_uniform(rng, (2, c.aux_hidden), c.aux_hidden, 2))
            self.store.add(f"{modality}.aux.fc2.b", torch.zeros(2, dtype=DTYPE))
            self._add_gru(rng, f"{modality}.gru", c.embedding_dim, c.prefusion_dim)
        self._add_gru(rng, "post.gru", 2 * c.prefusion_dim, c.postfusion_dim)
        self.store.add("head.w", glorot_uniform(rng, (2, c.postfusion_dim), c.postfusion_dim, 2))
        self.store.add("head.b", torch.zeros(2, dtype=DTYPE))
        if c.fusion_mode == "proposed":
            for modality in ("video", "audio"):
                self.store.add(f"fusion.{modality}.w", glorot_uniform(rng, (NUM_INDICATORS,), NUM_INDICATORS, 1))
                self.store.add(f"fusion.{modality}.b", torch.zeros((), dtype=DTYPE))
        elif c.fusion_mode == "hierarchical":
            n = 2 * c.prefusion_dim
            self.store.add("fusion.gate.w", glorot_uniform(rng, (2, n), n, 2))
            self.store.add("fusion.gate.b", torch.zeros(2, dtype=DTYPE))

    def aux_logits(self, u: Tensor, modality: str) -> Tensor:
        s = self.store
        hidden = relu(dense(u, s[f"{modality}.aux.fc1.w"], s[f"{modality}.aux.fc1.b"]))
        return dense(hidden, s[f"{modality}.aux.fc2.w"], s[f"{modality}.aux.fc2.b"])

    def forward(self, batch: Batch, deltas: tuple[Tensor, Tensor] | None = None, return_state: bool = False) -> Outputs:
        """Run the network. ``deltas`` pins the confidence indicators (used by gradient checks)."""
        c = self.config
        u_v = self.embed(batch.video, c.encoder("video"))
        u_a = self.embed(batch.audio, c.encoder("audio"))
        logits_v = self.aux_logits(u_v, "video")
        logits_a = self.aux_logits(u_a, "audio")
        h_v = self.run_bigru("video.gru", u_v)
        h_a = self.run_bigru("audio.gru", u_a)

        if deltas is None:
            d_v = delta_from_logits(logits_v, c.temperature_video)
            d_a = delta_from_logits(logits_a, c.temperature_audio)
        else:
            d_v, d_a = (d.detach() for d in deltas)
        a_v = a_a = lam_v = lam_a = None
        if c.fusion_mode == "proposed":
            a_v = self_attention_diag(h_v, c.attention_window, batch.mask)
            a_a = self_attention_diag(h_a, c.attention_window, batch.mask)
            v = torch.stack([batch.enc_eta, batch.enc_mu, d_v, d_a, a_v, a_a], dim=-1)
            lam_v = compute_lambda(v, self.store["fusion.video.w"], self.store["fusion.video.b"])
            lam_a = compute_lambda(v, self.store["fusion.audio.w"], self.store["fusion.audio.b"])
            fused = fuse_proposed(h_v, h_a, lam_v, lam_a)
        elif c.fusion_mode == "naive":
            fused = fuse_naive(h_v, h_a)
        else:
            fused, lam_v, lam_a = fuse_hierarchical(h_v, h_a, self.store["fusion.gate.w"], self.store["fusion.gate.b"])

        post = self.run_bigru("post.gru", fused)
        p_m = softmax(dense(post, self.store["head.w"], self.store["head.b"]))
        out = Outputs(p_m, softmax(logits_v), softmax(logits_a), logits_v, logits_a)
        if return_state:
            ones = torch.ones_like(d_v)
            out.state = FusionState(
                h_v, h_a, d_v, d_a,
                a_v if a_v is not None else self_attention_diag(h_v, c.attention_window, batch.mask),
                a_a if a_a is not None else self_attention_diag(h_a, c.attention_window, batch.mask),
                batch.enc_eta, batch.enc_mu,
                lam_v if lam_v is not None else ones,
                lam_a if lam_a is not None else ones,
                fused,
            )
        return out


class StreamNet(_EncoderMixin):
    """Single-modality embedding network with a BiGRU and a 2-way head.

    Used to study one stream on its own, e.g. audio trained towards audio
    versus video labels.
    """

    def __init__(self, config: ModelConfig, modality: Literal["video", "audio"], seed: int = 0):
        self.config = config
        self.modality = modality
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        self._add_encoder(rng, config.encoder(modality))
        self._add_gru(rng, "stream.gru", config.embedding_dim, config.prefusion_dim)
        self.store.add("stream.head.w", glorot_uniform(rng, (2, config.prefusion_dim), config.prefusion_dim, 2))
        self.store.add("stream.head.b", torch.zeros(2, dtype=DTYPE))

    def forward(self, batch: Batch) -> Tensor:
        x = batch.video if self.modality == "video" else batch.audio
        h = self.run_bigru("stream.gru", self.embed(x, self.config.encoder(self.modality)))
        return softmax(dense(h, self.store["stream.head.w"], self.store["stream.head.b"]))
