"""Central-difference checks for every differentiable operation and the tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import AUDIO_FRAMES, NUM_COEFFICIENTS, STACK_DEPTH
from .model import (
    FUSION_MODES,
    ActiveSpeakerNet,
    Batch,
    ModelConfig,
    compute_lambda,
    fuse_hierarchical,
    fuse_proposed,
    self_attention_diag,
)
from .nnkernels import (
    DTYPE,
    GradCheckReport,
    bigru,
    check_gradients,
    conv2d,
    cross_entropy,
    dense,
    gru,
    init_gru,
    maxpool2,
    relu,
    softmax,
)
from .training import multi_objective_loss


def tiny_config(fusion_mode: str = "proposed") -> ModelConfig:
    return ModelConfig(
        fusion_mode=fusion_mode,
        resolution=8,
        video_channels=(2,),
        audio_channels=(2,),
        embedding_dim=4,
        aux_hidden=4,
        prefusion_dim=6,
        postfusion_dim=6,
    )


def tiny_batch(config: ModelConfig, seed: int = 0, batch: int = 2, length: int = 5) -> Batch:
    """Random inputs with one left-padded sequence so masking is exercised."""
    rng = np.random.default_rng(seed)
    R = config.resolution
    mask = np.ones((batch, length), dtype=bool)
    mask[-1, :2] = False
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))  # noqa: E731
    return Batch(
        video=t(rng.uniform(size=(batch, length, STACK_DEPTH, R, R))),
        audio=t(rng.normal(size=(batch, length, NUM_COEFFICIENTS, AUDIO_FRAMES))),
        enc_eta=t(rng.uniform(0.1, 0.6, size=(batch, length))),
        enc_mu=t(rng.uniform(0.1, 0.6, size=(batch, length))),
        labels_video=t(rng.integers(0, 2, size=(batch, length))),
        labels_audio=t(rng.integers(0, 2, size=(batch, length))),
        mask=torch.from_numpy(mask),
        samples=[],
    )


def pinned_deltas(batch: Batch, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Fixed confidence indicators: the delta path carries no gradient by design."""
    rng = np.random.default_rng([seed, 7])
    shape = tuple(batch.mask.shape)
    return (torch.from_numpy(rng.uniform(size=shape)), torch.from_numpy(rng.uniform(size=shape)))


def model_check(fusion_mode: str, seed: int = 0, max_entries: int | None = 24) -> GradCheckReport:
    cfg = tiny_config(fusion_mode)
    net = ActiveSpeakerNet(cfg, seed=seed)
    if fusion_mode == "proposed":
        # zero-initialised biases leave lambda small; lift it so both streams carry real gradient
        rng = np.random.default_rng([seed, 11])
        for m in ("video", "audio"):
            net.store[f"fusion.{m}.b"].data.fill_(float(rng.uniform(0.5, 1.5)))
    batch = tiny_batch(cfg, seed)
    deltas = pinned_deltas(batch, seed)

    def loss():
        out = net.forward(batch, deltas=deltas)
        return multi_objective_loss(
            out.multimodal[..., 1], out.video[..., 1], out.audio[..., 1],
            batch.labels_video, batch.labels_audio, batch.mask,
        ).L_f

    return check_gradients(loss, net.store.params, max_entries=max_entries, seed=seed)


def _param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.tensor(rng.normal(scale=scale, size=shape), dtype=DTYPE, requires_grad=True)


def operation_checks(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    r: dict[str, GradCheckReport] = {}

    x, W, b = _param(rng, 3, 5), _param(rng, 4, 5), _param(rng, 4)
    r["dense"] = check_gradients(lambda: (dense(x, W, b) ** 2).sum(), {"x": x, "W": W, "b": b})

    img, k, kb = _param(rng, 2, 6, 6), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    r["conv2d"] = check_gradients(lambda: (conv2d(img, k, kb) ** 2).sum(), {"x": img, "k": k, "b": kb})

    # values kept away from zero so the finite step never crosses the kink
    z = torch.tensor(rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 1.0, size=(4, 5)), requires_grad=True)
    r["relu"] = check_gradients(lambda: (relu(z) ** 2).sum(), {"x": z})

    m = torch.tensor(rng.permutation(50).reshape(2, 5, 5) / 10.0, requires_grad=True)  # distinct values, no ties
    r["maxpool2"] = check_gradients(lambda: (maxpool2(m) ** 2).sum(), {"x": m})

    lg = _param(rng, 4, 3)
    wt = torch.tensor(rng.normal(size=(4, 3)))
    r["softmax"] = check_gradients(lambda: (softmax(lg, temperature=1.7) * wt).sum(), {"logits": lg})

    logit = _param(rng, 6)
    y = torch.tensor(rng.integers(0, 2, size=6), dtype=DTYPE)
    mk = torch.tensor([True, True, False, True, True, True])
    r["cross_entropy"] = check_gradients(lambda: cross_entropy(y, torch.sigmoid(logit), mk), {"logit": logit})

    seq = _param(rng, 2, 4, 3)
    g = init_gru(rng, 3, 5)
    gp = {"seq": seq, "W": g.W.requires_grad_(), "U": g.U.requires_grad_(), "b": g.b.requires_grad_()}
    wt_g = torch.tensor(rng.normal(size=(2, 4, 5)))
    r["gru"] = check_gradients(lambda: (gru(seq, g) * wt_g).sum(), gp)

    fwd, bwd = init_gru(rng, 3, 2), init_gru(rng, 3, 3)
    bp = {"seq": seq, **{f"fwd.{n}": getattr(fwd, n).requires_grad_() for n in "WUb"}, **{f"bwd.{n}": getattr(bwd, n).requires_grad_() for n in "WUb"}}
    wt_b = torch.tensor(rng.normal(size=(2, 4, 5)))
    r["bigru"] = check_gradients(lambda: (bigru(seq, fwd, bwd) * wt_b).sum(), bp)

    h = _param(rng, 2, 7, 4, scale=0.5)
    amask = torch.ones(2, 7, dtype=torch.bool)
    amask[1, :2] = False
    wt_a = torch.tensor(rng.normal(size=(2, 7)))
    r["self_attention"] = check_gradients(lambda: (self_attention_diag(h, 4, amask) * wt_a).sum(), {"h": h})

    v, lw, lb = _param(rng, 2, 5, 6), _param(rng, 6), _param(rng)
    r["lambda"] = check_gradients(lambda: (compute_lambda(v, lw, lb) ** 2).sum(), {"v": v, "w": lw, "b": lb})

    hv, ha = _param(rng, 2, 5, 3), _param(rng, 2, 5, 3)
    lv, la = _param(rng, 2, 5), _param(rng, 2, 5)
    wt_f = torch.tensor(rng.normal(size=(2, 5, 6)))
    r["fuse_proposed"] = check_gradients(
        lambda: (fuse_proposed(hv, ha, lv, la) * wt_f).sum(), {"h_v": hv, "h_a": ha, "lam_v": lv, "lam_a": la}
    )
    gw, gb = _param(rng, 2, 6), _param(rng, 2)
    r["fuse_hierarchical"] = check_gradients(
        lambda: (fuse_hierarchical(hv, ha, gw, gb)[0] * wt_f).sum(), {"h_v": hv, "h_a": ha, "W": gw, "b": gb}
    )
    return r


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport] = field(default_factory=dict)
    runtime_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.reports.values()), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "runtime_s": self.runtime_s,
            "checks": {
                name: {
                    "passed": r.passed,
                    "checked": r.checked,
                    "max_rel_error": r.max_rel_error,
                    "max_abs_error": r.max_abs_error,
                    "tolerance": r.tolerance,
                    "failures": r.failures[:10],
                }
                for name, r in self.reports.items()
            },
        }


def gradient_suite(seed: int = 0, modes=FUSION_MODES, max_entries: int | None = 24) -> SuiteResult:
    start = time.perf_counter()
    reports = operation_checks(seed)
    for mode in modes:
        reports[f"model[{mode}]"] = model_check(mode, seed, max_entries)
    return SuiteResult(reports, time.perf_counter() - start)
