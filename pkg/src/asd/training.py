"""Multi-objective training loop, checkpoints and post-hoc temperature calibration."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from . import container
from .data import MultimodalSample
from .features import AttributeEncoders
from .model import ActiveSpeakerNet, Batch, ModelConfig, StreamNet, collate
from .nnkernels import AdagradConfig, ParameterStore, Tensor, adagrad_step, cross_entropy

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L_M", "L_V", "L_A", "L_f", "wall_time_s")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.015
    seed: int = 0
    calibration_fraction: float = 0.1
    sequence_length: int = 28
    smoothing: float = 100.0
    keep_last: int = 2
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.calibration_fraction < 0.5):
            raise ValueError("calibration_fraction must lie in (0, 0.5)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class LossBreakdown:
    L_M: Tensor
    L_V: Tensor
    L_A: Tensor
    L_f: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_M": self.L_M.item(), "L_V": self.L_V.item(), "L_A": self.L_A.item(), "L_f": self.L_f.item()}


def multi_objective_loss(p_m: Tensor, p_v: Tensor, p_a: Tensor, y_v: Tensor, y_a: Tensor, mask: Tensor) -> LossBreakdown:
    """Sum of three cross-entropies over unmasked timesteps.

    ``p_*`` are speaking-class probabilities. The multimodal and video terms
    use the video labels, the audio term the frame-level audio labels.
    """
    if not bool(mask.any()):
        raise ValueError("multi_objective_loss: batch has no unmasked timesteps")
    l_m = cross_entropy(y_v, p_m, mask)
    l_v = cross_entropy(y_v, p_v, mask)
    l_a = cross_entropy(y_a, p_a, mask)
    return LossBreakdown(l_m, l_v, l_a, l_m + l_v + l_a)


Objective = Callable[[object, Batch], tuple[Tensor, dict[str, float]]]


def multi_objective(net: ActiveSpeakerNet, batch: Batch) -> tuple[Tensor, dict[str, float]]:
    out = net.forward(batch)
    lb = multi_objective_loss(out.multimodal[..., 1], out.video[..., 1], out.audio[..., 1], batch.labels_video, batch.labels_audio, batch.mask)
    return lb.L_f, lb.as_floats()


def stream_objective(target: Literal["video", "audio"]) -> Objective:
    """Single cross-entropy for a :class:`StreamNet` towards one label type."""

    def objective(net: StreamNet, batch: Batch) -> tuple[Tensor, dict[str, float]]:
        y = batch.labels_video if target == "video" else batch.labels_audio
        loss = cross_entropy(y, net.forward(batch)[..., 1], batch.mask)
        return loss, {"L_M": 0.0, "L_V": 0.0, "L_A": 0.0, "L_f": loss.item()}

    return objective


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_arrays(store: ParameterStore, epoch: int) -> dict[str, np.ndarray]:
    arrays = store.state_arrays()
    arrays["meta/epoch"] = np.asarray(float(epoch))
    return arrays


def save_checkpoint(path: str | Path, store: ParameterStore, epoch: int) -> Path:
    path = Path(path)
    container.save(path, checkpoint_arrays(store, epoch))
    return path


def load_checkpoint(path: str | Path, store: ParameterStore) -> int:
    arrays = container.load(path)
    epoch = int(arrays.pop("meta/epoch", np.asarray(0.0)))
    store.load_arrays(arrays)
    return epoch


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    found = sorted(Path(run_dir).glob("checkpoint_epoch*.asdt"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    L_M: float
    L_V: float
    L_A: float
    L_f: float
    wall_time_s: float


@dataclass
class TrainResult:
    net: object
    history: list[EpochLog] = field(default_factory=list)
    checkpoint: Path | None = None


def batches(samples: Sequence[MultimodalSample], batch_size: int, rng: np.random.Generator | None) -> list[list[MultimodalSample]]:
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    return [[samples[i] for i in order[k : k + batch_size]] for k in range(0, len(order), batch_size)]


def fit(
    net,
    samples: Sequence[MultimodalSample],
    config: TrainConfig,
    encoders: AttributeEncoders | None,
    objective: Objective = multi_objective,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Adagrad over seeded per-epoch shuffles; one update per mini-batch."""
    if not samples:
        raise ValueError("training set yields no batches")
    opt = AdagradConfig(learning_rate=config.learning_rate)
    result = TrainResult(net)
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics_header(run_dir / "metrics.csv")
    params = net.store.params
    names = list(params)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        sums = dict.fromkeys(("L_M", "L_V", "L_A", "L_f"), 0.0)
        groups = batches(samples, config.batch_size, np.random.default_rng([config.seed, epoch]))
        for group in groups:
            batch = collate(group, encoders)
            loss, parts = objective(net, batch)
            value = loss.item()
            if not math.isfinite(value) or abs(value) > config.divergence_threshold:
                last = latest_checkpoint(run_dir) if run_dir is not None else None
                raise TrainingDiverged(f"loss {value!r} at epoch {epoch}; last good checkpoint: {last}", last)
            grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
            adagrad_step(net.store, dict(zip(names, grads)), opt)
            for k in sums:
                sums[k] += parts[k]
        entry = EpochLog(epoch, *(sums[k] / len(groups) for k in ("L_M", "L_V", "L_A", "L_f")), time.perf_counter() - start)
        result.history.append(entry)
        log.info("epoch %d  L_f=%.4f  (L_M=%.4f L_V=%.4f L_A=%.4f)  %.1fs", epoch, entry.L_f, entry.L_M, entry.L_V, entry.L_A, entry.wall_time_s)
        if run_dir is not None:
            result.checkpoint = save_checkpoint(run_dir / f"checkpoint_epoch{epoch:03d}.asdt", net.store, epoch)
            _append_metrics(run_dir / "metrics.csv", entry)
            _prune(run_dir, config.keep_last)
    return result


def train_model(
    samples: Sequence[MultimodalSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    encoders: AttributeEncoders,
    out_dir: str | Path | None = None,
) -> TrainResult:
    net = ActiveSpeakerNet(model_config, seed=train_config.seed)
    return fit(net, samples, train_config, encoders, multi_objective, out_dir)


def _write_metrics_header(path: Path) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerow(METRIC_COLUMNS)


def _append_metrics(path: Path, e: EpochLog) -> None:
    with path.open("a", newline="") as fh:
        csv.writer(fh).writerow([e.epoch, f"{e.L_M:.8f}", f"{e.L_V:.8f}", f"{e.L_A:.8f}", f"{e.L_f:.8f}", f"{e.wall_time_s:.3f}"])


def _prune(run_dir: Path, keep_last: int) -> None:
    if keep_last < 1:
        return
    for old in sorted(run_dir.glob("checkpoint_epoch*.asdt"))[:-keep_last]:
        old.unlink()


# ---------------------------------------------------------------------------
# temperature calibration

T_MIN, T_MAX = 0.05, 20.0
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def temperature_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean negative log-likelihood of ``softmax(logits / T)`` at the true class."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(z)), np.asarray(labels, dtype=np.int64)]
    return float(np.mean(log_norm - picked))


def golden_section_minimize(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> float:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def calibrate_temperature(logits: np.ndarray, labels: np.ndarray, lo: float = T_MIN, hi: float = T_MAX) -> float:
    """Temperature minimizing held-out NLL, by golden-section search on ``[lo, hi]``.

    The interior optimum is compared against the value at T = 1 so that the
    result is never worse than leaving the logits unscaled.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels).reshape(-1)
    if len(logits) == 0:
        warnings.warn("empty calibration split; keeping temperature 1", stacklevel=2)
        return 1.0
    nll = lambda t: temperature_nll(logits, labels, t)  # noqa: E731
    best = golden_section_minimize(nll, lo, hi)
    return best if nll(best) <= nll(1.0) else 1.0


def collect_aux_logits(net: ActiveSpeakerNet, samples: Sequence[MultimodalSample], encoders: AttributeEncoders, batch_size: int = 16):
    """Auxiliary logits and labels over all unmasked timesteps: ``(lv, yv, la, ya)``."""
    out = {"lv": [], "yv": [], "la": [], "ya": []}
    with torch.no_grad():
        for group in batches(samples, batch_size, None):
            batch = collate(group, encoders)
            o = net.forward(batch)
            m = batch.mask
            out["lv"].append(o.logits_video[m].numpy())
            out["la"].append(o.logits_audio[m].numpy())
            out["yv"].append(batch.labels_video[m].numpy().astype(np.int64))
            out["ya"].append(batch.labels_audio[m].numpy().astype(np.int64))
    if not out["lv"]:
        empty = np.zeros((0, 2))
        return empty, np.zeros(0, np.int64), empty, np.zeros(0, np.int64)
    return tuple(np.concatenate(out[k]) for k in ("lv", "yv", "la", "ya"))


def calibrate_model(net: ActiveSpeakerNet, samples: Sequence[MultimodalSample], encoders: AttributeEncoders) -> ModelConfig:
    """Fit one temperature per auxiliary head; returns the updated config (also set on ``net``)."""
    lv, yv, la, ya = collect_aux_logits(net, samples, encoders)
    cfg = dataclasses.replace(
        net.config,
        temperature_video=calibrate_temperature(lv, yv),
        temperature_audio=calibrate_temperature(la, ya),
    )
    net.config = cfg
    return cfg
