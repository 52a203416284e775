"""Differentiable building blocks, the Adagrad optimizer and a gradient checker.

Everything runs in float64 on torch tensors; reverse-mode gradients come from
torch autograd and are checked against central differences by
:func:`check_gradients`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
PROB_CLAMP = 1e-7

Tensor = torch.Tensor


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.from_numpy(rng.uniform(-limit, limit, size=shape)).to(DTYPE)


# ---------------------------------------------------------------------------
# forward operations


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the trailing dimension; ``weight`` is ``(out, in)``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"dense: bias {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return x @ weight.T + bias


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero 'same' padding.

    Accepts ``[C,H,W]`` or batched ``[N,C,H,W]`` input.
    """
    if kernels.dim() != 4 or kernels.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernels must be [K,C,3,3], got {tuple(kernels.shape)}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv2d: input channels {tuple(x.shape)} vs kernels {tuple(kernels.shape)}")
    if bias.shape != (kernels.shape[0],):
        raise ValueError("conv2d: bias length must equal kernel count")
    out = F.conv2d(x, kernels, bias, stride=1, padding=1)
    return out[0] if unbatched else out


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; odd H or W is first padded by edge replication."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    pad_h = x.shape[-2] % 2
    pad_w = x.shape[-1] % 2
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    out = F.max_pool2d(x, kernel_size=2, stride=2)
    return out[0] if unbatched else out


def softmax(logits: Tensor, temperature: float = 1.0, dim: int = -1) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    z = logits / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def cross_entropy(y: Tensor, p_pos: Tensor, mask: Tensor | None = None) -> Tensor:
    """Binary cross-entropy on the positive-class probability, mean over unmasked entries."""
    p = torch.clamp(p_pos, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = y.to(DTYPE)
    per = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    if mask is None:
        return per.mean()
    m = mask.to(DTYPE)
    total = m.sum()
    if total.item() == 0:
        raise ValueError("cross_entropy: every entry is masked")
    return (per * m).sum() / total


def two_term_cross_entropy(y: Tensor, p_pos: Tensor) -> Tensor:
    """Per-sample ``-sum_i [y_i log p_i + (1-y_i) log(1-p_i)]`` over both softmax outputs.

    Summing the binary term over the two complementary outputs counts it twice,
    so this is exactly ``2 * cross_entropy``. Kept for reference; training uses
    :func:`cross_entropy`.
    """
    p = torch.clamp(p_pos, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = y.to(DTYPE)
    probs = torch.stack([1.0 - p, p], dim=-1)
    targets = torch.stack([1.0 - y, y], dim=-1)
    return -(targets * torch.log(probs) + (1.0 - targets) * torch.log1p(-probs)).sum(dim=-1)


# ---------------------------------------------------------------------------
# recurrent layers


@dataclass
class GRUParams:
    """Gate order in the stacked matrices is (update z, reset r, candidate n)."""

    W: Tensor  # (3d, in)
    U: Tensor  # (3d, d)
    b: Tensor  # (3d,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    d = p.hidden
    if x.shape[-1] != p.W.shape[1] or h.shape[-1] != d:
        raise ValueError(f"gru_cell: x {tuple(x.shape)} / h {tuple(h.shape)} do not match parameters")
    gx = x @ p.W.T + p.b
    z = torch.sigmoid(gx[..., :d] + h @ p.U[:d].T)
    r = torch.sigmoid(gx[..., d : 2 * d] + h @ p.U[d : 2 * d].T)
    n = torch.tanh(gx[..., 2 * d :] + (r * h) @ p.U[2 * d :].T)
    return (1.0 - z) * h + z * n


def gru(seq: Tensor, p: GRUParams, reverse: bool = False) -> Tensor:
    """Run a GRU over ``seq`` of shape ``(B, T, in)`` from a zero state."""
    steps = range(seq.shape[1] - 1, -1, -1) if reverse else range(seq.shape[1])
    h = seq.new_zeros(seq.shape[0], p.hidden)
    out: list[Tensor] = [None] * seq.shape[1]  # type: ignore[list-item]
    for t in steps:
        h = gru_cell(seq[:, t], h, p)
        out[t] = h
    return torch.stack(out, dim=1)


def bigru(seq: Tensor, forward: GRUParams, backward: GRUParams) -> Tensor:
    """Forward pass concatenated with a reversed-time pass, ``(B, T, d_f + d_b)``."""
    return torch.cat([gru(seq, forward), gru(seq, backward, reverse=True)], dim=-1)


def init_gru(rng: np.random.Generator, n_in: int, hidden: int) -> GRUParams:
    return GRUParams(
        W=glorot_uniform(rng, (3 * hidden, n_in), n_in, 3 * hidden),
        U=glorot_uniform(rng, (3 * hidden, hidden), hidden, 3 * hidden),
        b=torch.zeros(3 * hidden, dtype=DTYPE),
    )


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass(frozen=True)
class AdagradConfig:
    learning_rate: float = 0.015
    epsilon: float = 1e-10
    initial_accumulator: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


class ParameterStore:
    """Named trainable tensors plus their Adagrad accumulators."""

    def __init__(self, initial_accumulator: float = 0.0):
        self.params: dict[str, Tensor] = {}
        self.accumulators: dict[str, Tensor] = {}
        self.initial_accumulator = initial_accumulator

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value.detach().to(DTYPE).clone().requires_grad_(True)
        self.params[name] = t
        self.accumulators[name] = torch.full_like(t, self.initial_accumulator).detach()
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.params.items():
            out[f"param/{name}"] = t.detach().numpy().copy()
        for name, t in self.accumulators.items():
            out[f"accum/{name}"] = t.numpy().copy()
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = {f"param/{n}" for n in self.params} | {f"accum/{n}" for n in self.params}
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))[:3]
            extra = sorted(set(arrays) - expected)[:3]
            raise KeyError(f"checkpoint does not match model parameters (missing {missing}, unexpected {extra})")
        with torch.no_grad():
            for name, t in self.params.items():
                src = torch.from_numpy(np.asarray(arrays[f"param/{name}"], dtype=np.float64))
                if src.shape != t.shape:
                    raise KeyError(f"parameter {name!r}: checkpoint shape {tuple(src.shape)} != {tuple(t.shape)}")
                t.copy_(src)
                self.accumulators[name] = torch.from_numpy(np.asarray(arrays[f"accum/{name}"], dtype=np.float64)).clone()


def adagrad_step(store: ParameterStore, grads: Mapping[str, Tensor | None], config: AdagradConfig) -> None:
    """In-place Adagrad update: ``acc += g**2; p -= lr * g / (sqrt(acc) + eps)``."""
    with torch.no_grad():
        for name, g in grads.items():
            if g is None:
                continue
            p = store.params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            acc = store.accumulators[name]
            acc += g * g
            p -= config.learning_rate * g / (torch.sqrt(acc) + config.epsilon)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    checked: int = 0
    tolerance: float = 1e-4
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} checked={self.checked} max_rel_error={self.max_rel_error:.3e} "
            f"max_abs_error={self.max_abs_error:.3e} tolerance={self.tolerance:g}"
        )


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    atol: float = 1e-8,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    Entries whose gradient magnitude exceeds ``atol / tolerance`` must have a
    relative error ``|a - n| / max(|a|, |n|)`` below ``tolerance``; smaller
    (near-zero) entries must agree within ``atol`` absolutely. The reported
    ``max_rel_error`` covers the first group only. ``max_entries`` limits
    how many coordinates of each parameter are probed (chosen with ``seed``).
    """
    for t in params.values():
        t.grad = None
    out = fn()
    if out.numel() != 1:
        raise ValueError("check_gradients needs a scalar-valued computation")
    names = list(params)
    analytic = torch.autograd.grad(out, [params[n] for n in names], allow_unused=True)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    with torch.no_grad():
        for name, grad in zip(names, analytic):
            p = params[name]
            grad = torch.zeros_like(p) if grad is None else grad
            flat = p.view(-1)
            idx: Iterable[int] = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = sorted(rng.choice(flat.numel(), size=max_entries, replace=False).tolist())
            gflat = grad.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = gflat[i].item()
                abs_err = abs(a - numeric)
                scale = max(abs(a), abs(numeric))
                rel_err = abs_err / scale if scale > 0 else 0.0
                report.checked += 1
                report.max_abs_error = max(report.max_abs_error, abs_err)
                if scale > atol / tolerance:
                    report.max_rel_error = max(report.max_rel_error, rel_err)
                    failed = rel_err >= tolerance
                else:
                    failed = abs_err > atol
                if failed:
                    report.failures.append(f"{name}[{i}]: analytic={a:.6e} numeric={numeric:.6e} rel={rel_err:.2e}")
    return report
