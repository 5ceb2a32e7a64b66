"""Differentiable layer primitives for the recurrent residual U-Net.

Tensors are ``torch.Tensor`` objects whose autograd graph provides the
reverse-mode derivatives; this module adds the layer semantics (3x3x3 "same"
convolutions, strided transposed convolutions, batch normalization with
running statistics, the convolutional LSTM cell), an explicit Adam update,
a central finite-difference checker, and the parameter checkpoint format.

Layout is channels-first: ``(batch, channel, x, y, z)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
KERNEL = 3
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _as_triple(stride) -> tuple[int, int, int]:
    if isinstance(stride, int):
        return (stride, stride, stride)
    s = tuple(int(v) for v in stride)
    if len(s) != 3 or min(s) < 1:
        raise ValueError(f"stride must be three positive integers, got {stride!r}")
    return s


def _check_5d(x: torch.Tensor, name: str) -> None:
    if x.dim() != 5:
        raise ValueError(f"{name} must have 5 axes (batch, channel, x, y, z), got shape {tuple(x.shape)}")


# ------------------------------------------------------------------ parameters

@dataclass
class ConvParams:
    """Kernel ``(out, in, 3, 3, 3)`` and bias ``(out,)``."""
    weight: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        w, b = self.weight, self.bias
        if w.dim() != 5 or tuple(w.shape[2:]) != (KERNEL,) * 3:
            raise ValueError(f"kernel must be (out, in, 3, 3, 3), got {tuple(w.shape)}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {tuple(b.shape)} does not match {w.shape[0]} output channels")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNormParams:
    gamma: torch.Tensor
    beta: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ValueError("batch-norm tensors must share one per-channel shape")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, torch.Tensor]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def init_conv(in_ch: int, out_ch: int, generator: torch.Generator, dtype=DTYPE) -> ConvParams:
    """Fan-in scaled uniform kernel (He bound ``sqrt(6 / fan_in)``), zero bias."""
    fan_in = in_ch * KERNEL ** 3
    bound = math.sqrt(6.0 / fan_in)
    w = (torch.rand((out_ch, in_ch, KERNEL, KERNEL, KERNEL), generator=generator, dtype=dtype) * 2 - 1) * bound
    return ConvParams(w, torch.zeros(out_ch, dtype=dtype))


def init_batch_norm(channels: int, dtype=DTYPE, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> BatchNormParams:
    return BatchNormParams(torch.ones(channels, dtype=dtype), torch.zeros(channels, dtype=dtype),
                           torch.zeros(channels, dtype=dtype), torch.ones(channels, dtype=dtype),
                           momentum, eps)


# ------------------------------------------------------------------ layers

def conv3d(x: torch.Tensor, params: ConvParams, stride=1) -> torch.Tensor:
    """3x3x3 cross-correlation with zero "same" padding; each axis shrinks by its stride."""
    _check_5d(x, "input")
    s = _as_triple(stride)
    if x.shape[1] != params.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {params.in_channels}")
    for n, si in zip(x.shape[2:], s):
        if n % si:
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} not divisible by stride {s}")
    return F.conv3d(x, params.weight, params.bias, stride=s, padding=1)


def deconv3d(x: torch.Tensor, params: ConvParams, stride=1) -> torch.Tensor:
    """Transposed 3x3x3 convolution; each axis grows by its stride.

    It is the adjoint of :func:`conv3d` with the same stride, with
    ``output_padding = stride - 1`` so that ``n -> n * stride`` exactly.
    """
    _check_5d(x, "input")
    s = _as_triple(stride)
    if x.shape[1] != params.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {params.in_channels}")
    # conv_transpose3d wants (in, out, ...); kernels are stored (out, in, ...)
    return F.conv_transpose3d(x, params.weight.transpose(0, 1), params.bias, stride=s, padding=1,
                              output_padding=tuple(v - 1 for v in s))


def batch_norm(x: torch.Tensor, params: BatchNormParams, train: bool) -> torch.Tensor:
    """Per-channel normalization over (batch, x, y, z).

    In train mode the batch statistics normalize the input and the running
    estimates are updated in place as ``r <- momentum r + (1 - momentum) b``
    (running variance uses the unbiased batch variance). In inference mode
    the running estimates are used, so each sample is processed independently
    of the rest of the batch.
    """
    _check_5d(x, "input")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ValueError(f"batch norm has {params.gamma.shape[0]} channels, input has {c}")
    view = (1, c, 1, 1, 1)
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch normalization in train mode needs a batch of at least 2")
        dims = (0, 2, 3, 4)
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        n = x.numel() // c
        with torch.no_grad():
            m = params.momentum
            params.running_mean.mul_(m).add_((1 - m) * mean.detach())
            params.running_var.mul_(m).add_((1 - m) * var.detach() * (n / max(n - 1, 1)))
    else:
        mean, var = params.running_mean, params.running_var
    xhat = (x - mean.view(view)) / torch.sqrt(var.view(view) + params.eps)
    return xhat * params.gamma.view(view) + params.beta.view(view)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def conv_lstm_step(x: torch.Tensor, h: torch.Tensor, c: torch.Tensor,
                   params: ConvParams) -> tuple[torch.Tensor, torch.Tensor]:
    """One convolutional LSTM update.

    ``params`` maps ``[x, h]`` (channels concatenated) to the four gate
    pre-activations stacked as input, forget, output, candidate.
    """
    for name, t in (("x", x), ("h", h), ("c", c)):
        _check_5d(t, name)
    if x.shape[2:] != h.shape[2:] or h.shape != c.shape or x.shape[0] != h.shape[0]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, h {tuple(h.shape)}, c {tuple(c.shape)}")
    hidden = h.shape[1]
    if params.out_channels != 4 * hidden:
        raise ValueError(f"gate kernel gives {params.out_channels} channels, expected {4 * hidden}")
    gates = conv3d(torch.cat([x, h], dim=1), params)
    i, f, o, g = torch.split(gates, hidden, dim=1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def conv_lstm(x_seq: Sequence[torch.Tensor], params: ConvParams, hidden: int) -> list[torch.Tensor]:
    """Run the cell over a sequence from zero states; returns every hidden state."""
    x0 = x_seq[0]
    shape = (x0.shape[0], hidden) + tuple(x0.shape[2:])
    h = torch.zeros(shape, dtype=x0.dtype)
    c = torch.zeros(shape, dtype=x0.dtype)
    out = []
    for x in x_seq:
        h, c = conv_lstm_step(x, h, c, params)
        out.append(h)
    return out


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam hyperparameters")
        if self.step < 0:
            raise ValueError("step must be >= 0")


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
              state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    A missing (``None``) gradient is treated as zero, which leaves a
    parameter with zero moments untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# ------------------------------------------------------------------ gradient check

def finite_difference_check(fn: Callable[[], torch.Tensor], tensors: Iterable[torch.Tensor],
                            h: float = 1e-5, max_entries: int | None = None,
                            rng: np.random.Generator | None = None, floor: float = 1e-6) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` evaluates a scalar from the current values of ``tensors`` (which
    must require grad). The error of one tensor is ``max|g_ad - g_fd|``
    divided by ``max|g_fd|`` over that tensor; the divisor is floored at
    ``floor`` times the largest finite-difference entry over all tensors, so
    gradients that vanish identically (e.g. a bias feeding batch norm) are
    judged against the overall gradient scale instead of round-off.
    ``max_entries`` subsamples the probed entries of large tensors.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    fn().backward()
    pairs = []
    for t in tensors:
        ad = (t.grad if t.grad is not None else torch.zeros_like(t)).detach().clone().reshape(-1)
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.numel(), max_entries, replace=False)
        fd = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for n, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                fd[n] = (up - down) / (2 * h)
        pairs.append((ad[torch.as_tensor(idx)].to(torch.float64), fd))
    overall = max(fd.abs().max().item() for _, fd in pairs)
    worst = 0.0
    for ad, fd in pairs:
        scale = max(fd.abs().max().item(), floor * overall)
        err = (ad - fd).abs().max().item()
        worst = max(worst, err / scale if scale > 0 else err)
    return worst


# ------------------------------------------------------------------ checkpoints

def save_tensors(directory: str | Path, tensors: Mapping[str, torch.Tensor], meta: Mapping | None = None) -> None:
    """Write ``manifest.json`` plus one raw little-endian float64 file per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        fname = f"{i:03d}.bin"
        arr = t.detach().cpu().to(torch.float64).numpy()
        (d / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"meta": dict(meta or {}), "tensors": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_tensors(directory: str | Path, dtype=DTYPE) -> tuple[dict[str, torch.Tensor], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    out = {}
    for e in manifest["tensors"]:
        raw = (d / e["file"]).read_bytes()
        count = int(np.prod(e["shape"], dtype=np.int64))
        if len(raw) != 8 * count:
            raise ValueError(f"{d / e['file']}: expected {8 * count} bytes, found {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr).to(dtype)
    return out, manifest["meta"]
