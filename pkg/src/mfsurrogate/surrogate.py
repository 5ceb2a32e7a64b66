"""Recurrent residual U-Net surrogate and the three-step multifidelity training.

The network maps a facies field ``(batch, 1, nx, ny, nz)`` to ``n_t``
snapshot fields, either on the fine grid (HF head) or on the coarse grid
(LF head). Encoder, convLSTM and decoder are shared by both heads.

Step 1 trains everything through the LF head on coarse-simulation targets.
Step 2 freezes encoder/convLSTM/decoder (batch norm in inference mode) and
fits the HF head. Step 3 fine-tunes all parameters through the HF head.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .autodiff import (
    DTYPE, AdamState, BatchNormParams, ConvParams, adam_step, batch_norm, conv3d, conv_lstm, deconv3d,
    init_batch_norm, init_conv, load_tensors, relu, save_tensors,
)

log = logging.getLogger(__name__)

PRESSURE = "pressure"
SATURATION = "saturation"
KINDS = (PRESSURE, SATURATION)
LF = "lf"
HF = "hf"

GROUPS = ("enc", "lstm", "dec", "out_lf", "out_hf")
SHARED = ("enc", "lstm", "dec")


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ normalization

def normalize_pressure(p, p_min: float, p_max: float):
    if not p_max > p_min:
        raise ValueError(f"p_max ({p_max}) must exceed p_min ({p_min})")
    return (np.asarray(p, dtype=np.float64) - p_min) / (p_max - p_min)


def denormalize_pressure(x, p_min: float, p_max: float):
    if not p_max > p_min:
        raise ValueError(f"p_max ({p_max}) must exceed p_min ({p_min})")
    return np.asarray(x, dtype=np.float64) * (p_max - p_min) + p_min


# ------------------------------------------------------------------ architecture

def lf_head_strides(ratios: Sequence[int]) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Split each coarsening ratio over the two LF-head convolutions.

    The first layer takes ``min(r, 2)``, the second the remainder, so
    ratios (4, 4, 2) give (2, 2, 2) then (2, 2, 1).
    """
    first, second = [], []
    for r in ratios:
        if r not in (1, 2, 4):
            raise ValueError(f"LF head supports coarsening ratios 1, 2 or 4 per axis, got {tuple(ratios)}")
        first.append(min(r, 2))
        second.append(r // min(r, 2))
    return tuple(first), tuple(second)


@dataclass(frozen=True)
class Architecture:
    fine_shape: tuple[int, int, int]
    lf_ratios: tuple[int, int, int] = (4, 4, 2)
    n_t: int = 10
    widths: tuple[int, int, int, int] = (16, 32, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "fine_shape", tuple(int(v) for v in self.fine_shape))
        object.__setattr__(self, "lf_ratios", tuple(int(v) for v in self.lf_ratios))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if len(self.fine_shape) != 3 or any(n % 4 for n in self.fine_shape):
            raise ValueError(f"fine grid dims must be divisible by 4, got {self.fine_shape}")
        if any(n % r for n, r in zip(self.fine_shape, self.lf_ratios)):
            raise ValueError(f"ratios {self.lf_ratios} do not divide {self.fine_shape}")
        lf_head_strides(self.lf_ratios)
        if self.n_t < 1 or len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError("n_t must be >= 1 and widths must be four positive ints")

    @property
    def coarse_shape(self) -> tuple[int, int, int]:
        return tuple(n // r for n, r in zip(self.fine_shape, self.lf_ratios))

    def output_shape(self, head: str) -> tuple[int, ...]:
        return (self.n_t,) + (self.fine_shape if head == HF else self.coarse_shape)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["fine_shape"]), tuple(d["lf_ratios"]), int(d["n_t"]), tuple(d["widths"]))


class RUNet:
    """Parameters plus the functional forward pass.

    All tensors live in ``self.params`` (trainable) and ``self.buffers``
    (batch-norm running statistics); names start with their group
    (``enc``, ``lstm``, ``dec``, ``out_lf``, ``out_hf``).
    """

    def __init__(self, arch: Architecture, seed: int = 0, dtype=DTYPE):
        self.arch = arch
        self.seed = int(seed)
        self.dtype = dtype
        g = torch.Generator().manual_seed(self.seed)
        c1, c2, c3, c4 = arch.widths
        self.convs: dict[str, ConvParams] = {}
        self.norms: dict[str, BatchNormParams] = {}

        def conv(name, cin, cout, bn=True):
            self.convs[name] = init_conv(cin, cout, g, dtype)
            if bn:
                self.norms[name] = init_batch_norm(cout, dtype)

        conv("enc.c1", 1, c1)
        conv("enc.c2", c1, c2)
        conv("enc.c3", c2, c3)
        conv("enc.c4", c3, c4)
        for r in ("enc.r1", "enc.r2"):
            conv(r + "a", c4, c4)
            conv(r + "b", c4, c4)
        conv("lstm.gates", 2 * c4, 4 * c4, bn=False)
        for r in ("dec.r1", "dec.r2"):
            conv(r + "a", c4, c4)
            conv(r + "b", c4, c4)
        # deconvolutions take the previous output concatenated with the
        # matching encoder feature map
        conv("dec.d1", c4 + c4, c4)
        conv("dec.d2", c4 + c3, c3)
        conv("dec.d3", c3 + c2, c2)
        conv("dec.d4", c2 + c1, c1)
        conv("out_lf.c1", c1, c1, bn=False)
        conv("out_lf.c2", c1, 1, bn=False)
        conv("out_hf.c1", c1, 1, bn=False)
        self.params: dict[str, torch.Tensor] = {}
        self.buffers: dict[str, torch.Tensor] = {}
        for name, p in self.convs.items():
            self.params[name + ".weight"] = p.weight
            self.params[name + ".bias"] = p.bias
            if name in self.norms:
                bn = self.norms[name]
                self.params[name + ".gamma"] = bn.gamma
                self.params[name + ".beta"] = bn.beta
                self.buffers[name + ".running_mean"] = bn.running_mean
                self.buffers[name + ".running_var"] = bn.running_var

    # -------------------------------------------------------------- state

    def state(self) -> dict[str, torch.Tensor]:
        return {**self.params, **self.buffers}

    def group_state(self, group: str) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state().items() if k.split(".")[0] == group}

    def group_digest(self, groups: Sequence[str]) -> str:
        """SHA-256 over the raw bytes of every tensor in ``groups``."""
        h = hashlib.sha256()
        for name, t in self.state().items():
            if name.split(".")[0] in groups:
                h.update(name.encode())
                h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def load_state(self, tensors: dict[str, torch.Tensor]) -> None:
        own = self.state()
        if set(tensors) != set(own):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        with torch.no_grad():
            for k, t in tensors.items():
                if t.shape != own[k].shape:
                    raise ValueError(f"{k}: shape {tuple(t.shape)} != {tuple(own[k].shape)}")
                own[k].copy_(t.to(self.dtype))

    def copy(self) -> "RUNet":
        other = RUNet(self.arch, self.seed, self.dtype)
        other.load_state(self.state())
        return other

    # -------------------------------------------------------------- forward

    def _block(self, name: str, x: torch.Tensor, train: bool, stride=1, transpose=False) -> torch.Tensor:
        op = deconv3d if transpose else conv3d
        return relu(batch_norm(op(x, self.convs[name], stride), self.norms[name], train))

    def _residual(self, name: str, x: torch.Tensor, train: bool) -> torch.Tensor:
        y = self._block(name + "a", x, train)
        y = batch_norm(conv3d(y, self.convs[name + "b"]), self.norms[name + "b"], train)
        return relu(x + y)

    def features(self, m: torch.Tensor, train: bool = False) -> torch.Tensor:
        """Decoder output, shape ``(batch * n_t, c1, nx, ny, nz)`` (time fastest)."""
        m = self._as_input(m)
        n_t = self.arch.n_t
        e1 = self._block("enc.c1", m, train, 2)
        e2 = self._block("enc.c2", e1, train)
        e3 = self._block("enc.c3", e2, train, 2)
        e4 = self._block("enc.c4", e3, train)
        f = self._residual("enc.r2", self._residual("enc.r1", e4, train), train)
        hs = conv_lstm([f] * n_t, self.convs["lstm.gates"], self.arch.widths[3])
        r = torch.stack(hs, dim=1).flatten(0, 1)

        def rep(e):
            return e.repeat_interleave(n_t, dim=0)

        r = self._residual("dec.r2", self._residual("dec.r1", r, train), train)
        d = self._block("dec.d1", torch.cat([r, rep(e4)], 1), train, 1, True)
        d = self._block("dec.d2", torch.cat([d, rep(e3)], 1), train, 2, True)
        d = self._block("dec.d3", torch.cat([d, rep(e2)], 1), train, 1, True)
        return self._block("dec.d4", torch.cat([d, rep(e1)], 1), train, 2, True)

    def head(self, feats: torch.Tensor, head: str) -> torch.Tensor:
        """Map decoder features to ``(batch, n_t, *grid)`` fields."""
        if head == HF:
            y = conv3d(feats, self.convs["out_hf.c1"])
        elif head == LF:
            s1, s2 = lf_head_strides(self.arch.lf_ratios)
            y = conv3d(relu(conv3d(feats, self.convs["out_lf.c1"], s1)), self.convs["out_lf.c2"], s2)
        else:
            raise ValueError(f"head must be {LF!r} or {HF!r}, got {head!r}")
        return y.reshape((-1, self.arch.n_t) + tuple(y.shape[2:]))

    def forward(self, m, head: str, train: bool = False) -> torch.Tensor:
        return self.head(self.features(m, train), head)

    def _as_input(self, m) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m).to(self.dtype)
        if t.dim() == 3:
            t = t.unsqueeze(0)
        if t.dim() == 4:
            t = t.unsqueeze(1)
        if t.dim() != 5 or t.shape[1] != 1 or tuple(t.shape[2:]) != self.arch.fine_shape:
            raise ValueError(f"input must be facies of shape {self.arch.fine_shape}, got {tuple(t.shape)}")
        return t


# ------------------------------------------------------------------ loss and data

def well_weighted_loss(pred: torch.Tensor, target: torch.Tensor, well_cells, lambda_w: float) -> torch.Tensor:
    """Squared field mismatch plus weighted squared well-block mismatch.

    ``pred`` and ``target`` are ``(n_smp, n_t, *grid)``. The field term is
    the squared L2 norm over cells averaged over samples and snapshots; the
    well term is the squared mismatch averaged over samples, snapshots and
    the ``n_w`` well blocks (flat C-order cell indices), scaled by ``lambda_w``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    diff = (pred - target).flatten(2)
    loss = diff.square().sum(dim=2).mean()
    if lambda_w:
        idx = torch.as_tensor(np.asarray(well_cells, dtype=np.int64))
        if idx.numel() == 0:
            raise ValueError("well_cells must be nonempty when lambda_w > 0")
        loss = loss + lambda_w * diff[:, :, idx].square().mean()
    return loss


def well_block_indices(wells, grid_shape: Sequence[int], ratios: Sequence[int] = (1, 1, 1)) -> np.ndarray:
    """Flat C-order indices of the (coarse) cells holding a perforation."""
    nx, ny, nz = (n // r for n, r in zip(grid_shape, ratios))
    rx, ry, rz = ratios
    cells = set()
    for w in wells:
        for k in range(w.layers[0] - 1, w.layers[1]):
            cells.add((w.i // rx, w.j // ry, k // rz))
    return np.array(sorted(np.ravel_multi_index(c, (nx, ny, nz)) for c in cells), dtype=np.int64)


@dataclass
class TrainingSet:
    """Facies inputs ``(n, nx, ny, nz)`` and normalized targets ``(n, n_t, *grid)``."""
    inputs: np.ndarray
    targets: np.ndarray
    fidelity: str
    kind: str
    well_cells: np.ndarray
    lambda_w: float
    p_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.well_cells = np.asarray(self.well_cells, dtype=np.int64)
        if self.fidelity not in (LF, HF):
            raise ValueError(f"fidelity must be {LF!r} or {HF!r}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in sample count")
        if self.kind == PRESSURE and self.p_bounds is None:
            raise ValueError("pressure sets need (p_min, p_max)")
        if self.lambda_w > 0 and self.well_cells.size == 0:
            raise ValueError("well_cells must be nonempty when lambda_w > 0")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrainingSet(self.inputs[idx], self.targets[idx], self.fidelity, self.kind,
                           self.well_cells, self.lambda_w, self.p_bounds)


def make_training_set(facies: np.ndarray, fields: np.ndarray, fidelity: str, kind: str, well_cells,
                      lambda_w: float, p_bounds: tuple[float, float] | None = None) -> TrainingSet:
    """Normalize raw simulator fields (pressure in bar, saturation raw)."""
    targets = normalize_pressure(fields, *p_bounds) if kind == PRESSURE else np.asarray(fields, dtype=np.float64)
    return TrainingSet(facies, targets, fidelity, kind, well_cells, lambda_w, p_bounds)


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    epochs: int
    lr: float
    batch: int = 4
    seed: int = 0
    holdout: float = 0.0


@dataclass
class TrainLog:
    step: str
    loss: list = field(default_factory=list)
    holdout_loss: list = field(default_factory=list)


def _split(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_hold = int(np.floor(frac * n))
    order = np.random.default_rng([seed, 7]).permutation(n)
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def _batches(n: int, batch: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    starts = list(range(0, n, batch))
    # a trailing single sample would leave batch norm without statistics, so
    # it joins the previous batch
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for a, b in zip(starts, starts[1:] + [n]):
        yield order[a:b]


def _train(net: RUNet, data: TrainingSet, head: str, trainable: Sequence[str], cfg: TrainConfig,
           step: str, frozen_features: bool = False, checkpoint_dir: str | Path | None = None) -> TrainLog:
    if cfg.epochs < 0 or cfg.batch < 1:
        raise ValueError("epochs must be >= 0 and batch >= 1")
    expect = net.arch.output_shape(head)
    if data.targets.shape[1:] != expect:
        raise ValueError(f"targets have shape {data.targets.shape[1:]}, head {head!r} produces {expect}")
    record = TrainLog(step)
    if cfg.epochs == 0 or len(data) == 0:
        return record
    fit_idx, hold_idx = _split(len(data), cfg.holdout, cfg.seed)
    names = [k for k in net.params if k.split(".")[0] in trainable]
    params = {k: net.params[k] for k in names}
    state = AdamState(lr=cfg.lr)
    x_all = torch.as_tensor(data.inputs, dtype=net.dtype)
    y_all = torch.as_tensor(data.targets, dtype=net.dtype)
    feats = None
    if frozen_features:
        with torch.no_grad():
            feats = torch.cat([net.features(x_all[i:i + 8], train=False) for i in range(0, len(x_all), 8)])
        feats = feats.reshape((len(x_all), net.arch.n_t) + tuple(feats.shape[1:]))
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for b in _batches(len(fit_idx), cfg.batch, cfg.seed, epoch):
            rows = fit_idx[b]
            for p in params.values():
                p.requires_grad_(True)
                p.grad = None
            if feats is not None:
                pred = net.head(feats[rows].flatten(0, 1), head)
            else:
                pred = net.forward(x_all[rows], head, train=True)
            loss = well_weighted_loss(pred, y_all[rows], data.well_cells, data.lambda_w)
            if not torch.isfinite(loss):
                if checkpoint_dir is not None:
                    save_checkpoint(net, checkpoint_dir, step, data.kind, {"diverged_epoch": epoch})
                raise TrainingDiverged(f"{step}: non-finite loss at epoch {epoch}")
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            total += loss.item() * len(rows)
            count += len(rows)
        for p in params.values():
            p.requires_grad_(False)
            p.grad = None
        record.loss.append(total / max(count, 1))
        if len(hold_idx):
            with torch.no_grad():
                pred = net.forward(x_all[hold_idx], head, train=False)
                record.holdout_loss.append(
                    well_weighted_loss(pred, y_all[hold_idx], data.well_cells, data.lambda_w).item())
        log.debug("%s epoch %d loss %.4g", step, epoch, record.loss[-1])
    return record


def train_step1_lf(net: RUNet, lf_set: TrainingSet, cfg: TrainConfig, **kw) -> TrainLog:
    """All parameter groups trained through the LF head on coarse targets."""
    if lf_set.fidelity != LF:
        raise ValueError("step 1 needs an LF training set")
    return _train(net, lf_set, LF, GROUPS, cfg, "step1", **kw)


def train_step2_transfer(net: RUNet, hf_set: TrainingSet, cfg: TrainConfig, **kw) -> TrainLog:
    """Only the HF head is trained; shared groups run in inference mode and stay bit-identical."""
    if hf_set.fidelity != HF:
        raise ValueError("step 2 needs an HF training set")
    return _train(net, hf_set, HF, ("out_hf",), cfg, "step2", frozen_features=True, **kw)


def train_step3_finetune(net: RUNet, hf_set: TrainingSet, cfg: TrainConfig, **kw) -> TrainLog:
    """Every parameter trained through the HF head."""
    if hf_set.fidelity != HF:
        raise ValueError("step 3 needs an HF training set")
    return _train(net, hf_set, HF, SHARED + ("out_hf",), cfg, "step3", **kw)


def train_reference(net: RUNet, hf_set: TrainingSet, cfg: TrainConfig, **kw) -> TrainLog:
    """HF-only baseline: the whole HF path trained from scratch on HF targets."""
    if hf_set.fidelity != HF:
        raise ValueError("reference training needs an HF training set")
    return _train(net, hf_set, HF, SHARED + ("out_hf",), cfg, "reference", **kw)


# ------------------------------------------------------------------ inference

def predict(net: RUNet, facies: np.ndarray, head: str, kind: str,
            p_bounds: tuple[float, float] | None = None, chunk: int = 8) -> np.ndarray:
    """Fields in physical units: pressure denormalized, saturation clipped to [0, 1]."""
    x = np.asarray(facies, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = []
    with torch.no_grad():
        for s in range(0, len(x), chunk):
            out.append(net.forward(torch.as_tensor(x[s:s + chunk]), head, train=False).to(torch.float64).numpy())
    y = np.concatenate(out) if out else np.zeros((0,) + net.arch.output_shape(head))
    if kind == PRESSURE:
        y = denormalize_pressure(y, *p_bounds)
    else:
        y = np.clip(y, 0.0, 1.0)
    return y[0] if single else y


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(net: RUNet, directory: str | Path, step, kind: str, extra: dict | None = None) -> None:
    meta = {"architecture": net.arch.to_dict(), "seed": net.seed, "step": step, "kind": kind,
            "dtype": str(net.dtype).replace("torch.", ""), **(extra or {})}
    save_tensors(directory, net.state(), meta)


def load_checkpoint(directory: str | Path) -> tuple[RUNet, dict]:
    tensors, meta = load_tensors(directory)
    dtype = getattr(torch, meta.get("dtype", "float64"))
    net = RUNet(Architecture.from_dict(meta["architecture"]), meta["seed"], dtype)
    net.load_state(tensors)
    return net, meta
