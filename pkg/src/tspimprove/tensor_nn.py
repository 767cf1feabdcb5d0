"""Differentiable building blocks for the edge policy, plus optimiser and checks.

Layers are thin ``torch.nn.Module`` wrappers so that initialisation and
shapes follow one convention: weights are stored ``(fan_in, fan_out)`` and
applied as ``x @ W``, initialised uniform in ``+-1/sqrt(fan_in)``.
"""
from __future__ import annotations

import io
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

RMS_EPS = 1e-6
MASK_FILL = -1e30


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def uniform_init_(tensor: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        f64 = torch.float64
        self.weight = nn.Parameter(uniform_init_(torch.empty(d_in, d_out, dtype=f64), d_in))
        self.bias = nn.Parameter(uniform_init_(torch.empty(d_out, dtype=f64), d_in)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input shape {tuple(x.shape)} does not match "
                             f"weight shape {tuple(self.weight.shape)}")
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


def rmsnorm(h: torch.Tensor, eps: float = RMS_EPS) -> torch.Tensor:
    return h / torch.sqrt((h * h).mean(-1, keepdim=True) + eps)


def layernorm(h: torch.Tensor, eps: float = RMS_EPS) -> torch.Tensor:
    mu = h.mean(-1, keepdim=True)
    centred = h - mu
    return centred / torch.sqrt((centred * centred).mean(-1, keepdim=True) + eps)


NORMS = {"rms": rmsnorm, "layer": layernorm}


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log-softmax over the last axis restricted to ``mask``; masked entries are -inf."""
    filled = logits.masked_fill(~mask, MASK_FILL)
    logp = torch.log_softmax(filled, dim=-1)
    return logp.masked_fill(~mask, float("-inf"))


class FeedForward(nn.Module):
    """W2 relu(W1 h), bias-free."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int | None = None):
        super().__init__()
        self.w1 = Linear(d_in, d_hidden, bias=False)
        self.w2 = Linear(d_hidden, d_in if d_out is None else d_out, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.w2(torch.relu(self.w1(h)))


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Linear(d_model, d_model, bias=False)
        self.k = Linear(d_model, d_model, bias=False)
        self.v = Linear(d_model, d_model, bias=False)
        self.o = Linear(d_model, d_model, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        *lead, n, d = h.shape

        def split(t):
            return t.reshape(*lead, n, self.heads, self.d_head).transpose(-3, -2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)
        out = (att @ v).transpose(-3, -2).reshape(*lead, n, d)
        return self.o(out)


# --- optimiser -------------------------------------------------------------

@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 0.5
    lr_decay_per_epoch: float = 0.99

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ConfigError("lr_decay_per_epoch must be in (0, 1]")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        self.betas = tuple(self.betas)


class AdamW:
    """Global-norm clipping followed by a decoupled-weight-decay Adam step.

    A step whose gradients contain NaN/inf is skipped and counted.
    """

    def __init__(self, params, config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()
        self.params = [p for p in params if p.requires_grad]
        self.opt = torch.optim.AdamW(self.params, lr=self.config.learning_rate,
                                     betas=self.config.betas, eps=self.config.eps,
                                     weight_decay=self.config.weight_decay, foreach=False)
        self.skipped_steps = 0
        self.last_grad_norm = 0.0

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [p.grad for p in self.params if p.grad is not None]
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        norm = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)) if grads else torch.tensor(0.0)
        self.last_grad_norm = float(norm)
        if not math.isfinite(self.last_grad_norm):
            self.skipped_steps += 1
            warnings.warn(f"non-finite gradient norm; optimizer step skipped "
                          f"({self.skipped_steps} so far)", RuntimeWarning)
            self.zero_grad()
            return False
        if self.last_grad_norm > self.config.clip_norm:
            scale = self.config.clip_norm / self.last_grad_norm
            for p in self.params:
                p.grad.mul_(scale)
        self.opt.step()
        return True

    def decay_lr(self) -> None:
        self.lr = self.lr * self.config.lr_decay_per_epoch

    def state_arrays(self, names: dict) -> dict[str, np.ndarray]:
        """Moment arrays keyed ``optim/<param>/<slot>``; ``names`` maps id(param) to name."""
        out = {}
        for p in self.params:
            st = self.opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            out[f"optim/{name}/exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
            out[f"optim/{name}/step"] = np.array([float(st["step"])])
        return out

    def load_state_arrays(self, arrays: dict, names: dict) -> None:
        for p in self.params:
            name = names[id(p)]
            key = f"optim/{name}/exp_avg"
            if key not in arrays:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(arrays[f"optim/{name}/step"][0])),
                "exp_avg": torch.from_numpy(arrays[key].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()).to(p.dtype),
            }


# --- finite-difference gradient check --------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max rel err {self.max_error:.3e} "
                 f"(tol {self.tolerance:.0e})"]
        lines += [f"  {name:<40s} {err:.3e}" for name, err in self.errors.items()]
        return "\n".join(lines)


def gradient_check(fn, tensors: dict[str, torch.Tensor], tolerance: float = 1e-4,
                   step: float = 1e-4, max_entries: int | None = None,
                   seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and returns a tensor; the checked scalar is its
    inner product with a fixed random projection.  ``tensors`` are the leaves
    to check (parameters and/or inputs), perturbed in place.  The reported
    error per block is max|analytic - numeric| / max(max|analytic|, max|numeric|).
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = fn()
    proj = torch.randn(probe.shape, generator=gen, dtype=probe.dtype)

    def scalar():
        out = fn()
        finite = torch.isfinite(out)
        return (torch.where(finite, out, torch.zeros_like(out)) * proj).sum()

    for t in tensors.values():
        t.grad = None
    loss = scalar()
    leaves = list(tensors.values())
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    errors = {}
    rng = np.random.default_rng(seed)
    for (name, t), g in zip(tensors.items(), grads):
        analytic = torch.zeros_like(t) if g is None else g.detach()
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = rng.choice(idx, size=max_entries, replace=False)
        num = np.zeros(idx.size)
        with torch.no_grad():
            for r, k in enumerate(idx):
                orig = flat[k].item()
                flat[k] = orig + step
                fp = scalar().item()
                flat[k] = orig - step
                fm = scalar().item()
                flat[k] = orig
                num[r] = (fp - fm) / (2 * step)
        ana = analytic.view(-1)[torch.as_tensor(idx)].numpy()
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        errors[name] = float(np.abs(ana - num).max(initial=0.0) / scale)
    return GradCheckReport(errors, tolerance)


# --- checkpoint container --------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"TSPIMPV1"
#   u32       header length H, then H bytes of UTF-8 JSON header
#   u32       number of blocks
#   per block:
#     u16 name length, name (UTF-8)
#     u8  dtype code (0 float64, 1 float32, 2 int64)
#     u8  ndim, then ndim x u64 dims
#     raw data, C order, little-endian

MAGIC = b"TSPIMPV1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


def write_checkpoint(path, header: dict, blocks: dict[str, np.ndarray]) -> None:
    header = dict(header, format_version=FORMAT_VERSION)
    buf = io.BytesIO()
    buf.write(MAGIC)
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        arr = np.require(arr, requirements="C")  # keeps 0-d shapes, unlike ascontiguousarray
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for block {name!r}")
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    try:
        pos = 8
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            blocks[name] = np.frombuffer(data[pos:pos + size], dtype=dt).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return header, blocks


def config_dict(config) -> dict:
    return asdict(config)
