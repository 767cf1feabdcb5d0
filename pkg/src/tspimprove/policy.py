"""Edge-attention encoder-decoder that scores every 2-opt move of a tour."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from . import features as F
from .tensor_nn import (NORMS, AdamW, CheckpointError, ConfigError, FeedForward, Linear,
                        MultiHeadAttention, masked_log_softmax, read_checkpoint,
                        write_checkpoint)
from .tsp_core import feasible_mask

DTYPES = {"float64": torch.float64, "float32": torch.float32}


class NoActionError(RuntimeError):
    """Every 2-opt cell is masked for some state."""


@dataclass
class PolicyConfig:
    n_layers: int = 3
    d_model: int = 128
    d_hidden: int = 128
    n_heads: int = 8
    logit_clip: float = 10.0
    hist_len: int = F.HIST_LEN
    mask_len: int = 8
    d_key: int | None = None
    use_history_feature: bool = True
    use_recency_mask: bool = True
    pooling: str = "mean"
    norm: str = "rms"
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_key is None:
            self.d_key = self.d_model
        for name in ("n_layers", "d_model", "d_hidden", "n_heads", "d_key"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"pooling must be 'mean' or 'max', got {self.pooling!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {sorted(NORMS)}, got {self.norm!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.mask_len < 0 or self.hist_len < 0:
            raise ConfigError("mask_len and hist_len must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PolicyOutput:
    logits: torch.Tensor     # (B, n, n) clipped, symmetrised, unmasked
    mask: torch.Tensor       # (B, n, n) True = live cell
    log_probs: torch.Tensor  # (B, n, n) masked log-softmax, -inf off the mask

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()


class EncoderBlock(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ffn = FeedForward(cfg.d_model, cfg.d_hidden)
        self.norm = NORMS[cfg.norm]

    def forward(self, h):
        h = self.norm(h + self.attn(h))
        return self.norm(h + self.ffn(h))


class EdgePolicy(nn.Module):
    def __init__(self, config: PolicyConfig | None = None, seed: int | None = None):
        super().__init__()
        cfg = config or PolicyConfig()
        self.config = cfg
        if seed is not None:
            torch.manual_seed(seed)
        D = cfg.d_model
        n_geo = 9 + (1 if cfg.use_history_feature else 0)
        self.coord_embed = Linear(2, D, bias=False)
        self.token_proj = Linear(2 * D + n_geo, D)
        self.cycle_ffn = FeedForward(3 * D, cfg.d_hidden, D)
        self.alpha = nn.Parameter(torch.tensor(0.1, dtype=torch.float64))
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.w_loc = Linear(D, D, bias=False)
        self.w_glob = Linear(D, D, bias=False)
        self.w_q = Linear(D, cfg.d_key, bias=False)
        self.w_k = Linear(D, cfg.d_key, bias=False)
        self.to(DTYPES[cfg.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.dtype]

    # -- forward pieces ----------------------------------------------------
    def embed_tokens(self, feats: torch.Tensor) -> torch.Tensor:
        geo = feats[..., 4:F.NUM_FEATURES - 1]
        parts = [self.coord_embed(feats[..., F.COL_U]), self.coord_embed(feats[..., F.COL_V]), geo]
        if self.config.use_history_feature:
            parts.append(feats[..., F.COL_HIST:F.COL_HIST + 1])
        return self.token_proj(torch.cat(parts, dim=-1))

    def cycle_mix(self, h: torch.Tensor) -> torch.Tensor:
        nbr = torch.cat([torch.roll(h, 1, dims=-2), h, torch.roll(h, -1, dims=-2)], dim=-1)
        return h + self.alpha * self.cycle_ffn(nbr)

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            h = block(h)
        return h

    def global_context(self, h: torch.Tensor) -> torch.Tensor:
        if self.config.pooling == "mean":
            c = h.mean(dim=-2, keepdim=True)
        else:
            c = h.max(dim=-2, keepdim=True).values
        return self.w_loc(h) + self.w_glob(c)

    def pairwise_logits(self, h: torch.Tensor) -> torch.Tensor:
        q, k = self.w_q(h), self.w_k(h)
        raw = q @ k.transpose(-1, -2) / math.sqrt(self.config.d_key)
        clipped = self.config.logit_clip * torch.tanh(raw)
        return 0.5 * (clipped + clipped.transpose(-1, -2))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        h = self.cycle_mix(self.embed_tokens(feats))
        return self.pairwise_logits(self.global_context(self.encode(h)))

    # -- convenience -------------------------------------------------------
    def logits_for(self, coords, tours, history=None) -> torch.Tensor:
        hist = history if self.config.use_history_feature else None
        feats = F.compute_features_batch(coords, tours, hist)
        return self(torch.as_tensor(feats, dtype=self.dtype))

    def distribution(self, coords, tours, history=None, recency: bool | None = None) -> PolicyOutput:
        tours = np.asarray(tours)
        use_mask = self.config.use_recency_mask if recency is None else recency
        mask = action_mask(tours.shape[-1], history, self.config.mask_len if use_mask else 0,
                           batch=tours.shape[0])
        return action_distribution(self.logits_for(coords, tours, history), mask)

    def param_counts(self) -> dict[str, int]:
        return {name: p.numel() for name, p in self.named_parameters()}


def action_mask(n: int, history=None, mask_len: int = 0, batch: int | None = None) -> np.ndarray:
    """Live cells: canonical feasible 2-opt pairs minus the last ``mask_len`` moves."""
    base = feasible_mask(n)
    if history is None:
        return np.broadcast_to(base, ((batch or 1), n, n)).copy()
    history = np.asarray(history)
    B = history.shape[0]
    mask = np.broadcast_to(base, (B, n, n)).copy()
    if mask_len > 0:
        recent = history[:, -mask_len:, :]
        rows = np.repeat(np.arange(B), recent.shape[1])
        ij = recent.reshape(-1, 2)
        ok = ij[:, 0] >= 0
        rows, ii, jj = rows[ok], ij[ok, 0], ij[ok, 1]
        mask[rows, ii, jj] = False
        mask[rows, jj, ii] = False
    return mask


def action_distribution(logits: torch.Tensor, mask) -> PolicyOutput:
    mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if logits.dim() == 2:
        logits = logits[None]
    if mask_t.dim() == 2:
        mask_t = mask_t[None]
    B, n, _ = logits.shape
    mask_t = mask_t.expand(B, n, n)
    flat_mask = mask_t.reshape(B, n * n)
    dead = ~flat_mask.any(-1)
    if bool(dead.any()):
        raise NoActionError(f"no live 2-opt cell for {int(dead.sum())} state(s); "
                            f"recency mask too long for n={n}?")
    logp = masked_log_softmax(logits.reshape(B, n * n), flat_mask).reshape(B, n, n)
    return PolicyOutput(logits, mask_t, logp)


def draw_cells(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of flat cell indices from one probability row.

    Zero-probability cells can never be returned.
    """
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right")
    last_live = probs.size - 1 - int(np.argmax(probs[::-1] > 0))
    return np.minimum(idx, last_live)


def sample_and_logprob(output: PolicyOutput, rngs, greedy: bool = False):
    """Draw one move per state.

    ``rngs`` is a single generator or one per state.  Returns moves (B, 2)
    and their log-probabilities (B,) as numpy arrays.
    """
    logp = output.log_probs.detach()
    B, n, _ = logp.shape
    flat = logp.reshape(B, n * n).numpy()
    if greedy:
        # argmax returns the first maximum: lowest (i, j) in row-major order
        idx = flat.argmax(-1)
    else:
        if isinstance(rngs, np.random.Generator):
            u = rngs.random(B)
        else:
            u = np.array([g.random() for g in rngs])
        probs = np.exp(flat)
        idx = np.array([draw_cells(probs[b], u[b]) for b in range(B)], dtype=np.int64)
    moves = np.stack([idx // n, idx % n], axis=-1).astype(np.int64)
    return moves, flat[np.arange(B), idx]


def sample_many(output: PolicyOutput, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent moves from the first state's distribution, shape (size, 2)."""
    probs = output.probs.detach()[0].reshape(-1).numpy()
    n = output.log_probs.shape[-1]
    idx = draw_cells(probs, rng.random(size))
    return np.stack([idx // n, idx % n], axis=-1)


# --- checkpoints ------------------------------------------------------------

def param_names(policy: nn.Module) -> dict[int, str]:
    return {id(p): name for name, p in policy.named_parameters()}


def save_checkpoint(path, policy: EdgePolicy, stage: str = "IL", epoch: int = 0,
                    optimizer: AdamW | None = None, extra_header: dict | None = None,
                    extra_blocks: dict | None = None) -> None:
    header = {"model_config": asdict(policy.config), "stage": stage, "epoch": epoch}
    if optimizer is not None:
        header["optimizer"] = {**asdict(optimizer.config), "lr": optimizer.lr,
                               "skipped_steps": optimizer.skipped_steps}
    header.update(extra_header or {})
    blocks = {f"param/{name}": p.detach().cpu().numpy() for name, p in policy.named_parameters()}
    if optimizer is not None:
        blocks.update(optimizer.state_arrays(param_names(policy)))
    blocks.update(extra_blocks or {})
    write_checkpoint(path, header, blocks)


def load_params(policy: EdgePolicy, blocks: dict, prefix: str = "param/") -> None:
    with torch.no_grad():
        for name, p in policy.named_parameters():
            key = prefix + name
            if key not in blocks:
                raise CheckpointError(f"checkpoint lacks parameter block {key!r}")
            arr = blocks[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape} "
                                      f"!= model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))


def load_checkpoint(path, expected: PolicyConfig | None = None):
    """Returns (policy, header, blocks)."""
    header, blocks = read_checkpoint(path)
    try:
        cfg = PolicyConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad model_config ({exc})") from None
    if expected is not None:
        mismatch = [k for k in ("n_layers", "d_model", "d_hidden", "n_heads", "d_key",
                                "use_history_feature")
                    if getattr(expected, k) != getattr(cfg, k)]
        if mismatch:
            raise CheckpointError(f"{path}: checkpoint config differs from requested config "
                                  f"in {', '.join(mismatch)}")
    policy = EdgePolicy(cfg)
    load_params(policy, blocks)
    return policy, header, blocks
