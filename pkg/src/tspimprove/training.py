"""Imitation learning against the lookahead teacher, then group-relative PPO."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .features import compute_features_batch
from .oracle import k_step_lookahead
from .policy import (EdgePolicy, PolicyConfig, action_mask, load_params, param_names,
                     save_checkpoint)
from .search import Batch, rollout
from .tensor_nn import AdamW, CheckpointError, ConfigError, OptimizerConfig, masked_log_softmax, \
    read_checkpoint
from .tsp_core import Instance, SizeLimitError, apply_two_opt

log = logging.getLogger(__name__)

STAGE_CODES = {"IL": 1, "RL": 2}
ADV_STD_FLOOR = 1e-8


@dataclass
class TrainConfig:
    stage: str = "IL"
    epochs: int = 100
    updates_per_epoch: int = 10
    batch_size: int = 32
    n_low: int = 20
    n_high: int = 50
    lookahead: int = 2
    group_size: int = 20
    horizon: int = 32
    ppo_clip: float = 0.2
    ppo_epochs: int = 1
    behavior_refresh: int | None = None
    lr: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 0.5
    lr_decay: float = 0.99
    seed: int = 0
    time_limit: float | None = None

    def __post_init__(self):
        if self.stage not in STAGE_CODES:
            raise ConfigError(f"stage must be IL or RL, got {self.stage!r}")
        if self.behavior_refresh is None:
            self.behavior_refresh = 1 if self.stage == "IL" else 20
        if self.stage == "RL" and self.group_size < 2:
            raise ConfigError("RL needs group_size >= 2")
        if self.horizon < 1 or self.lookahead < 1:
            raise ConfigError("horizon and lookahead must be >= 1")
        if not 0 < self.ppo_clip < 1:
            raise ConfigError("ppo_clip must be in (0, 1)")
        if not 4 <= self.n_low <= self.n_high:
            raise ConfigError("need 4 <= n_low <= n_high")
        if self.ppo_epochs != 1:
            raise ConfigError("only a single PPO pass per collected batch is supported")
        if self.behavior_refresh < 1 or self.batch_size < 1 or self.updates_per_epoch < 1:
            raise ConfigError("behavior_refresh, batch_size and updates_per_epoch must be >= 1")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.lr, weight_decay=self.weight_decay,
                               clip_norm=self.clip_norm, lr_decay_per_epoch=self.lr_decay)


IL_DEFAULTS = dict(stage="IL", epochs=100, n_low=20, n_high=50, behavior_refresh=1)
RL_DEFAULTS = dict(stage="RL", epochs=200, n_low=20, n_high=100, behavior_refresh=20)


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


# --- config files -----------------------------------------------------------

def _coerce(value: str, current):
    low = value.lower()
    if low in ("none", "null"):
        return None
    if isinstance(current, bool) or low in ("true", "false"):
        if low not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {value!r}")
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value.strip("\"'")


def parse_config_text(text: str) -> tuple[dict, dict]:
    """``key = value`` lines ('#' comments) -> (policy kwargs, train kwargs).

    Keys are the field names of PolicyConfig and TrainConfig.
    """
    pol_names = {f.name: f for f in fields(PolicyConfig)}
    train_names = {f.name: f for f in fields(TrainConfig)}
    pol, train = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        if key in pol_names:
            pol[key] = _coerce(value, pol_names[key].default)
        elif key in train_names:
            train[key] = _coerce(value, train_names[key].default)
        else:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
    return pol, train


def preset_path(name: str) -> Path:
    path = Path(__file__).parent / "presets" / f"{name}.cfg"
    if not path.exists():
        available = sorted(p.stem for p in path.parent.glob("*.cfg"))
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(available)}")
    return path


# --- warmup -----------------------------------------------------------------

def warmup_batch(coords: np.ndarray, behavior: EdgePolicy | None, rngs,
                 max_steps: np.ndarray | None = None):
    """Random tours advanced by t0 ~ U{0..n} behavior-policy moves per row.

    Each row draws its start tour, t0 and all samples from its own
    generator.  Returns (batch, c_ref, t0) where c_ref is the best cost seen
    during the warmup, including the random start.
    """
    B, n, _ = coords.shape
    tours = np.stack([g.permutation(n) for g in rngs])
    t0 = np.array([int(g.integers(0, n + 1)) for g in rngs]) if max_steps is None else max_steps
    batch = Batch(coords, tours)
    rollout(behavior, batch, int(t0.max(initial=0)), rngs, active_steps=t0)
    return batch, batch.best_costs.copy(), t0


def warmup_state(instance: Instance, behavior: EdgePolicy | None, rng: np.random.Generator):
    """Single-instance warmup: (SearchState, C_ref, t0)."""
    batch, c_ref, t0 = warmup_batch(instance.coords[None], behavior, [rng])
    return batch.state(0, instance), float(c_ref[0]), int(t0[0])


# --- imitation --------------------------------------------------------------

def state_log_probs(policy: EdgePolicy, coords, tours, history, recency: bool | None = None):
    """Masked log-probabilities (B, n, n) with gradients; recency=None follows the config."""
    if recency is None:
        recency = policy.config.use_recency_mask
    tours = np.asarray(tours)
    n = tours.shape[-1]
    hist = history if policy.config.use_history_feature else None
    feats = torch.as_tensor(compute_features_batch(coords, tours, hist), dtype=policy.dtype)
    logits = policy(feats)
    mask = action_mask(n, history, policy.config.mask_len if recency else 0, batch=tours.shape[0])
    mask_t = torch.as_tensor(mask)
    B = tours.shape[0]
    return masked_log_softmax(logits.reshape(B, n * n), mask_t.reshape(B, n * n)).reshape(B, n, n)


def optimal_set_mask(n: int, action_sets) -> np.ndarray:
    mask = np.zeros((len(action_sets), n, n), dtype=bool)
    for r, actions in enumerate(action_sets):
        for i, j in actions:
            mask[r, i, j] = True
    return mask


def il_loss(log_probs: torch.Tensor, target_mask: np.ndarray, episodes: int) -> torch.Tensor:
    """-sum_t log sum_{a in A*_t} p(a | s_t), averaged over episodes."""
    B = log_probs.shape[0]
    target = torch.as_tensor(target_mask).reshape(B, -1)
    picked = log_probs.reshape(B, -1).masked_fill(~target, float("-inf"))
    return -torch.logsumexp(picked, dim=-1).sum() / episodes


@dataclass
class ILBatch:
    coords: np.ndarray       # (M, n, 2)
    tours: np.ndarray        # (M, n)
    history: np.ndarray      # (M, K_hist, 2)
    targets: np.ndarray      # (M, n, n) optimal-set mask
    episodes: int


def collect_il_batch(coords: np.ndarray, behavior: EdgePolicy | None, rngs, K: int) -> ILBatch:
    """Warmup each instance, then follow the teacher for K steps."""
    batch, _, _ = warmup_batch(coords, behavior, rngs)
    n = batch.n
    rows_c, rows_t, rows_h, sets = [], [], [], []
    episodes = 0
    for b in range(batch.size):
        inst = Instance(coords[b])
        tour, hist = batch.tours[b].copy(), batch.history[b].copy()
        try:
            for _ in range(K):
                res = k_step_lookahead(inst, tour, K)
                rows_c.append(coords[b])
                rows_t.append(tour.copy())
                rows_h.append(hist.copy())
                sets.append(res.optimal_actions)
                move = res.one_optimal_sequence[0]
                tour = apply_two_opt(tour, move)
                hist = np.concatenate([hist[1:], np.array([move])]) if hist.shape[0] else hist
        except SizeLimitError as exc:
            log.warning("skipping episode: %s", exc)
            continue
        episodes += 1
    if not rows_c:
        K_hist = batch.history.shape[1]
        return ILBatch(np.zeros((0, n, 2)), np.zeros((0, n), dtype=np.int64),
                       np.zeros((0, K_hist, 2), dtype=np.int64), optimal_set_mask(n, []), 0)
    return ILBatch(np.stack(rows_c), np.stack(rows_t), np.stack(rows_h),
                   optimal_set_mask(n, sets), episodes)


def il_batch_loss(policy: EdgePolicy, data: ILBatch) -> torch.Tensor:
    logp = state_log_probs(policy, data.coords, data.tours, data.history, recency=False)
    return il_loss(logp, data.targets, data.episodes)


def imitation_metrics(policy: EdgePolicy, data: ILBatch) -> dict:
    """Loss, top-1 hit rate on the optimal set, and the uniform policy's hit rate."""
    with torch.no_grad():
        logp = state_log_probs(policy, data.coords, data.tours, data.history, recency=False)
        loss = float(il_loss(logp, data.targets, data.episodes))
    M, n, _ = logp.shape
    top = logp.reshape(M, -1).argmax(-1).numpy()
    hit = data.targets.reshape(M, -1)[np.arange(M), top]
    live = action_mask(n, None, 0, batch=1)[0].sum()
    uniform = data.targets.reshape(M, -1).sum(-1) / live
    return {"loss": loss, "hit_rate": float(hit.mean()), "uniform_hit_rate": float(uniform.mean())}


# --- group RL ---------------------------------------------------------------

@dataclass
class GroupBatch:
    c_ref: np.ndarray          # (B,)
    tours: np.ndarray          # (B, G, T, n) state before each action
    history: np.ndarray        # (B, G, T, K_hist, 2)
    moves: np.ndarray          # (B, G, T, 2)
    behavior_logp: np.ndarray  # (B, G, T)
    costs: np.ndarray          # (B, G, T + 1); index 0 is the shared start
    coords: np.ndarray         # (B, n, 2)
    t_best: np.ndarray | None = None       # (B,)
    c_best: np.ndarray | None = None       # (B, G)
    rewards: np.ndarray | None = None      # (B, G)
    advantages: np.ndarray | None = None   # (B, G) centred, before normalisation
    step_advantages: np.ndarray | None = None  # (B, G, T) normalised, fed to PPO
    raw_step_advantages: np.ndarray | None = None

    @property
    def shape(self):
        return self.moves.shape[:3]


def collect_group_rollouts(coords: np.ndarray, behavior: EdgePolicy | None, G: int, T: int,
                           warm_rngs, member_rngs, greedy: bool = False,
                           start: tuple | None = None) -> GroupBatch:
    """One warmup per instance, replicated G times, then G rollouts of T steps.

    ``member_rngs`` is a flat list of B*G generators (row b*G + g).
    ``start`` optionally supplies (tours, history, c_ref) instead of a warmup.
    """
    B, n, _ = coords.shape
    if start is None:
        base, c_ref, _ = warmup_batch(coords, behavior, warm_rngs)
    else:
        tours, history, c_ref = start
        base = Batch(coords, tours, history)
        c_ref = np.asarray(c_ref, dtype=np.float64)
    group = base.replicate(G)
    rec = rollout(behavior, group, T, member_rngs, greedy=greedy, record=True)

    def per_group(a, tail):
        return np.moveaxis(a, 0, 1).reshape((B, G) + tail)

    K = group.history.shape[1]
    return GroupBatch(
        c_ref=c_ref,
        tours=per_group(rec.tours, (T, n)),
        history=per_group(rec.history, (T, K, 2)),
        moves=per_group(rec.moves, (T, 2)),
        behavior_logp=per_group(rec.log_probs, (T,)),
        costs=per_group(rec.costs, (T + 1,)),
        coords=coords,
    )


def compute_rewards_and_advantages(batch: GroupBatch) -> GroupBatch:
    B, G, T = batch.shape
    if np.any(batch.c_ref <= 0):
        raise ValueError("reference cost must be positive to normalise rewards")
    t_best = np.zeros(B, dtype=np.int64)
    c_best = np.zeros((B, G))
    for b in range(B):
        costs = batch.costs[b]
        hit = costs <= costs.min()
        t_best[b] = int(np.flatnonzero(hit.any(axis=0))[0])
        c_best[b] = costs[:, :t_best[b] + 1].min(axis=1)
    rewards = np.maximum(batch.c_ref[:, None] - c_best, 0.0) / batch.c_ref[:, None]
    adv = rewards - rewards.mean(axis=1, keepdims=True)
    steps = np.arange(T)
    raw = adv[:, :, None] * (steps[None, None, :] <= t_best[:, None, None])
    step_adv = raw.copy()
    nz = step_adv != 0
    if nz.any():
        std = step_adv[nz].std()
        if std >= ADV_STD_FLOOR:
            step_adv[nz] = step_adv[nz] / std
    batch.t_best, batch.c_best, batch.rewards = t_best, c_best, rewards
    batch.advantages, batch.raw_step_advantages, batch.step_advantages = adv, raw, step_adv
    return batch


def batch_log_probs(policy: EdgePolicy, batch: GroupBatch) -> torch.Tensor:
    """Current-policy log-probabilities of the stored actions, shape (B, G, T)."""
    B, G, T = batch.shape
    n = batch.coords.shape[1]
    coords = np.repeat(batch.coords, G * T, axis=0)
    tours = batch.tours.reshape(B * G * T, n)
    hist = batch.history.reshape((B * G * T,) + batch.history.shape[3:])
    logp = state_log_probs(policy, coords, tours, hist)
    mv = batch.moves.reshape(-1, 2)
    chosen = logp[torch.arange(B * G * T), torch.as_tensor(mv[:, 0]), torch.as_tensor(mv[:, 1])]
    return chosen.reshape(B, G, T)


def ppo_loss(logp: torch.Tensor, behavior_logp, advantages, eps: float):
    """Clipped surrogate, averaged over every (b, g, t); returns (loss, dropped terms)."""
    old = torch.as_tensor(behavior_logp, dtype=logp.dtype)
    adv = torch.as_tensor(advantages, dtype=logp.dtype)
    ratio = torch.exp(logp - old)
    surr = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)
    finite = torch.isfinite(surr)
    dropped = int((~finite).sum())
    surr = torch.where(finite, surr, torch.zeros_like(surr))
    return -surr.sum() / surr.numel(), dropped


def ppo_update(policy: EdgePolicy, optimizer: AdamW | None, batch: GroupBatch, eps: float = 0.2):
    """One clipped-PPO pass over the batch; returns (loss, stats)."""
    logp = batch_log_probs(policy, batch)
    loss, dropped = ppo_loss(logp, batch.behavior_logp, batch.step_advantages, eps)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    ratio = torch.exp(logp.detach() - torch.as_tensor(batch.behavior_logp))
    clipped = float(((ratio - 1).abs() > eps).double().mean())
    return float(loss.detach()), {"dropped": dropped, "clip_frac": clipped}


# --- driver -----------------------------------------------------------------

class Trainer:
    """Owns the policy, the frozen behavior snapshot and the optimiser."""

    def __init__(self, config: TrainConfig, policy: EdgePolicy,
                 optimizer: AdamW | None = None):
        self.config = config
        self.policy = policy
        self.optimizer = optimizer or AdamW(policy.parameters(), config.optimizer_config())
        self.behavior = copy.deepcopy(policy)
        self.behavior.requires_grad_(False)
        self.episodes = 0

    def refresh_behavior(self) -> None:
        self.behavior.load_state_dict(self.policy.state_dict())

    def _after_episode(self) -> None:
        self.episodes += 1
        if self.episodes % self.config.behavior_refresh == 0:
            self.refresh_behavior()

    def _instances(self, epoch: int, update: int):
        cfg = self.config
        stage = STAGE_CODES[cfg.stage]
        rng = rng_for(cfg.seed, stage, epoch, update)
        n = int(rng.integers(cfg.n_low, cfg.n_high + 1))
        coords = rng.random((cfg.batch_size, n, 2))
        warm = [rng_for(cfg.seed, stage, epoch, update, b, 0) for b in range(cfg.batch_size)]
        return n, coords, warm

    def il_update(self, epoch: int, update: int) -> dict:
        n, coords, warm = self._instances(epoch, update)
        data = collect_il_batch(coords, self.behavior, warm, self.config.lookahead)
        if data.episodes == 0:
            return {"loss": float("nan"), "n": n}
        self.optimizer.zero_grad()
        loss = il_batch_loss(self.policy, data)
        loss.backward()
        self.optimizer.step()
        self._after_episode()
        return {"loss": float(loss.detach()), "n": n}

    def rl_update(self, epoch: int, update: int) -> dict:
        cfg = self.config
        n, coords, warm = self._instances(epoch, update)
        stage = STAGE_CODES[cfg.stage]
        members = [rng_for(cfg.seed, stage, epoch, update, b, 1, g)
                   for b in range(cfg.batch_size) for g in range(cfg.group_size)]
        batch = collect_group_rollouts(coords, self.behavior, cfg.group_size, cfg.horizon,
                                       warm, members)
        compute_rewards_and_advantages(batch)
        loss, stats = ppo_update(self.policy, self.optimizer, batch, cfg.ppo_clip)
        self._after_episode()
        zero = np.all(batch.advantages == 0, axis=1)
        return {"loss": loss, "n": n, "mean_reward": float(batch.rewards.mean()),
                "mean_best_cost": float(batch.costs.min(axis=(1, 2)).mean()),
                "zero_signal_frac": float(zero.mean()), **stats}

    def run_epoch(self, epoch: int, deadline: float | None = None) -> dict:
        step = self.il_update if self.config.stage == "IL" else self.rl_update
        results = []
        for u in range(self.config.updates_per_epoch):
            if deadline is not None and time.perf_counter() >= deadline:
                break
            results.append(step(epoch, u))
        out = {"epoch": epoch, "stage": self.config.stage, "updates": len(results),
               "lr": self.optimizer.lr}
        if results:
            for key in results[0]:
                if key != "n":
                    out[key] = float(np.mean([r[key] for r in results]))
        self.optimizer.decay_lr()
        return out

    def save(self, path, epoch: int) -> None:
        behavior = {f"behavior/{name}": p.detach().numpy()
                    for name, p in self.behavior.named_parameters()}
        save_checkpoint(path, self.policy, self.config.stage, epoch, self.optimizer,
                        extra_header={"episodes": self.episodes,
                                      "train_config": asdict(self.config)},
                        extra_blocks=behavior)


def il_epoch(trainer: Trainer, epoch: int) -> float:
    """One imitation epoch; returns the mean batch loss."""
    if trainer.config.stage != "IL":
        raise ConfigError("il_epoch needs an IL-stage trainer")
    return trainer.run_epoch(epoch)["loss"]


def restore_trainer(config: TrainConfig, checkpoint, policy_config: PolicyConfig | None = None):
    """Trainer from a checkpoint plus the first epoch to run.

    Same stage resumes after the stored epoch; IL -> RL starts RL at epoch 0
    keeping optimiser moments and learning rate.
    """
    header, blocks = read_checkpoint(checkpoint)
    try:
        cfg = PolicyConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{checkpoint}: bad model_config ({exc})") from None
    if policy_config is not None:
        keys = ("n_layers", "d_model", "d_hidden", "n_heads", "d_key", "use_history_feature")
        bad = [k for k in keys if getattr(policy_config, k) != getattr(cfg, k)]
        if bad:
            raise CheckpointError(f"{checkpoint}: incompatible with requested policy config "
                                  f"({', '.join(bad)} differ)")
        cfg = policy_config
    policy = EdgePolicy(cfg)
    load_params(policy, blocks)
    optimizer = AdamW(policy.parameters(), config.optimizer_config())
    optimizer.load_state_arrays(blocks, param_names(policy))
    opt_header = header.get("optimizer", {})
    if "lr" in opt_header:
        optimizer.lr = opt_header["lr"]
    optimizer.skipped_steps = opt_header.get("skipped_steps", 0)
    trainer = Trainer(config, policy, optimizer)
    stage = header.get("stage")
    if stage == config.stage:
        if any(k.startswith("behavior/") for k in blocks):
            load_params(trainer.behavior, blocks, prefix="behavior/")
        trainer.episodes = int(header.get("episodes", 0))
        start = int(header.get("epoch", -1)) + 1
    elif stage == "IL" and config.stage == "RL":
        start = 0
    else:
        raise CheckpointError(f"cannot continue a {stage} checkpoint with stage {config.stage}")
    return trainer, start


def train(config: TrainConfig, out_dir, policy_config: PolicyConfig | None = None,
          checkpoint_in=None, init_seed: int | None = None) -> tuple[Path, list[dict]]:
    """Run one stage; writes per-epoch checkpoints and ``metrics.jsonl`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if checkpoint_in is not None:
        trainer, start = restore_trainer(config, checkpoint_in, policy_config)
    else:
        torch.manual_seed(config.seed if init_seed is None else init_seed)
        trainer, start = Trainer(config, EdgePolicy(policy_config or PolicyConfig())), 0
    t0 = time.perf_counter()
    deadline = None if config.time_limit is None else t0 + config.time_limit
    metrics = []
    last = out / "last.ckpt"
    for epoch in range(start, config.epochs):
        if deadline is not None and time.perf_counter() >= deadline:
            log.info("time limit reached before epoch %d", epoch)
            break
        row = trainer.run_epoch(epoch, deadline)
        row["seconds"] = time.perf_counter() - t0
        metrics.append(row)
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        trainer.save(out / f"epoch{epoch:04d}.ckpt", epoch)
        trainer.save(last, epoch)
        log.info("%s epoch %d: %s", config.stage, epoch,
                 {k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})
    if not last.exists():
        trainer.save(last, start - 1)
    return last, metrics
