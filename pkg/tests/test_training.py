import json
import math

import numpy as np
import pytest
import torch

from tspimprove.policy import EdgePolicy, PolicyConfig, action_mask, save_checkpoint
from tspimprove.tensor_nn import CheckpointError, ConfigError, masked_log_softmax
from tspimprove.training import (GroupBatch, ILBatch, TrainConfig, collect_group_rollouts,
                                 collect_il_batch, compute_rewards_and_advantages, il_loss,
                                 il_batch_loss, imitation_metrics, optimal_set_mask,
                                 parse_config_text, ppo_loss, ppo_update, batch_log_probs,
                                 preset_path, restore_trainer, rng_for, train, warmup_batch,
                                 warmup_state, Trainer)
from tspimprove.tsp_core import batch_tour_costs, generate_uniform, tour_cost

TINY = PolicyConfig(n_layers=1, d_model=16, d_hidden=16, n_heads=2)


def tiny_policy(seed=0):
    return EdgePolicy(TINY, seed=seed)


def hand_batch(costs, c_ref):
    """GroupBatch carrying only what the reward computation reads."""
    costs = np.asarray(costs, dtype=np.float64)
    B, G, T1 = costs.shape
    return GroupBatch(c_ref=np.asarray(c_ref, dtype=np.float64), tours=None, history=None,
                      moves=np.zeros((B, G, T1 - 1, 2), dtype=np.int64),
                      behavior_logp=np.zeros((B, G, T1 - 1)), costs=costs, coords=None)


# --- warmup -----------------------------------------------------------------

def test_zero_warmup_is_random_tour():
    coords = np.random.default_rng(0).random((1, 9, 2))
    batch, c_ref, t0 = warmup_batch(coords, None, [rng_for(1)], max_steps=np.array([0]))
    assert t0[0] == 0 and np.all(batch.history == -1)
    assert np.array_equal(batch.tours[0], rng_for(1).permutation(9))
    assert c_ref[0] == batch.costs[0]


def test_reference_cost_never_above_start():
    inst = generate_uniform(15, 3)
    for k in range(20):
        rng = rng_for(7, k)
        start = rng_for(7, k).permutation(15)
        state, c_ref, t0 = warmup_state(inst, None, rng)
        assert c_ref <= tour_cost(inst, start) + 1e-12
        assert c_ref <= state.cost + 1e-12
        assert len(state.history) == min(t0, 16)


def test_warmup_length_uniform():
    n, draws = 20, 1000
    coords = np.random.default_rng(0).random((draws, n, 2))
    _, _, t0 = warmup_batch(coords, None, [rng_for(3, k) for k in range(draws)])
    counts = np.bincount(t0, minlength=n + 1)
    assert counts.size == n + 1
    p = 1 / (n + 1)
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


def test_warmup_with_policy_runs_masked_steps():
    coords = np.random.default_rng(1).random((2, 10, 2))
    batch, _, t0 = warmup_batch(coords, tiny_policy(), [rng_for(0), rng_for(1)],
                                max_steps=np.array([5, 3]))
    hist = batch.history
    for b, steps in enumerate(t0):
        moves = [tuple(m) for m in hist[b] if m[0] >= 0]
        assert len(moves) == steps
        assert len(set(moves)) == len(moves)  # recency mask forbids repeats within 8


# --- imitation --------------------------------------------------------------

def test_il_loss_zero_when_all_mass_on_optimal():
    logp = torch.full((2, 6, 6), float("-inf"), dtype=torch.float64)
    logp[0, 1, 3] = 0.0
    logp[1, 0, 2] = 0.0
    target = optimal_set_mask(6, [[(1, 3)], [(0, 2), (2, 4)]])
    assert il_loss(logp, target, 1).item() == 0.0


def test_il_loss_uniform_n10():
    policy = tiny_policy()
    with torch.no_grad():
        policy.w_q.weight.zero_()  # every logit becomes 0
    rng = np.random.default_rng(0)
    coords = np.repeat(rng.random((1, 10, 2)), 2, axis=0)
    tours = np.stack([rng.permutation(10), rng.permutation(10)])
    data = ILBatch(coords, tours, np.full((2, 16, 2), -1),
                   optimal_set_mask(10, [[(0, 4)], [(2, 7)]]), episodes=1)
    loss = il_batch_loss(policy, data).item()
    assert loss == pytest.approx(2 * math.log(35), abs=1e-9)  # 7.11070


def test_il_loss_monotone_in_target_mass():
    base = torch.randn(1, 8, 8, dtype=torch.float64)
    mask = torch.as_tensor(action_mask(8))
    target = optimal_set_mask(8, [[(1, 5), (2, 6)]])

    def loss(shift):
        logits = base + shift * torch.as_tensor(target, dtype=torch.float64)
        lp = masked_log_softmax(logits.reshape(1, -1), mask.reshape(1, -1)).reshape(1, 8, 8)
        return il_loss(lp, target, 1).item()

    values = [loss(s) for s in np.linspace(-3, 3, 13)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert all(math.isfinite(v) for v in values)


def test_collect_il_batch_shapes_and_sets():
    coords = np.random.default_rng(2).random((3, 8, 2))
    data = collect_il_batch(coords, None, [rng_for(0, b) for b in range(3)], K=2)
    assert data.episodes == 3 and data.tours.shape == (6, 8)
    assert np.all(data.targets.reshape(6, -1).sum(-1) >= 1)
    # second state of each episode is the first after its witness move
    assert np.all(data.history[1::2, -1] >= 0)
    metrics = imitation_metrics(tiny_policy(), data)
    assert 0 <= metrics["hit_rate"] <= 1 and math.isfinite(metrics["loss"])


def test_collect_il_batch_skips_oversized():
    coords = np.random.default_rng(2).random((2, 30, 2))
    data = collect_il_batch(coords, None, [rng_for(0, b) for b in range(2)], K=3)
    assert data.episodes == 0 and data.tours.shape[0] == 0


# --- rewards and advantages -------------------------------------------------

def test_reward_example():
    batch = compute_rewards_and_advantages(hand_batch([[[10.0, 9.5, 9.0], [10.0, 10.2, 9.8]]],
                                                      [10.0]))
    assert batch.t_best[0] == 2
    assert batch.rewards[0].tolist() == pytest.approx([0.1, 0.02])


def test_centering_example():
    c = [[[1.0, 0.8], [1.0, 0.6], [1.0, 0.4]]]
    batch = compute_rewards_and_advantages(hand_batch(c, [1.0]))
    assert batch.rewards[0] == pytest.approx([0.2, 0.4, 0.6])
    assert batch.advantages[0] == pytest.approx([-0.2, 0.0, 0.2], abs=1e-12)


def test_single_member_group_has_zero_advantage():
    batch = compute_rewards_and_advantages(hand_batch([[[5.0, 4.0, 3.0]]], [5.0]))
    assert batch.rewards[0, 0] > 0 and batch.advantages[0, 0] == 0
    assert not batch.step_advantages.any()


def test_no_improvement_means_no_signal():
    batch = compute_rewards_and_advantages(hand_batch([[[5.0, 5.5], [5.0, 6.0]]], [4.0]))
    assert not batch.rewards.any() and not batch.step_advantages.any()


def test_t_best_earliest_and_cutoff():
    costs = [[[9.0, 8.0, 7.0, 7.0, 8.0], [9.0, 7.5, 7.0, 6.5, 6.5]]]
    batch = compute_rewards_and_advantages(hand_batch(costs, [9.0]))
    assert batch.t_best[0] == 3
    assert batch.c_best[0].tolist() == [7.0, 6.5]
    assert not batch.raw_step_advantages[0, :, 4:].any()
    assert batch.raw_step_advantages[0, :, :4].all()


def test_rejects_nonpositive_reference():
    with pytest.raises(ValueError):
        compute_rewards_and_advantages(hand_batch([[[1.0, 1.0], [1.0, 1.0]]], [0.0]))


def test_normalised_advantages_unit_std():
    rng = np.random.default_rng(0)
    costs = 10 - np.cumsum(rng.random((3, 4, 6)), axis=-1)
    costs = np.concatenate([np.full((3, 4, 1), 10.0), costs], axis=-1)
    batch = compute_rewards_and_advantages(hand_batch(costs, [10.0] * 3))
    nz = batch.step_advantages != 0
    assert batch.step_advantages[nz].std() == pytest.approx(1.0)
    np.testing.assert_allclose(batch.advantages.sum(axis=1), 0, atol=1e-9)


def rollouts(policy, B=2, G=4, T=5, n=9, greedy=False, seed=0):
    coords = np.random.default_rng(seed).random((B, n, 2))
    warm = [rng_for(seed, b, 0) for b in range(B)]
    members = [rng_for(seed, b, 1, g) for b in range(B) for g in range(G)]
    return collect_group_rollouts(coords, policy, G, T, warm, members, greedy=greedy)


def test_group_shares_start_and_sums_to_zero():
    batch = compute_rewards_and_advantages(rollouts(tiny_policy()))
    B, G, T = batch.shape
    assert (B, G, T) == (2, 4, 5)
    for b in range(B):
        assert np.all(batch.tours[b, :, 0] == batch.tours[b, 0, 0])
        assert np.all(batch.costs[b, :, 0] == batch.costs[b, 0, 0])
    np.testing.assert_allclose(batch.advantages.sum(axis=1), 0, atol=1e-9)
    assert np.all((batch.rewards >= 0) & (batch.rewards < 1))
    assert np.all((batch.t_best >= 0) & (batch.t_best <= T))
    for b in range(B):
        assert not batch.step_advantages[b, :, batch.t_best[b] + 1:].any()
    # stored costs agree with the stored tours
    flat = batch.tours.reshape(-1, 9)
    coords = np.repeat(batch.coords, G * T, axis=0)
    np.testing.assert_array_equal(batch_tour_costs(coords, flat), batch.costs[..., :-1].ravel())


def test_greedy_behavior_gives_identical_members():
    batch = compute_rewards_and_advantages(rollouts(tiny_policy(), greedy=True))
    assert np.all(batch.moves == batch.moves[:, :1])
    assert not batch.advantages.any()


# --- ppo --------------------------------------------------------------------

def test_ppo_clip_example():
    logp = torch.tensor([math.log(1.5)], dtype=torch.float64)
    loss, _ = ppo_loss(logp, np.array([0.0]), np.array([1.0]), 0.2)
    assert loss.item() == pytest.approx(-1.2, abs=1e-12)
    loss, _ = ppo_loss(torch.tensor([math.log(0.5)], dtype=torch.float64),
                       np.array([0.0]), np.array([-1.0]), 0.2)
    assert loss.item() == pytest.approx(0.8, abs=1e-12)  # min picks the clipped 0.8 * -1


def test_ppo_drops_non_finite_terms():
    logp = torch.tensor([0.0, float("nan")], dtype=torch.float64)
    loss, dropped = ppo_loss(logp, np.zeros(2), np.ones(2), 0.2)
    assert dropped == 1 and loss.item() == pytest.approx(-0.5)


def test_ratio_one_at_reference_and_matches_policy_gradient():
    policy = tiny_policy(1)
    batch = compute_rewards_and_advantages(rollouts(policy, seed=3))
    logp = batch_log_probs(policy, batch)
    ratio = torch.exp(logp - torch.as_tensor(batch.behavior_logp))
    assert (ratio - 1).abs().max().item() < 1e-9
    adv = torch.as_tensor(batch.step_advantages)
    loss, _ = ppo_loss(logp, batch.behavior_logp, batch.step_advantages, 0.2)
    assert loss.item() == pytest.approx(-adv.mean().item(), abs=1e-9)
    grads = torch.autograd.grad(loss, list(policy.parameters()), allow_unused=True)
    logp2 = batch_log_probs(policy, batch)
    pg = -(adv * logp2).mean()
    ref = torch.autograd.grad(pg, list(policy.parameters()), allow_unused=True)
    for g, r in zip(grads, ref):
        if g is None:
            assert r is None
            continue
        assert (g - r).abs().max().item() < 1e-9


def test_zero_signal_group_has_zero_gradient():
    policy = tiny_policy(2)
    coords = np.random.default_rng(5).random((1, 9, 2))
    tours = np.arange(9)[None]
    hist = np.full((1, 16, 2), -1)
    members = [rng_for(0, g) for g in range(4)]
    batch = collect_group_rollouts(coords, policy, 4, 6, None, members,
                                   start=(tours, hist, [1e-6]))
    compute_rewards_and_advantages(batch)
    logp = batch_log_probs(policy, batch)
    loss, _ = ppo_loss(logp, batch.behavior_logp, batch.step_advantages, 0.2)
    loss.backward()
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in policy.parameters()
                         if p.grad is not None))
    assert norm < 1e-12


def test_ppo_update_moves_parameters():
    policy = tiny_policy(4)
    trainer = Trainer(TrainConfig(stage="RL", n_low=8, n_high=8, lr=1e-2), policy)
    batch = compute_rewards_and_advantages(rollouts(trainer.behavior, seed=4))
    before = [p.detach().clone() for p in policy.parameters()]
    _, stats = ppo_update(policy, trainer.optimizer, batch)
    assert stats["dropped"] == 0 and stats["clip_frac"] == 0.0
    assert any(not torch.equal(a, b) for a, b in zip(before, policy.parameters()))


# --- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage="RL", group_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(ppo_clip=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(horizon=0)
    assert TrainConfig(stage="IL").behavior_refresh == 1
    assert TrainConfig(stage="RL").behavior_refresh == 20


def test_parse_config_text():
    pol, tr = parse_config_text("# comment\nd_model = 32\nstage = RL\nlr = 1e-3\n"
                                "use_recency_mask = false\ntime_limit = none\n")
    assert pol == {"d_model": 32, "use_recency_mask": False}
    assert tr == {"stage": "RL", "lr": 1e-3, "time_limit": None}
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("lr = 1\nbogus = 3\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("lr 1\n")


def test_presets_parse():
    for name in ("il_default", "rl_default", "smoke_il", "smoke_rl", "no_mask", "horizon_8"):
        pol, tr = parse_config_text(preset_path(name).read_text())
        PolicyConfig(**{**TINY.__dict__, **pol})
        TrainConfig(**tr)
    with pytest.raises(ConfigError, match="available"):
        preset_path("nope")


# --- driver -----------------------------------------------------------------

def small(stage, **kw):
    base = dict(stage=stage, epochs=2, updates_per_epoch=2, batch_size=2, n_low=7, n_high=9,
                group_size=3, horizon=4, lr=1e-3, seed=11)
    return TrainConfig(**{**base, **kw})


def test_lr_schedule_and_metrics(tmp_path):
    cfg = small("IL", epochs=3)
    last, metrics = train(cfg, tmp_path, TINY)
    assert [m["epoch"] for m in metrics] == [0, 1, 2]
    for e, m in enumerate(metrics):
        assert abs(m["lr"] - 1e-3 * 0.99 ** e) < 1e-12
    trainer, start = restore_trainer(cfg, last)
    assert start == 3 and abs(trainer.optimizer.lr - 1e-3 * 0.99 ** 3) < 1e-12
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3 and "seconds" in json.loads(lines[0])
    assert (tmp_path / "epoch0002.ckpt").exists()


def test_rl_from_il_keeps_optimizer_moments(tmp_path):
    last, _ = train(small("IL", epochs=1), tmp_path / "il", TINY)
    trainer, start = restore_trainer(small("RL"), last)
    assert start == 0
    states = [trainer.optimizer.opt.state[p] for p in trainer.optimizer.params]
    assert all(float(s["step"]) == 2 for s in states)
    assert any(s["exp_avg"].abs().sum() > 0 for s in states)
    assert any(s["exp_avg_sq"].abs().sum() > 0 for s in states)
    _, metrics = train(small("RL", epochs=1), tmp_path / "rl", TINY, checkpoint_in=last)
    assert set(metrics[0]) >= {"loss", "mean_reward", "mean_best_cost", "zero_signal_frac"}


@pytest.mark.parametrize("stage", ["IL", "RL"])
def test_resume_reproduces_next_epoch(tmp_path, stage):
    cfg = small(stage, epochs=2, behavior_refresh=3)
    _, full = train(cfg, tmp_path / "full", TINY)
    first, _ = train(small(stage, epochs=1, behavior_refresh=3), tmp_path / "part", TINY)
    _, resumed = train(cfg, tmp_path / "part", TINY, checkpoint_in=first)
    assert len(resumed) == 1
    strip = lambda m: {k: v for k, v in m.items() if "seconds" not in k}
    assert strip(resumed[0]) == strip(full[1])


def test_behavior_refresh_cadence():
    trainer = Trainer(small("RL", behavior_refresh=2), tiny_policy())
    same = lambda: all(torch.equal(a, b) for a, b in
                       zip(trainer.policy.parameters(), trainer.behavior.parameters()))
    trainer.rl_update(0, 0)
    assert not same()
    trainer.rl_update(0, 1)
    assert same() and trainer.episodes == 2


def test_checkpoint_mismatch(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, tiny_policy(), stage="RL")
    with pytest.raises(CheckpointError):
        restore_trainer(small("RL"), path, PolicyConfig(n_layers=1, d_model=32, d_hidden=16,
                                                        n_heads=2))
    with pytest.raises(CheckpointError, match="cannot continue"):
        restore_trainer(small("IL"), path)
