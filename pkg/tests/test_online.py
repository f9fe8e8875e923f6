import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madt import numerics as nx
from madt.dataset import generate
from madt.env import get_spec, load_scenario, run_episode
from madt.model import MADT, ModelConfig, masked_probs
from madt.numerics import Tensor
from madt.offline import NumericalAbort, OfflineConfig, pretrain, stack_rows
from madt.online import (PPOConfig, advantages_gae, advantages_mc, clipped_surrogate, collect, compute_advantage,
                         evaluate, finetune, ppo_update, random_policy_baseline, surrogate_objective)

SMALL = ModelConfig(n_layer=1, n_head=2, n_embd=16, context_length=8)


# --- advantages ------------------------------------------------------------------

def test_mc_advantage_example():
    ret, adv = advantages_mc([1.0, 1.0, 1.0], [2.0, 2.0, 2.0], 0.9)
    assert np.allclose(ret, [2.71, 1.9, 1.0])
    assert np.allclose(adv, [0.71, -0.10, -1.00])


def test_zero_discount():
    r, v = np.array([0.5, -1.0, 2.0]), np.array([0.1, 0.2, 0.3])
    assert np.allclose(advantages_mc(r, v, 0.0)[1], r - v)


def test_zero_rewards_zero_values():
    assert np.all(advantages_mc(np.zeros(4), np.zeros(4), 0.99)[1] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=30), st.floats(0.5, 1.0))
def test_gae_with_lambda_one_matches_mc(rs, gamma):
    r = np.array(rs)
    v = np.linspace(-1, 1, len(r))
    assert np.allclose(advantages_gae(r, v, gamma, 1.0)[1], advantages_mc(r, v, gamma)[1], atol=1e-9)


def test_compute_advantage_normalizes():
    model = MADT(SMALL, seed=0)
    buf = collect("2a2t", model, 6, np.random.default_rng(0))
    compute_advantage(buf, 0.99)
    flat = np.concatenate([ep.advantages.reshape(-1) for ep in buf.episodes])
    assert abs(flat.mean()) < 1e-9 and abs(flat.std() - 1.0) < 1e-6
    for ep in buf.episodes:
        assert np.isfinite(ep.returns).all() and np.isfinite(ep.advantages).all()


# --- surrogate --------------------------------------------------------------------

def test_clip_examples():
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_surrogate_matches_straight_line(w, a, eps):
    lo, hi = 1.0 - eps, 1.0 + eps
    c = lo if w < lo else hi if w > hi else w
    x, y = w * a, c * a
    expect = x if x < y else y
    assert clipped_surrogate(w, a, eps) == expect


def test_tensor_surrogate_agrees_with_numpy():
    rng = np.random.default_rng(0)
    logp = np.log(rng.uniform(0.05, 1.0, size=(4, 5)))
    old = np.log(rng.uniform(0.05, 1.0, size=(4, 5)))
    adv = rng.normal(size=(4, 5))
    valid = np.ones((4, 5), bool)
    obj, _ = surrogate_objective(Tensor(logp), old, adv, valid, 0.2)
    assert obj.item() == pytest.approx(clipped_surrogate(np.exp(logp - old), adv, 0.2).mean(), abs=1e-12)


def test_ratio_one_means_no_clipping_and_zero_objective():
    rng = np.random.default_rng(1)
    logp = np.log(rng.uniform(0.1, 1.0, size=(3, 6)))
    adv = rng.normal(size=(3, 6))
    adv = (adv - adv.mean()) / adv.std()
    obj, stats = surrogate_objective(Tensor(logp), logp.copy(), adv, np.ones((3, 6), bool), 0.2)
    assert abs(obj.item()) < 1e-12 and stats["clip_fraction"] == 0.0


def test_non_finite_ratio_aborts_with_pair():
    logp = np.zeros((1, 2))
    old = np.array([[0.0, -np.inf]])
    with pytest.raises(NumericalAbort, match="log pi"):
        surrogate_objective(Tensor(logp), old, np.ones((1, 2)), np.ones((1, 2), bool), 0.2)


def test_huge_clip_matches_policy_gradient_direction():
    model = MADT(SMALL, seed=3)
    buf = collect("2a2t", model, 4, np.random.default_rng(2))
    compute_advantage(buf, 0.99)
    rows = buf.rows()
    batch, actions, _ = stack_rows(rows)
    L = batch.valid.shape[1]
    old = np.stack([r.old_logp[:L] for r in rows])
    adv = np.stack([r.advantages[:L] for r in rows])

    def grad(objective):
        for p in model.parameters():
            p.zero_grad()
        logits, _ = model.forward(batch)
        logp = nx.gather(nx.log_softmax(logits), np.where(batch.valid, actions, 0))
        objective(logp).backward()
        return np.concatenate([np.zeros(p.data.size) if p.grad is None else p.grad.ravel()
                               for p in model.parameters()])

    n = batch.valid.sum()
    g_clip = grad(lambda lp: surrogate_objective(lp, old, adv, batch.valid, 1e9)[0])
    g_pg = grad(lambda lp: nx.scale(nx.sum_(nx.mul(lp, np.where(batch.valid, adv, 0.0))), 1.0 / n))
    cos = g_clip @ g_pg / (np.linalg.norm(g_clip) * np.linalg.norm(g_pg))
    assert cos > 0.999


# --- collection ----------------------------------------------------------------------

def test_greedy_collection_is_deterministic():
    model = MADT(SMALL, seed=0)
    a = collect("3a2t", model, 3, np.random.default_rng(5), mode="greedy")
    b = collect("3a2t", model, 3, np.random.default_rng(5), mode="greedy")
    for x, y in zip(a.episodes, b.episodes):
        assert np.array_equal(x.actions, y.actions) and np.array_equal(x.rewards, y.rewards)
        assert np.array_equal(x.tokens, y.tokens)


def test_collection_contract():
    model = MADT(SMALL, seed=1)
    buf = collect("4a3t", model, 5, np.random.default_rng(0))
    assert buf.n_episodes == 5
    for ep in buf.episodes:
        picked = np.take_along_axis(ep.avail, ep.actions[..., None], -1)[..., 0]
        assert picked.all()
        assert np.isfinite(ep.logp).all()
        assert ep.dones[-1] and not ep.dones[:-1].any()


def test_collection_truncates_at_max_timestep():
    cfg = ModelConfig(n_layer=1, n_head=2, n_embd=16, context_length=4, max_timestep=5)
    buf = collect("2a2t", MADT(cfg, seed=0), 3, np.random.default_rng(0), mode="greedy")
    for ep in buf.episodes:
        assert ep.length <= 6 and ep.timesteps.max() <= 5 and ep.dones[-1]


def test_rows_reproduce_behaviour_log_probs():
    model = MADT(SMALL, seed=2)
    buf = collect("2a2t", model, 3, np.random.default_rng(1))
    compute_advantage(buf, 0.99)
    rows = buf.rows()
    batch, actions, _ = stack_rows(rows)
    L = batch.valid.shape[1]
    with nx.no_grad():
        logits, _ = model.forward(batch)
    p = masked_probs(logits.data, batch.avail | ~batch.valid[..., None])
    lp = np.log(np.take_along_axis(p, actions[..., None], -1)[..., 0])
    old = np.stack([r.old_logp[:L] for r in rows])
    assert np.allclose(lp[batch.valid], old[batch.valid], atol=1e-10)


# --- update and fine-tuning ---------------------------------------------------------------

def test_ppo_update_keeps_masks_and_finiteness():
    model = MADT(SMALL, seed=0)
    cfg = PPOConfig(ppo_epochs=3, buffer_size=4, online_lr=1e-3)
    buf = compute_advantage(collect("2a2t", model, 4, np.random.default_rng(0)), 0.99)
    stats = ppo_update(buf, model, cfg)
    assert model.all_finite() and np.isfinite(list(stats.values())).all()
    batch, _, _ = stack_rows(buf.rows())
    p = model.probabilities(batch)
    assert np.all(p[~batch.avail & batch.valid[..., None]] == 0.0)


def test_reinforce_mode_runs():
    model = MADT(SMALL, seed=0)
    cfg = PPOConfig(algorithm="reinforce", buffer_size=4)
    buf = compute_advantage(collect("2a1t", model, 4, np.random.default_rng(0)), 0.99)
    assert "actor_objective" in ppo_update(buf, model, cfg)


def test_config_validation():
    for bad in (dict(clip_eps=0.0), dict(clip_eps=1.0), dict(gamma=0.0), dict(gamma=1.5), dict(algorithm="a2c")):
        with pytest.raises(ValueError):
            PPOConfig(**bad)


def test_budget_below_one_buffer():
    rep = finetune("2a2t", MADT(SMALL, seed=0), PPOConfig(buffer_size=8, eval_epochs=2, total_env_steps=20))
    assert rep.insufficient_budget
    assert len(rep.curve) == 2 and rep.curve[1].get("truncated")
    assert "actor_objective" not in rep.curve[1]
    assert rep.env_steps <= 20


def test_zero_budget_is_evaluation_only(tmp_path):
    rep = finetune("2a2t", MADT(SMALL, seed=0), PPOConfig(eval_epochs=3, total_env_steps=0), out_dir=tmp_path)
    assert rep.evaluation_only and len(rep.curve) == 1 and rep.env_steps == 0
    assert (tmp_path / "metrics.jsonl").is_file() and (tmp_path / "model.ckpt").is_file()


def test_same_seed_same_curve(tmp_path):
    base = MADT(SMALL, seed=4)
    cfg = PPOConfig(buffer_size=4, eval_epochs=2, total_env_steps=300, ppo_epochs=2, seed=7)
    a = finetune("2a1t", base.copy(), cfg, out_dir=tmp_path / "a")
    b = finetune("2a1t", base.copy(), cfg, out_dir=tmp_path / "b")
    assert a.curve == b.curve
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rec = json.loads((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()[1])
    for key in ("iteration", "env_steps", "mean_return", "success_rate"):
        assert key in rec


def test_thresholds_recorded():
    cfg = PPOConfig(buffer_size=4, eval_epochs=2, total_env_steps=200, thresholds=(-100.0, 1e6))
    rep = finetune("2a1t", MADT(SMALL, seed=0), cfg)
    assert rep.steps_to_threshold[-100.0] == 0
    assert rep.steps_to_threshold[1e6] is None


# --- evaluation ----------------------------------------------------------------------------

def test_random_weights_within_random_band():
    rb = random_policy_baseline("2a2t", 1000, seed=0)
    sd = np.std(rb.returns)
    ev = evaluate("2a2t", MADT(ModelConfig(), seed=0), 64, mode="sample", seed=1)
    lo, hi = np.min(rb.returns), np.max(rb.returns)
    assert lo <= ev.mean_return <= hi
    assert abs(ev.mean_return - rb.mean_return) < 4 * sd


def test_imitation_checkpoint_solves_trivial_scenario(tmp_path):
    cfg = tmp_path / "one.ini"
    cfg.write_text("[scenario]\nid = 1a1t\nn_agents = 1\nn_targets = 1\ngrid = 3\nsight = 2\n"
                   "max_episode_len = 8\nwin_bonus = 1\n")
    spec = load_scenario(cfg, register_it=False)
    model = MADT(SMALL, seed=0)
    pretrain(generate(spec, "good", 150, seed=0), model,
             OfflineConfig(learning_rate=3e-3, epochs=40, mini_batch_size=16, context_length=8),
             out=tmp_path / "m.ckpt")
    ev = evaluate(spec, MADT.load(tmp_path / "m.ckpt"), 64, seed=1)
    assert ev.success_rate == 1.0


def test_single_episode_evaluation_equals_rollout():
    model = MADT(SMALL, seed=0)
    ev = evaluate("2a2t", model, 1, env_seeds=[42])
    buf = collect("2a2t", model, 1, np.random.default_rng(0), mode="greedy", env_seeds=[42])
    assert ev.mean_return == buf.episode_returns()[0]
    assert ev.returns == [ev.mean_return]


def test_evaluate_needs_episodes():
    with pytest.raises(ValueError):
        evaluate("2a2t", MADT(SMALL), 0)


def test_greedy_rollout_matches_env_replay():
    model = MADT(SMALL, seed=5)
    buf = collect("2a2t", model, 1, np.random.default_rng(0), mode="greedy", env_seeds=[11])
    ep = buf.episodes[0]
    it = iter(ep.actions.T)
    total, won, T = run_episode(get_spec("2a2t"), 11, lambda o, env: next(it))
    assert total == pytest.approx(ep.team_return) and T == ep.length
