import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from madt.dataset import DataIntegrityError, Trajectory, generate, merge
from madt.env import DEFAULT_TRAIN_SCENARIOS, UniversalDims
from madt.model import MADT, ModelConfig
from madt.numerics import Tensor
from madt.offline import (NumericalAbort, OfflineConfig, ce_loss, chunk, discounted_returns, pretrain, stack_rows,
                          window_bounds)

DIMS = UniversalDims()
SMALL = ModelConfig(n_layer=1, n_head=2, n_embd=16, context_length=8)


def make_traj(T, done_at=None, seed=0):
    rng = np.random.default_rng(seed)
    dones = np.zeros(T, dtype=bool)
    dones[-1] = True
    if done_at is not None:
        dones[:] = False
        dones[done_at] = True
    avail = np.ones((T, DIMS.n_actions), dtype=bool)
    return Trajectory("2a2t", 0, rng.normal(size=(T, DIMS.state_dim)), rng.normal(size=(T, DIMS.obs_dim)),
                      rng.integers(0, DIMS.n_actions, size=T), rng.random(T), dones, avail)


# --- chunking -------------------------------------------------------------------

def test_chunk_lengths():
    rows = chunk(make_traj(5), 2, DIMS)
    assert [int(r.valid.sum()) for r in rows] == [2, 2, 1]
    assert rows[-1].valid.tolist() == [True, False]


def test_chunk_respects_done():
    rows = chunk(make_traj(2, done_at=1), 4, DIMS)
    assert len(rows) == 1 and int(rows[0].valid.sum()) == 2


def test_windows_never_cross_done():
    dones = np.array([0, 0, 1, 0, 0, 0, 1], dtype=bool)
    assert window_bounds(dones, 4) == [(0, 3), (3, 7)]
    assert window_bounds(dones, 2) == [(0, 2), (2, 3), (3, 5), (5, 7)]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 16), st.integers(0, 1000))
def test_chunk_roundtrip(T, C, seed):
    tr = make_traj(T, seed=seed)
    rows = chunk(tr, C, DIMS)
    acts = np.concatenate([r.actions[r.valid] for r in rows])
    ts = np.concatenate([r.timesteps[r.valid] for r in rows])
    obs = np.concatenate([r.tokens[r.valid][:, DIMS.state_dim:DIMS.state_dim + DIMS.obs_dim] for r in rows])
    assert np.array_equal(acts, tr.actions) and np.array_equal(ts, tr.timesteps) and np.array_equal(obs, tr.obs)
    assert all(len(r.valid) == C for r in rows)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)), st.floats(0.0, 1.0))
def test_discounted_returns_brute_force(r, gamma):
    fast = discounted_returns(r, gamma)
    slow = [sum(gamma ** (k - t) * r[k] for k in range(t, len(r))) for t in range(len(r))]
    assert np.allclose(fast, slow, rtol=0, atol=1e-10)


# --- loss ----------------------------------------------------------------------------

def _logits(x):
    return Tensor(np.asarray(x, dtype=np.float64)[None, None], requires_grad=True)


def test_ce_perfect_predictor_is_zero():
    loss = ce_loss(_logits([0.0, 800.0, 0.0, 0.0]), np.array([[1]]), np.ones((1, 1, 4), bool), np.ones((1, 1), bool))
    assert loss.item() == 0.0


def test_ce_uniform_four():
    loss = ce_loss(_logits(np.zeros(4)), np.array([[2]]), np.ones((1, 1, 4), bool), np.ones((1, 1), bool))
    assert abs(loss.item() - 1.386294) < 1e-6


def test_ce_uniform_two_legal():
    avail = np.array([[[True, False, True, False]]])
    loss = ce_loss(_logits(np.zeros(4)), np.array([[2]]), avail, np.ones((1, 1), bool))
    assert abs(loss.item() - 0.693147) < 1e-6


@settings(max_examples=100, deadline=None)
@given(arrays(bool, (3, 4, 8)), st.integers(0, 1000))
def test_ce_uniform_legal_is_log_k(avail, seed):
    avail[..., 0] |= ~avail.any(-1)
    rng = np.random.default_rng(seed)
    targets = np.array([[rng.choice(np.flatnonzero(a)) for a in row] for row in avail])
    loss = ce_loss(Tensor(np.zeros((3, 4, 8))), targets, avail, np.ones((3, 4), bool)).item()
    assert abs(loss - np.log(avail.sum(-1)).mean()) < 1e-9


def test_ce_ignores_padding_in_denominator():
    avail = np.ones((1, 2, 4), bool)
    valid = np.array([[True, False]])
    loss = ce_loss(Tensor(np.zeros((1, 2, 4))), np.array([[0, 3]]), avail, valid)
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_ce_illegal_target_names_location():
    avail = np.ones((1, 3, 4), bool)
    avail[0, 2, 1] = False
    with pytest.raises(DataIntegrityError, match=r"trajectory \('2a2t', 0, 0\) at timestep 2"):
        ce_loss(Tensor(np.zeros((1, 3, 4))), np.array([[0, 0, 1]]), avail, np.ones((1, 3), bool),
                sources=[("2a2t", 0, 0)])


def test_no_gradient_from_padding():
    rng = np.random.default_rng(0)
    model = MADT(SMALL, seed=1)
    rows = chunk(make_traj(5, seed=3), 4, DIMS)
    batch, actions, _ = stack_rows(rows, trim=False)

    def grads(tokens, actions):
        b = type(batch)(tokens, batch.timesteps, batch.avail, batch.valid)
        for p in model.parameters():
            p.zero_grad()
        logits, _ = model.forward(b)
        ce_loss(logits, actions, b.avail, b.valid).backward()
        return {k: np.zeros(p.shape) if p.grad is None else p.grad.copy() for k, p in model.params.items()}

    g1 = grads(batch.tokens, actions)
    tok2, act2 = batch.tokens.copy(), actions.copy()
    pad = ~batch.valid
    tok2[pad] = rng.normal(size=tok2[pad].shape)
    act2[pad] = 5
    g2 = grads(tok2, act2)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


# --- training --------------------------------------------------------------------------

def test_pretrain_reaches_high_accuracy_on_scripted_data():
    ds = generate("2a1t", "good", 200, seed=1)
    model = MADT(ModelConfig(), seed=0)
    rep = pretrain(ds, model, OfflineConfig(learning_rate=1e-3, epochs=20, mini_batch_size=16))
    assert max(rep.accuracies) >= 0.95
    assert all(np.isfinite(l) and l >= 0 for l in rep.losses)


def test_empty_dataset_raises():
    with pytest.raises(ValueError, match="no trajectories"):
        pretrain(generate("2a2t", "good", 0, seed=0), MADT(SMALL), OfflineConfig(epochs=1))


def test_equal_seeds_give_identical_checkpoints(tmp_path):
    ds = generate("2a2t", "medium", 10, seed=2)
    for name in ("a", "b"):
        pretrain(ds, MADT(SMALL, seed=4), OfflineConfig(epochs=2, seed=9, context_length=8),
                 out=tmp_path / f"{name}.ckpt", metrics_path=tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    recs = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [1, 2]


@pytest.mark.parametrize("sid,tier", [(s, "good") for s in DEFAULT_TRAIN_SCENARIOS] +
                         [("2a2t", "medium"), ("2a2t", "poor")])
def test_loss_falls_over_ten_epochs(sid, tier):
    ds = generate(sid, tier, 20, seed=5)
    ud = merge([ds], DIMS)
    for seed in range(5):
        rep = pretrain(ud, MADT(SMALL, seed=seed), OfflineConfig(learning_rate=1e-3, epochs=10, seed=seed,
                                                                 mini_batch_size=16, context_length=8))
        assert rep.losses[-1] < rep.losses[0]


def test_nan_loss_aborts_with_dump(tmp_path):
    model = MADT(SMALL, seed=0)
    model.params["head.b"].data[:] = np.nan
    with pytest.raises(NumericalAbort):
        pretrain(generate("2a2t", "good", 2, seed=0), model, OfflineConfig(epochs=1, context_length=8),
                 out=tmp_path / "m.ckpt")
    dumps = list(tmp_path.glob("*.npz"))
    assert len(dumps) == 1
    assert "tokens" in np.load(dumps[0]).files


def test_critic_learns_return_to_go():
    ds = generate("2a1t", "good", 50, seed=3)
    model = MADT(SMALL, seed=0)
    rep = pretrain(ds, model, OfflineConfig(learning_rate=1e-3, epochs=15, mini_batch_size=16, context_length=8))
    assert rep.epochs[-1]["value_loss"] < rep.epochs[0]["value_loss"]


def test_config_validation():
    with pytest.raises(ValueError):
        OfflineConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        OfflineConfig(mini_batch_size=0)
