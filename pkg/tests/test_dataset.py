import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madt.dataset import (DataIntegrityError, Dataset, RewardScale, UnificationError, format_stats_table, generate,
                          merge, pad_features, read_dataset, read_manifest, stats, unify_actions, verify_manifest,
                          write_dataset)
from madt.env import DEFAULT_TRAIN_SCENARIOS, UniversalDims, get_spec, scenario_registry
from madt.model import MADT, ModelConfig, build_tokens, ContextBatch
from madt import numerics as nx

DIMS = UniversalDims()


def test_pad_features():
    assert pad_features([1, 2, 3], 5).tolist() == [1, 2, 3, 0, 0]
    assert pad_features([1, 2, 3], 3).tolist() == [1, 2, 3]
    assert pad_features(np.zeros(2), 4).tolist() == [0, 0, 0, 0]


def test_pad_features_overflow_names_scenario():
    with pytest.raises(UnificationError, match="big"):
        pad_features(np.zeros(6), 4, scenario_id="big")


def test_unify_actions():
    mask, a = unify_actions(np.array([1, 1, 0], dtype=bool), 1, 5)
    assert mask.tolist() == [True, True, False, False, False]
    assert int(a) == 1


def test_unify_actions_rejects_out_of_range():
    with pytest.raises(DataIntegrityError):
        unify_actions(np.ones(3, dtype=bool), 5, 5)


def test_reward_scale_examples():
    s = RewardScale(0.0, 20.0)
    assert s.scale(10.0) == 0.5
    assert s.scale(0.0) == 0.0 and s.scale(20.0) == 1.0


def test_reward_scale_degenerate():
    with pytest.raises(UnificationError):
        RewardScale(1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 100), st.lists(st.floats(-100, 100), min_size=1, max_size=50))
def test_reward_scale_roundtrip(low, width, rs):
    s = RewardScale(low, low + width)
    r = np.array(rs)
    assert np.allclose(s.unscale(s.scale(r)), r, rtol=0, atol=1e-12 * max(1.0, np.abs(r).max()))


def test_stats_examples():
    assert stats([1, 1, 1]) == (3, 1.0, 0.0)
    assert stats([0, 2]) == (2, 1.0, 1.0)


def test_stats_matches_two_pass_on_large_sample():
    v = np.random.default_rng(0).normal(3.0, 2.0, size=100_000)
    n, m, s = stats(v)
    mean = sum(v) / len(v)
    var = sum((x - mean) ** 2 for x in v) / len(v)
    assert n == 100_000 and abs(m - mean) < 1e-9 and abs(s - var ** 0.5) < 1e-9


def test_empty_dataset(tmp_path):
    ds = generate("2a2t", "good", 0, seed=0, out_dir=tmp_path)
    assert ds.manifest().n_samples == 0
    back = read_dataset(tmp_path / "2a2t-good.madt")
    assert back.episodes == [] and back.manifest().n_samples == 0


def test_manifest_matches_brute_force():
    ds = generate("3a2t", "medium", 30, seed=4)
    m = ds.manifest()
    recs = [r for tr in ds.trajectories() for r in (tr[t].reward for t in range(len(tr)))]
    mean = sum(recs) / len(recs)
    std = (sum((x - mean) ** 2 for x in recs) / len(recs)) ** 0.5
    assert m.n_samples == len(recs) == sum(len(tr) for tr in ds.trajectories())
    assert abs(m.reward_mean - mean) < 1e-9 and abs(m.reward_std - std) < 1e-9


def test_good_manifest_beats_poor():
    for sid in DEFAULT_TRAIN_SCENARIOS:
        good = generate(sid, "good", 40, seed=2).manifest()
        poor = generate(sid, "poor", 40, seed=2).manifest()
        assert good.return_mean > poor.return_mean


def test_roundtrip_is_bitwise(tmp_path):
    ds = generate("4a3t", "poor", 10, seed=7)
    p = write_dataset(ds, tmp_path / "x.madt")
    back = read_dataset(p)
    assert len(back.episodes) == len(ds.episodes)
    for a, b in zip(ds.episodes, back.episodes):
        for f in ("states", "obs", "actions", "rewards", "dones", "avail"):
            x, y = getattr(a, f), getattr(b, f)
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes(), f
        assert a.won == b.won
    assert read_manifest(p) == ds.manifest()
    verify_manifest(p)


def test_tampered_file_fails_verification(tmp_path):
    ds = generate("2a2t", "good", 5, seed=1)
    p = write_dataset(ds, tmp_path / "x.madt")
    raw = bytearray(p.read_bytes())
    at = bytes(raw).find(ds.episodes[0].rewards.astype("<f8").tobytes())
    raw[at + 6] ^= 0x0F  # perturb the first stored reward
    p.write_bytes(bytes(raw))
    with pytest.raises(DataIntegrityError):
        verify_manifest(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.madt"
    p.write_bytes(b"not a dataset")
    with pytest.raises(DataIntegrityError):
        read_dataset(p)


def test_merge_single_dataset_matches_up_to_padding_and_scaling():
    ds = generate("2a1t", "good", 5, seed=3)
    spec = ds.spec
    ud = merge([ds], DIMS)
    raw = ds.trajectories()
    assert ud.n_samples == sum(len(t) for t in raw)
    for r, u in zip(raw, ud.trajectories):
        assert np.array_equal(u.obs[:, :spec.obs_dim], r.obs) and not u.obs[:, spec.obs_dim:].any()
        assert np.array_equal(u.states[:, :spec.state_dim], r.states)
        assert np.array_equal(u.actions, r.actions)
        assert np.allclose(ud.raw_rewards(u), r.rewards, atol=1e-12)


def test_merge_counts_and_invariants():
    dsets = [generate(sid, "medium", 8, seed=i) for i, sid in enumerate(DEFAULT_TRAIN_SCENARIOS)]
    ud = merge(dsets, DIMS, episode_nums=[8, 4, 8, 2, 8])
    expected = sum(sum(len(t) for ep in ds.episodes[:n] for t in ep.trajectories(ds.spec.scenario_id))
                   for ds, n in zip(dsets, [8, 4, 8, 2, 8]))
    assert ud.n_samples == expected
    ud.validate()
    for tr in ud.trajectories:
        n_act = get_spec(tr.scenario_id).n_actions
        assert not tr.avail[:, n_act:].any()
        assert (tr.actions < n_act).all()
        assert tr.rewards.min() >= 0.0 and tr.rewards.max() <= 1.0


def test_merge_rejects_oversized_scenario():
    small = UniversalDims(state_dim=8, obs_dim=10, n_actions=6, max_agents=2)
    with pytest.raises(UnificationError):
        merge([generate("3a3t", "good", 1, seed=0)], small)


def test_padded_slots_do_not_change_actions_when_their_weights_are_zero():
    ds = generate("2a1t", "good", 3, seed=5)
    spec = ds.spec
    model = MADT(ModelConfig(n_layer=1, n_head=1, n_embd=8, context_length=32), seed=1)
    w = model.params["embed.w"].data
    w[spec.state_dim:DIMS.state_dim] = 0.0
    w[DIMS.state_dim + spec.obs_dim:DIMS.state_dim + DIMS.obs_dim] = 0.0
    ud = merge([ds], DIMS)
    tr = ud.trajectories[0]
    tok = build_tokens(tr.states, tr.obs, tr.agent_id, DIMS)
    junk = tok.copy()
    rng = np.random.default_rng(0)
    junk[:, spec.state_dim:DIMS.state_dim] = rng.normal(size=(len(tr), DIMS.state_dim - spec.state_dim))
    junk[:, DIMS.state_dim + spec.obs_dim:DIMS.state_dim + DIMS.obs_dim] = rng.normal(
        size=(len(tr), DIMS.obs_dim - spec.obs_dim))
    out = []
    for tokens in (tok, junk):
        batch = ContextBatch(tokens[None], tr.timesteps[None], tr.avail[None], np.ones((1, len(tr)), dtype=bool))
        with nx.no_grad():
            out.append(model.forward(batch)[0].data)
    assert np.array_equal(out[0], out[1])


def test_stats_table_layout():
    ms = [generate("2a2t", t, 5, seed=0).manifest() for t in ("good", "poor")]
    text = format_stats_table(ms)
    header = text.splitlines()[0]
    for col in ("Maps", "Quality", "# Samples", "Reward mean"):
        assert col in header
    assert str(ms[0].n_samples) in text


def test_registry_fits_default_dims():
    for spec in scenario_registry():
        DIMS.check(spec)


def test_dataset_object_fields():
    ds = generate("2a2t", "good", 2, seed=9)
    assert isinstance(ds, Dataset) and ds.seed == 9
    ep = ds.episodes[0]
    assert ep.obs.shape[0] == ds.spec.n_agents
    assert ep.dones[-1] and not ep.dones[:-1].any()


def test_truncated_file(tmp_path):
    p = write_dataset(generate("2a2t", "good", 3, seed=1), tmp_path / "x.madt")
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(DataIntegrityError):
        read_dataset(p)
