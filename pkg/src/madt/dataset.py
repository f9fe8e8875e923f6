"""Offline trajectory datasets: generation, on-disk format, statistics and
multi-scenario unification.

File layout (one file per scenario and tier)::

    b"MADT-DATA-1\\n"
    uint64 LE  manifest length, then the manifest as UTF-8 JSON
    repeated episode blocks:
        uint64 LE  block length in bytes
        uint32 LE  T, n_agents, state_dim, obs_dim, n_actions, won
        float64    states   [T, state_dim]
        float64    obs      [n_agents, T, obs_dim]
        float64    rewards  [n_agents, T]
        int32      actions  [n_agents, T]
        int32      dones    [T]
        int32      avail    [n_agents, T, n_actions]
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import GridTeamEnv, ScriptedPolicy, TaskSpec, UniversalDims, get_spec

DATA_MAGIC = b"MADT-DATA-1\n"
SCHEMA_VERSION = 1
_HEAD = struct.Struct("<6I")


class DataIntegrityError(ValueError):
    pass


class UnificationError(ValueError):
    pass


@dataclass
class TimestepRecord:
    state: np.ndarray
    obs: np.ndarray
    action: int
    reward: float
    done: bool
    avail: np.ndarray


@dataclass
class Trajectory:
    """One agent's records over one episode, stored column-wise."""

    scenario_id: str
    agent_id: int
    states: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    avail: np.ndarray
    timesteps: np.ndarray | None = None

    def __post_init__(self):
        if self.timesteps is None:
            self.timesteps = np.arange(len(self.actions), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, t: int) -> TimestepRecord:
        return TimestepRecord(
            self.states[t], self.obs[t], int(self.actions[t]), float(self.rewards[t]),
            bool(self.dones[t]), self.avail[t],
        )


@dataclass
class Episode:
    states: np.ndarray  # [T, S]
    obs: np.ndarray  # [N, T, O]
    actions: np.ndarray  # [N, T]
    rewards: np.ndarray  # [N, T]
    dones: np.ndarray  # [T]
    avail: np.ndarray  # [N, T, A]
    won: bool = False

    @property
    def length(self) -> int:
        return len(self.dones)

    @property
    def n_agents(self) -> int:
        return self.actions.shape[0]

    @property
    def team_return(self) -> float:
        return float(self.rewards[0].sum()) if self.length else 0.0

    def trajectories(self, scenario_id: str) -> list[Trajectory]:
        return [
            Trajectory(scenario_id, i, self.states, self.obs[i], self.actions[i], self.rewards[i],
                       self.dones, self.avail[i])
            for i in range(self.n_agents)
        ]


@dataclass
class DatasetManifest:
    scenario_id: str
    tier: str
    n_episodes: int
    n_samples: int
    reward_mean: float
    reward_std: float
    return_mean: float
    return_std: float
    win_rate: float
    generator_seed: int | None
    schema_version: int = SCHEMA_VERSION


@dataclass
class Dataset:
    spec: TaskSpec
    tier: str
    episodes: list[Episode]
    seed: int | None = None
    stored_manifest: DatasetManifest | None = None

    def trajectories(self) -> list[Trajectory]:
        return [tr for ep in self.episodes for tr in ep.trajectories(self.spec.scenario_id)]

    def manifest(self) -> DatasetManifest:
        return build_manifest(self)


# ---------------------------------------------------------------------------
# statistics


def stats(values: Iterable[float]) -> tuple[int, float, float]:
    """Count, mean and population standard deviation."""
    v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return 0, 0.0, 0.0
    m = float(v.mean())
    return int(v.size), m, float(np.sqrt(np.mean((v - m) ** 2)))


def build_manifest(ds: Dataset) -> DatasetManifest:
    rewards = np.concatenate([ep.rewards.reshape(-1) for ep in ds.episodes]) if ds.episodes else np.zeros(0)
    n, rmean, rstd = stats(rewards)
    _, gmean, gstd = stats([ep.team_return for ep in ds.episodes])
    wins = [ep.won for ep in ds.episodes]
    return DatasetManifest(
        scenario_id=ds.spec.scenario_id,
        tier=ds.tier,
        n_episodes=len(ds.episodes),
        n_samples=n,
        reward_mean=rmean,
        reward_std=rstd,
        return_mean=gmean,
        return_std=gstd,
        win_rate=float(np.mean(wins)) if wins else 0.0,
        generator_seed=ds.seed,
    )


# ---------------------------------------------------------------------------
# generation


def rollout_scripted(spec: TaskSpec, tier: str, env_seed: int, rng: np.random.Generator) -> Episode:
    env = GridTeamEnv(spec)
    pol = ScriptedPolicy(tier, spec)
    out = env.reset(env_seed)
    states, obs, acts, rews, dones, avails = [], [], [], [], [], []
    while not out.done:
        joint = np.array(
            [pol(out.obs[i], out.avail[i], rng, state=out.state, agent_id=i) for i in range(spec.n_agents)]
        )
        states.append(out.state)
        obs.append(out.obs)
        avails.append(out.avail)
        acts.append(joint)
        out = env.step(joint)
        rews.append(out.reward)
        dones.append(out.done)
    T = len(acts)
    return Episode(
        states=np.array(states).reshape(T, spec.state_dim),
        obs=np.array(obs).reshape(T, spec.n_agents, spec.obs_dim).transpose(1, 0, 2).copy(),
        actions=np.array(acts, dtype=np.int64).reshape(T, spec.n_agents).T.copy(),
        rewards=np.tile(np.array(rews, dtype=np.float64), (spec.n_agents, 1)),
        dones=np.array(dones, dtype=bool),
        avail=np.array(avails, dtype=bool).reshape(T, spec.n_agents, spec.n_actions).transpose(1, 0, 2).copy(),
        won=out.won,
    )


def episode_seeds(seed: int, n: int) -> list[tuple[int, np.random.Generator]]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [(int(c.generate_state(1)[0]), np.random.default_rng(c)) for c in children]


def generate(scenario, tier: str, n_episodes: int, seed: int, out_dir=None) -> Dataset:
    spec = get_spec(scenario)
    episodes = [rollout_scripted(spec, tier, env_seed, rng) for env_seed, rng in episode_seeds(seed, n_episodes)]
    ds = Dataset(spec, tier, episodes, seed)
    if out_dir is not None:
        write_dataset(ds, Path(out_dir) / dataset_filename(spec.scenario_id, tier))
    return ds


def dataset_filename(scenario_id: str, tier: str) -> str:
    return f"{scenario_id}-{tier}.madt"


# ---------------------------------------------------------------------------
# serialization


def _episode_block(ep: Episode) -> bytes:
    n, T = ep.actions.shape
    head = _HEAD.pack(T, n, ep.states.shape[-1], ep.obs.shape[-1], ep.avail.shape[-1], int(ep.won))
    return b"".join([
        head,
        np.ascontiguousarray(ep.states, dtype="<f8").tobytes(),
        np.ascontiguousarray(ep.obs, dtype="<f8").tobytes(),
        np.ascontiguousarray(ep.rewards, dtype="<f8").tobytes(),
        np.ascontiguousarray(ep.actions, dtype="<i4").tobytes(),
        np.ascontiguousarray(ep.dones, dtype="<i4").tobytes(),
        np.ascontiguousarray(ep.avail, dtype="<i4").tobytes(),
    ])


def _read_block(buf: memoryview) -> Episode:
    T, n, S, O, A, won = _HEAD.unpack_from(buf, 0)
    pos = _HEAD.size

    def take(dtype, shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += arr.nbytes
        return arr

    ep = Episode(
        states=take("<f8", (T, S)).astype(np.float64),
        obs=take("<f8", (n, T, O)).astype(np.float64),
        rewards=take("<f8", (n, T)).astype(np.float64),
        actions=take("<i4", (n, T)).astype(np.int64),
        dones=take("<i4", (T,)).astype(bool),
        avail=take("<i4", (n, T, A)).astype(bool),
        won=bool(won),
    )
    if pos != len(buf):
        raise DataIntegrityError(f"episode block has {len(buf) - pos} trailing bytes")
    return ep


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = json.dumps(asdict(ds.manifest()), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(DATA_MAGIC)
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for ep in ds.episodes:
                block = _episode_block(ep)
                fh.write(struct.pack("<Q", len(block)))
                fh.write(block)
    except OSError as exc:
        raise OSError(f"writing dataset {path}: {exc}") from exc
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"reading dataset {path}: {exc}") from exc
    if not raw.startswith(DATA_MAGIC):
        raise DataIntegrityError(f"{path}: not a MADT dataset file")
    try:
        pos = len(DATA_MAGIC)
        (mlen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        manifest = DatasetManifest(**json.loads(raw[pos:pos + mlen].decode()))
        pos += mlen
        view = memoryview(raw)
        episodes = []
        while pos < len(raw):
            (blen,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if pos + blen > len(raw):
                raise DataIntegrityError(f"{path}: truncated episode block {len(episodes)}")
            episodes.append(_read_block(view[pos:pos + blen]))
            pos += blen
    except (struct.error, ValueError, TypeError) as exc:
        if isinstance(exc, DataIntegrityError):
            raise
        raise DataIntegrityError(f"{path}: corrupt dataset ({exc})") from None
    return Dataset(get_spec(manifest.scenario_id), manifest.tier, episodes, manifest.generator_seed, manifest)


def read_manifest(path) -> DatasetManifest:
    with open(path, "rb") as fh:
        if fh.read(len(DATA_MAGIC)) != DATA_MAGIC:
            raise DataIntegrityError(f"{path}: not a MADT dataset file")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        return DatasetManifest(**json.loads(fh.read(mlen).decode()))


def verify_manifest(path) -> DatasetManifest:
    """Recompute statistics from the records and compare with the stored header."""
    ds = read_dataset(path)
    stored, fresh = ds.stored_manifest, ds.manifest()
    for key in ("n_episodes", "n_samples"):
        if getattr(stored, key) != getattr(fresh, key):
            raise DataIntegrityError(f"{path}: manifest {key} {getattr(stored, key)} != {getattr(fresh, key)}")
    for key in ("reward_mean", "reward_std", "return_mean", "return_std"):
        if abs(getattr(stored, key) - getattr(fresh, key)) > 1e-9:
            raise DataIntegrityError(f"{path}: manifest {key} disagrees with records")
    return stored


def find_datasets(data_dir) -> list[Path]:
    p = Path(data_dir)
    return sorted(p.glob("*.madt")) if p.is_dir() else [p]


# ---------------------------------------------------------------------------
# unification across scenarios


def pad_features(vec: np.ndarray, target_dim: int, scenario_id: str = "?") -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] > target_dim:
        raise UnificationError(f"scenario {scenario_id}: feature width {vec.shape[-1]} exceeds {target_dim}")
    pad = [(0, 0)] * (vec.ndim - 1) + [(0, target_dim - vec.shape[-1])]
    return np.pad(vec, pad)


def unify_actions(mask: np.ndarray, action, target_n: int):
    """Widen an availability mask; scenario actions keep their indices."""
    mask = np.asarray(mask, dtype=bool)
    action = np.asarray(action, dtype=np.int64)
    if mask.shape[-1] > target_n:
        raise UnificationError(f"action space of width {mask.shape[-1]} exceeds {target_n}")
    if np.any(action >= target_n) or np.any(action < 0):
        raise DataIntegrityError(f"action index out of range for {target_n} unified actions")
    pad = [(0, 0)] * (mask.ndim - 1) + [(0, target_n - mask.shape[-1])]
    return np.pad(mask, pad, constant_values=False), action.copy()


@dataclass(frozen=True)
class RewardScale:
    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise UnificationError(f"degenerate reward range [{self.low}, {self.high}]")

    @property
    def width(self) -> float:
        return self.high - self.low

    def scale(self, r):
        return (np.asarray(r, dtype=np.float64) - self.low) / self.width

    def unscale(self, r):
        return np.asarray(r, dtype=np.float64) * self.width + self.low


def scale_rewards(rewards, spec: TaskSpec) -> np.ndarray:
    return RewardScale(*spec.reward_range).scale(rewards)


@dataclass
class UnifiedDataset:
    trajectories: list[Trajectory]
    specs: list[TaskSpec]
    dims: UniversalDims
    reward_scales: dict[str, RewardScale] = field(default_factory=dict)
    action_maps: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def raw_rewards(self, traj: Trajectory) -> np.ndarray:
        return self.reward_scales[traj.scenario_id].unscale(traj.rewards)

    def validate(self) -> None:
        d = self.dims
        for tr in self.trajectories:
            where = f"{tr.scenario_id}/agent{tr.agent_id}"
            if tr.states.shape[-1] != d.state_dim or tr.obs.shape[-1] != d.obs_dim or tr.avail.shape[-1] != d.n_actions:
                raise DataIntegrityError(f"{where}: record not in universal dims")
            n_act = self.action_maps[tr.scenario_id]
            if tr.avail[:, len(n_act):].any():
                raise DataIntegrityError(f"{where}: padding action marked available")
            if np.any(tr.actions >= len(n_act)):
                raise DataIntegrityError(f"{where}: padding action used as a target")
            legal = tr.avail[np.arange(len(tr)), tr.actions]
            if not legal.all():
                t = int(np.flatnonzero(~legal)[0])
                raise DataIntegrityError(f"{where}: illegal action at timestep {t}")
            if tr.rewards.min(initial=0.0) < 0.0 or tr.rewards.max(initial=0.0) > 1.0:
                raise DataIntegrityError(f"{where}: scaled reward outside [0, 1]")


def unify_trajectory(tr: Trajectory, spec: TaskSpec, dims: UniversalDims) -> Trajectory:
    mask, actions = unify_actions(tr.avail, tr.actions, dims.n_actions)
    return Trajectory(
        scenario_id=spec.scenario_id,
        agent_id=tr.agent_id,
        states=pad_features(tr.states, dims.state_dim, spec.scenario_id),
        obs=pad_features(tr.obs, dims.obs_dim, spec.scenario_id),
        actions=actions,
        rewards=scale_rewards(tr.rewards, spec),
        dones=tr.dones.copy(),
        avail=mask,
        timesteps=tr.timesteps.copy(),
    )


def merge(datasets: Sequence[Dataset], dims: UniversalDims, episode_nums: Sequence[int] | None = None) -> UnifiedDataset:
    if episode_nums is not None and len(episode_nums) != len(datasets):
        raise UnificationError("episode_nums must give one count per dataset")
    out: list[Trajectory] = []
    specs, scales, maps = [], {}, {}
    for k, ds in enumerate(datasets):
        spec = ds.spec
        try:
            dims.check(spec)
        except ValueError as exc:
            raise UnificationError(str(exc)) from None
        episodes = ds.episodes if episode_nums is None else ds.episodes[: episode_nums[k]]
        for ep in episodes:
            for tr in ep.trajectories(spec.scenario_id):
                out.append(unify_trajectory(tr, spec, dims))
        if spec not in specs:
            specs.append(spec)
        scales[spec.scenario_id] = RewardScale(*spec.reward_range)
        maps[spec.scenario_id] = list(range(spec.n_actions))
    return UnifiedDataset(out, specs, dims, scales, maps)


def format_stats_table(manifests: Sequence[DatasetManifest]) -> str:
    """Per-dataset summary: per-step reward and per-episode return."""
    rows = [("Maps", "Quality", "# Samples", "Reward mean (±std)", "Return mean (±std)")]
    for m in manifests:
        rows.append((m.scenario_id, m.tier, str(m.n_samples),
                     f"{m.reward_mean:.4f} (± {m.reward_std:.4f})",
                     f"{m.return_mean:.2f} (± {m.return_std:.2f})"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
