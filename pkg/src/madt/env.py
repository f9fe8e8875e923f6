"""Cooperative reach-and-tag grid task.

Agents move on a bordered square grid and must tag every target by standing on
it and issuing that target's tag action. The team shares one reward: a small
time penalty each step, shaping for reducing the distance between targets and
their nearest agent, a bonus per tag and a terminal bonus on the win.

Action layout is shared by every scenario: 0 no-op, 1 up, 2 down, 3 right,
4 left, then ``5 + k`` tags target ``k``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Callable

import numpy as np

NOOP, UP, DOWN, RIGHT, LEFT = range(5)
N_MOVE_ACTIONS = 5
MOVES = {UP: (0, 1), DOWN: (0, -1), RIGHT: (1, 0), LEFT: (-1, 0)}


class UnknownScenarioError(KeyError):
    pass


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    scenario_id: str
    n_agents: int
    n_targets: int
    grid: int
    sight: int
    max_episode_len: int
    win_bonus: float
    tag_reward: float = 1.0
    progress_coef: float = 0.1
    time_penalty: float = -0.01
    agent_cells: tuple | None = None
    target_cells: tuple | None = None
    win_predicate: str = "all targets tagged"

    def __post_init__(self):
        if self.n_agents < 1 or self.n_targets < 1:
            raise ValueError(f"{self.scenario_id}: need at least one agent and one target")
        if self.n_agents + self.n_targets > self.grid * self.grid:
            raise ValueError(f"{self.scenario_id}: grid {self.grid} too small for all entities")
        lo, hi = self.reward_range
        if not lo < hi:
            raise ValueError(f"{self.scenario_id}: degenerate reward range")

    @property
    def n_actions(self) -> int:
        return N_MOVE_ACTIONS + self.n_targets

    @property
    def obs_dim(self) -> int:
        return 2 + 4 * self.n_targets + 3 * (self.n_agents - 1)

    @property
    def state_dim(self) -> int:
        return 3 * self.n_targets + 2 * self.n_agents

    @property
    def reward_range(self) -> tuple[float, float]:
        swing = self.progress_coef * self.n_targets
        return (
            self.time_penalty - swing,
            self.time_penalty + swing + self.tag_reward * self.n_targets + self.win_bonus,
        )

    @property
    def max_return(self) -> float:
        """Loose upper bound on an episode return."""
        return self.max_episode_len * self.reward_range[1]


@dataclass
class StepOutcome:
    state: np.ndarray
    obs: np.ndarray  # [n_agents, obs_dim]
    avail: np.ndarray  # [n_agents, n_actions] bool
    reward: float
    done: bool
    won: bool


@dataclass(frozen=True)
class UniversalDims:
    """Shared input/output extents of a multi-scenario model."""

    state_dim: int = 18
    obs_dim: int = 24
    n_actions: int = 8
    max_agents: int = 4

    def fits(self, spec: TaskSpec) -> bool:
        return (
            spec.state_dim <= self.state_dim
            and spec.obs_dim <= self.obs_dim
            and spec.n_actions <= self.n_actions
            and spec.n_agents <= self.max_agents
        )

    def check(self, spec: TaskSpec) -> None:
        if not self.fits(spec):
            raise ValueError(
                f"scenario {spec.scenario_id} (state {spec.state_dim}, obs {spec.obs_dim}, "
                f"actions {spec.n_actions}, agents {spec.n_agents}) exceeds universal dims {self}"
            )

    @property
    def token_dim(self) -> int:
        return self.state_dim + self.obs_dim + self.max_agents


_REGISTRY: dict[str, TaskSpec] = {}

DEFAULT_TRAIN_SCENARIOS = ("2a2t", "2a1t", "3a2t", "3a3t", "4a3t")
HOLDOUT_SCENARIO = "4a2t"


def register(spec: TaskSpec) -> TaskSpec:
    _REGISTRY[spec.scenario_id] = spec
    return spec


for _spec in (
    TaskSpec("2a2t", n_agents=2, n_targets=2, grid=5, sight=4, max_episode_len=20, win_bonus=2.0),
    TaskSpec("2a1t", n_agents=2, n_targets=1, grid=5, sight=2, max_episode_len=20, win_bonus=1.0),
    TaskSpec("3a2t", n_agents=3, n_targets=2, grid=6, sight=3, max_episode_len=24, win_bonus=3.0),
    TaskSpec("3a3t", n_agents=3, n_targets=3, grid=6, sight=5, max_episode_len=24, win_bonus=4.0),
    TaskSpec("4a3t", n_agents=4, n_targets=3, grid=7, sight=3, max_episode_len=28, win_bonus=5.0),
    TaskSpec("4a2t", n_agents=4, n_targets=2, grid=6, sight=4, max_episode_len=24, win_bonus=2.5),
):
    register(_spec)


def scenario_registry() -> list[TaskSpec]:
    return list(_REGISTRY.values())


def get_spec(scenario) -> TaskSpec:
    if isinstance(scenario, TaskSpec):
        return scenario
    try:
        return _REGISTRY[scenario]
    except KeyError:
        raise UnknownScenarioError(
            f"unknown scenario {scenario!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def _parse_cells(text: str | None):
    if not text:
        return None
    return tuple(tuple(int(v) for v in cell.split(",")) for cell in text.split(";") if cell.strip())


def load_scenario(path, register_it: bool = True) -> TaskSpec:
    """Read a scenario from an INI file with a ``[scenario]`` section."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    sec = cp["scenario"]
    known = {"id", "n_agents", "n_targets", "grid", "sight", "max_episode_len", "win_bonus",
             "tag_reward", "progress_coef", "time_penalty", "agents", "targets"}
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"{path}: unknown scenario keys {sorted(unknown)}")
    spec = TaskSpec(
        scenario_id=sec["id"],
        n_agents=sec.getint("n_agents"),
        n_targets=sec.getint("n_targets"),
        grid=sec.getint("grid"),
        sight=sec.getint("sight"),
        max_episode_len=sec.getint("max_episode_len"),
        win_bonus=sec.getfloat("win_bonus"),
        tag_reward=sec.getfloat("tag_reward", 1.0),
        progress_coef=sec.getfloat("progress_coef", 0.1),
        time_penalty=sec.getfloat("time_penalty", -0.01),
        agent_cells=_parse_cells(sec.get("agents")),
        target_cells=_parse_cells(sec.get("targets")),
    )
    for cells, n in ((spec.agent_cells, spec.n_agents), (spec.target_cells, spec.n_targets)):
        if cells is not None and (len(cells) != n or any(not (0 <= c < spec.grid) for cell in cells for c in cell)):
            raise ValueError(f"{path}: bad entity placement {cells}")
    if register_it:
        register(spec)
    return spec


class GridTeamEnv:
    def __init__(self, scenario):
        self.spec = get_spec(scenario)
        self.agents = np.zeros((self.spec.n_agents, 2), dtype=np.int64)
        self.targets = np.zeros((self.spec.n_targets, 2), dtype=np.int64)
        self.tagged = np.zeros(self.spec.n_targets, dtype=bool)
        self.t = 0
        self.done = True
        self.won = False

    def reset(self, seed: int) -> StepOutcome:
        spec = self.spec
        rng = np.random.default_rng(seed)
        cells = rng.choice(spec.grid * spec.grid, size=spec.n_agents + spec.n_targets, replace=False)
        xy = np.stack([cells % spec.grid, cells // spec.grid], axis=1)
        self.agents = np.array(spec.agent_cells, dtype=np.int64) if spec.agent_cells else xy[: spec.n_agents].copy()
        self.targets = np.array(spec.target_cells, dtype=np.int64) if spec.target_cells else xy[spec.n_agents:].copy()
        self.tagged = np.zeros(spec.n_targets, dtype=bool)
        self.t = 0
        self.done = False
        self.won = False
        return self._outcome(0.0)

    def distance_sum(self) -> int:
        if self.tagged.all():
            return 0
        left = self.targets[~self.tagged]
        d = np.abs(left[:, None, :] - self.agents[None, :, :]).sum(-1)
        return int(d.min(axis=1).sum())

    def available_actions(self) -> np.ndarray:
        spec = self.spec
        avail = np.zeros((spec.n_agents, spec.n_actions), dtype=bool)
        avail[:, NOOP] = True
        if self.done:
            return avail
        x, y = self.agents[:, 0], self.agents[:, 1]
        avail[:, UP] = y < spec.grid - 1
        avail[:, DOWN] = y > 0
        avail[:, RIGHT] = x < spec.grid - 1
        avail[:, LEFT] = x > 0
        on = (self.agents[:, None, :] == self.targets[None, :, :]).all(-1)
        avail[:, N_MOVE_ACTIONS:] = on & ~self.tagged[None, :]
        return avail

    def step(self, actions) -> StepOutcome:
        spec = self.spec
        actions = np.asarray(actions, dtype=np.int64)
        if self.done:
            raise IllegalActionError("step() called on a finished episode")
        if actions.shape != (spec.n_agents,):
            raise IllegalActionError(f"expected {spec.n_agents} actions, got shape {actions.shape}")
        avail = self.available_actions()
        for i, a in enumerate(actions):
            if not (0 <= a < spec.n_actions) or not avail[i, a]:
                raise IllegalActionError(f"agent {i}: action {a} is not available")
        before = self.distance_sum()
        newly = np.zeros(spec.n_targets, dtype=bool)
        for i, a in enumerate(actions):
            if a in MOVES:
                self.agents[i] += MOVES[a]
            elif a >= N_MOVE_ACTIONS:
                newly[a - N_MOVE_ACTIONS] = True
        self.tagged |= newly
        after = self.distance_sum()
        self.t += 1
        reward = spec.time_penalty + spec.progress_coef * (before - after) + spec.tag_reward * int(newly.sum())
        self.won = bool(self.tagged.all())
        if self.won:
            reward += spec.win_bonus
        self.done = self.won or self.t >= spec.max_episode_len
        return self._outcome(reward)

    def state(self) -> np.ndarray:
        g = float(self.spec.grid - 1)
        tgt = np.concatenate([self.targets / g, self.tagged[:, None].astype(np.float64)], axis=1)
        return np.concatenate([tgt.reshape(-1), (self.agents / g).reshape(-1)])

    def observations(self) -> np.ndarray:
        spec = self.spec
        g = float(spec.grid - 1)
        r = float(spec.sight)
        obs = np.zeros((spec.n_agents, spec.obs_dim))
        for i in range(spec.n_agents):
            me = self.agents[i]
            row = [me[0] / g, me[1] / g]
            for k in range(spec.n_targets):
                d = self.targets[k] - me
                if np.abs(d).max() <= spec.sight:
                    row += [d[0] / r, d[1] / r, 1.0, float(self.tagged[k])]
                else:
                    row += [0.0, 0.0, 0.0, 0.0]
            for j in range(spec.n_agents):
                if j == i:
                    continue
                d = self.agents[j] - me
                if np.abs(d).max() <= spec.sight:
                    row += [d[0] / r, d[1] / r, 1.0]
                else:
                    row += [0.0, 0.0, 0.0]
            obs[i] = row
        return obs

    def _outcome(self, reward: float) -> StepOutcome:
        return StepOutcome(
            state=self.state(),
            obs=self.observations(),
            avail=self.available_actions(),
            reward=float(reward),
            done=self.done,
            won=self.won,
        )


def reset(scenario, seed: int) -> tuple[GridTeamEnv, StepOutcome]:
    env = GridTeamEnv(scenario)
    return env, env.reset(seed)


# ---------------------------------------------------------------------------
# scripted behaviour policies


def decode_state(spec: TaskSpec, state: np.ndarray):
    g = spec.grid - 1
    nt = spec.n_targets
    tgt = state[: 3 * nt].reshape(nt, 3)
    targets = np.rint(tgt[:, :2] * g).astype(np.int64)
    tagged = tgt[:, 2] > 0.5
    agents = np.rint(state[3 * nt:].reshape(spec.n_agents, 2) * g).astype(np.int64)
    return agents, targets, tagged


def _step_toward(src, dst) -> int:
    dx, dy = int(dst[0] - src[0]), int(dst[1] - src[1])
    if dx > 0:
        return RIGHT
    if dx < 0:
        return LEFT
    if dy > 0:
        return UP
    if dy < 0:
        return DOWN
    return NOOP


def coordinator_plan(spec: TaskSpec, state: np.ndarray) -> np.ndarray:
    """Joint action of the shortest-path coordinator.

    Agents standing on an untagged target tag it (lowest agent index wins).
    Every other agent walks its shortest path (horizontal leg first) to its
    role target ``agent_id % n_targets``, or to the nearest untagged target
    once its role target is done (lowest target index on ties).
    """
    agents, targets, tagged = decode_state(spec, state)
    plan = np.full(spec.n_agents, NOOP, dtype=np.int64)
    busy = np.zeros(spec.n_agents, dtype=bool)
    for k in np.flatnonzero(~tagged):
        on = np.flatnonzero((agents == targets[k]).all(-1) & ~busy)
        if on.size:
            plan[on[0]] = N_MOVE_ACTIONS + k
            busy[on[0]] = True
    left = np.flatnonzero(~tagged)
    if left.size == 0:
        return plan
    for i in np.flatnonzero(~busy):
        goal = i % spec.n_targets
        if tagged[goal]:
            d = np.abs(targets[left] - agents[i]).sum(-1)
            goal = left[int(np.argmin(d))]
        plan[i] = _step_toward(agents[i], targets[goal])
    return plan


TIER_RANDOM_PROB = {"good": 0.0, "medium": 0.3, "poor": 0.85}


def random_legal(avail: np.ndarray, rng: np.random.Generator) -> int:
    legal = np.flatnonzero(avail)
    if legal.size == 0:
        raise IllegalActionError("no legal action")
    return int(legal[rng.integers(legal.size)])


class ScriptedPolicy:
    """Behaviour policy of one quality tier.

    Called per agent as ``policy(obs, avail, rng, state=..., agent_id=...)``.
    The coordinator plan is computed once per distinct global state.
    """

    def __init__(self, tier: str, spec: TaskSpec):
        if tier not in TIER_RANDOM_PROB:
            raise ValueError(f"unknown tier {tier!r}; expected one of {sorted(TIER_RANDOM_PROB)}")
        self.tier = tier
        self.spec = get_spec(spec)
        self.random_prob = TIER_RANDOM_PROB[tier]
        self._cache_key: bytes | None = None
        self._cache_plan: np.ndarray | None = None

    def plan(self, state: np.ndarray) -> np.ndarray:
        key = np.asarray(state, dtype=np.float64).tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache_plan = coordinator_plan(self.spec, state)
        return self._cache_plan

    def __call__(self, obs, avail, rng, *, state, agent_id: int) -> int:
        avail = np.asarray(avail, dtype=bool)
        if self.random_prob > 0 and rng.random() < self.random_prob:
            return random_legal(avail, rng)
        a = int(self.plan(state)[agent_id])
        return a if avail[a] else random_legal(avail, rng)


def scripted_policy(tier: str, spec) -> ScriptedPolicy:
    return ScriptedPolicy(tier, spec)


def run_episode(spec, seed: int, choose: Callable[[StepOutcome, GridTeamEnv], np.ndarray]):
    """Roll one episode; ``choose`` maps the current outcome to a joint action."""
    env, out = reset(spec, seed)
    total = 0.0
    while not out.done:
        out = env.step(choose(out, env))
        total += out.reward
    return total, out.won, env.t


def scripted_episode_return(spec, tier: str, seed: int, rng: np.random.Generator | None = None):
    spec = get_spec(spec)
    pol = ScriptedPolicy(tier, spec)
    rng = rng if rng is not None else np.random.default_rng(seed)
    return run_episode(
        spec, seed,
        lambda o, env: np.array([pol(o.obs[i], o.avail[i], rng, state=o.state, agent_id=i) for i in range(spec.n_agents)]),
    )


def random_episode_return(spec, seed: int, rng: np.random.Generator):
    spec = get_spec(spec)
    return run_episode(
        spec, seed, lambda o, env: np.array([random_legal(o.avail[i], rng) for i in range(spec.n_agents)])
    )
