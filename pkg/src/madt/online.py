"""On-policy fine-tuning of the shared actor and critic with clipped PPO."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .env import GridTeamEnv, get_spec, random_legal
from .model import MADT, ContextBatch, build_tokens, masked_probs, select_actions
from .numerics import Tensor
from .seeding import substream
from .offline import ContextRow, NumericalAbort, discounted_returns, stack_rows, value_loss


@dataclass
class PPOConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    ppo_epochs: int = 10
    online_lr: float = 5e-4
    buffer_size: int = 64
    eval_epochs: int = 32
    total_env_steps: int = 100_000
    seed: int = 0
    mini_batch_size: int = 128
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 10.0
    normalize_advantage: bool = True
    gae_lambda: float | None = None
    algorithm: str = "ppo"  # or "reinforce"
    thresholds: tuple = ()
    stop_at_thresholds: bool = False
    rtg_target: float | None = None

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.algorithm not in ("ppo", "reinforce"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        self.thresholds = tuple(float(t) for t in self.thresholds)


@dataclass
class EpisodeRecord:
    """One episode of every agent, in universal dims."""

    tokens: np.ndarray  # [N, T, D]
    timesteps: np.ndarray  # [T]
    actions: np.ndarray  # [N, T]
    logp: np.ndarray  # [N, T]
    values: np.ndarray  # [N, T]
    avail: np.ndarray  # [N, T, A]
    rewards: np.ndarray  # [T] raw team reward
    value_rewards: np.ndarray  # [T] reward / reward-range width
    dones: np.ndarray  # [T]
    won: bool = False
    truncated: bool = False
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    raw_advantages: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def team_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class RolloutBuffer:
    episodes: list[EpisodeRecord]
    context_length: int
    truncated: bool = False

    @property
    def env_steps(self) -> int:
        return sum(e.length for e in self.episodes)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def episode_returns(self) -> np.ndarray:
        return np.array([e.team_return for e in self.episodes])

    def win_rate(self) -> float:
        return float(np.mean([e.won for e in self.episodes])) if self.episodes else 0.0

    def rows(self) -> list[ContextRow]:
        """Context windows aligned with the ones the policy acted on."""
        C = self.context_length
        out = []
        for k, ep in enumerate(self.episodes):
            N, T, D = ep.tokens.shape
            for i in range(N):
                for s in range(0, T, C):
                    e = min(s + C, T)
                    L = e - s
                    out.append(RolloutRow(
                        tokens=_pad(ep.tokens[i, s:e], C),
                        timesteps=_pad(ep.timesteps[s:e], C).astype(np.int64),
                        avail=_pad(ep.avail[i, s:e], C).astype(bool),
                        valid=np.arange(C) < L,
                        actions=_pad(ep.actions[i, s:e], C).astype(np.int64),
                        value_targets=_pad(ep.returns[i, s:e], C) if ep.returns is not None else np.zeros(C),
                        source=(k, i, s),
                        old_logp=_pad(ep.logp[i, s:e], C),
                        advantages=_pad(ep.advantages[i, s:e], C) if ep.advantages is not None else np.zeros(C),
                    ))
        return out


@dataclass
class RolloutRow(ContextRow):
    old_logp: np.ndarray | None = None
    advantages: np.ndarray | None = None


def _pad(a: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((C,) + a.shape[1:], dtype=a.dtype)
    out[: len(a)] = a
    return out


# ---------------------------------------------------------------------------
# rollouts


def _episode_seeds(rng: np.random.Generator, n: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def collect(spec, model: MADT, n_episodes: int, rng: np.random.Generator, mode: str = "sample",
            step_cap: int | None = None, env_seeds: Sequence[int] | None = None,
            rtg_target: float | None = None) -> RolloutBuffer:
    """Run ``n_episodes`` environments in lockstep with the shared policy.

    Each agent conditions on the records of its current context window, the
    windows starting every ``context_length`` steps from the episode start.
    ``step_cap`` bounds the total number of environment steps; hitting it ends
    every running episode and marks the buffer truncated.
    """
    spec = get_spec(spec)
    cfg = model.config
    dims = cfg.dims
    dims.check(spec)
    C = cfg.context_length
    N, A = spec.n_agents, cfg.universal_action_dim
    seeds = list(env_seeds) if env_seeds is not None else _episode_seeds(rng, n_episodes)
    envs = [GridTeamEnv(spec) for _ in range(n_episodes)]
    outs = [env.reset(s) for env, s in zip(envs, seeds)]
    use_rtg = cfg.model_type == "rtg"
    if use_rtg and rtg_target is None:
        rtg_target = model.provenance.get("rtg_target") or 1.0
    width = spec.reward_range[1] - spec.reward_range[0]

    hist = [dict(tokens=[], avail=[], actions=[], logp=[], values=[], rewards=[], vr=[], dones=[]) for _ in envs]
    rtg = np.full(n_episodes, rtg_target if use_rtg else 0.0)
    active = list(range(n_episodes))
    steps = 0
    truncated = False
    t = 0
    while active:
        if step_cap is not None and steps + len(active) > step_cap:
            truncated = True
            break
        tok_now = []
        av_now = []
        for k in active:
            o = outs[k]
            tok = build_tokens(np.broadcast_to(o.state, (N, spec.state_dim)), o.obs, np.arange(N), dims,
                               np.full(N, rtg[k]) if use_rtg else None)
            av = np.zeros((N, A), dtype=bool)
            av[:, : spec.n_actions] = o.avail
            hist[k]["tokens"].append(tok)
            hist[k]["avail"].append(av)
            tok_now.append(tok)
            av_now.append(av)
        start = (t // C) * C
        L = t - start + 1
        tokens = np.stack([np.stack(hist[k]["tokens"][start:t + 1], axis=1) for k in active]).reshape(-1, L, cfg.token_dim)
        avail_ctx = np.ones((tokens.shape[0], L, A), dtype=bool)
        avail_last = np.concatenate(av_now)
        avail_ctx[:, -1] = avail_last
        batch = ContextBatch(tokens, np.broadcast_to(np.arange(start, t + 1), (tokens.shape[0], L)).copy(), avail_ctx,
                             np.ones((tokens.shape[0], L), dtype=bool))
        with nx.no_grad():
            logits, values = model.forward(batch)
        last = logits.data[:, -1]
        acts = select_actions(last, avail_last, mode, rng)
        probs = masked_probs(last, avail_last)
        logp = np.log(probs[np.arange(len(acts)), acts])
        vals = values.data[:, -1]
        still = []
        for j, k in enumerate(active):
            sl = slice(j * N, (j + 1) * N)
            a = acts[sl]
            out = envs[k].step(a)
            steps += 1
            h = hist[k]
            h["actions"].append(a)
            h["logp"].append(logp[sl])
            h["values"].append(vals[sl])
            h["rewards"].append(out.reward)
            h["vr"].append(out.reward / width)
            done = out.done or t + 1 > cfg.max_timestep
            h["dones"].append(done)
            outs[k] = out
            if use_rtg:
                rtg[k] -= out.reward / width
            if not done:
                still.append(k)
        active = still
        t += 1

    episodes = []
    for k, h in enumerate(hist):
        T = len(h["actions"])
        if T == 0:
            continue
        dones = np.array(h["dones"], dtype=bool)
        cut = not dones[-1]
        dones[-1] = True
        episodes.append(EpisodeRecord(
            tokens=np.stack(h["tokens"][:T], axis=1),
            timesteps=np.arange(T),
            actions=np.stack(h["actions"], axis=1),
            logp=np.stack(h["logp"], axis=1),
            values=np.stack(h["values"], axis=1),
            avail=np.stack(h["avail"][:T], axis=1),
            rewards=np.array(h["rewards"]),
            value_rewards=np.array(h["vr"]),
            dones=dones,
            won=envs[k].won,
            truncated=cut,
        ))
    return RolloutBuffer(episodes, C, truncated)


# ---------------------------------------------------------------------------
# advantages


def advantages_mc(rewards, values, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo return-to-go and advantage = return - value."""
    ret = discounted_returns(rewards, gamma)
    return ret, ret - np.asarray(values, dtype=np.float64)


def advantages_gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        nxt = values[t + 1] if t + 1 < len(rewards) else 0.0
        acc = rewards[t] + gamma * nxt - values[t] + gamma * lam * acc
        adv[t] = acc
    return adv + values, adv


def compute_advantage(buffer: RolloutBuffer, gamma: float, normalize: bool = True,
                      gae_lambda: float | None = None) -> RolloutBuffer:
    for ep in buffer.episodes:
        rets, advs = [], []
        for i in range(ep.values.shape[0]):
            if gae_lambda is None:
                r, a = advantages_mc(ep.value_rewards, ep.values[i], gamma)
            else:
                r, a = advantages_gae(ep.value_rewards, ep.values[i], gamma, gae_lambda)
            rets.append(r)
            advs.append(a)
        ep.returns = np.stack(rets)
        ep.raw_advantages = np.stack(advs)
        ep.advantages = ep.raw_advantages.copy()
    if normalize and buffer.episodes:
        flat = np.concatenate([ep.raw_advantages.reshape(-1) for ep in buffer.episodes])
        mu, sd = flat.mean(), flat.std()
        for ep in buffer.episodes:
            ep.advantages = (ep.raw_advantages - mu) / (sd + 1e-8)
    return buffer


# ---------------------------------------------------------------------------
# update


def clipped_surrogate(w, adv, eps):
    """Per-sample min(w * A, clip(w, 1 - eps, 1 + eps) * A)."""
    w = np.asarray(w, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(w * adv, np.clip(w, 1.0 - eps, 1.0 + eps) * adv)


def surrogate_objective(logp: Tensor, old_logp: np.ndarray, adv: np.ndarray, valid: np.ndarray, eps: float,
                        sources=None):
    """Mean clipped surrogate over valid positions, ratios formed in log space."""
    log_ratio = nx.sub(logp, Tensor(old_logp))
    lr = np.where(valid, log_ratio.data, 0.0)
    if not np.isfinite(lr).all() or np.abs(lr).max(initial=0.0) > 700:
        b, t = (int(v) for v in np.argwhere(~np.isfinite(lr) | (np.abs(lr) > 700))[0])
        raise NumericalAbort(
            f"non-finite importance weight at row {b} position {t}: "
            f"log pi={logp.data[b, t]!r}, log pi_old={old_logp[b, t]!r}"
        )
    w = nx.exp(nx.masked_fill(log_ratio, ~valid, 0.0))
    A = Tensor(np.where(valid, adv, 0.0))
    surr = nx.minimum(nx.mul(w, A), nx.mul(nx.clip(w, 1.0 - eps, 1.0 + eps), A))
    n = max(int(valid.sum()), 1)
    obj = nx.scale(nx.sum_(nx.mul(surr, valid.astype(np.float64))), 1.0 / n)
    ratio = w.data[valid]
    stats = {
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)) if ratio.size else 0.0,
        "approx_kl": float(np.mean(-lr[valid])) if ratio.size else 0.0,
    }
    return obj, stats


def entropy(logits: Tensor, valid: np.ndarray) -> Tensor:
    lp = nx.log_softmax(logits)
    p = nx.exp(lp)
    h = nx.scale(nx.sum_(nx.mul(p, lp), axis=-1), -1.0)
    return nx.scale(nx.sum_(nx.mul(h, valid.astype(np.float64))), 1.0 / max(int(valid.sum()), 1))


def ppo_update(buffer: RolloutBuffer, model: MADT, config: PPOConfig, optimizer: nx.Adam | None = None,
               rng: np.random.Generator | None = None) -> dict:
    """Clipped-surrogate actor update and squared-error critic update."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    opt = optimizer or nx.Adam(model.parameters(), lr=config.online_lr, max_grad_norm=config.max_grad_norm)
    rows = buffer.rows()
    if not rows:
        return {}
    epochs = 1 if config.algorithm == "reinforce" else config.ppo_epochs
    acc: dict[str, list[float]] = {}
    for _ in range(epochs):
        order = rng.permutation(len(rows))
        for i in range(0, len(order), config.mini_batch_size):
            sel = [rows[j] for j in order[i:i + config.mini_batch_size]]
            batch, actions, returns = stack_rows(sel)
            L = batch.valid.shape[1]
            old_logp = np.stack([r.old_logp[:L] for r in sel])
            adv = np.stack([r.advantages[:L] for r in sel])
            valid = batch.valid
            logits, values = model.forward(batch)
            logp = nx.gather(nx.log_softmax(logits), np.where(valid, actions, 0))
            if config.algorithm == "reinforce":
                weight = np.where(valid, returns, 0.0)
                obj = nx.scale(nx.sum_(nx.mul(logp, weight)), 1.0 / max(int(valid.sum()), 1))
                stats = {}
            else:
                obj, stats = surrogate_objective(logp, old_logp, adv, valid, config.clip_eps)
            vl = value_loss(values, returns, valid)
            loss = nx.add(nx.scale(obj, -1.0), nx.scale(vl, config.value_coef))
            ent = None
            if config.entropy_coef:
                ent = entropy(logits, valid)
                loss = nx.sub(loss, nx.scale(ent, config.entropy_coef))
            opt.zero_grad()
            loss.backward()
            gnorm = opt.step()
            if not model.all_finite():
                raise NumericalAbort("parameters became non-finite during the PPO update")
            stats.update(actor_objective=obj.item(), value_loss=vl.item(), grad_norm=gnorm)
            if ent is not None:
                stats["entropy"] = ent.item()
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# evaluation and the fine-tuning loop


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    returns: list[float]


def evaluate(spec, model: MADT, episodes: int = 32, mode: str = "greedy", seed: int = 0,
             env_seeds: Sequence[int] | None = None, rtg_target: float | None = None) -> EvalResult:
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    rng = np.random.default_rng(seed)
    buf = collect(spec, model, episodes, rng, mode=mode, env_seeds=env_seeds, rtg_target=rtg_target)
    rets = buf.episode_returns()
    return EvalResult(float(rets.mean()), buf.win_rate(), [float(r) for r in rets])


def random_policy_baseline(spec, episodes: int = 1000, seed: int = 0) -> EvalResult:
    spec = get_spec(spec)
    rng = np.random.default_rng(seed)
    rets, wins = [], []
    for s in _episode_seeds(rng, episodes):
        env = GridTeamEnv(spec)
        out = env.reset(s)
        total = 0.0
        while not out.done:
            out = env.step(np.array([random_legal(out.avail[i], rng) for i in range(spec.n_agents)]))
            total += out.reward
        rets.append(total)
        wins.append(env.won)
    return EvalResult(float(np.mean(rets)), float(np.mean(wins)), rets)


@dataclass
class FinetuneReport:
    curve: list[dict] = field(default_factory=list)
    steps_to_threshold: dict = field(default_factory=dict)
    insufficient_budget: bool = False
    evaluation_only: bool = False
    env_steps: int = 0
    checkpoint: str | None = None
    wall_clock: float = 0.0

    def final_eval_return(self) -> float:
        return self.curve[-1]["eval_return"] if self.curve else float("nan")


def finetune(spec, model: MADT, config: PPOConfig, out_dir=None, log=None) -> FinetuneReport:
    """Alternate collection, advantage estimation and PPO updates until the step budget is spent."""
    spec = get_spec(spec)
    t0 = time.perf_counter()
    roll_rng = substream(config.seed, "rollout")
    upd_rng = substream(config.seed, "update")
    eval_seeds = _episode_seeds(substream(config.seed, "eval"), config.eval_epochs)
    opt = nx.Adam(model.parameters(), lr=config.online_lr, max_grad_norm=config.max_grad_norm)
    report = FinetuneReport(steps_to_threshold={t: None for t in config.thresholds})
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")

    def record(rec):
        report.curve.append(rec)
        for thr, hit in report.steps_to_threshold.items():
            if hit is None and rec["eval_return"] >= thr:
                report.steps_to_threshold[thr] = rec["env_steps"]
        if metrics_fh:
            metrics_fh.write(json.dumps(rec) + "\n")
            metrics_fh.flush()
        if log:
            log(rec)

    def run_eval():
        return evaluate(spec, model, config.eval_epochs, "greedy", env_seeds=eval_seeds, rtg_target=config.rtg_target)

    try:
        ev = run_eval()
        record({"iteration": 0, "env_steps": 0, "mean_return": None, "success_rate": None,
                "eval_return": ev.mean_return, "eval_success_rate": ev.success_rate})
        if config.total_env_steps <= 0:
            report.evaluation_only = True
        steps = 0
        it = 0
        while steps < config.total_env_steps:
            if config.stop_at_thresholds and report.steps_to_threshold and all(
                    v is not None for v in report.steps_to_threshold.values()):
                break
            it += 1
            buf = collect(spec, model, config.buffer_size, roll_rng, "sample",
                          step_cap=config.total_env_steps - steps, rtg_target=config.rtg_target)
            steps += buf.env_steps
            rets = buf.episode_returns()
            rec = {"iteration": it, "env_steps": steps,
                   "mean_return": float(rets.mean()) if rets.size else None,
                   "success_rate": buf.win_rate()}
            if buf.truncated:
                report.insufficient_budget = True
                ev = run_eval()
                rec.update(eval_return=ev.mean_return, eval_success_rate=ev.success_rate, truncated=True)
                record(rec)
                break
            compute_advantage(buf, config.gamma, config.normalize_advantage, config.gae_lambda)
            rec.update(ppo_update(buf, model, config, opt, upd_rng))
            ev = run_eval()
            rec.update(eval_return=ev.mean_return, eval_success_rate=ev.success_rate)
            record(rec)
        report.env_steps = steps
    finally:
        if metrics_fh:
            metrics_fh.close()
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        model.save(ckpt, {"finetune_config": {k: v for k, v in asdict(config).items()}, "scenario": spec.scenario_id})
        report.checkpoint = str(ckpt)
    return report
