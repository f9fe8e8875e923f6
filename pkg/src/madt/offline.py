"""Supervised pre-training of the shared policy on offline trajectories."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataset import DataIntegrityError, Dataset, Trajectory, UnifiedDataset, merge
from .model import MADT, ContextBatch, build_tokens, select_actions
from .numerics import MASK_SENTINEL, Tensor


class NumericalAbort(RuntimeError):
    pass


@dataclass
class OfflineConfig:
    learning_rate: float = 1e-4
    mini_batch_size: int = 128
    epochs: int = 10
    context_length: int = 32
    seed: int = 0
    offline_train_critic: bool = True
    gamma: float = 0.99
    value_coef: float = 0.5
    max_grad_norm: float = 10.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mini_batch_size < 1:
            raise ValueError("mini_batch_size must be at least 1")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    @property
    def accuracies(self) -> list[float]:
        return [e["accuracy"] for e in self.epochs]


@dataclass
class ContextRow:
    """One training window of a single agent, padded to the context length."""

    tokens: np.ndarray
    timesteps: np.ndarray
    avail: np.ndarray
    valid: np.ndarray
    actions: np.ndarray
    value_targets: np.ndarray
    source: tuple


# ---------------------------------------------------------------------------
# windows


def window_bounds(dones: np.ndarray, C: int) -> list[tuple[int, int]]:
    """Half-open index ranges of at most ``C`` records, never spanning a done."""
    n = len(dones)
    if C < 1:
        raise ValueError("context length must be at least 1")
    ends = list(np.flatnonzero(np.asarray(dones, dtype=bool)) + 1)
    if not ends or ends[-1] != n:
        ends.append(n)
    out, start = [], 0
    for end in ends:
        for s in range(start, end, C):
            out.append((s, min(s + C, end)))
        start = end
    return out


def discounted_returns(rewards: np.ndarray, gamma: float, dones: np.ndarray | None = None) -> np.ndarray:
    """Return-to-go sum_{k>=t} gamma^(k-t) r_k, restarting after each done."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if dones is not None and dones[t]:
            acc = 0.0
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def chunk(traj: Trajectory, C: int, dims=None, value_rewards: np.ndarray | None = None,
          gamma: float = 0.99, rtg: np.ndarray | None = None) -> list[ContextRow]:
    """Split a trajectory into padded context windows.

    ``value_rewards`` (defaults to the stored rewards) feed the critic targets;
    ``rtg`` adds a return-to-go scalar to every token.
    """
    if len(traj) == 0:
        return []
    if dims is None:
        from .env import UniversalDims
        dims = UniversalDims(traj.states.shape[-1], traj.obs.shape[-1], traj.avail.shape[-1], traj.agent_id + 1)
    vr = traj.rewards if value_rewards is None else value_rewards
    targets = discounted_returns(vr, gamma, traj.dones)
    tokens = build_tokens(traj.states, traj.obs, traj.agent_id, dims, rtg)
    A = dims.n_actions
    rows = []
    for s, e in window_bounds(traj.dones, C):
        L = e - s
        tok = np.zeros((C, tokens.shape[-1]))
        tok[:L] = tokens[s:e]
        ts = np.zeros(C, dtype=np.int64)
        ts[:L] = traj.timesteps[s:e]
        av = np.zeros((C, A), dtype=bool)
        av[:L, : traj.avail.shape[-1]] = traj.avail[s:e]
        valid = np.zeros(C, dtype=bool)
        valid[:L] = True
        act = np.zeros(C, dtype=np.int64)
        act[:L] = traj.actions[s:e]
        vt = np.zeros(C)
        vt[:L] = targets[s:e]
        rows.append(ContextRow(tok, ts, av, valid, act, vt, (traj.scenario_id, traj.agent_id, int(traj.timesteps[s]))))
    return rows


def stack_rows(rows: Sequence[ContextRow], trim: bool = True):
    """Batch rows; with ``trim`` drop trailing columns that are padding in every row."""
    valid = np.stack([r.valid for r in rows])
    L = valid.shape[1]
    if trim:
        cols = np.flatnonzero(valid.any(axis=0))
        L = int(cols[-1]) + 1 if cols.size else 1
    batch = ContextBatch(
        tokens=np.stack([r.tokens[:L] for r in rows]),
        timesteps=np.stack([r.timesteps[:L] for r in rows]),
        avail=np.stack([r.avail[:L] for r in rows]),
        valid=valid[:, :L],
    )
    actions = np.stack([r.actions[:L] for r in rows])
    targets = np.stack([r.value_targets[:L] for r in rows])
    return batch, actions, targets


# ---------------------------------------------------------------------------
# losses


def check_targets(actions: np.ndarray, avail: np.ndarray, valid: np.ndarray, sources=None) -> None:
    picked = np.take_along_axis(np.asarray(avail, dtype=bool), np.asarray(actions)[..., None], axis=-1)[..., 0]
    bad = valid & ~picked
    if bad.any():
        b, t = (int(v) for v in np.argwhere(bad)[0])
        where = f"row {b}" if sources is None else f"trajectory {sources[b]}"
        raise DataIntegrityError(f"illegal target action {int(actions[b, t])} in {where} at timestep {t}")


def ce_loss(logits: Tensor, actions: np.ndarray, avail: np.ndarray, valid: np.ndarray, sources=None) -> Tensor:
    """Mean negative log-likelihood of the targets under the masked softmax.

    Padded positions carry zero weight and are excluded from the denominator.
    """
    avail = np.asarray(avail, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    actions = np.where(valid, np.asarray(actions, dtype=np.int64), 0)
    check_targets(actions, avail, valid, sources)
    open_mask = avail | ~valid[..., None]
    lp = nx.log_softmax(nx.masked_fill(logits, ~open_mask, MASK_SENTINEL))
    picked = nx.gather(lp, actions)
    n = max(int(valid.sum()), 1)
    return nx.scale(nx.sum_(nx.mul(picked, valid.astype(np.float64))), -1.0 / n)


def value_loss(values: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """Half mean squared error over valid positions."""
    w = np.asarray(valid, dtype=np.float64)
    diff = nx.sub(values, Tensor(np.asarray(targets, dtype=np.float64)))
    return nx.scale(nx.sum_(nx.mul(nx.square(diff), w)), 0.5 / max(w.sum(), 1.0))


# ---------------------------------------------------------------------------
# dataset -> rows


def value_rewards_for(ud: UnifiedDataset, traj: Trajectory) -> np.ndarray:
    """Per-step rewards divided by the scenario's reward-range width (sign kept)."""
    scale = ud.reward_scales[traj.scenario_id]
    return scale.unscale(traj.rewards) / scale.width


def dataset_rows(ud: UnifiedDataset, C: int, gamma: float, with_rtg: bool = False) -> list[ContextRow]:
    rows = []
    for tr in ud.trajectories:
        vr = value_rewards_for(ud, tr)
        rtg = discounted_returns(vr, 1.0, tr.dones) if with_rtg else None
        rows.extend(chunk(tr, C, ud.dims, vr, gamma, rtg))
    return rows


def as_unified(dataset, model: MADT) -> UnifiedDataset:
    if isinstance(dataset, UnifiedDataset):
        return dataset
    if isinstance(dataset, Dataset):
        dataset = [dataset]
    return merge(list(dataset), model.config.dims)


def action_agreement(model: MADT, rows: Sequence[ContextRow], batch_size: int = 256) -> float:
    """Fraction of valid positions where the greedy action equals the recorded one."""
    hits = total = 0
    for i in range(0, len(rows), batch_size):
        batch, actions, _ = stack_rows(rows[i:i + batch_size])
        with nx.no_grad():
            logits, _ = model.forward(batch)
        pred = select_actions(logits.data, batch.avail | ~batch.valid[..., None], "greedy")
        hits += int(((pred == actions) & batch.valid).sum())
        total += int(batch.valid.sum())
    return hits / max(total, 1)


# ---------------------------------------------------------------------------
# training loop


def pretrain(dataset, model: MADT, config: OfflineConfig | None = None, out=None, metrics_path=None,
             log=None) -> TrainReport:
    """Masked cross-entropy pre-training (plus critic regression when enabled)."""
    config = config or OfflineConfig()
    ud = as_unified(dataset, model)
    if not ud.trajectories:
        raise ValueError("no trajectories")
    ud.validate()
    C = min(config.context_length, model.config.context_length)
    rows = dataset_rows(ud, C, config.gamma, with_rtg=model.config.model_type == "rtg")
    opt = nx.Adam(model.parameters(), lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    metrics_fh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(rows))
            sum_loss = sum_ce = sum_v = 0.0
            hits = n_valid = n_batches = 0
            for i in range(0, len(order), config.mini_batch_size):
                sel = [rows[j] for j in order[i:i + config.mini_batch_size]]
                batch, actions, targets = stack_rows(sel)
                logits, values = model.forward(batch)
                ce = ce_loss(logits, actions, batch.avail, batch.valid, [r.source for r in sel])
                loss = ce
                vl = None
                if config.offline_train_critic:
                    vl = value_loss(values, targets, batch.valid)
                    loss = nx.add(ce, nx.scale(vl, config.value_coef))
                if not np.isfinite(loss.item()):
                    _dump_batch(out, batch, actions, epoch)
                    raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {n_batches}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                pred = select_actions(logits.data, batch.avail | ~batch.valid[..., None], "greedy")
                hits += int(((pred == actions) & batch.valid).sum())
                n_valid += int(batch.valid.sum())
                sum_loss += loss.item()
                sum_ce += ce.item()
                sum_v += vl.item() if vl is not None else 0.0
                n_batches += 1
            rec = {
                "epoch": epoch,
                "loss": sum_loss / n_batches,
                "ce": sum_ce / n_batches,
                "value_loss": sum_v / n_batches,
                "accuracy": hits / max(n_valid, 1),
                "wall_clock": time.perf_counter() - t0,
            }
            report.epochs.append(rec)
            if metrics_fh:
                # timing stays out of the file so reruns reproduce it bitwise
                metrics_fh.write(json.dumps({k: v for k, v in rec.items() if k != "wall_clock"}) + "\n")
                metrics_fh.flush()
            if log:
                log(rec)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if not model.all_finite():
        raise NumericalAbort("parameters became non-finite during pre-training")
    report.wall_clock = time.perf_counter() - t0
    model.provenance.update({
        "offline_config": asdict(config),
        "offline_scenarios": sorted({t.scenario_id for t in ud.trajectories}),
        "rtg_target": float(max((r.tokens[0, -1] for r in rows), default=0.0))
        if model.config.model_type == "rtg" else None,
    })
    if out is not None:
        model.save(out)
        report.checkpoint = str(out)
    return report


def _dump_batch(out, batch: ContextBatch, actions, epoch) -> None:
    path = Path(str(out) + f".nan-epoch{epoch}.npz") if out else Path(f"nan-batch-epoch{epoch}.npz")
    np.savez(path, tokens=batch.tokens, timesteps=batch.timesteps, avail=batch.avail, valid=batch.valid,
             actions=actions)
