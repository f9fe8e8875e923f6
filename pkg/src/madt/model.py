"""Causal transformer policy shared by every agent.

Each timestep of an agent's history is one token: global state, local
observation and a one-hot agent id (optionally a return-to-go scalar),
projected to ``n_embd`` and offset by a sinusoidal encoding of the absolute
environment timestep. Pre-norm residual blocks of masked multi-head attention
and a ReLU feed-forward layer feed an action head (availability-masked logits)
and a scalar value head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .env import TaskSpec, UniversalDims
from .numerics import MASK_SENTINEL, Tensor

MODEL_TYPES = ("state_only", "rtg")


class NoLegalActionError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layer: int = 2
    n_head: int = 2
    n_embd: int = 32
    context_length: int = 32
    max_timestep: int = 400
    universal_obs_dim: int = 24
    universal_state_dim: int = 18
    universal_action_dim: int = 8
    max_agents: int = 4
    model_type: str = "state_only"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.n_embd % self.n_head:
            raise ValueError(f"n_embd={self.n_embd} is not divisible by n_head={self.n_head}")
        if self.context_length < 1:
            raise ValueError("context_length must be at least 1")
        if self.model_type not in MODEL_TYPES:
            raise ValueError(f"model_type must be one of {MODEL_TYPES}")

    @property
    def dims(self) -> UniversalDims:
        return UniversalDims(self.universal_state_dim, self.universal_obs_dim, self.universal_action_dim, self.max_agents)

    @property
    def token_dim(self) -> int:
        return self.dims.token_dim + (1 if self.model_type == "rtg" else 0)

    def check_fits(self, specs: list[TaskSpec]) -> None:
        for spec in specs:
            self.dims.check(spec)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ContextBatch:
    tokens: np.ndarray  # [B, C, token_dim]
    timesteps: np.ndarray  # [B, C] int
    avail: np.ndarray  # [B, C, A] bool
    valid: np.ndarray  # [B, C] bool

    def __post_init__(self):
        B, C, _ = self.tokens.shape
        if self.timesteps.shape != (B, C) or self.valid.shape != (B, C) or self.avail.shape[:2] != (B, C):
            raise nx.DimensionError("context batch fields disagree on [batch, context] extents")


def build_tokens(states, obs, agent_ids, dims: UniversalDims, rtg=None) -> np.ndarray:
    """Concatenate padded state, padded observation and one-hot agent id."""
    states = np.asarray(states, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    lead = obs.shape[:-1]
    s = np.zeros(lead + (dims.state_dim,))
    s[..., : states.shape[-1]] = states
    o = np.zeros(lead + (dims.obs_dim,))
    o[..., : obs.shape[-1]] = obs
    ids = np.broadcast_to(np.asarray(agent_ids, dtype=np.int64), lead)
    one_hot = np.zeros(lead + (dims.max_agents,))
    np.put_along_axis(one_hot, ids[..., None], 1.0, axis=-1)
    parts = [s, o, one_hot]
    if rtg is not None:
        parts.append(np.asarray(rtg, dtype=np.float64).reshape(lead + (1,)))
    return np.concatenate(parts, axis=-1)


def positional_encoding(pos: int, d_model: int, max_timestep: int | None = None) -> np.ndarray:
    if pos < 0 or (max_timestep is not None and pos > max_timestep):
        raise ValueError(f"position {pos} outside [0, {max_timestep}]")
    return positional_table(pos + 1, d_model)[pos]


def positional_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((n_positions, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def causal_mask(C: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, sentinel above."""
    return np.where(np.tril(np.ones((C, C), dtype=bool)), 0.0, MASK_SENTINEL)


def causal_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_head: int,
                     return_weights: bool = False):
    """Masked multi-head self-attention over ``x`` of shape [C, E] or [B, C, E]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    B, C, E = x.shape
    dk = E // n_head

    def heads(w):
        return nx.transpose(nx.reshape(nx.matmul(x, w), (B, C, n_head, dk)), (0, 2, 1, 3))

    q, k, v = heads(wq), heads(wk), heads(wv)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    weights = nx.masked_softmax(scores, causal_mask(C))
    o = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (B, C, E))
    out = nx.matmul(o, wo)
    if squeeze:
        out = nx.reshape(out, (C, E))
    return (out, weights) if return_weights else out


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    E, D, A = cfg.n_embd, cfg.token_dim, cfg.universal_action_dim
    F = cfg.ffn_mult * E

    def w(fan_in, fan_out, std=None):
        return rng.normal(0.0, std if std is not None else 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    p = {"embed.w": w(D, E), "embed.b": np.zeros(E)}
    for i in range(cfg.n_layer):
        pre = f"block{i}."
        p[pre + "ln1.g"] = np.ones(E)
        p[pre + "ln1.b"] = np.zeros(E)
        p[pre + "attn.wq"] = w(E, E)
        p[pre + "attn.wk"] = w(E, E)
        p[pre + "attn.wv"] = w(E, E)
        p[pre + "attn.wo"] = w(E, E, std=1.0 / np.sqrt(E * 2 * cfg.n_layer))
        p[pre + "ln2.g"] = np.ones(E)
        p[pre + "ln2.b"] = np.zeros(E)
        p[pre + "ffn.w1"] = w(E, F)
        p[pre + "ffn.b1"] = np.zeros(F)
        p[pre + "ffn.w2"] = w(F, E, std=1.0 / np.sqrt(F * 2 * cfg.n_layer))
        p[pre + "ffn.b2"] = np.zeros(E)
    p["ln_f.g"] = np.ones(E)
    p["ln_f.b"] = np.zeros(E)
    p["head.w"] = w(E, A, std=0.01)
    p["head.b"] = np.zeros(A)
    p["value.w"] = w(E, 1, std=0.01)
    p["value.b"] = np.zeros(1)
    return p


class MADT:
    """The shared actor-critic network."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config or ModelConfig()
        raw = params if params is not None else init_params(self.config, np.random.default_rng(seed))
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in raw.items()}
        self._pe = positional_table(self.config.max_timestep + 1, self.config.n_embd)
        self.provenance: dict = {}

    # -- parameters -----------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(sd)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self.params.items():
            if sd[k].shape != t.shape:
                raise nx.DimensionError(f"parameter {k}: checkpoint shape {sd[k].shape} vs model {t.shape}")
            t.data = np.array(sd[k], dtype=np.float64)

    def copy(self) -> "MADT":
        m = MADT(self.config, params=self.state_dict())
        m.provenance = dict(self.provenance)
        return m

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.params.values())

    # -- forward ----------------------------------------------------------
    def forward(self, batch: ContextBatch, params: dict[str, Tensor] | None = None):
        """Return (masked action logits [B, C, A], values [B, C])."""
        cfg = self.config
        p = self.params if params is None else {**self.params, **params}
        tokens, ts = batch.tokens, np.asarray(batch.timesteps)
        if tokens.shape[-1] != cfg.token_dim:
            raise nx.DimensionError(f"token width {tokens.shape[-1]} != model token_dim {cfg.token_dim}")
        B, C, _ = tokens.shape
        if C > cfg.context_length:
            raise nx.DimensionError(f"context of {C} exceeds context_length {cfg.context_length}")
        if ts.size and (ts.min() < 0 or ts.max() > cfg.max_timestep):
            raise ValueError(f"timestep outside [0, {cfg.max_timestep}]")
        avail = np.asarray(batch.avail, dtype=bool)
        valid = np.asarray(batch.valid, dtype=bool)
        empty = ~avail.any(axis=-1) & valid
        if empty.any():
            b, t = np.argwhere(empty)[0]
            raise NoLegalActionError(f"no legal action at batch row {b}, position {t}")
        # Padded positions get a fully open mask; their outputs are ignored downstream.
        avail = avail | ~valid[..., None]

        x = nx.add(nx.linear(Tensor(tokens), p["embed.w"], p["embed.b"]), Tensor(self._pe[ts]))
        for i in range(cfg.n_layer):
            pre = f"block{i}."
            h = nx.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            x = nx.add(x, causal_attention(h, p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"],
                                           p[pre + "attn.wo"], cfg.n_head))
            h = nx.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f = nx.relu(nx.linear(h, p[pre + "ffn.w1"], p[pre + "ffn.b1"]))
            x = nx.add(x, nx.linear(f, p[pre + "ffn.w2"], p[pre + "ffn.b2"]))
        h = nx.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = nx.masked_fill(nx.linear(h, p["head.w"], p["head.b"]), ~avail, MASK_SENTINEL)
        values = nx.reshape(nx.linear(h, p["value.w"], p["value.b"]), (B, C))
        return logits, values

    __call__ = forward

    def probabilities(self, batch: ContextBatch) -> np.ndarray:
        with nx.no_grad():
            logits, _ = self.forward(batch)
        return masked_probs(logits.data, batch.avail | ~batch.valid[..., None])

    def act(self, tokens: np.ndarray, timesteps: np.ndarray, avail: np.ndarray, mode: str = "greedy",
            rng: np.random.Generator | None = None) -> int:
        """Action for one agent given its context window (tokens [T, D], last row current)."""
        tokens = np.asarray(tokens, dtype=np.float64)[None]
        T = tokens.shape[1]
        full_avail = np.ones((1, T, self.config.universal_action_dim), dtype=bool)
        full_avail[0, -1] = np.asarray(avail, dtype=bool)
        batch = ContextBatch(tokens, np.asarray(timesteps)[None], full_avail, np.ones((1, T), dtype=bool))
        with nx.no_grad():
            logits, _ = self.forward(batch)
        return int(select_actions(logits.data[:, -1], full_avail[:, -1], mode, rng)[0])

    # -- persistence -----------------------------------------------------
    def save(self, path, provenance: dict | None = None) -> Path:
        path = Path(path)
        prov = {**self.provenance, **(provenance or {})}
        nx.save_checkpoint(path, self.state_dict(), {"model_config": asdict(self.config), "provenance": prov})
        write_model_card(path, self.config, prov)
        return path

    @classmethod
    def load(cls, path) -> "MADT":
        header, params = nx.load_checkpoint(path)
        m = cls(ModelConfig.from_dict(header["model_config"]), params=params)
        m.provenance = header.get("provenance", {})
        return m


def write_model_card(ckpt_path: Path, cfg: ModelConfig, provenance: dict) -> Path:
    card = Path(str(ckpt_path) + ".card.txt")
    lines = ["MADT model card", "", "[model_config]"]
    lines += [f"{k} = {v}" for k, v in asdict(cfg).items()]
    lines += ["", "[provenance]"]
    lines += [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted(provenance.items())]
    card.write_text("\n".join(lines) + "\n")
    return card


# ---------------------------------------------------------------------------
# action selection on raw arrays


def masked_probs(logits: np.ndarray, avail: np.ndarray) -> np.ndarray:
    avail = np.asarray(avail, dtype=bool)
    if (~avail.any(axis=-1)).any():
        raise NoLegalActionError("no legal action")
    z = np.where(avail, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(avail, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def select_actions(logits: np.ndarray, avail: np.ndarray, mode: str = "greedy",
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy (lowest index on ties) or sampled actions over legal entries, row-wise."""
    avail = np.asarray(avail, dtype=bool)
    if (~avail.any(axis=-1)).any():
        raise NoLegalActionError("no legal action")
    if mode == "greedy":
        return np.argmax(np.where(avail, logits, -np.inf), axis=-1)
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("sampling needs an rng")
    probs = masked_probs(logits, avail)
    return sample_categorical(probs, avail, rng)


def sample_categorical(probs: np.ndarray, avail: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # Guard the u -> 1 rounding edge: fall back to the last legal entry.
    last_legal = probs.shape[-1] - 1 - np.argmax(avail[..., ::-1], axis=-1)
    return np.minimum(idx, last_legal)
