"""Command-line entry point: data generation, training, evaluation and comparisons.

Every subcommand reads an optional INI file (one section per subcommand, keys
below), applies ``--set key=value`` and dedicated flag overrides, validates the
result and echoes it into the run directory.

Exit codes: 0 success, 2 config error, 3 data-integrity error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .dataset import (DataIntegrityError, UnificationError, dataset_filename, find_datasets, format_stats_table,
                      generate, merge, read_dataset, verify_manifest)
from .env import UnknownScenarioError, get_spec, load_scenario, scripted_episode_return
from .model import MADT, ModelConfig
from .numerics import CheckpointFormatError
from .offline import NumericalAbort, OfflineConfig, pretrain
from .online import PPOConfig, evaluate, finetune, random_policy_baseline
from .seeding import subseed

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# typed keys


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv: Callable) -> Callable:
    def parse(text: str) -> list:
        return [conv(p.strip()) for p in str(text).replace(";", ",").split(",") if p.strip()]
    parse.__name__ = f"list[{conv.__name__}]"
    return parse


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Key:
    conv: Callable
    default: Any


MODEL_KEYS = {
    "n_layer": Key(int, 2),
    "n_head": Key(int, 2),
    "n_embd": Key(int, 32),
    "context_length": Key(int, 32),
    "max_timestep": Key(int, 400),
    "model_type": Key(str, "state_only"),
}

PPO_KEYS = {
    "online_lr": Key(float, 5e-4),
    "online_ppo_epochs": Key(int, 10),
    "online_buffer_size": Key(int, 64),
    "eval_epochs": Key(int, 32),
    "mini_batch_size": Key(int, 128),
    "gamma": Key(float, 0.99),
    "clip_eps": Key(float, 0.2),
    "value_coef": Key(float, 0.5),
    "entropy_coef": Key(float, 0.0),
    "max_grad_norm": Key(float, 10.0),
    "normalize_advantage": Key(_bool, True),
    "gae_lambda": Key(_opt_float, None),
    "algorithm": Key(str, "ppo"),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "gen-data": {
        "scenario": Key(_list(str), ["2a2t"]),
        "tier": Key(_list(str), ["good"]),
        "episodes": Key(int, 200),
        "seed": Key(int, 0),
        "out": Key(str, "data"),
        "scenario_file": Key(_list(str), []),
    },
    "stats": {
        "data": Key(str, "data"),
    },
    "pretrain": {
        "data": Key(str, "data"),
        "out": Key(str, "runs/pretrain"),
        "seed": Key(int, 0),
        "offline_map_lists": Key(_list(str), []),
        "offline_episode_num": Key(_list(int), []),
        "quality": Key(str, "good"),
        "offline_lr": Key(float, 1e-4),
        "epochs": Key(int, 10),
        "mini_batch_size": Key(int, 128),
        "offline_train_critic": Key(_bool, True),
        "gamma": Key(float, 0.99),
        **MODEL_KEYS,
    },
    "finetune": {
        "env": Key(str, "2a2t"),
        "ckpt": Key(str, "none"),
        "out": Key(str, "runs/finetune"),
        "seed": Key(int, 0),
        "total_env_steps": Key(int, 100_000),
        "thresholds": Key(_list(float), []),
        "stop_at_thresholds": Key(_bool, False),
        **PPO_KEYS,
        **MODEL_KEYS,
    },
    "evaluate": {
        "env": Key(str, "2a2t"),
        "ckpt": Key(str, "none"),
        "out": Key(str, ""),
        "seed": Key(int, 0),
        "episodes": Key(int, 32),
        "mode": Key(str, "greedy"),
        "random_baseline_episodes": Key(int, 0),
        **MODEL_KEYS,
    },
    "compare": {
        "env": Key(str, "2a2t"),
        "ckpt": Key(str, ""),
        "out": Key(str, "runs/compare"),
        "seed": Key(int, 0),
        "n_seeds": Key(int, 5),
        "total_env_steps": Key(int, 60_000),
        "threshold_fracs": Key(_list(float), [0.8]),
        "reference_tier": Key(str, "good"),
        "reference_episodes": Key(int, 100),
        "stop_at_thresholds": Key(_bool, True),
        **PPO_KEYS,
        **MODEL_KEYS,
    },
}

# dedicated flags -> config keys
FLAGS = {
    "gen-data": {"scenario": "--scenario", "tier": "--tier", "episodes": "--episodes", "seed": "--seed",
                 "out": "--out"},
    "stats": {"data": "--data"},
    "pretrain": {"data": "--data", "out": "--out", "seed": "--seed"},
    "finetune": {"env": "--env", "ckpt": "--ckpt", "out": "--out", "seed": "--seed",
                 "total_env_steps": "--budget"},
    "evaluate": {"env": "--env", "ckpt": "--ckpt", "out": "--out", "seed": "--seed", "episodes": "--episodes"},
    "compare": {"env": "--env", "ckpt": "--ckpt", "out": "--out", "seed": "--seed",
                "total_env_steps": "--budget", "n_seeds": "--seeds"},
}


def resolve_config(command: str, config_path=None, overrides: dict[str, str] | None = None) -> dict:
    """Defaults, then the file's ``[command]`` section, then overrides. Unknown keys raise."""
    schema = SCHEMAS[command]
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        if cp.has_section(command):
            raw.update(cp.items(command))
    raw.update(overrides or {})
    out = {k: key.default for k, key in schema.items()}
    for k, text in raw.items():
        if k not in schema:
            raise ConfigError(f"unknown key {k!r} for {command}")
        try:
            out[k] = schema[k].conv(text) if isinstance(text, str) else text
        except ValueError as e:
            raise ConfigError(f"bad value for {k!r}: {e}") from None
    return out


def _parse_sets(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# provenance helpers


def git_blob_hash(path) -> str:
    """Content hash computed the way git hashes a blob."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_provenance(run_dir: Path, command: str, cfg: dict, inputs=()) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp[command] = {k: _fmt(v) for k, v in cfg.items()}
    with open(run_dir / "config.ini", "w") as fh:
        cp.write(fh)
    (run_dir / "seed.txt").write_text(f"{cfg.get('seed', 0)}\n")
    lines = [f"{git_blob_hash(p)}  {p}" for p in inputs]
    (run_dir / "inputs.sha1").write_text("".join(line + "\n" for line in lines))


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return "none" if v is None else str(v)


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def ppo_config(cfg: dict, seed: int, budget: int, thresholds=()) -> PPOConfig:
    try:
        return PPOConfig(
            gamma=cfg["gamma"], clip_eps=cfg["clip_eps"], ppo_epochs=cfg["online_ppo_epochs"],
            online_lr=cfg["online_lr"], buffer_size=cfg["online_buffer_size"], eval_epochs=cfg["eval_epochs"],
            total_env_steps=budget, seed=seed, mini_batch_size=cfg["mini_batch_size"],
            value_coef=cfg["value_coef"], entropy_coef=cfg["entropy_coef"], max_grad_norm=cfg["max_grad_norm"],
            normalize_advantage=cfg["normalize_advantage"], gae_lambda=cfg["gae_lambda"],
            algorithm=cfg["algorithm"], thresholds=tuple(thresholds),
            stop_at_thresholds=cfg["stop_at_thresholds"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_model(ckpt: str, cfg: dict, seed: int) -> MADT:
    if ckpt.lower() in ("", "none"):
        return MADT(model_config(cfg), seed=subseed(seed, "init"))
    path = Path(ckpt)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return MADT.load(path)


def _inputs(ckpt: str):
    return [] if ckpt.lower() in ("", "none") else [Path(ckpt)]


def write_threshold_csv(path: Path, scenario: str, steps: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "threshold", "env_steps"])
        for thr, s in steps.items():
            w.writerow([scenario, f"{thr:.6g}", "" if s is None else s])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out=print) -> int:
    scenarios = list(cfg["scenario"]) + [load_scenario(p).scenario_id for p in cfg["scenario_file"]]
    for tier in cfg["tier"]:
        if tier not in ("poor", "medium", "good"):
            raise ConfigError(f"unknown tier {tier!r}")
    out_dir = Path(cfg["out"])
    for sid in scenarios:
        get_spec(sid)
    for sid in scenarios:
        for tier in cfg["tier"]:
            ds = generate(sid, tier, cfg["episodes"], seed=subseed(cfg["seed"], f"data/{sid}/{tier}"), out_dir=out_dir)
            m = ds.manifest()
            out(f"wrote {out_dir / dataset_filename(sid, tier)}: {m.n_episodes} episodes, "
                f"{m.n_samples} samples, return {m.return_mean:.3f}")
    return EXIT_OK


def cmd_stats(cfg: dict, out=print) -> int:
    paths = find_datasets(cfg["data"])
    if not paths or not all(p.is_file() for p in paths):
        raise ConfigError(f"no datasets found at {cfg['data']}")
    out(format_stats_table([verify_manifest(p) for p in paths]).rstrip("\n"))
    return EXIT_OK


def _select_datasets(cfg: dict) -> list[Path]:
    paths = [p for p in find_datasets(cfg["data"]) if p.is_file()]
    if not paths:
        raise ConfigError(f"no datasets found at {cfg['data']}")
    if not cfg["offline_map_lists"]:
        return paths
    by_name = {p.name: p for p in paths}
    chosen = []
    for sid in cfg["offline_map_lists"]:
        name = dataset_filename(sid, cfg["quality"])
        if name not in by_name:
            raise ConfigError(f"offline_map_lists: no dataset {name} under {cfg['data']}")
        chosen.append(by_name[name])
    return chosen


def cmd_pretrain(cfg: dict, out=print) -> int:
    paths = _select_datasets(cfg)
    nums = cfg["offline_episode_num"] or None
    if nums is not None and len(nums) not in (1, len(paths)):
        raise ConfigError("offline_episode_num must have one entry or one per map")
    if nums is not None and len(nums) == 1:
        nums = nums * len(paths)
    run_dir = Path(cfg["out"])
    write_provenance(run_dir, "pretrain", cfg, paths)
    model = MADT(model_config(cfg), seed=subseed(cfg["seed"], "init"))
    ud = merge([read_dataset(p) for p in paths], model.config.dims, nums)
    try:
        oc = OfflineConfig(learning_rate=cfg["offline_lr"], mini_batch_size=cfg["mini_batch_size"],
                           epochs=cfg["epochs"], context_length=cfg["context_length"],
                           seed=subseed(cfg["seed"], "data"), offline_train_critic=cfg["offline_train_critic"],
                           gamma=cfg["gamma"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rep = pretrain(ud, model, oc, out=run_dir / "model.ckpt", metrics_path=run_dir / "metrics.jsonl",
                   log=lambda r: out(f"epoch {r['epoch']}: loss {r['loss']:.4f} accuracy {r['accuracy']:.4f}"))
    out(f"saved {rep.checkpoint} ({rep.wall_clock:.1f}s)")
    return EXIT_OK


def cmd_finetune(cfg: dict, out=print) -> int:
    spec = get_spec(cfg["env"])
    run_dir = Path(cfg["out"])
    model = load_model(cfg["ckpt"], cfg, cfg["seed"])
    model.config.check_fits([spec])
    write_provenance(run_dir, "finetune", cfg, _inputs(cfg["ckpt"]))
    pc = ppo_config(cfg, cfg["seed"], cfg["total_env_steps"], cfg["thresholds"])
    rep = finetune(spec, model, pc, out_dir=run_dir,
                   log=lambda r: out(f"iter {r['iteration']}: steps {r['env_steps']} eval {r['eval_return']:.3f}"))
    write_threshold_csv(run_dir / "steps_to_threshold.csv", spec.scenario_id, rep.steps_to_threshold)
    if rep.insufficient_budget:
        out("insufficient budget: collection truncated before a full buffer")
    return EXIT_OK


def cmd_evaluate(cfg: dict, out=print) -> int:
    spec = get_spec(cfg["env"])
    if cfg["mode"] not in ("greedy", "sample"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    model = load_model(cfg["ckpt"], cfg, cfg["seed"])
    model.config.check_fits([spec])
    ev = evaluate(spec, model, cfg["episodes"], cfg["mode"], seed=subseed(cfg["seed"], "eval"))
    res = {"scenario": spec.scenario_id, "episodes": cfg["episodes"], "mean_return": ev.mean_return,
           "success_rate": ev.success_rate}
    if cfg["random_baseline_episodes"] > 0:
        rb = random_policy_baseline(spec, cfg["random_baseline_episodes"], seed=subseed(cfg["seed"], "random"))
        res["random_mean_return"] = rb.mean_return
        res["random_std_error"] = float(np.std(rb.returns) / np.sqrt(len(rb.returns)))
    if cfg["out"]:
        run_dir = Path(cfg["out"])
        write_provenance(run_dir, "evaluate", cfg, _inputs(cfg["ckpt"]))
        (run_dir / "result.json").write_text(json.dumps(res, indent=2) + "\n")
    out(json.dumps(res))
    return EXIT_OK


def reference_return(scenario, tier: str, episodes: int, seed: int) -> float:
    rng = np.random.default_rng(subseed(seed, "reference"))
    seeds = rng.integers(0, 2**31 - 1, size=episodes)
    return float(np.mean([scripted_episode_return(scenario, tier, int(s))[0] for s in seeds]))


def _median(xs):
    xs = [x for x in xs if x is not None]
    return statistics.median(xs) if xs else None


def cmd_compare(cfg: dict, out=print) -> int:
    """Matched pre-trained vs from-scratch fine-tunes over several seeds.

    Each (arm, seed) run writes ``result.json`` on completion and is skipped on
    a rerun, so an interrupted comparison resumes where it stopped.
    """
    spec = get_spec(cfg["env"])
    if not cfg["ckpt"] or cfg["ckpt"].lower() == "none":
        raise ConfigError("compare needs a pre-trained checkpoint in 'ckpt'")
    if not Path(cfg["ckpt"]).is_file():
        raise ConfigError(f"checkpoint not found: {cfg['ckpt']}")
    if cfg["n_seeds"] < 1:
        raise ConfigError("n_seeds must be at least 1")
    run_dir = Path(cfg["out"])
    write_provenance(run_dir, "compare", cfg, _inputs(cfg["ckpt"]))
    ref = reference_return(spec, cfg["reference_tier"], cfg["reference_episodes"], cfg["seed"])
    thresholds = [f * ref for f in cfg["threshold_fracs"]]
    seeds = [subseed(cfg["seed"], f"compare/{k}") for k in range(cfg["n_seeds"])]
    results: dict[str, list[dict]] = {"pretrained": [], "scratch": []}
    for arm in results:
        for k, seed in enumerate(seeds):
            sub = run_dir / f"{arm}-seed{k}"
            done = sub / "result.json"
            if done.is_file():
                results[arm].append(json.loads(done.read_text()))
                out(f"{arm} seed {k}: reused {done}")
                continue
            model = load_model(cfg["ckpt"] if arm == "pretrained" else "none", cfg, seed)
            model.config.check_fits([spec])
            pc = ppo_config(cfg, seed, cfg["total_env_steps"], thresholds)
            rep = finetune(spec, model, pc, out_dir=sub)
            res = {"arm": arm, "seed": seed, "curve": rep.curve, "env_steps": rep.env_steps,
                   "steps_to_threshold": [rep.steps_to_threshold[t] for t in pc.thresholds],
                   "final_eval_return": rep.final_eval_return(), "evaluation_only": rep.evaluation_only}
            done.write_text(json.dumps(res) + "\n")
            results[arm].append(res)
            out(f"{arm} seed {k}: steps to threshold {res['steps_to_threshold']}, "
                f"final eval {res['final_eval_return']:.3f}")

    with open(run_dir / "steps_to_threshold.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "threshold_frac", "threshold_return", "scratch_median_steps",
                    "pretrained_median_steps", "scratch_reached", "pretrained_reached"])
        for i, (frac, thr) in enumerate(zip(cfg["threshold_fracs"], thresholds)):
            med = {a: _median([r["steps_to_threshold"][i] for r in rs]) for a, rs in results.items()}
            hit = {a: sum(r["steps_to_threshold"][i] is not None for r in rs) for a, rs in results.items()}
            w.writerow([spec.scenario_id, frac, f"{thr:.6g}", "" if med["scratch"] is None else med["scratch"],
                        "" if med["pretrained"] is None else med["pretrained"],
                        f"{hit['scratch']}/{len(seeds)}", f"{hit['pretrained']}/{len(seeds)}"])
    with open(run_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seed", "iteration", "env_steps", "eval_return", "eval_success_rate"])
        for arm, rs in results.items():
            for r in rs:
                for rec in r["curve"]:
                    w.writerow([arm, r["seed"], rec["iteration"], rec["env_steps"], rec["eval_return"],
                                rec["eval_success_rate"]])
    out((run_dir / "steps_to_threshold.csv").read_text().rstrip("\n"))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madt", description="Multi-agent decision transformer experiments")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = subs.add_parser(name)
        sp.add_argument("--config", help="INI file; the [%s] section is read" % name)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        for key, flag in FLAGS[name].items():
            sp.add_argument(flag, dest=f"flag_{key}", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _parse_sets(args.set)
        for key in FLAGS[args.command]:
            v = getattr(args, f"flag_{key}")
            if v is not None:
                overrides[key] = v
        cfg = resolve_config(args.command, args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (DataIntegrityError, UnificationError, CheckpointFormatError) as e:
        print(f"data integrity error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UnknownScenarioError, FileNotFoundError, ValueError) as e:
        # plain ValueErrors here come from validating user-supplied settings
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
