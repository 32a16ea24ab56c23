"""Operator CLI: dataset generation, training, evaluation, gap analysis.

Exit codes: 0 success, 2 usage/config problems, 3 numerical failure during
training, 4 I/O or file-format failure. All subcommands are deterministic
given their arguments and seed; POPO_SEED serves as the seed fallback.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from popo.agent import METRIC_COLUMNS, POPO
from popo.config import TrainConfig
from popo.data import inspect_summary, read_dataset, write_dataset
from popo.envs import ENV_IDS, POLICY_KINDS, collect_dataset, make_env
from popo.errors import FormatError, NonFiniteError, PopoError
from popo.gap import TabularPolicy, empirical_model, gap_report, load_mdp_json, load_transitions_json

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

RUN_CONFIG_EXTRA_KEYS = ("env_id", "dataset", "out", "seed")


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def default_seed() -> int:
    return int(os.environ.get("POPO_SEED", "0"))


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; unset flags fall back to config file, then defaults."""
    for field in dataclasses.fields(TrainConfig):
        if field.name == "max_steps":
            parser.add_argument("--steps", "--max-steps", dest="max_steps", type=int, default=None)
            continue
        caster = {"float": float, "int": int, "str": str, "bool": _parse_bool}.get(
            field.type if isinstance(field.type, str) else field.type.__name__, str
        )
        parser.add_argument(_flag(field.name), dest=field.name, type=caster, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll a scripted behavior policy into a dataset file")
    p.add_argument("--env", required=True, choices=ENV_IDS)
    p.add_argument("--kind", required=True, choices=POLICY_KINDS)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="offline training run: metrics.csv + checkpoint")
    p.add_argument("--config", help="JSON config file; explicit flags win")
    p.add_argument("--dataset", help="path to a .popo dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--env", dest="env_id", default=None, help="eval env (default: dataset env)")
    p.add_argument("--seed", type=int, default=None)
    _add_train_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint, print a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", dest="env_id", default=None)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gap", help="tabular estimation-gap report (true vs dataset value)")
    p.add_argument("--mdp", required=True, help="JSON MDP file {S, A, reward_support, p, rho0, gamma}")
    p.add_argument("--transitions", required=True, help="JSON list of [s, a, r_index, s_next]")
    p.add_argument("--policy", help="JSON [S][A] policy matrix (default: uniform)")
    p.add_argument("--absorb-uncovered", action="store_true",
                   help="treat uncovered (s,a) as a zero-reward self-loop instead of erroring")

    p = sub.add_parser("dataset-inspect", help="print a JSON summary of a dataset file")
    p.add_argument("--dataset", required=True)
    return parser


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    if args.n < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    env = make_env(args.env)
    dataset = collect_dataset(env, args.kind, args.n, seed, jobs=args.jobs)
    write_dataset(dataset, args.out)
    print(json.dumps({
        "out": str(args.out),
        "count": dataset.count,
        "mean_return": dataset.manifest["mean_return"],
        "content_hash": dataset.content_hash(),
    }))
    return EXIT_OK


def _merge_train_config(args) -> tuple[dict, dict]:
    """File config overlaid by explicit flags; returns (train_kwargs, run_extras)."""
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        unknown = set(doc) - set(TrainConfig.field_names()) - set(RUN_CONFIG_EXTRA_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    train_kwargs = {k: doc[k] for k in TrainConfig.field_names() if k in doc}
    for name in TrainConfig.field_names():
        value = getattr(args, name, None)
        if value is not None:
            train_kwargs[name] = value
    extras = {k: doc.get(k) for k in RUN_CONFIG_EXTRA_KEYS}
    if args.dataset is not None:
        extras["dataset"] = args.dataset
    if args.out is not None:
        extras["out"] = args.out
    if args.env_id is not None:
        extras["env_id"] = args.env_id
    if args.seed is not None:
        extras["seed"] = args.seed
    if extras.get("seed") is None:
        extras["seed"] = default_seed()
    return train_kwargs, extras


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_train(args) -> int:
    train_kwargs, extras = _merge_train_config(args)
    if not extras.get("dataset"):
        print("error: --dataset is required (flag or config)", file=sys.stderr)
        return EXIT_USAGE
    if not extras.get("out"):
        print("error: --out is required (flag or config)", file=sys.stderr)
        return EXIT_USAGE
    TrainConfig.from_dict(train_kwargs)  # validate before any work

    dataset = read_dataset(extras["dataset"])
    env_id = extras.get("env_id") or dataset.env_id
    env = make_env(env_id)
    out_dir = Path(extras["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    agent = POPO(**train_kwargs, seed=int(extras["seed"]))
    agent.setup(dataset)
    manifest = {
        "config": agent.get_params(),
        "env_id": env_id,
        "dataset": str(extras["dataset"]),
        "dataset_hash": dataset.content_hash(),
        "dataset_manifest": dataset.manifest,
        "status": "running",
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as csv_file:
        csv_file.write(",".join(METRIC_COLUMNS) + "\n")

        def on_row(row: dict) -> None:
            csv_file.write(",".join(_format_cell(row[c]) for c in METRIC_COLUMNS) + "\n")

        try:
            agent.fit(dataset, eval_env=env, on_row=on_row)
        except NonFiniteError as exc:
            on_row({**dict.fromkeys(METRIC_COLUMNS), "step": agent.step_ + 1})
            csv_file.flush()
            manifest["status"] = f"numerical-failure: {exc}"
            (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC

    agent.save(out_dir / "checkpoint")
    manifest["status"] = "complete"
    final_eval = [r for r in agent.metrics_ if r["eval_return_mean"] is not None]
    if final_eval:
        manifest["final_eval_return_mean"] = final_eval[-1]["eval_return_mean"]
        manifest["final_q_beta_mean"] = final_eval[-1]["q_beta_mean"]
        manifest["final_mc_return"] = final_eval[-1]["mc_return"]
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(json.dumps({"out": str(out_dir), "steps": agent.step_,
                      "final_eval_return_mean": manifest.get("final_eval_return_mean")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    agent = POPO.load(args.checkpoint)
    env_id = args.env_id or agent.env_id_
    env = make_env(env_id)
    if (env.spec.obs_dim, env.spec.act_dim) != (agent.obs_dim_, agent.act_dim_):
        print(
            f"error: checkpoint dims (obs {agent.obs_dim_}, act {agent.act_dim_}) do not "
            f"match env {env_id} (obs {env.spec.obs_dim}, act {env.spec.act_dim})",
            file=sys.stderr,
        )
        return EXIT_USAGE
    result = agent.evaluate(env, args.episodes, seed=seed)
    print(json.dumps({
        "env_id": env_id,
        "episodes": args.episodes,
        "return_mean": result.return_mean,
        "return_std": result.return_std,
        "q_beta_mean": result.q_beta_mean,
        "mc_return": result.mc_return_mean,
        "returns": result.returns,
        "mc_returns": result.mc_returns,
    }))
    return EXIT_OK


def cmd_gap(args) -> int:
    mdp = load_mdp_json(args.mdp)
    transitions = load_transitions_json(args.transitions)
    if args.policy:
        policy = TabularPolicy(np.asarray(json.loads(Path(args.policy).read_text()), dtype=np.float64))
    else:
        policy = TabularPolicy(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))
    model = empirical_model(transitions, mdp.n_states, mdp.n_actions, mdp.n_rewards)
    report = gap_report(mdp, model, policy, absorb_uncovered=args.absorb_uncovered)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_dataset_inspect(args) -> int:
    print(json.dumps(inspect_summary(read_dataset(args.dataset))))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gap": cmd_gap,
    "dataset-inspect": cmd_dataset_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PopoError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
