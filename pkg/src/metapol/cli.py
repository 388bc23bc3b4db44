"""Command-line entry point.

Subcommands cover the whole workflow: ontology inspection, environment
rollouts, model inspection, training, adaptation, evaluation, the system
matrix, both sweeps, and table rendering. METAPOL_SEED overrides the
master seed of any command.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .env import Environment, RandomPolicy
from .harness import (ExperimentConfig, config_from_json, read_metrics,
                      render_table, run_matrix, source_tasks, sweep_adapt_data,
                      sweep_eval_buffer, target_task, write_csv, _train_meta)
from .numgrad import ParamStore
from .ontology import OntologyError, load_ontology
from .qnet import DqnModel, DtqnModel
from .trainer import RLConfig, evaluate, meta_adapt, train_policy


def _master_seed(args) -> int:
    env_seed = os.environ.get("METAPOL_SEED")
    if env_seed is not None:
        return int(env_seed)
    return args.seed


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return config_from_json(args.config)
    return ExperimentConfig()


def _model_for(env: Environment, arch: str):
    if arch == "dqn":
        return DqnModel(env.ont, env.actions)
    return DtqnModel(env.ont, env.actions)


def cmd_ontology(args) -> int:
    path = args.path or None
    try:
        if path:
            ont = load_ontology(path)
            env = None
        else:
            env = Environment.builtin()
            ont = env.ont
    except OntologyError as err:
        print(f"invalid ontology: {err}", file=sys.stderr)
        return 1
    if args.what == "validate":
        n_actions = len(env.actions) if env else "-"
        print(f"domains {ont.n_domains} slots {len(ont.slots)} "
              f"acts {len(ont.acts)} values {len(ont.values)} "
              f"compositions {len(ont.compositions)} actions {n_actions}")
        return 0
    env = env or Environment.builtin()
    for handle in range(len(env.actions)):
        desc = env.actions.describe(handle)
        if args.domain and not desc.startswith(args.domain + ":"):
            continue
        spec = env.actions.specs[handle]
        shared = ",".join(ont.domains[d].name for d in spec.relevant)
        print(f"{handle:3d} {desc:40s} relevant={shared}")
    return 0


def cmd_env(args) -> int:
    env = Environment.builtin()
    seed = _master_seed(args)
    names = args.task.split("+")
    mode = "single" if len(names) == 1 else "composite"
    task = target_task(env, ExperimentConfig(mode=mode), names[0])
    rng = np.random.default_rng(seed)
    if args.policy == "rule":
        policy = env.rule_policy()
    else:
        policy = RandomPolicy(len(env.actions), np.random.default_rng(seed + 1))
    results = env.interact(task, policy, rng, episodes=args.episodes)
    n = len(results)
    print(f"episodes {n} success {sum(r.success for r in results) / n:.3f} "
          f"reward {sum(r.total_reward for r in results) / n:.2f} "
          f"turns {sum(r.turns for r in results) / n:.2f}")
    return 0


def cmd_qnet(args) -> int:
    env = Environment.builtin()
    model = _model_for(env, args.arch)
    params = model.init_params(_master_seed(args))
    total = 0
    for name, shape in params.shapes().items():
        size = int(np.prod(shape))
        total += size
        print(f"{name:20s} {str(shape):>14s} {size:7d}")
    print(f"{'total':20s} {'':>14s} {total:7d}")
    if args.arch == "dtqn":
        print(f"d_e {model.d_e} d_s {model.d_s} d_a {model.d_a} "
              f"state concat width {model.concat_width}")
    return 0


def cmd_train(args) -> int:
    env = Environment.builtin()
    cfg = _load_config(args)
    seed = _master_seed(args)
    rng = np.random.default_rng(seed)
    history = []
    if args.mode in ("meta-dtqn", "meta-dtqn-sr"):
        model, params, out = _train_meta(env, replace_mode(cfg, args.tasks), seed,
                                         args.mode == "meta-dtqn-sr")
        history = [{"step": ev["step"], "frames": -1, "loss": float("nan"),
                    "success": ev["success"], "reward": ev["reward"],
                    "turns": ev["turns"]} for ev in out["eval_curve"]]
    else:
        model = _model_for(env, "dqn" if args.mode.startswith("dqn") else "dtqn")
        params = model.init_params(seed)
        cfg2 = replace_mode(cfg, args.tasks)
        task = target_task(env, cfg2, args.target or cfg2.targets[0])
        rl = cfg.rl if args.mode.startswith("dtqn") else \
            replace(cfg.rl, lr=cfg.dqn_lr)
        budget = cfg.adapt_frames if args.mode.endswith("-1k") else cfg.train_frames
        rbs = 0 if args.mode == "vanilla-dqn" else \
            (cfg.meta.rbs_single if cfg2.mode == "single" else cfg.meta.rbs_composite)
        history = train_policy(env, model, params, rl, [task], rng,
                               frame_budget=budget, rbs_episodes=rbs,
                               post_steps=cfg.scratch_post_steps,
                               eval_every=max(budget // 8, 1),
                               eval_episodes=100)
    if args.out:
        params.save(args.out)
        print(f"checkpoint written to {args.out}")
    if args.metrics and history:
        write_csv(args.metrics,
                  ["step", "frames", "loss", "success", "reward", "turns"],
                  [(h["step"], h["frames"], h["loss"], h["success"], h["reward"],
                    h["turns"]) for h in history])
    for h in history[-3:]:
        print(f"step {h['step']} success {h['success']:.3f} reward {h['reward']:.2f}")
    return 0


def replace_mode(cfg: ExperimentConfig, mode: str) -> ExperimentConfig:
    return replace(cfg, mode=mode)


def cmd_adapt(args) -> int:
    env = Environment.builtin()
    cfg = replace_mode(_load_config(args), args.tasks)
    seed = _master_seed(args)
    model = DtqnModel(env.ont, env.actions)
    meta_params = ParamStore.load_file(args.ckpt)
    task = target_task(env, cfg, args.target)
    params, frames, _ = meta_adapt(env, model, meta_params, task, args.frames,
                                   cfg.rl, cfg.meta, np.random.default_rng(seed))
    print(f"adapted on {args.target} with {frames} frames")
    if args.out:
        params.save(args.out)
        print(f"checkpoint written to {args.out}")
    stats = evaluate(env, model, params, [task], args.episodes,
                     np.random.default_rng(seed + 1))
    print(f"success {stats['success']:.3f} reward {stats['reward']:.2f} "
          f"turns {stats['turns']:.2f}")
    return 0


def cmd_eval(args) -> int:
    env = Environment.builtin()
    cfg = replace_mode(_load_config(args), args.tasks)
    seed = _master_seed(args)
    model = _model_for(env, args.arch)
    params = ParamStore.load_file(args.ckpt)
    task = target_task(env, cfg, args.target)
    stats = evaluate(env, model, params, [task], args.episodes,
                     np.random.default_rng(seed))
    print(f"episodes {stats['episodes']} success {stats['success']:.3f} "
          f"reward {stats['reward']:.2f} turns {stats['turns']:.2f}")
    return 0


def cmd_matrix(args) -> int:
    env = Environment.builtin()
    cfg = _load_config(args)
    rows = run_matrix(env, cfg, args.out, master_seed=_master_seed(args))
    print(render_table(rows))
    print(f"metrics written to {args.out}")
    return 0


def cmd_sweep_buffer(args) -> int:
    env = Environment.builtin()
    cfg = replace_mode(_load_config(args), "composite")
    sizes = tuple(int(s) for s in args.sizes.split(","))
    sweep_eval_buffer(env, cfg, args.out, sizes=sizes,
                      master_seed=_master_seed(args))
    print(f"curves written to {args.out}/sweep_buffer_loss.csv and "
          f"{args.out}/sweep_buffer_eval.csv")
    return 0


def cmd_sweep_adapt(args) -> int:
    env = Environment.builtin()
    cfg = replace_mode(_load_config(args), args.tasks)
    budgets = tuple(int(f) for f in args.frames.split(","))
    model = DtqnModel(env.ont, env.actions)
    meta_params = ParamStore.load_file(args.ckpt)
    sweep_adapt_data(env, cfg, args.out, model, meta_params, args.target,
                     budgets=budgets, master_seed=_master_seed(args))
    print(f"curve written to {args.out}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        if not os.path.exists(path):
            print(f"missing metrics file {path}", file=sys.stderr)
            continue
        rows.extend(read_metrics(path))
    table = render_table(rows)
    print(table, end="")
    if args.out:
        write_csv(args.out,
                  ["variant", "task", "seed", "success", "reward", "turns", "frames"],
                  [(r.variant, r.task, r.seed, r.success, r.reward, r.turns, r.frames)
                   for r in rows])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metapol",
                                description="cross-domain dialogue policy workbench")
    sub = p.add_subparsers(dest="cmd", required=True)

    q = sub.add_parser("ontology", help="validate or list the action catalogue")
    q.add_argument("what", choices=["validate", "actions"])
    q.add_argument("--path", default=None)
    q.add_argument("--domain", default=None)
    q.set_defaults(fn=cmd_ontology)

    q = sub.add_parser("env", help="roll scripted policies in the environment")
    q.add_argument("--task", default="attraction")
    q.add_argument("--policy", choices=["rule", "random"], default="rule")
    q.add_argument("--episodes", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_env)

    q = sub.add_parser("qnet", help="inspect model parameter shapes")
    q.add_argument("what", choices=["inspect"])
    q.add_argument("--arch", choices=["dqn", "dtqn"], default="dtqn")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_qnet)

    q = sub.add_parser("train", help="train one system variant")
    q.add_argument("--mode", required=True,
                   choices=["vanilla-dqn", "dqn", "dtqn", "dqn-1k", "dtqn-1k",
                            "meta-dtqn", "meta-dtqn-sr"])
    q.add_argument("--tasks", choices=["single", "composite"], default="single")
    q.add_argument("--target", default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--config", default=None)
    q.add_argument("--out", default=None)
    q.add_argument("--metrics", default=None)
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("adapt", help="adapt a meta checkpoint to a target")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--frames", type=int, default=1000)
    q.add_argument("--tasks", choices=["single", "composite"], default="single")
    q.add_argument("--episodes", type=int, default=500)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--config", default=None)
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_adapt)

    q = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--arch", choices=["dqn", "dtqn"], default="dtqn")
    q.add_argument("--target", default="hotel")
    q.add_argument("--tasks", choices=["single", "composite"], default="single")
    q.add_argument("--episodes", type=int, default=500)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--config", default=None)
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("matrix", help="run the full system table")
    q.add_argument("--config", default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="metrics.csv")
    q.set_defaults(fn=cmd_matrix)

    q = sub.add_parser("sweep-buffer", help="evaluation-buffer size sweep")
    q.add_argument("--sizes", default="16,5000,50000")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--config", default=None)
    q.add_argument("--out", default="sweep")
    q.set_defaults(fn=cmd_sweep_buffer)

    q = sub.add_parser("sweep-adapt", help="adaptation-data size sweep")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--target", default="hotel")
    q.add_argument("--tasks", choices=["single", "composite"], default="composite")
    q.add_argument("--frames", default="100,500,1000,1500,2000,2500")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--config", default=None)
    q.add_argument("--out", default="sweep_adapt.csv")
    q.set_defaults(fn=cmd_sweep_adapt)

    q = sub.add_parser("report", help="render metrics CSVs as a table")
    q.add_argument("inputs", nargs="+")
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
