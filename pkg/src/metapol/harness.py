"""Experiment driver: the system matrix, the two sweeps, and reporting.

Every run is parameterized by an ExperimentConfig plus one master seed,
and every artifact is a deterministic CSV (fixed column order, fixed
float formatting, no timestamps), so re-running a command reproduces its
output byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .env import Environment
from .numgrad import ParamStore
from .ontology import TaskSpec
from .qnet import DqnModel, DtqnModel
from .trainer import (DualReplay, MetaConfig, MetaTrainer, RLConfig, evaluate,
                      meta_adapt, train_policy)

VARIANTS = ("vanilla-dqn", "dqn", "dtqn", "dqn-1k", "dtqn-1k",
            "meta-dtqn-sr", "meta-dtqn")

SOURCE_DOMAINS = ("attraction", "restaurant", "taxi", "hospital")
TARGET_DOMAINS = ("hotel", "train", "police")


class HarnessError(Exception):
    pass


@dataclass
class ExperimentConfig:
    variants: tuple[str, ...] = VARIANTS
    mode: str = "single"
    seeds: tuple[int, ...] = (0, 1, 2)
    sources: tuple[str, ...] = SOURCE_DOMAINS
    targets: tuple[str, ...] = TARGET_DOMAINS
    rl: RLConfig = field(default_factory=RLConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    train_frames: int = 20_000
    adapt_frames: int = 1_000
    meta_rounds: int = 1_500
    eval_episodes: int = 500
    dqn_lr: float = 0.01
    scratch_post_steps: int = 1_000
    # meta-training memories are sized so the spike is never evicted: the
    # outer loop pushes mostly failure frames at desk scale, and a small
    # ring would silently squeeze out the only success signal
    meta_buffer_capacity: int = 600_000
    meta_eval_every: int = 200
    meta_dev_episodes: int = 30

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise HarnessError(f"unknown variant {v!r}")
        if self.mode not in ("single", "composite"):
            raise HarnessError(f"unknown task mode {self.mode!r}")


@dataclass
class MetricsRow:
    variant: str
    task: str
    seed: int
    success: float
    reward: float
    turns: float
    frames: int


def config_from_json(path: str) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    rl = RLConfig(**raw.pop("rl", {}))
    meta = MetaConfig(**raw.pop("meta", {}))
    for key in ("variants", "seeds", "sources", "targets"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ExperimentConfig(rl=rl, meta=meta, **raw)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_csv(path: str, header: list[str], rows: list[tuple]) -> None:
    """Atomic deterministic CSV: fixed order, %.6f floats, unix newlines."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(tmp, "w", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _task_for(env: Environment, domain: str, mode: str,
              pool: tuple[str, ...] | None = None) -> TaskSpec:
    seed = env.ont.domain_handle(domain)
    pool_ids = None
    if pool is not None:
        pool_ids = tuple(env.ont.domain_handle(d) for d in pool)
    return TaskSpec(seed=seed, mode=mode, pool=pool_ids)


def source_tasks(env: Environment, cfg: ExperimentConfig) -> list[TaskSpec]:
    """Meta-training tasks; composite pools stay inside the source split."""
    return [_task_for(env, d, cfg.mode, cfg.sources if cfg.mode == "composite" else None)
            for d in cfg.sources]


def target_task(env: Environment, cfg: ExperimentConfig, domain: str) -> TaskSpec:
    pool = None
    if cfg.mode == "composite":
        pool = tuple(dict.fromkeys(cfg.targets + cfg.sources))
    return _task_for(env, domain, cfg.mode, pool)


def _seed_rng(master: int, *parts) -> np.random.Generator:
    """Derive a child generator from stable (not process-salted) hashes."""
    words = [zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(words + [master])


def _scratch_rbs(cfg: ExperimentConfig) -> int:
    return cfg.meta.rbs_single if cfg.mode == "single" else cfg.meta.rbs_composite


def _train_meta(env: Environment, cfg: ExperimentConfig, seed: int,
                shared_buffer: bool) -> tuple[DtqnModel, ParamStore, dict]:
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(seed)
    tasks = source_tasks(env, cfg)
    if shared_buffer:
        dual = DualReplay.shared(cfg.meta_buffer_capacity)
    else:
        dual = DualReplay(cfg.meta_buffer_capacity, cfg.meta_buffer_capacity)
    trainer = MetaTrainer(env, model, params, cfg.rl, cfg.meta, tasks,
                          _seed_rng(seed, "meta", shared_buffer), dual=dual)
    # the final parameters are kept rather than a best-dev snapshot: dev
    # success at desk scale mostly measures evaluation luck, while
    # adaptability keeps improving with outer rounds even when the dev
    # curve wobbles, so selecting on dev freezes a less transferable model
    out = trainer.run(cfg.meta_rounds, eval_every=cfg.meta_eval_every,
                      eval_episodes=cfg.meta_dev_episodes)
    return model, params, out


def run_variant(env: Environment, cfg: ExperimentConfig, variant: str,
                domain: str, seed: int,
                meta_ckpt: tuple[DtqnModel, ParamStore] | None = None) -> MetricsRow:
    """Train or adapt one system for one target domain and evaluate it."""
    task = target_task(env, cfg, domain)
    rng = _seed_rng(seed, variant, domain)
    frames = 0

    if variant in ("vanilla-dqn", "dqn", "dqn-1k"):
        model = DqnModel(env.ont, env.actions)
        params = model.init_params(seed)
        rl = replace(cfg.rl, lr=cfg.dqn_lr)
    else:
        model = DtqnModel(env.ont, env.actions)
        params = model.init_params(seed)
        rl = cfg.rl

    if variant in ("vanilla-dqn", "dqn", "dtqn"):
        frames = cfg.train_frames
        rbs = 0 if variant == "vanilla-dqn" else _scratch_rbs(cfg)
        train_policy(env, model, params, rl, [task], rng, frame_budget=frames,
                     rbs_episodes=rbs, post_steps=cfg.scratch_post_steps,
                     eval_episodes=1)
    elif variant in ("dqn-1k", "dtqn-1k"):
        frames = cfg.adapt_frames
        train_policy(env, model, params, rl, [task], rng, frame_budget=frames,
                     rbs_episodes=_scratch_rbs(cfg), post_steps=cfg.scratch_post_steps,
                     eval_episodes=1)
    elif variant in ("meta-dtqn", "meta-dtqn-sr"):
        if meta_ckpt is None:
            model, meta_params, _ = _train_meta(env, cfg, seed,
                                                variant == "meta-dtqn-sr")
        else:
            model, meta_params = meta_ckpt
        params, frames, _ = meta_adapt(env, model, meta_params, task,
                                       cfg.adapt_frames, cfg.rl, cfg.meta, rng)
    else:
        raise HarnessError(f"unknown variant {variant!r}")

    stats = evaluate(env, model, params, [task], cfg.eval_episodes,
                     _seed_rng(seed, "eval", variant, domain))
    return MetricsRow(variant=variant, task=domain, seed=seed,
                      success=stats["success"], reward=stats["reward"],
                      turns=stats["turns"], frames=frames)


def run_matrix(env: Environment, cfg: ExperimentConfig, out_path: str,
               master_seed: int = 0) -> list[MetricsRow]:
    """The full system table: every variant on every target domain."""
    rows: list[MetricsRow] = []
    for variant in cfg.variants:
        for seed in cfg.seeds:
            ckpt = None
            if variant in ("meta-dtqn", "meta-dtqn-sr"):
                model, params, _ = _train_meta(env, cfg, master_seed + seed,
                                               variant == "meta-dtqn-sr")
                ckpt = (model, params)
            for domain in cfg.targets:
                rows.append(run_variant(env, cfg, variant, domain,
                                        master_seed + seed, meta_ckpt=ckpt))
    write_csv(out_path,
              ["variant", "task", "seed", "success", "reward", "turns", "frames"],
              [(r.variant, r.task, r.seed, r.success, r.reward, r.turns, r.frames)
               for r in rows])
    return rows


def sweep_eval_buffer(env: Environment, cfg: ExperimentConfig, out_dir: str,
                      sizes: tuple[int, ...] = (16, 5000, 50000),
                      master_seed: int = 0) -> dict:
    """Meta-training once per evaluation-buffer size, logging both curves."""
    loss_rows: list[tuple] = []
    eval_rows: list[tuple] = []
    curves: dict = {}
    for size in sizes:
        for seed in cfg.seeds:
            meta = replace(cfg.meta, eval_capacity=size)
            model = DtqnModel(env.ont, env.actions)
            params = model.init_params(master_seed + seed)
            tasks = source_tasks(env, cfg)
            dual = DualReplay(cfg.meta_buffer_capacity, size)
            trainer = MetaTrainer(env, model, params, cfg.rl, meta, tasks,
                                  _seed_rng(master_seed + seed, "sweep", size),
                                  dual=dual)
            out = trainer.run(cfg.meta_rounds, eval_every=25,
                              eval_episodes=cfg.eval_episodes)
            curves[(size, seed)] = out
            for rnd, loss in out["loss_curve"]:
                loss_rows.append((size, seed, rnd, loss))
            for ev in out["eval_curve"]:
                eval_rows.append((size, seed, ev["round"], ev["success"],
                                  ev["reward"], ev["turns"]))
    write_csv(os.path.join(out_dir, "sweep_buffer_loss.csv"),
              ["size", "seed", "round", "loss"], loss_rows)
    write_csv(os.path.join(out_dir, "sweep_buffer_eval.csv"),
              ["size", "seed", "round", "success", "reward", "turns"], eval_rows)
    return curves


def sweep_adapt_data(env: Environment, cfg: ExperimentConfig, out_path: str,
                     model: DtqnModel, meta_params: ParamStore, domain: str,
                     budgets: tuple[int, ...] = (100, 500, 1000, 1500, 2000, 2500),
                     master_seed: int = 0) -> list[tuple]:
    """Adaptation-data curve from one meta checkpoint."""
    rows: list[tuple] = []
    task = target_task(env, cfg, domain)
    for budget in budgets:
        for seed in cfg.seeds:
            rng = _seed_rng(master_seed + seed, "adapt", domain, budget)
            params, frames, _ = meta_adapt(env, model, meta_params, task, budget,
                                           cfg.rl, cfg.meta, rng)
            stats = evaluate(env, model, params, [task], cfg.eval_episodes,
                             _seed_rng(master_seed + seed, "adapt-eval", budget))
            rows.append((budget, seed, frames, stats["success"],
                         stats["reward"], stats["turns"]))
    write_csv(out_path, ["budget", "seed", "frames", "success", "reward", "turns"],
              rows)
    return rows


def read_metrics(path: str) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricsRow(variant=rec["variant"], task=rec["task"],
                                   seed=int(rec["seed"]),
                                   success=float(rec["success"]),
                                   reward=float(rec["reward"]),
                                   turns=float(rec["turns"]),
                                   frames=int(rec["frames"])))
    return rows


def render_table(rows: list[MetricsRow]) -> str:
    """Plain-text matrix: variants down, domains across, plus Average."""
    if not rows:
        return "(no metrics)\n"
    variants = list(dict.fromkeys(r.variant for r in rows))
    domains = list(dict.fromkeys(r.task for r in rows))
    lines = []
    header = ["system"] + [f"{d:>22}" for d in domains] + [f"{'Average':>22}"]
    lines.append(" | ".join([f"{header[0]:<14}"] + header[1:]))
    for v in variants:
        cells = [f"{v:<14}"]
        means = []
        for d in domains:
            cell = [r for r in rows if r.variant == v and r.task == d]
            if not cell:
                cells.append(f"{'-':>22}")
                continue
            s = float(np.mean([r.success for r in cell]))
            rw = float(np.mean([r.reward for r in cell]))
            tn = float(np.mean([r.turns for r in cell]))
            means.append((s, rw, tn))
            cells.append(f"{100 * s:6.2f} / {rw:7.2f} / {tn:5.2f}")
        if means:
            s, rw, tn = (float(np.mean([m[i] for m in means])) for i in range(3))
            cells.append(f"{100 * s:6.2f} / {rw:7.2f} / {tn:5.2f}")
        else:
            cells.append(f"{'-':>22}")
        lines.append(" | ".join(cells))
    lines.append("cells: success% / mean reward / mean turns")
    return "\n".join(lines) + "\n"
