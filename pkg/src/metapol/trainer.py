"""Replay memory, TD learning, and the dual-replay meta loops.

The plain path (QLearner, train_policy) is standard deep Q-learning with
a target network and an epsilon-greedy collector. The meta path
(MetaTrainer, meta_adapt) keeps two replay memories: inner task updates
sample only the training buffer, the outer update samples only the
evaluation buffer, and both are warmed up by spiking them with rule-agent
episodes. Outer gradients are first order: each task contributes the
gradient of its evaluation loss at the task-adapted parameters, and the
sum is applied to the shared parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .env import Environment, StateView, Transition
from .numgrad import Graph, ParamStore, grad_norm, sgd_step
from .ontology import TaskSpec


class TrainerError(Exception):
    pass


@dataclass
class RLConfig:
    gamma: float = 0.99
    batch_size: int = 16
    lr: float = 0.05
    grad_clip: float = 5.0
    eps_start: float = 0.1
    eps_final: float = 0.01
    target_sync: int = 200
    buffer_capacity: int = 50_000
    steps_per_frame: float = 1.0
    # bootstrap targets are clamped to the feasible return range of the
    # dialogue MDP (every return lies in [-2L, 2L]); without the clamp,
    # max-bootstrapping on narrow data inflates unseen actions without bound
    target_clip: float = 80.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise TrainerError("gamma outside [0, 1]")
        for e in (self.eps_start, self.eps_final):
            if not 0.0 <= e <= 1.0:
                raise TrainerError("epsilon outside [0, 1]")

    def epsilon(self, frac: float) -> float:
        """Linear decay over the first half of the run, flat after."""
        t = min(1.0, max(0.0, 2.0 * frac))
        return self.eps_start + (self.eps_final - self.eps_start) * t


@dataclass
class MetaConfig:
    inner_steps: int = 2
    inner_lr: float = 0.05
    outer_lr: float = 0.05
    episodes_train: int = 1
    episodes_eval: int = 1
    eval_capacity: int = 50_000
    rbs_meta: int = 1000
    rbs_single: int = 10
    rbs_composite: int = 50
    # off-policy TD updates run on the frozen memory after the adaptation
    # frame budget is spent; matches the digestion the scratch baselines
    # get through post_steps, so adaptation comparisons differ only in
    # the starting parameters
    adapt_steps: int = 1000

    def __post_init__(self):
        if self.inner_steps < 0:
            raise TrainerError("negative inner step count")
        if self.episodes_train < 1 or self.episodes_eval < 1:
            raise TrainerError("need at least one episode per phase")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise TrainerError("negative learning rate")


class ReplayBuffer:
    """Ring storage of transitions with task-filtered uniform sampling.

    Positions are indexed per task tag for filtered draws; stale index
    entries left behind by ring overwrites are discarded lazily when a
    draw hits them, with a full rebuild once the garbage dominates.
    """

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise TrainerError("capacity must be positive")
        self.capacity = capacity
        self.pushes = 0
        self._data: list[Transition] = []
        self._index: dict[int, list[int]] = {}
        self._counts: dict[int, int] = {}
        self._index_size = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, tr: Transition) -> None:
        pos = self.pushes % self.capacity
        if pos == len(self._data):
            self._data.append(tr)
        else:
            old = self._data[pos]
            self._counts[old.task] -= 1
            self._data[pos] = tr
        self.pushes += 1
        self._index.setdefault(tr.task, []).append(pos)
        self._index_size += 1
        self._counts[tr.task] = self._counts.get(tr.task, 0) + 1
        if self._index_size > 4 * self.capacity + 64:
            self._rebuild()

    def _rebuild(self) -> None:
        index: dict[int, list[int]] = {}
        for pos, tr in enumerate(self._data):
            index.setdefault(tr.task, []).append(pos)
        self._index = index
        self._index_size = len(self._data)

    def count_task(self, task: int) -> int:
        return self._counts.get(task, 0)

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        if not self._data:
            raise TrainerError("sampling from an empty buffer")
        picks = rng.integers(len(self._data), size=n)
        return [self._data[int(i)] for i in picks]

    def sample_task(self, rng: np.random.Generator, n: int, task: int) -> list[Transition]:
        if self.count_task(task) == 0:
            raise TrainerError(f"no transitions tagged {task}")
        lst = self._index[task]
        out: list[Transition] = []
        while len(out) < n:
            j = int(rng.integers(len(lst)))
            pos = lst[j]
            tr = self._data[pos] if pos < len(self._data) else None
            if tr is not None and tr.task == task:
                out.append(tr)
            else:
                lst[j] = lst[-1]
                lst.pop()
                self._index_size -= 1
        return out


class DualReplay:
    """Training and evaluation memories plus a frames-collected audit.

    The two buffers are distinct objects except under the single-replay
    ablation, where one buffer deliberately serves both sampling roles.
    """

    def __init__(self, train_capacity: int, eval_capacity: int):
        self.m_tr = ReplayBuffer(train_capacity)
        self.m_ev = ReplayBuffer(eval_capacity)
        self.frames = 0

    @classmethod
    def shared(cls, capacity: int) -> "DualReplay":
        dual = cls.__new__(cls)
        buf = ReplayBuffer(capacity)
        dual.m_tr = buf
        dual.m_ev = buf
        dual.frames = 0
        return dual

    @property
    def is_shared(self) -> bool:
        return self.m_tr is self.m_ev

    def _sink(self, targets: tuple[ReplayBuffer, ...]):
        dual = self

        class Sink:
            def push(self, tr: Transition) -> None:
                for buf in targets:
                    buf.push(tr)
                dual.frames += 1

        return Sink()

    def rbs_sink(self):
        """Spiking pushes each rule transition into both memories."""
        if self.is_shared:
            return self._sink((self.m_tr,))
        return self._sink((self.m_tr, self.m_ev))

    def train_sink(self):
        return self._sink((self.m_tr,))

    def eval_sink(self):
        return self._sink((self.m_ev,))


class GreedyPolicy:
    """Callable view -> argmax-Q action over a live parameter store."""

    def __init__(self, model, params: ParamStore):
        self.model = model
        self.params = params

    def __call__(self, view: StateView) -> int:
        return self.model.greedy(self.params, view)


def td_targets(model, batch: list[Transition], target_params: ParamStore,
               gamma: float, clip: float = 0.0) -> np.ndarray:
    """Bootstrap targets under the target network; terminal cuts to r."""
    y = np.empty(len(batch))
    for i, tr in enumerate(batch):
        if tr.done:
            y[i] = tr.r
        else:
            y[i] = tr.r + gamma * float(np.max(model.q_all(target_params, tr.s_next)))
    if clip > 0.0:
        np.clip(y, -clip, clip, out=y)
    return y


def td_loss(model, leaves: dict, memo: dict, batch: list[Transition],
            target_params: ParamStore, gamma: float, clip: float = 0.0) -> ng.Var:
    """Mean squared TD error; targets are constants during backward."""
    if not batch:
        raise TrainerError("empty batch")
    y = td_targets(model, batch, target_params, gamma, clip)
    preds = ng.pack([model.q_sa(leaves, tr.s, tr.a, memo) for tr in batch])
    return ng.mse(preds, y)


class QLearner:
    """One-buffer TD control: minibatch SGD plus periodic target sync."""

    def __init__(self, model, params: ParamStore, cfg: RLConfig,
                 rng: np.random.Generator):
        self.model = model
        self.params = params
        self.cfg = cfg
        self.rng = rng
        self.target = params.copy()
        self.grad_steps = 0

    def _tick(self) -> None:
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_sync == 0:
            self.target.load(self.params)

    def train_step(self, buffer: ReplayBuffer, task: int | None = None) -> float:
        if len(buffer) < self.cfg.batch_size:
            raise TrainerError("buffer smaller than one batch")
        if task is None:
            batch = buffer.sample(self.rng, self.cfg.batch_size)
        else:
            batch = buffer.sample_task(self.rng, self.cfg.batch_size, task)
        graph = Graph()
        leaves = graph.bind(self.params)
        loss = td_loss(self.model, leaves, {}, batch, self.target, self.cfg.gamma,
                           self.cfg.target_clip)
        grads = graph.backward(loss)
        sgd_step(self.params, grads, self.cfg.lr, self.cfg.grad_clip)
        self._tick()
        return float(loss.data)


def rbs_prefill(env: Environment, dual: DualReplay, tasks: list[TaskSpec],
                episodes: int, rng: np.random.Generator,
                frame_cap: int | None = None) -> int:
    """Spike both memories with rule-agent episodes, tasks round-robin."""
    if episodes <= 0:
        return 0
    rule = env.rule_policy()
    sink = dual.rbs_sink()
    start = dual.frames
    for i in range(episodes):
        remaining = None if frame_cap is None else frame_cap - (dual.frames - start)
        if remaining is not None and remaining <= 0:
            break
        env.interact(tasks[i % len(tasks)], rule, rng, episodes=1,
                     buffer=sink, frame_cap=remaining)
    return dual.frames - start


def evaluate(env: Environment, model, params: ParamStore, tasks: list[TaskSpec],
             episodes: int, rng: np.random.Generator) -> dict:
    """Greedy rollouts; aggregates are plain means over episodes."""
    if episodes < 1:
        raise TrainerError("need at least one evaluation episode")
    policy = GreedyPolicy(model, params)
    results = []
    for i in range(episodes):
        results += env.interact(tasks[i % len(tasks)], policy, rng, episodes=1)
    n = len(results)
    return {
        "episodes": n,
        "success": sum(r.success for r in results) / n,
        "reward": sum(r.total_reward for r in results) / n,
        "turns": sum(r.turns for r in results) / n,
    }


def train_policy(env: Environment, model, params: ParamStore, cfg: RLConfig,
                 tasks: list[TaskSpec], rng: np.random.Generator,
                 frame_budget: int, rbs_episodes: int = 0,
                 post_steps: int = 0, eval_every: int = 0,
                 eval_episodes: int = 100) -> list[dict]:
    """Scratch or fine-tune training loop over a single replay memory.

    Collection and SGD interleave at cfg.steps_per_frame until the frame
    budget (spiking included) is spent; post_steps then continues SGD on
    the frozen buffer. Returns one metrics row per evaluation checkpoint.
    """
    buffer = ReplayBuffer(cfg.buffer_capacity)
    learner = QLearner(model, params, cfg, rng)
    rule = env.rule_policy()
    history: list[dict] = []
    losses: list[float] = []

    def checkpoint() -> None:
        stats = evaluate(env, model, params, tasks, eval_episodes,
                         np.random.default_rng(rng.integers(2**31)))
        row = {"step": learner.grad_steps, "frames": buffer.pushes,
               "loss": float(np.mean(losses)) if losses else float("nan")}
        row.update(stats)
        history.append(row)
        losses.clear()

    for i in range(rbs_episodes):
        if buffer.pushes >= frame_budget:
            break
        env.interact(tasks[i % len(tasks)], rule, rng, episodes=1,
                     buffer=buffer, frame_cap=frame_budget - buffer.pushes)

    next_eval = eval_every
    carry = 0.0
    policy = GreedyPolicy(model, params)
    while buffer.pushes < frame_budget:
        eps = cfg.epsilon(buffer.pushes / frame_budget)
        task = tasks[int(rng.integers(len(tasks)))]
        before = buffer.pushes
        env.interact(task, policy, rng, episodes=1, epsilon=eps,
                     buffer=buffer, frame_cap=frame_budget - before)
        carry += (buffer.pushes - before) * cfg.steps_per_frame
        while carry >= 1.0 and len(buffer) >= cfg.batch_size:
            losses.append(learner.train_step(buffer))
            carry -= 1.0
        if eval_every and buffer.pushes >= next_eval:
            checkpoint()
            next_eval += eval_every
    for _ in range(post_steps):
        if len(buffer) < cfg.batch_size:
            break
        losses.append(learner.train_step(buffer))
    if not history or history[-1]["step"] != learner.grad_steps:
        checkpoint()
    return history


class MetaTrainer:
    """Dual-replay meta loop over a fixed task set.

    Each round copies the shared parameters once per task, runs the inner
    adaptation (collect into the training memory, then a few filtered SGD
    steps), collects evaluation episodes with the adapted copy, and
    accumulates the evaluation-loss gradient taken at the adapted
    parameters. The summed gradient updates the shared parameters once.
    Target-network syncs count inner and outer gradient steps alike.
    """

    def __init__(self, env: Environment, model, params: ParamStore,
                 cfg: RLConfig, meta: MetaConfig, tasks: list[TaskSpec],
                 rng: np.random.Generator, dual: DualReplay | None = None):
        if not tasks:
            raise TrainerError("meta trainer needs at least one task")
        self.env = env
        self.model = model
        self.params = params
        self.cfg = cfg
        self.meta = meta
        self.tasks = tasks
        self.rng = rng
        self.dual = dual if dual is not None else DualReplay(cfg.buffer_capacity,
                                                             meta.eval_capacity)
        self.target = params.copy()
        self.grad_steps = 0
        self.rounds = 0
        self.epsilon = cfg.eps_final

    def _tick(self) -> None:
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_sync == 0:
            self.target.load(self.params)

    def spike(self, episodes: int, frame_cap: int | None = None) -> int:
        return rbs_prefill(self.env, self.dual, self.tasks, episodes,
                           self.rng, frame_cap)

    def inner_adapt(self, task: TaskSpec, collect: bool = True,
                    frame_budget: int | None = None) -> ParamStore:
        """Task-specific copy after collection plus Z filtered SGD steps."""
        theta = self.params.copy()
        if collect:
            cap = None if frame_budget is None else frame_budget - self.dual.frames
            if cap is None or cap > 0:
                self.env.interact(task, GreedyPolicy(self.model, theta), self.rng,
                                  episodes=self.meta.episodes_train,
                                  epsilon=self.epsilon,
                                  buffer=self.dual.train_sink(), frame_cap=cap)
        for _ in range(self.meta.inner_steps):
            if self.dual.m_tr.count_task(task.seed) < self.cfg.batch_size:
                break
            batch = self.dual.m_tr.sample_task(self.rng, self.cfg.batch_size, task.seed)
            graph = Graph()
            leaves = graph.bind(theta)
            loss = td_loss(self.model, leaves, {}, batch, self.target, self.cfg.gamma,
                           self.cfg.target_clip)
            sgd_step(theta, graph.backward(loss), self.meta.inner_lr, self.cfg.grad_clip)
            self._tick()
        return theta

    def round(self, collect: bool = True, frame_budget: int | None = None) -> float | None:
        """One outer iteration; returns the summed evaluation loss, or
        None when no task had enough evaluation data to contribute."""
        total = 0.0
        grad_sum: dict[str, np.ndarray] | None = None
        for task in self.tasks:
            theta = self.inner_adapt(task, collect, frame_budget)
            if collect:
                cap = None if frame_budget is None else frame_budget - self.dual.frames
                if cap is None or cap > 0:
                    self.env.interact(task, GreedyPolicy(self.model, theta), self.rng,
                                      episodes=self.meta.episodes_eval,
                                      epsilon=self.epsilon,
                                      buffer=self.dual.eval_sink(), frame_cap=cap)
            if self.dual.m_ev.count_task(task.seed) < self.cfg.batch_size:
                continue
            batch = self.dual.m_ev.sample_task(self.rng, self.cfg.batch_size, task.seed)
            graph = Graph()
            leaves = graph.bind(theta)
            loss = td_loss(self.model, leaves, {}, batch, self.target, self.cfg.gamma,
                           self.cfg.target_clip)
            grads = graph.backward(loss)
            total += float(loss.data)
            # clip per task before accumulating so each task contributes at
            # most the same step a single-task learner would take; clipping
            # the sum instead would shrink per-task steps as tasks are added
            norm = grad_norm(grads)
            if self.cfg.grad_clip and norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
                grads = {k: v * scale for k, v in grads.items()}
            if grad_sum is None:
                grad_sum = grads
            else:
                for name in grad_sum:
                    grad_sum[name] = grad_sum[name] + grads[name]
        self.rounds += 1
        if grad_sum is None:
            return None
        sgd_step(self.params, grad_sum, self.meta.outer_lr)
        self._tick()
        return total

    def run(self, n_rounds: int, eval_every: int = 0, eval_episodes: int = 100,
            eval_tasks: list[TaskSpec] | None = None,
            rbs_episodes: int | None = None, keep_best: bool = False) -> dict:
        """Full meta-training: spike, iterate rounds, log loss and dev success.

        With keep_best (and a nonzero eval_every), the returned dict also
        carries the parameter snapshot with the highest dev success; the
        outer objective is noisy enough at desk scale that the last round
        is often not the best one.
        """
        spiked = self.spike(self.meta.rbs_meta if rbs_episodes is None else rbs_episodes)
        loss_curve: list[tuple[int, float]] = []
        eval_curve: list[dict] = []
        tasks = eval_tasks if eval_tasks is not None else self.tasks
        best: dict = {}

        def checkpoint() -> None:
            stats = evaluate(self.env, self.model, self.params, tasks, eval_episodes,
                             np.random.default_rng(self.rng.integers(2**31)))
            stats.update(step=self.grad_steps, round=self.rounds)
            eval_curve.append(stats)
            if keep_best and (not best or stats["success"] > best["best_success"]):
                best.update(best_params=self.params.copy(),
                            best_round=self.rounds,
                            best_success=stats["success"])

        if eval_every:
            checkpoint()
        for r in range(n_rounds):
            self.epsilon = self.cfg.epsilon(r / n_rounds)
            loss = self.round(collect=True)
            if loss is not None:
                loss_curve.append((self.rounds, loss))
            if eval_every and (r + 1) % eval_every == 0:
                checkpoint()
        out = {"rbs_frames": spiked, "loss_curve": loss_curve,
               "eval_curve": eval_curve}
        out.update(best)
        return out


def meta_adapt(env: Environment, model, params_meta: ParamStore, task: TaskSpec,
               frame_budget: int, cfg: RLConfig, meta: MetaConfig,
               rng: np.random.Generator,
               rbs_episodes: int | None = None) -> tuple[ParamStore, int, list[float]]:
    """Adapt meta parameters to one task under a total frame budget.

    Spiking frames count against the budget, so small budgets consume
    rule-agent experience only; any remainder alternates on-policy
    collection with off-policy TD updates, and meta.adapt_steps more
    updates digest the frozen memory afterwards. Returns the adapted
    parameters, the frames actually used, and the loss trace.
    """
    params = params_meta.copy()
    if rbs_episodes is None:
        rbs_episodes = meta.rbs_single if task.mode == "single" else meta.rbs_composite
    dual = DualReplay(cfg.buffer_capacity, meta.eval_capacity)
    rbs_prefill(env, dual, [task], rbs_episodes, rng, frame_cap=frame_budget)
    learner = QLearner(model, params, cfg, rng)
    policy = GreedyPolicy(model, params)
    losses: list[float] = []
    carry = 0.0
    while dual.frames < frame_budget:
        eps = cfg.epsilon(dual.frames / frame_budget)
        before = dual.frames
        env.interact(task, policy, rng, episodes=1, epsilon=eps,
                     buffer=dual.train_sink(), frame_cap=frame_budget - before)
        carry += (dual.frames - before) * cfg.steps_per_frame
        while carry >= 1.0 and len(dual.m_tr) >= cfg.batch_size:
            losses.append(learner.train_step(dual.m_tr))
            carry -= 1.0
    for _ in range(meta.adapt_steps):
        if len(dual.m_tr) < cfg.batch_size:
            break
        losses.append(learner.train_step(dual.m_tr))
    return params, dual.frames, losses
