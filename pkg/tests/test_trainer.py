"""Replay memories, TD learning, and the dual-replay meta loops."""

import numpy as np
import pytest

from metapol.env import Environment, Transition
from metapol.numgrad import Graph, ParamStore
from metapol.ontology import TaskSpec
from metapol.qnet import DtqnModel
from metapol.trainer import (DualReplay, GreedyPolicy, MetaConfig,
                             MetaTrainer, QLearner, ReplayBuffer, RLConfig,
                             TrainerError, evaluate, meta_adapt, rbs_prefill,
                             td_loss, td_targets, train_policy)


@pytest.fixture(scope="module")
def env():
    return Environment.builtin()


@pytest.fixture(scope="module")
def restaurant(env):
    return TaskSpec(env.ont.domain_handle("restaurant"), "single")


def collect_batch(env, task, n, seed=0):
    out = []

    class Keep:
        def push(self, tr):
            if len(out) < n:
                out.append(tr)

    rng = np.random.default_rng(seed)
    rule = env.rule_policy()
    while len(out) < n:
        env.interact(task, rule, rng, episodes=1, buffer=Keep())
    return out


class FixedQModel:
    """Stub whose Q row is constant; enough for target arithmetic."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=float)

    def q_all(self, store, view):
        return self.row


def fake_transition(r, done):
    return Transition(task=0, s="s", a=1, r=r, s_next="s2", done=done)


def test_td_targets_hand_values():
    model = FixedQModel([1.0, 3.0, 2.0])
    batch = [fake_transition(79.0, True), fake_transition(-1.0, False)]
    y = td_targets(model, batch, None, gamma=0.99)
    assert y[0] == 79.0
    assert y[1] == pytest.approx(-1.0 + 0.99 * 3.0)


def test_td_targets_clip_bounds_bootstrap():
    model = FixedQModel([500.0])
    batch = [fake_transition(120.0, True), fake_transition(0.0, False)]
    y = td_targets(model, batch, None, gamma=1.0, clip=80.0)
    assert list(y) == [80.0, 80.0]
    y = td_targets(model, [fake_transition(-200.0, True)], None, 1.0, clip=80.0)
    assert y[0] == -80.0
    unclipped = td_targets(model, batch, None, gamma=1.0, clip=0.0)
    assert list(unclipped) == [120.0, 500.0]


def test_td_loss_matches_manual_mse(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(0)
    target = params.copy()
    batch = collect_batch(env, restaurant, 6)
    y = td_targets(model, batch, target, 0.99, 80.0)
    preds = np.array([model.q_all(params, tr.s)[tr.a] for tr in batch])
    expected = float(np.mean((preds - y) ** 2))
    graph = Graph()
    loss = td_loss(model, graph.bind(params), {}, batch, target, 0.99, 80.0)
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(TrainerError):
        td_loss(model, graph.bind(params), {}, [], target, 0.99)


def test_td_loss_gradient_against_finite_differences(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(1)
    target = params.copy()
    batch = collect_batch(env, restaurant, 5, seed=3)

    def loss_value():
        graph = Graph()
        return td_loss(model, graph.bind(params), {}, batch, target,
                       0.99, 80.0).item()

    graph = Graph()
    loss = td_loss(model, graph.bind(params), {}, batch, target, 0.99, 80.0)
    grads = graph.backward(loss)
    rng = np.random.default_rng(4)
    h = 1e-6
    for name in ("emb/domain", "state/w", "head/wq", "cat/request/w"):
        arr = params[name]
        flat = rng.choice(arr.size, size=3, replace=False)
        for j in flat:
            idx = np.unravel_index(j, arr.shape)
            bumped = arr.copy()
            bumped[idx] += h
            params.set_(name, bumped)
            up = loss_value()
            bumped[idx] -= 2 * h
            params.set_(name, bumped)
            down = loss_value()
            bumped[idx] += h
            params.set_(name, bumped)
            fd = (up - down) / (2 * h)
            scale = max(1.0, abs(fd), abs(grads[name][idx]))
            assert abs(grads[name][idx] - fd) / scale < 1e-4


def test_replay_buffer_overwrites_oldest():
    buf = ReplayBuffer(capacity=5)
    for i in range(8):
        buf.push(Transition(task=i, s=i, a=0, r=0.0, s_next=i, done=False))
    assert len(buf) == 5 and buf.pushes == 8
    for i in range(3):
        assert buf.count_task(i) == 0
    for i in range(3, 8):
        assert buf.count_task(i) == 1
    rng = np.random.default_rng(0)
    assert {tr.task for tr in buf.sample(rng, 64)} <= {3, 4, 5, 6, 7}


def test_replay_buffer_task_filter_survives_overwrite():
    buf = ReplayBuffer(capacity=4)
    for _ in range(4):
        buf.push(Transition(task=0, s=0, a=0, r=0.0, s_next=0, done=False))
    for _ in range(4):
        buf.push(Transition(task=1, s=1, a=0, r=0.0, s_next=1, done=False))
    rng = np.random.default_rng(1)
    assert buf.count_task(0) == 0
    with pytest.raises(TrainerError):
        buf.sample_task(rng, 2, 0)
    assert all(tr.task == 1 for tr in buf.sample_task(rng, 12, 1))


def test_replay_buffer_guards():
    with pytest.raises(TrainerError):
        ReplayBuffer(0)
    with pytest.raises(TrainerError):
        ReplayBuffer(3).sample(np.random.default_rng(0), 1)


def test_dual_replay_sinks_route_and_audit():
    dual = DualReplay(100, 100)
    tr = fake_transition(0.0, False)
    dual.train_sink().push(tr)
    dual.eval_sink().push(tr)
    dual.eval_sink().push(tr)
    dual.rbs_sink().push(tr)
    assert len(dual.m_tr) == 2 and len(dual.m_ev) == 3
    assert dual.frames == 4
    assert not dual.is_shared


def test_dual_replay_shared_mode_single_store():
    dual = DualReplay.shared(100)
    assert dual.is_shared
    dual.rbs_sink().push(fake_transition(0.0, False))
    assert len(dual.m_tr) == 1 and dual.m_tr is dual.m_ev
    dual.train_sink().push(fake_transition(0.0, False))
    assert len(dual.m_ev) == 2


def test_rbs_prefill_round_robin_and_cap(env):
    ont = env.ont
    tasks = [TaskSpec(ont.domain_handle("restaurant"), "single"),
             TaskSpec(ont.domain_handle("taxi"), "single")]
    dual = DualReplay(10_000, 10_000)
    rng = np.random.default_rng(2)
    got = rbs_prefill(env, dual, tasks, 40, rng)
    assert got == dual.frames == len(dual.m_tr) == len(dual.m_ev)
    assert dual.m_tr.count_task(tasks[0].seed) > 0
    assert dual.m_tr.count_task(tasks[1].seed) > 0

    capped = DualReplay(10_000, 10_000)
    got = rbs_prefill(env, capped, tasks, 500, np.random.default_rng(3),
                      frame_cap=37)
    assert got == 37 and capped.frames == 37
    assert rbs_prefill(env, capped, tasks, 0, rng) == 0


def test_config_validation():
    with pytest.raises(TrainerError):
        RLConfig(gamma=1.5)
    with pytest.raises(TrainerError):
        RLConfig(eps_start=2.0)
    with pytest.raises(TrainerError):
        MetaConfig(episodes_eval=0)
    with pytest.raises(TrainerError):
        MetaConfig(inner_lr=-0.1)


def test_epsilon_decays_over_first_half():
    cfg = RLConfig(eps_start=0.1, eps_final=0.01)
    assert cfg.epsilon(0.0) == pytest.approx(0.1)
    assert cfg.epsilon(0.25) == pytest.approx(0.055)
    assert cfg.epsilon(0.5) == pytest.approx(0.01)
    assert cfg.epsilon(1.0) == pytest.approx(0.01)


def test_qlearner_step_loss_and_target_sync(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(5)
    cfg = RLConfig(lr=0.05, batch_size=8, target_sync=3)
    learner = QLearner(model, params, cfg, np.random.default_rng(6))
    buf = ReplayBuffer(500)
    for tr in collect_batch(env, restaurant, 60, seed=7):
        buf.push(tr)

    probe = np.random.default_rng(8)
    batch = buf.sample(probe, cfg.batch_size)
    y = td_targets(model, batch, learner.target, cfg.gamma, cfg.target_clip)
    preds = np.array([model.q_all(params, tr.s)[tr.a] for tr in batch])
    expected = float(np.mean((preds - y) ** 2))
    learner.rng = np.random.default_rng(8)
    assert learner.train_step(buf) == pytest.approx(expected, rel=1e-12)

    assert any(not np.array_equal(learner.target[n], params[n])
               for n in params.names())
    learner.train_step(buf)
    learner.train_step(buf)
    assert learner.grad_steps == 3
    for n in params.names():
        assert np.array_equal(learner.target[n], params[n])

    with pytest.raises(TrainerError):
        learner.train_step(ReplayBuffer(4))


def test_qlearner_zero_lr_keeps_params(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(9)
    before = params.copy()
    cfg = RLConfig(lr=0.0, batch_size=8)
    learner = QLearner(model, params, cfg, np.random.default_rng(10))
    buf = ReplayBuffer(500)
    for tr in collect_batch(env, restaurant, 30, seed=11):
        buf.push(tr)
    learner.train_step(buf)
    for n in params.names():
        assert np.array_equal(params[n], before[n])


class RuleAsModel:
    """Adapter so the rule agent can stand in for a greedy model."""

    def __init__(self, env):
        self.rule = env.rule_policy()

    def greedy(self, store, view):
        return self.rule(view)


def test_evaluate_rule_like_policy(env, restaurant):
    stats = evaluate(env, RuleAsModel(env), None, [restaurant], 40,
                     np.random.default_rng(12))
    assert stats["episodes"] == 40
    assert stats["success"] >= 0.95
    # reward identity holds in the mean too: 2L on success, -L otherwise,
    # minus one per turn
    expected = 80.0 * stats["success"] - 40.0 * (1 - stats["success"]) - stats["turns"]
    assert stats["reward"] == pytest.approx(expected, abs=1e-9)
    with pytest.raises(TrainerError):
        evaluate(env, RuleAsModel(env), None, [restaurant], 0,
                 np.random.default_rng(0))


def test_train_policy_budget_accounting(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(13)
    cfg = RLConfig(lr=0.05, batch_size=16, steps_per_frame=0.5,
                   buffer_capacity=2000)
    history = train_policy(env, model, params, cfg, [restaurant],
                           np.random.default_rng(14), frame_budget=400,
                           rbs_episodes=10, post_steps=20, eval_episodes=20)
    assert history, "at least the final checkpoint"
    last = history[-1]
    assert last["frames"] == 400
    assert {"step", "frames", "loss", "success", "reward", "turns"} <= set(last)
    assert last["step"] >= 20      # post_steps ran on the frozen buffer
    assert np.isfinite(last["loss"])


def test_meta_trainer_inner_loop_leaves_shared_params(env):
    tasks = [TaskSpec(env.ont.domain_handle("restaurant"), "single"),
             TaskSpec(env.ont.domain_handle("taxi"), "single")]
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(15)
    cfg = RLConfig(batch_size=8)
    meta = MetaConfig(inner_steps=2, inner_lr=0.05, outer_lr=0.05,
                      episodes_train=1, episodes_eval=1, rbs_meta=30)
    tr = MetaTrainer(env, model, params, cfg, meta, tasks,
                     np.random.default_rng(16))
    tr.spike(30)
    snapshot = params.copy()
    theta = tr.inner_adapt(tasks[0], collect=True)
    assert any(not np.array_equal(theta[n], params[n]) for n in params.names())
    for n in params.names():
        assert np.array_equal(params[n], snapshot[n])
    assert tr.grad_steps == meta.inner_steps

    loss = tr.round(collect=True)
    assert loss is not None and np.isfinite(loss)
    assert any(not np.array_equal(params[n], snapshot[n])
               for n in params.names())


def test_meta_trainer_round_without_eval_data_is_noop(env):
    tasks = [TaskSpec(env.ont.domain_handle("taxi"), "single")]
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(17)
    snapshot = params.copy()
    tr = MetaTrainer(env, model, params, RLConfig(batch_size=8),
                     MetaConfig(episodes_train=1, episodes_eval=1),
                     tasks, np.random.default_rng(18))
    assert tr.round(collect=False) is None
    for n in params.names():
        assert np.array_equal(params[n], snapshot[n])


def test_meta_trainer_tiny_eval_memory_keeps_only_fresh_frames(env):
    tasks = [TaskSpec(env.ont.domain_handle("restaurant"), "single"),
             TaskSpec(env.ont.domain_handle("taxi"), "single")]
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(19)
    cfg = RLConfig(batch_size=16)
    meta = MetaConfig(episodes_train=1, episodes_eval=1, eval_capacity=16,
                      rbs_meta=40)
    tr = MetaTrainer(env, model, params, cfg, meta, tasks,
                     np.random.default_rng(20))
    tr.spike(40)
    for _ in range(3):
        tr.round(collect=True)
    assert len(tr.dual.m_ev) == 16
    assert tr.dual.m_ev.pushes > 16
    assert len(tr.dual.m_tr) > 16   # training memory kept the history


def test_meta_adapt_zero_budget_is_identity(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(21)
    adapted, frames, losses = meta_adapt(
        env, model, params, restaurant, 0, RLConfig(batch_size=16),
        MetaConfig(), np.random.default_rng(22), rbs_episodes=0)
    assert frames == 0 and losses == []
    for n in params.names():
        assert np.array_equal(adapted[n], params[n])
    assert adapted is not params


def test_meta_adapt_spends_exactly_the_budget(env, restaurant):
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(23)
    cfg = RLConfig(batch_size=16, steps_per_frame=0.5)
    meta = MetaConfig(adapt_steps=50)
    adapted, frames, losses = meta_adapt(
        env, model, params, restaurant, 300, cfg, meta,
        np.random.default_rng(24), rbs_episodes=10)
    assert frames == 300
    assert len(losses) >= 50
    assert all(np.isfinite(l) for l in losses)
    assert any(not np.array_equal(adapted[n], params[n])
               for n in params.names())


def test_meta_adapt_rule_data_only_when_budget_below_spike(env, restaurant):
    """A budget smaller than the spike still yields an update pass."""
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(25)
    meta = MetaConfig(adapt_steps=30)
    adapted, frames, losses = meta_adapt(
        env, model, params, restaurant, 20, RLConfig(batch_size=16), meta,
        np.random.default_rng(26), rbs_episodes=500)
    assert frames == 20
    assert len(losses) == 30
    assert any(not np.array_equal(adapted[n], params[n])
               for n in params.names())


def test_meta_trainer_run_keeps_best_dev_snapshot(env):
    tasks = [TaskSpec(env.ont.domain_handle("taxi"), "single")]
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(29)
    cfg = RLConfig(batch_size=16)
    meta = MetaConfig(episodes_train=1, episodes_eval=1, rbs_meta=40)
    tr = MetaTrainer(env, model, params, cfg, meta, tasks,
                     np.random.default_rng(30))
    out = tr.run(6, eval_every=2, eval_episodes=5, keep_best=True)
    assert {"best_params", "best_round", "best_success"} <= set(out)
    assert out["best_success"] == max(ev["success"] for ev in out["eval_curve"])
    picked = [ev for ev in out["eval_curve"]
              if ev["success"] == out["best_success"]][0]
    assert out["best_round"] == picked["round"]
    assert isinstance(out["best_params"], ParamStore)
    plain = tr.run(2, eval_every=1, eval_episodes=4)
    assert "best_params" not in plain


def test_meta_trainer_learns_on_expert_heavy_memory(env):
    """A short run on spiked memories must cut the TD loss; this is the
    learning-signal smoke test for the outer loop."""
    tasks = [TaskSpec(env.ont.domain_handle("taxi"), "single")]
    model = DtqnModel(env.ont, env.actions)
    params = model.init_params(27)
    cfg = RLConfig(batch_size=16, lr=0.05, grad_clip=5.0)
    meta = MetaConfig(inner_steps=1, inner_lr=0.05, outer_lr=0.05,
                      episodes_train=1, episodes_eval=1, rbs_meta=120)
    tr = MetaTrainer(env, model, params, cfg, meta, tasks,
                     np.random.default_rng(28))
    out = tr.run(40, eval_every=0)
    losses = [l for _, l in out["loss_curve"]]
    assert len(losses) >= 30
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
