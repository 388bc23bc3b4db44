"""Gradient correctness for the autodiff core.

Every differentiable op gets a finite-difference property check; the
checker itself gets a negative control with a deliberately corrupted
vjp. ParamStore persistence is checked for bit-exact round trips.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapol.numgrad import (GradError, Graph, ParamStore, Var, add, concat,
                             const, embed_lookup, finite_diff_check, grad_norm,
                             hadamard, matmul, mean_rows, mse, pack, pick,
                             relu, scalar_scale, sgd_step, stack_rows)


def make_store(shapes, rng):
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.normal(size=shape))
    return store


def bind_or_const(store, graph):
    if graph is None:
        return {name: const(store[name]) for name in store.names()}
    return graph.bind(store)


def test_mse_gradient_closed_form():
    """d/dw mean((w - t)^2) = 2 (w - t) / n, checked exactly."""
    rng = np.random.default_rng(0)
    w = rng.normal(size=6)
    t = rng.normal(size=6)
    store = ParamStore()
    store.add("w", w)
    graph = Graph()
    leaves = graph.bind(store)
    grads = graph.backward(mse(leaves["w"], t))
    np.testing.assert_allclose(grads["w"], 2.0 * (w - t) / 6.0, rtol=1e-12)


def test_untouched_parameter_gets_zero_gradient():
    rng = np.random.default_rng(1)
    store = make_store({"used": (4,), "idle": (3, 2)}, rng)
    graph = Graph()
    leaves = graph.bind(store)
    grads = graph.backward(mse(leaves["used"], np.zeros(4)))
    assert np.all(grads["idle"] == 0.0)
    assert grads["idle"].shape == (3, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matmul_chain_finite_diff(seed):
    rng = np.random.default_rng(seed)
    store = make_store({"w1": (5, 4), "w2": (3, 5), "x": (4,)}, rng)
    t = rng.normal(size=3)

    def f(params, graph):
        leaves = bind_or_const(params, graph)
        h = relu(matmul(leaves["w1"], leaves["x"]))
        return mse(matmul(leaves["w2"], h), t)

    assert finite_diff_check(f, store, rng=rng) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_embedding_and_means_finite_diff(seed):
    rng = np.random.default_rng(seed)
    store = make_store({"tbl": (7, 3), "w": (2, 3)}, rng)
    idx = [int(rng.integers(7)) for _ in range(4)]
    t = rng.normal(size=2)

    def f(params, graph):
        leaves = bind_or_const(params, graph)
        rows = [embed_lookup(leaves["tbl"], i) for i in idx]
        m = mean_rows(rows)
        return mse(matmul(leaves["w"], m), t)

    assert finite_diff_check(f, store, rng=rng) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hadamard_concat_pick_finite_diff(seed):
    rng = np.random.default_rng(seed)
    store = make_store({"a": (4,), "b": (4,), "c": (2,)}, rng)

    def f(params, graph):
        leaves = bind_or_const(params, graph)
        joined = concat([hadamard(leaves["a"], leaves["b"]), leaves["c"]])
        total = scalar_scale(pick(joined, 1), 3.0)
        for i in (0, 4, 5):
            total = add(total, pick(joined, i))
        return mse(pack([total]), np.array([0.7]))

    assert finite_diff_check(f, store, rng=rng) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_stack_rows_finite_diff(seed):
    rng = np.random.default_rng(seed)
    store = make_store({"r0": (3,), "r1": (3,), "w": (3,)}, rng)
    t = rng.normal(size=2)

    def f(params, graph):
        leaves = bind_or_const(params, graph)
        mat = stack_rows([leaves["r0"], leaves["r1"]])
        return mse(matmul(mat, leaves["w"]), t)

    assert finite_diff_check(f, store, rng=rng) < 1e-6


def test_pack_distributes_gradient_per_slot():
    rng = np.random.default_rng(2)
    store = make_store({"a": (), "b": ()}, rng)
    graph = Graph()
    leaves = graph.bind(store)
    out = pack([leaves["a"], leaves["b"]])
    target = np.array([0.0, 0.0])
    grads = graph.backward(mse(out, target))
    np.testing.assert_allclose(grads["a"], store["a"])
    np.testing.assert_allclose(grads["b"], store["b"])


def test_pack_rejects_vectors():
    with pytest.raises(GradError):
        pack([const(np.zeros(2))])


def test_corrupted_vjp_is_caught_by_finite_differences():
    """Sanity check on the checker: a wrong adjoint must be flagged."""
    rng = np.random.default_rng(3)
    store = make_store({"w": (4,)}, rng)

    def broken_double(x):
        data = x.data * 2.0

        def vjp(grad):
            x.grad = grad * 3.0 if x.grad is None else x.grad + grad * 3.0

        return Var(data, graph=x.graph, vjp=vjp, checked=True)

    def f(params, graph):
        leaves = bind_or_const(params, graph)
        return mse(broken_double(leaves["w"]), np.zeros(4))

    assert finite_diff_check(f, store, rng=rng) > 0.1


def test_mixed_graph_operands_rejected():
    g1, g2 = Graph(), Graph()
    s1 = ParamStore()
    s1.add("x", np.ones(3))
    s2 = ParamStore()
    s2.add("y", np.ones(3))
    a = g1.bind(s1)["x"]
    b = g2.bind(s2)["y"]
    with pytest.raises(GradError):
        add(a, b)


def test_backward_requires_scalar():
    store = ParamStore()
    store.add("x", np.ones(3))
    graph = Graph()
    leaves = graph.bind(store)
    with pytest.raises(GradError):
        graph.backward(relu(leaves["x"]))


def test_non_finite_input_rejected():
    with pytest.raises(GradError):
        const(np.array([1.0, np.inf]))


def test_matmul_forward_matches_numpy():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 2))
    v = rng.normal(size=5)
    np.testing.assert_allclose(matmul(const(a), const(b)).data, a @ b)
    np.testing.assert_allclose(matmul(const(a), const(v)).data, a @ v)
    np.testing.assert_allclose(matmul(const(v), const(v)).data, v @ v)


def test_store_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    store = make_store({"emb/domain": (7, 16), "head/wq": (48, 64)}, rng)
    path = tmp_path / "ckpt.npz"
    store.save(path)
    back = ParamStore.load_file(path)
    assert back.names() == store.names()
    for name in store.names():
        assert np.array_equal(back[name], store[name])


def test_store_copy_isolated_and_stamped():
    store = ParamStore()
    store.add("w", np.zeros(4))
    twin = store.copy()
    assert twin.uid != store.uid
    assert twin.stamp != store.stamp
    twin.set_("w", np.ones(4))
    assert np.all(store["w"] == 0.0)


def test_version_counts_mutations():
    store = ParamStore()
    before = store.version
    store.add("w", np.zeros(2))
    store.set_("w", np.ones(2))
    assert store.version == before + 2
    other = store.copy()
    v = other.version
    other.load(store)
    assert other.version == v + 1


def test_duplicate_and_unknown_names_rejected():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(GradError):
        store.add("w", np.zeros(2))
    with pytest.raises(GradError):
        store.set_("missing", np.zeros(2))


def test_sgd_step_clips_global_norm():
    store = ParamStore()
    store.add("w", np.zeros(3))
    grads = {"w": np.array([3.0, 4.0, 0.0])}
    sgd_step(store, grads, lr=1.0, clip_norm=1.0)
    np.testing.assert_allclose(store["w"], -np.array([0.6, 0.8, 0.0]))
    assert grad_norm(grads) == pytest.approx(5.0)


def test_sgd_step_out_of_place_keeps_original():
    store = ParamStore()
    store.add("w", np.ones(2))
    out = sgd_step(store, {"w": np.ones(2)}, lr=0.5, in_place=False)
    assert np.all(store["w"] == 1.0)
    np.testing.assert_allclose(out["w"], 0.5)


def test_quadratic_finite_diff_is_tiny():
    rng = np.random.default_rng(6)
    store = make_store({"w": (8,)}, rng)

    def f(params, graph):
        leaves = bind_or_const(params, graph)
        return mse(leaves["w"], np.zeros(8))

    assert finite_diff_check(f, store, rng=rng) < 1e-8
