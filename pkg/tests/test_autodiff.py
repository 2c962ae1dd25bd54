import numpy as np
import pytest
from hypothesis import given, strategies as st

from pareto_effects import autodiff as ad
from pareto_effects.autodiff import DenseNet, NumericalOverflowError, ParamStore

from conftest import central_difference, max_relative_error

ACTS = {"identity": lambda z: z, "relu": lambda z: np.maximum(z, 0.0),
        "elu": lambda z: np.where(z > 0, z, np.expm1(np.minimum(z, 0.0))), "tanh": np.tanh}


def naive_forward(widths, acts, params: dict, name, x):
    """Straight-line affine + activation chain, one layer at a time."""
    h = np.asarray(x, dtype=np.float64)
    for k in range(len(widths) - 1):
        W, b = params[f"{name}.W{k}"], params[f"{name}.b{k}"]
        z = np.array([sum(h[i] * W[i, j] for i in range(len(h))) + b[j]
                      for j in range(W.shape[1])])
        h = ACTS[acts[k]](z)
    return h


def random_net(seed, activation="tanh", widths=(3, 5, 4, 2)):
    net = DenseNet("net", widths, activation)
    store = ParamStore.from_blocks(net.init_blocks(np.random.default_rng(seed)))
    # nonzero biases so the bias paths are exercised
    store.values[:] += np.random.default_rng(seed + 1).normal(0, 0.1, store.size)
    return net, store


def mse_loss(net, x, y):
    return lambda P: ad.mean(ad.square(ad.forward(net, P, x) - y))


# -- forward -------------------------------------------------------------------------

def test_identity_layer_passes_input_through():
    net = DenseNet("id", (2, 2), "identity")
    store = ParamStore.from_blocks([("id.W0", np.eye(2)), ("id.b0", np.zeros(2))])
    np.testing.assert_array_equal(ad.forward(net, store, np.array([1.0, 2.0])).value, [1.0, 2.0])


def test_relu_layer_clamps_negative_output():
    net = DenseNet("r", (1, 1), "relu", out_activation="relu")
    store = ParamStore.from_blocks([("r.W0", np.array([[2.0]])), ("r.b0", np.array([1.0]))])
    assert ad.forward(net, store, np.array([-3.0])).value.tolist() == [0.0]


@pytest.mark.parametrize("activation", ["tanh", "elu", "relu", "identity"])
def test_forward_matches_naive_chain(activation):
    net, store = random_net(3, activation)
    x = np.random.default_rng(0).normal(size=3)
    acts = [activation] * (net.n_layers - 1) + ["identity"]
    expected = naive_forward(net.widths, acts, store.arrays(), "net", x)
    np.testing.assert_allclose(ad.forward(net, store, x).value, expected, rtol=0, atol=1e-12)


def test_batch_forward_matches_rowwise():
    net, store = random_net(4)
    X = np.random.default_rng(1).normal(size=(6, 3))
    batch = ad.forward(net, store, X).value
    for i in range(6):
        np.testing.assert_allclose(batch[i], ad.forward(net, store, X[i]).value, atol=1e-14)


def test_forward_rejects_wrong_width():
    net, store = random_net(0)
    with pytest.raises(ValueError, match="expected input width 3"):
        ad.forward(net, store, np.zeros(4))


def test_densenet_rejects_unknown_activation():
    with pytest.raises(ValueError):
        DenseNet("n", (2, 2), "softsign")


@given(st.integers(0, 10_000))
def test_forward_finite_for_finite_inputs(seed):
    net, store = random_net(seed, "elu")
    x = np.random.default_rng(seed).uniform(-50, 50, size=(4, 3))
    assert np.all(np.isfinite(ad.forward(net, store, x).value))


def test_glorot_uniform_bounds_and_zero_bias():
    net = DenseNet("g", (10, 30), "tanh")
    blocks = dict(net.init_blocks(np.random.default_rng(0)))
    lim = np.sqrt(6.0 / 40)
    assert np.all(np.abs(blocks["g.W0"]) <= lim)
    assert blocks["g.W0"].max() > 0.8 * lim
    assert np.all(blocks["g.b0"] == 0)


# -- gradients -------------------------------------------------------------------------

def test_grad_of_half_squared_norm_is_values():
    store = ParamStore.from_blocks([("a", np.arange(3.0)), ("b", np.array([[1.0, -2.0]]))])
    g = ad.grad(lambda P: 0.5 * (ad.total(ad.square(P["a"])) + ad.total(ad.square(P["b"]))), store)
    np.testing.assert_array_equal(g, store.values)


def test_grad_of_constant_is_zero():
    _, store = random_net(0)
    g = ad.grad(lambda P: ad.as_var(3.0) + 0.0 * ad.total(P["net.b0"]), store)
    np.testing.assert_array_equal(g, np.zeros(store.size))


def test_gradient_check_on_many_random_instances():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        activation = ("tanh", "elu")[seed % 2]
        net, store = random_net(seed, activation, widths=(3, 4, 2))
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        loss = mse_loss(net, x, y)
        g = ad.grad(loss, store)
        coords = rng.choice(store.size, size=8, replace=False)
        f = lambda v: loss(store.with_values(v).arrays()).item()
        worst = max(worst, max_relative_error(g[coords], central_difference(f, store.values, coords)))
    assert worst <= 1e-4


@pytest.mark.parametrize("op", [ad.sin, ad.cos, ad.exp, ad.square, ad.tanh,
                                lambda v: ad.log(1.0 + ad.square(v)),
                                lambda v: ad.sqrt(1.0 + ad.absolute(v)),
                                lambda v: ad.div(1.0, 2.0 + ad.sin(v))])
def test_elementwise_ops_match_finite_differences(op):
    rng = np.random.default_rng(7)
    store = ParamStore.from_blocks([("v", rng.normal(size=6))])
    loss = lambda P: ad.total(op(P["v"]) * np.arange(1.0, 7.0))
    g = ad.grad(loss, store)
    f = lambda v: loss(store.with_values(v).arrays()).item()
    fd = central_difference(f, store.values, range(store.size))
    assert max_relative_error(g, fd) <= 1e-6


def test_concat_and_column_gradients():
    rng = np.random.default_rng(8)
    store = ParamStore.from_blocks([("a", rng.normal(size=(3, 2))), ("b", rng.normal(size=(3, 1)))])

    def loss(P):
        c = ad.concat([P["a"], ad.square(P["b"])], axis=1)
        return ad.total(ad.column(c, 2) * ad.column(c, 0)) + ad.mean(ad.sin(c))

    g = ad.grad(loss, store)
    f = lambda v: loss(store.with_values(v).arrays()).item()
    assert max_relative_error(g, central_difference(f, store.values, range(store.size))) <= 1e-6


def test_clip_gradient_is_zero_outside_clamp():
    store = ParamStore.from_blocks([("v", np.array([-20.0, 0.5, 20.0]))])
    g = ad.grad(lambda P: ad.total(ad.clip(P["v"], -10, 10)), store)
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_gradient_is_linear_in_the_loss(a, b, seed):
    rng = np.random.default_rng(seed)
    net, store = random_net(seed % 50, widths=(3, 4, 2))
    x, y1, y2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    l1, l2 = mse_loss(net, x, y1), mse_loss(net, x, y2)
    combined = ad.grad(lambda P: a * l1(P) + b * l2(P), store)
    np.testing.assert_allclose(combined, a * ad.grad(l1, store) + b * ad.grad(l2, store),
                               rtol=0, atol=1e-10)


def test_gradients_are_deterministic():
    net, store = random_net(9)
    x, y = np.ones((3, 3)), np.zeros((3, 2))
    g1, g2 = ad.grad(mse_loss(net, x, y), store), ad.grad(mse_loss(net, x, y), store)
    assert g1.tobytes() == g2.tobytes()


def test_several_roots_from_one_tape():
    net, store = random_net(2)
    x = np.random.default_rng(2).normal(size=(4, 3))
    tape = ad.Tape()
    leaves = tape.watch(store)
    out = ad.forward(net, leaves, x)
    l1, l2 = ad.mean(ad.column(out, 0)), ad.mean(ad.square(ad.column(out, 1)))
    g1, g2 = tape.backward(l1, store), tape.backward(l2, store)
    np.testing.assert_allclose(g1, ad.grad(lambda P: ad.mean(ad.column(ad.forward(net, P, x), 0)), store))
    np.testing.assert_allclose(
        g2, ad.grad(lambda P: ad.mean(ad.square(ad.column(ad.forward(net, P, x), 1))), store))


def test_overflow_reports_layer_name():
    net = DenseNet("wide", (1, 1), "identity")
    store = ParamStore.from_blocks([("wide.W0", np.array([[1e300]])), ("wide.b0", np.zeros(1))])
    with pytest.raises(NumericalOverflowError) as info:
        ad.grad(lambda P: ad.mean(ad.exp(ad.forward(net, P, np.array([[1e10]])))), store)
    assert info.value.layer == "wide.layer0"


def test_ndarray_on_the_left_defers_to_var():
    v = ad.Var(np.ones((2, 1)))
    out = np.zeros((2, 1)) - v
    assert isinstance(out, ad.Var)
    np.testing.assert_array_equal(out.value, -np.ones((2, 1)))


# -- parameter store -------------------------------------------------------------------

def test_layout_must_be_contiguous():
    with pytest.raises(ValueError, match="gap or overlap"):
        ParamStore(np.zeros(4), [("a", (2,), 0), ("b", (2,), 3)])
    with pytest.raises(ValueError, match="covers"):
        ParamStore(np.zeros(5), [("a", (2,), 0), ("b", (2,), 2)])


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=6))
def test_every_name_resolves_to_one_disjoint_slice(shapes):
    blocks = [(f"p{i}", np.full(s, float(i))) for i, s in enumerate(shapes)]
    store = ParamStore.from_blocks(blocks)
    covered = np.zeros(store.size, dtype=int)
    for name, arr in blocks:
        covered[store.slice(name)] += 1
        np.testing.assert_array_equal(store.view(name), arr)
    assert np.all(covered == 1)


def test_json_and_binary_round_trip(tmp_path):
    _, store = random_net(5)
    again = ParamStore.from_json(store.to_json())
    assert again.values.tobytes() == store.values.tobytes() and again.layout == store.layout
    store.save_binary(tmp_path / "p.bin")
    back = ParamStore.load_binary(tmp_path / "p.bin")
    assert back.values.tobytes() == store.values.tobytes() and back.layout == store.layout
    assert back.checksum() == store.checksum()


def test_binary_loader_rejects_foreign_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a snapshot")
    with pytest.raises(ValueError):
        ParamStore.load_binary(tmp_path / "x.bin")
