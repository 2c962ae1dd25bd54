import numpy as np
import pytest
from hypothesis import given, strategies as st

from pareto_effects import autodiff as ad
from pareto_effects.mi import (MiBatch, alternate_phase_step, lld_loss, log_q, log_q_matrix,
                               mi_from_log_q, mi_loss, mi_node)
from pareto_effects.models import VARIATIONAL_PARTS, build_estimator

from conftest import central_difference, max_relative_error


def constant_q(mu: float, logvar: float, m_x: int = 2, seed: int = 0):
    """Estimator whose variational heads output constants."""
    m = build_estimator(m_x, seed)
    m.params.view("mu_net.W1")[:] = 0.0
    m.params.view("mu_net.b1")[:] = mu
    m.params.view("var_net.W1")[:] = 0.0
    m.params.view("var_net.b1")[:] = logvar
    return m


def random_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    return MiBatch.from_covariates(model, rng.normal(size=(n, model.m_x)), rng.normal(1, 1, size=n))


@pytest.mark.parametrize("mu, logvar, t, expected", [(1.5, 0.0, 1.5, 0.0), (2.5, 0.0, 1.5, -1.0),
                                                     (1.5, 2.0, 1.5, -2.0)])
def test_log_q_examples(mu, logvar, t, expected):
    m = constant_q(mu, logvar)
    assert log_q(np.zeros(32), t, m) == pytest.approx(expected, abs=1e-14)


def test_printed_form_also_zero_at_mean():
    m = constant_q(0.7, 0.0)
    assert log_q(np.zeros(32), 0.7, m, form="printed") == 0.0


def test_log_variance_is_clamped():
    m = constant_q(0.0, -500.0)
    assert np.isfinite(log_q(np.zeros(32), 1.0, m))
    assert log_q(np.zeros(32), 0.0, m) == pytest.approx(10.0)


def test_lld_zero_when_all_log_q_zero():
    m = constant_q(1.0, 0.0)
    assert lld_loss(MiBatch(np.zeros((3, 32)), np.ones(3)), m) == 0.0


def test_lld_is_mean_of_negated_log_q():
    m = constant_q(0.0, 0.0)
    # log q = -t^2 gives (-1, -3)
    assert lld_loss(MiBatch(np.zeros((2, 32)), [1.0, np.sqrt(3.0)]), m) == pytest.approx(2.0)


def test_lld_matches_naive_loop():
    m = build_estimator(3, 1)
    b = random_batch(m, 9, 2)
    naive = -sum(log_q(b.reps[i], b.treatments[i], m) for i in range(9)) / 9
    assert lld_loss(b, m) == pytest.approx(naive, abs=1e-12)


def test_mi_single_unit_is_zero():
    m = build_estimator(2, 0)
    assert mi_loss(random_batch(m, 1, 0), m) == 0.0


def test_mi_two_unit_table():
    assert mi_from_log_q(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.5)


@pytest.mark.parametrize("form", ["gaussian", "printed"])
def test_closed_form_mi_matches_pair_table(form):
    for seed in range(10):
        m = build_estimator(3, seed)
        b = random_batch(m, 12, seed)
        assert mi_loss(b, m, form) == pytest.approx(mi_from_log_q(log_q_matrix(b, m, form)),
                                                   abs=1e-12)


def test_pair_table_matches_pointwise_log_q():
    m = build_estimator(2, 4)
    b = random_batch(m, 5, 4)
    L = log_q_matrix(b, m)
    for i in range(5):
        for j in range(5):
            assert L[i, j] == pytest.approx(log_q(b.reps[i], b.treatments[j], m), abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(-2, 2), st.floats(-3, 3))
def test_mi_zero_when_q_ignores_representation(ts, mu, logvar):
    m = constant_q(mu, logvar)
    b = MiBatch(np.random.default_rng(0).normal(size=(len(ts), 32)), ts)
    assert abs(mi_loss(b, m)) <= 1e-9 * (1 + max(abs(t) for t in ts) ** 2)


@given(st.integers(0, 500))
def test_lld_bounded_below_by_worst_diagonal(seed):
    m = build_estimator(2, seed % 20)
    b = random_batch(m, 6, seed)
    diag = [log_q(b.reps[i], b.treatments[i], m) for i in range(6)]
    assert lld_loss(b, m) >= -max(diag) - 1e-12


@pytest.mark.parametrize("form", ["gaussian", "printed"])
def test_mi_gradient_matches_finite_differences(form):
    m = build_estimator(2, 8)
    rng = np.random.default_rng(8)
    x, t = rng.normal(size=(6, 2)), rng.normal(2, 0.5, size=6)

    def loss(P):
        return mi_node(m, P, m.represent(P, x), t, form)

    g = ad.grad(loss, m.params)
    coords = rng.choice(m.params.size, size=80, replace=False)
    f = lambda v: loss(m.params.with_values(v).arrays()).item()
    assert max_relative_error(g[coords], central_difference(f, m.params.values, coords)) <= 1e-4


def test_fit_q_changes_only_variational_heads_and_lowers_lld():
    m = build_estimator(2, 9)
    b = random_batch(m, 20, 9)
    before = lld_loss(b, m)
    new = alternate_phase_step(b, m, "fit_q", 1e-3)
    changed = new.values != m.params.values
    assert not np.any(changed & ~m.params.mask(VARIATIONAL_PARTS))
    assert lld_loss(b, m.with_params(new)) < before


def test_fit_q_at_optimum_leaves_parameters():
    # constant heads at the batch mean with zero gradient everywhere
    m = constant_q(0.0, 0.0)
    for name in ("mu_net.W0", "var_net.W0"):
        m.params.view(name)[:] = 0.0
    b = MiBatch(np.zeros((2, 32)), [-1.0, 1.0])
    var = np.log(np.mean(np.square(b.treatments)))
    m.params.view("var_net.b1")[:] = var
    new = alternate_phase_step(b, m, "fit_q", 0.1)
    np.testing.assert_allclose(new.values, m.params.values, atol=1e-15)


def test_min_mi_leaves_variational_heads_bit_identical():
    m = build_estimator(2, 10)
    b = random_batch(m, 8, 10)
    new = alternate_phase_step(b, m, "min_mi", 0.05)
    mask = m.params.mask(VARIATIONAL_PARTS)
    assert new.values[mask].tobytes() == m.params.values[mask].tobytes()
    assert np.any(new.values[~mask] != m.params.values[~mask])


def test_unknown_phase_rejected():
    m = build_estimator(2, 0)
    with pytest.raises(ValueError, match="unknown phase"):
        alternate_phase_step(random_batch(m, 3, 0), m, "both", 0.1)


def test_min_mi_needs_covariates():
    m = build_estimator(2, 0)
    with pytest.raises(ValueError):
        alternate_phase_step(MiBatch(np.zeros((2, 32)), [0.0, 1.0]), m, "min_mi", 0.1)
