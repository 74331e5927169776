import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffquant import ControlModel, eval_cost, eval_diffusion_matrix, eval_drift
from diffquant.errors import ConfigError, NondegeneracyViolation
from diffquant.model import ActionBox, Box, relaxed_average

from conftest import lq_model


def test_box_contains():
    b = ActionBox([-1.0, 0.0], [1.0, 2.0])
    assert b.dim == 2 and b.contains([0.0, 2.0]) and not b.contains([1.5, 1.0])
    with pytest.raises(ConfigError):
        Box([1.0], [1.0])
    with pytest.raises(ConfigError):
        Box([0.0], [np.inf])


def test_relaxed_drift_examples():
    m = lq_model()
    assert eval_drift(m, [1.0], [[0.5]], [1.0])[0] == -0.5
    assert eval_drift(m, [0.0], [[-1.0], [1.0]], [0.5, 0.5])[0] == 0.0
    sq = ControlModel.build(1, ([0.0], [2.0]), ["u1^2"], [["1"]], "0")
    assert eval_drift(sq, [3.7], [[0.0], [2.0]], [0.5, 0.5])[0] == 2.0


def test_relaxed_cost_and_weights_validation():
    m = lq_model()
    assert eval_cost(m, [1.0], [[0.0], [2.0]], [0.25, 0.75]) == pytest.approx(1 + 3.0)
    with pytest.raises(ValueError):
        eval_drift(m, [0.0], [[0.0], [1.0]], [0.5, 0.6])


def test_diffusion_examples():
    assert eval_diffusion_matrix(lq_model(), [0.3])[0, 0] == pytest.approx(1.0, abs=1e-15)
    m2 = ControlModel.build(2, ([-1, -1], [1, 1]), ["u1", "u2"], [["1", "0"], ["0", "2"]], "0")
    np.testing.assert_array_equal(eval_diffusion_matrix(m2, [0.0, 0.0]), [[0.5, 0.0], [0.0, 2.0]])
    deg = ControlModel.build(1, ([-1], [1]), ["u1"], [["0"]], "0")
    with pytest.raises(NondegeneracyViolation):
        eval_diffusion_matrix(deg, [0.0])


def test_diffusion_exactly_symmetric():
    m = ControlModel.build(2, ([-1, -1], [1, 1]), ["u1", "u2"],
                           [["1 + 0.1*sin(x1)", "0.3*x2"], ["0.2", "1.1 + cos(x1*x2)/3"]], "0")
    X = np.random.default_rng(1).normal(size=(500, 2))
    A = m.diffusion_at(X, validate=True)
    assert np.array_equal(A, np.swapaxes(A, 1, 2))


def test_build_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        ControlModel.build(2, ([-1], [1]), ["u1"], [["1", "0"], ["0", "1"]], "0")
    with pytest.raises(ConfigError):
        ControlModel.build(1, ([-1], [1]), ["u1"], [["1", "0"]], "0")
    with pytest.raises(ConfigError):
        ControlModel.build(1, ([-1], [1]), ["u1"], [["u1"]], "0")  # sigma binds x only
    with pytest.raises(ConfigError):
        ControlModel.build(1, ([-1], [1]), ["u1"], [["1"]], "0", alpha=-1.0)


def test_evaluation_is_deterministic():
    m = lq_model()
    X = np.linspace(-3, 3, 101)[:, None]
    U = np.linspace(-1, 1, 101)[:, None]
    a = m.drift_at(X, U), m.cost_at(X, U)
    b = m.drift_at(X.copy(), U.copy()), m.cost_at(X.copy(), U.copy())
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_spot_check_reports():
    rep = lq_model().spot_check(np.linspace(-2, 2, 9)[:, None], [[-1.0], [0.0], [1.0]])
    assert rep["min_eig_a"] == pytest.approx(1.0)
    assert rep["min_cost"] == 0.0
    assert rep["lipschitz_drift"] == pytest.approx(1.0, rel=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 1), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 1), min_size=3, max_size=3),
       st.sampled_from([0.0, 0.25, 0.5, 1.0]),
       st.floats(-5, 5))
def test_relaxed_drift_is_affine_in_the_measure(atoms, w1, w2, lam, x):
    m = ControlModel.build(1, ([-4], [4]), ["-x1 + u1^2 * sin(x1) + tanh(u1)"], [["1"]], "0")
    atoms = np.array(atoms)[:, None]
    p, q = np.array(w1) / sum(w1), np.array(w2) / sum(w2)
    mix = lam * p + (1 - lam) * q
    lhs = eval_drift(m, [x], atoms, mix)
    rhs = lam * eval_drift(m, [x], atoms, p) + (1 - lam) * eval_drift(m, [x], atoms, q)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_relaxed_average_batch_matches_loop():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 1))
    atoms = np.linspace(-1, 1, 5)[:, None]
    W = rng.dirichlet(np.ones(5), size=20)
    W[::3] = np.eye(5)[rng.integers(0, 5, size=7)]
    m = lq_model()
    out = relaxed_average(m.cost_at, X, atoms, W)
    loop = [sum(W[i, j] * m.cost_at(X[i:i + 1], atoms[j:j + 1])[0] for j in range(5))
            for i in range(20)]
    np.testing.assert_allclose(out, loop, rtol=1e-13)
