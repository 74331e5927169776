import json
import math

import numpy as np
import pytest

from diffquant import ControlModel
from diffquant.errors import ConfigError, MaxTimeExceeded, NumericalBlowup
from diffquant.model import ActionBox
from diffquant.policy import ActionGrid, FiniteActionPolicy, KernelPolicy, build_action_grid
from diffquant.simulate import (SimConfig, StoppingRule, mc_discounted, mc_ergodic, mc_exit,
                                mc_finite_horizon, simulate_path)

from conftest import LQ_KAPPA, LQ_M, lq_model

BOX1 = ActionBox([-1.0], [1.0])
TINY = "sqrt(2)*1e-9"


def pm_grid():
    return ActionGrid(BOX1, [[-1.0], [1.0]])


def bm(cost="1", **kw):
    return ControlModel.build(1, BOX1, ["0"], [["1"]], cost, **kw)


def zero_policy(model):
    return FiniteActionPolicy.constant(build_action_grid(model.action, 1), 1)


# -- single paths ----------------------------------------------------------------------

def test_near_deterministic_ode():
    model = ControlModel.build(1, BOX1, ["-x1"], [[TINY]], "0")
    path = simulate_path(model, zero_policy(model), [1.0], SimConfig(dt=1e-3, n_paths=1),
                         StoppingRule(horizon=1.0))
    assert path.times[-1] == pytest.approx(1.0)
    assert abs(path.states[-1, 0] - math.exp(-1.0)) < 1e-3


def test_constant_and_relaxed_drift():
    model = ControlModel.build(1, BOX1, ["u1"], [[TINY]], "0")
    cfg = SimConfig(dt=1e-2, n_paths=1, horizon=1.0)
    up = FiniteActionPolicy.constant(pm_grid(), 1)
    assert simulate_path(model, up, [0.0], cfg).states[-1, 0] == pytest.approx(1.0, abs=1e-6)
    half = KernelPolicy(pm_grid(), lambda t, x: [0.5, 0.5], stationary=True)
    path = simulate_path(model, half, [0.0], cfg)
    assert abs(path.states[-1, 0]) < 1e-6
    assert np.all(path.mean_actions == 0.0)


def test_dirac_kernel_matches_finite_action_bitwise():
    model = ControlModel.build(1, ([-2.0], [2.0]), ["-x1 + u1"], [["1 + 0.1*sin(x1)"]],
                               "x1^2 + u1^2", alpha=1.0)
    ag = build_action_grid(model.action, 4)

    def idx(t, X):
        return np.argmin(np.abs(ag.atoms[None, :, 0] + np.tanh(X)), axis=1)

    fin = FiniteActionPolicy(ag, idx)
    ker = KernelPolicy(ag, lambda t, X: np.eye(ag.size)[idx(t, X)], stationary=True,
                       vectorized=True)
    cfg = SimConfig(dt=1e-2, n_paths=300, seed=5)
    a = simulate_path(model, fin, [0.3], cfg, StoppingRule(horizon=2.0), path_index=17)
    b = simulate_path(model, ker, [0.3], cfg, StoppingRule(horizon=2.0), path_index=17)
    np.testing.assert_array_equal(a.states, b.states)
    ra = mc_discounted(model, fin, [0.3], cfg, 5.0)
    rb = mc_discounted(model, ker, [0.3], cfg, 5.0)
    assert (ra.estimate, ra.std_error) == (rb.estimate, rb.std_error)


def test_stopping_rule_required():
    model = bm()
    with pytest.raises(ConfigError):
        simulate_path(model, zero_policy(model), [0.0], SimConfig(dt=0.1, n_paths=1))


@pytest.mark.parametrize("kw", [{"dt": 0.0, "n_paths": 1}, {"dt": 0.1, "n_paths": 0},
                                {"dt": 0.1, "n_paths": 1, "truncation_radius": -1.0}])
def test_sim_config_rejects(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


# -- finite horizon ----------------------------------------------------------------------

def test_finite_horizon_examples():
    cfg = SimConfig(dt=0.01, n_paths=2000, seed=3)
    m1 = bm("1", terminal_H="0", horizon_T=2.0)
    rep = mc_finite_horizon(m1, zero_policy(m1), [0.0], cfg)
    assert rep.estimate == 2.0 and rep.std_error == 0.0

    m2 = ControlModel.build(1, BOX1, ["0"], [["sqrt(2)"]], "0", terminal_H="x1^2", horizon_T=1.0)
    rep = mc_finite_horizon(m2, zero_policy(m2), [0.0], SimConfig(dt=0.01, n_paths=40_000))
    assert abs(rep.estimate - 2.0) < 3 * rep.std_error
    assert rep.std_error > 0

    m3 = bm("u1^2", terminal_H="0", horizon_T=1.0)
    half = FiniteActionPolicy.constant(build_action_grid(BOX1, 2), 3)  # atom 0.5
    rep = mc_finite_horizon(m3, half, [0.0], cfg)
    assert rep.estimate == pytest.approx(0.25, abs=1e-12) and rep.std_error == 0.0


def test_zero_horizon_pays_terminal_cost():
    m = bm("1", terminal_H="x1 + 3", horizon_T=0.0)
    rep = mc_finite_horizon(m, zero_policy(m), [0.5], SimConfig(dt=0.1, n_paths=10))
    assert rep.estimate == 3.5


# -- discounted ----------------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [1.0, 0.5])
def test_discounted_constant_cost(alpha):
    m = bm("1", alpha=alpha)
    t_max = 30.0 / alpha
    rep = mc_discounted(m, zero_policy(m), [0.0], SimConfig(dt=0.01, n_paths=50), t_max)
    assert rep.std_error == 0.0
    assert abs(rep.estimate - 1.0 / alpha) <= rep.metadata["tail_bound"] + 1e-12
    assert rep.metadata["tail_bound"] < 1e-9 / alpha


def test_discounted_lq_matches_riccati():
    model = lq_model()
    ag = build_action_grid(model.action, 256)
    pol = FiniteActionPolicy.feedback(ag, lambda t, X: LQ_KAPPA * X)
    rep = mc_discounted(model, pol, [0.0], SimConfig(dt=0.01, n_paths=8000, seed=1), 14.0)
    # 0.01 allows for the O(dt) Euler bias of the stationary variance
    assert abs(rep.estimate - LQ_M) < 3 * rep.std_error + 0.01


# -- ergodic ------------------------------------------------------------------------------

def test_ergodic_constant_cost_is_exact():
    m = ControlModel.build(1, BOX1, ["-x1"], [["sqrt(2)"]], "1")
    rep = mc_ergodic(m, zero_policy(m), [0.0], SimConfig(dt=0.01, n_paths=40), 1.0, 5.0)
    assert rep.estimate == 1.0 and rep.std_error == 0.0


@pytest.mark.parametrize("cost, moment", [("x1^2", 1.0), ("x1^4", 3.0)])
def test_ergodic_ou_moments(cost, moment):
    m = ControlModel.build(1, BOX1, ["-x1"], [["sqrt(2)"]], cost)
    rep = mc_ergodic(m, zero_policy(m), [0.0], SimConfig(dt=2.5e-3, n_paths=400, seed=2),
                     5.0, 100.0)
    # Euler inflates the stationary variance by a factor 2 / (2 - dt)
    bias = moment * ((2 / (2 - 2.5e-3)) ** (1 if moment == 1.0 else 2) - 1)
    assert abs(rep.estimate - moment) < 3 * rep.std_error + bias + 1e-3


def test_ergodic_dt_refinement_with_common_noise():
    """Halving dt roughly halves the bias; shared Brownian paths make this visible."""
    m = ControlModel.build(1, BOX1, ["-x1"], [["sqrt(2)"]], "x1^2")
    pol = zero_policy(m)
    base = 2.5e-3
    est = []
    for sub in (4, 2, 1):
        cfg = SimConfig(dt=base * sub, n_paths=1000, seed=9, noise_substeps=sub)
        est.append(mc_ergodic(m, pol, [0.0], cfg, 5.0, 20.0).estimate)
    d1, d2 = est[0] - est[1], est[1] - est[2]
    assert d1 > 0 and d2 > 0
    assert 0.3 < d2 / d1 < 0.7


def test_ergodic_needs_stationary_policy():
    m = bm("1")
    pol = FiniteActionPolicy.feedback(build_action_grid(BOX1, 1), lambda t, X: 0 * X + t,
                                      stationary=False)
    with pytest.raises(ConfigError):
        mc_ergodic(m, pol, [0.0], SimConfig(dt=0.1, n_paths=2), 0.0, 1.0)


# -- exit -----------------------------------------------------------------------------------

def exit_model(cost="1", payoff="0"):
    return bm(cost, exit_domain=([-1.0], [1.0]), exit_discount="0", exit_terminal=payoff)


def test_exit_time_off_center():
    m = exit_model()
    dt = 1e-4
    rep = mc_exit(m, zero_policy(m), [0.5], SimConfig(dt=dt, n_paths=20_000, seed=4))
    # first grid-time detection overshoots by about 0.5826 sqrt(dt) on each side
    shifted = (1 + 0.5826 * math.sqrt(dt)) ** 2 - 0.25
    assert abs(rep.estimate - 0.75) < 3 * rep.std_error + 0.02
    assert abs(rep.estimate - shifted) < 3 * rep.std_error + 2e-3


def test_exit_unit_payoff_is_exact():
    m = exit_model(cost="0", payoff="1")
    rep = mc_exit(m, zero_policy(m), [0.2], SimConfig(dt=1e-3, n_paths=500))
    assert rep.estimate == 1.0 and rep.std_error == 0.0


def test_exit_discount_and_payoff():
    # dX = dW on (-1, 1), delta = 1, h = 1: E[exp(-tau)] = cosh(sqrt(2) x) / cosh(sqrt(2))
    m = bm("0", exit_domain=([-1.0], [1.0]), exit_discount="1", exit_terminal="1")
    rep = mc_exit(m, zero_policy(m), [0.0], SimConfig(dt=1e-4, n_paths=4000, seed=8))
    assert abs(rep.estimate - 1 / math.cosh(math.sqrt(2))) < 3 * rep.std_error + 0.01


def test_exit_errors():
    m = exit_model()
    with pytest.raises(MaxTimeExceeded):
        mc_exit(m, zero_policy(m), [0.0], SimConfig(dt=1e-3, n_paths=10, max_time=0.01))
    with pytest.raises(ConfigError):
        mc_exit(m, zero_policy(m), [1.0], SimConfig(dt=1e-3, n_paths=10))
    with pytest.raises(MaxTimeExceeded):
        simulate_path(m, zero_policy(m), [0.0], SimConfig(dt=1e-3, n_paths=1, max_time=0.01),
                      StoppingRule(exit_domain=m.exit_domain))


def test_blowup_detected():
    m = ControlModel.build(1, BOX1, ["1e6*x1"], [["1"]], "0", alpha=1.0)
    with pytest.raises(NumericalBlowup):
        mc_discounted(m, zero_policy(m), [1.0], SimConfig(dt=0.01, n_paths=4,
                                                           truncation_radius=10.0), 1.0)


# -- determinism and serialization -------------------------------------------------------

def test_threads_and_blocks_do_not_change_results():
    model = lq_model()
    pol = FiniteActionPolicy.feedback(build_action_grid(model.action, 16), lambda t, X: -0.3 * X)
    reps = [mc_discounted(model, pol, [0.5], SimConfig(dt=0.02, n_paths=999, seed=21,
                                                       block_size=b, threads=th), 4.0)
            for b, th in [(1 << 17, 1), (37, 1), (37, 4), (250, 3)]]
    for r in reps[1:]:
        assert (r.estimate, r.std_error) == (reps[0].estimate, reps[0].std_error)
    other = mc_discounted(model, pol, [0.5], SimConfig(dt=0.02, n_paths=999, seed=22), 4.0)
    assert other.estimate != reps[0].estimate


def test_cost_report_serialization():
    m = bm("1", alpha=1.0)
    rep = mc_discounted(m, zero_policy(m), [0.0], SimConfig(dt=0.1, n_paths=3, seed=5), 2.0)
    data = json.loads(json.dumps(rep.to_dict()))
    assert data["criterion"] == "discounted" and data["seed"] == 5
    row = rep.csv_row()
    assert row[0] == "discounted" and float(row[1]) == rep.estimate and len(row) == 8
