import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from mfcsma import (ConvergenceError, InfeasibleError, closed_form_full_interference,
                    from_dict, full_interference_root, single_class_spec, solve_fixed_point)
from mfcsma.stationary import (exp_backoff_geometric, level_balance, level_residuals,
                               throughput, untruncated_rho)


def hand_gamma(rho, L, Lc):
    """Success occupancy of the three-state single-class channel chain."""
    e = math.exp(-rho)
    w1 = rho * e * L
    w2 = (1 - e - rho * e) * Lc
    return w1 / (1 + w1 + w2)


@pytest.mark.parametrize("p0", [1 / 16, 0.01, 0.3, 0.69])
def test_root_matches_brentq(p0):
    r = full_interference_root(p0)
    oracle = brentq(lambda x: p0 * math.exp(x) + x - 2 * p0, 0.0, math.log(2), xtol=1e-16)
    assert abs(r - oracle) < 1e-12
    assert abs(p0 * math.exp(r) + r - 2 * p0) < 1e-13


@pytest.mark.parametrize("p0", [math.log(2), 0.8, 0.0])
def test_root_infeasible(p0):
    with pytest.raises(InfeasibleError, match="ln 2"):
        closed_form_full_interference(p0)


def test_closed_form_level_law_is_normalized():
    r, Q = closed_form_full_interference(1 / 16)
    assert Q.sum() == pytest.approx(1.0, abs=1e-12)
    p = 1 / 16 * 2.0 ** -np.arange(len(Q))
    assert Q @ p == pytest.approx(r, abs=1e-13)


def test_single_class_fixed_point_matches_closed_form(single):
    res = solve_fixed_point(single)
    r, Q = closed_form_full_interference(single.p0)
    assert abs(res.rho[0] - r) < 1e-12
    np.testing.assert_allclose(res.Q[0], Q, atol=1e-12)
    assert res.gamma[0] == pytest.approx(hand_gamma(r, 100, 100), rel=1e-12)
    assert res.probe_max_diff < 1e-10
    assert res.residual < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(0.005, 0.6), st.floats(1.0, 300.0))
def test_fixed_point_root_any_length(p0, L):
    spec = single_class_spec(p0=p0, L=L, Lc=L / 2 if L >= 2 else L)
    res = solve_fixed_point(spec, probes=0)
    assert abs(res.rho[0] - full_interference_root(p0)) < 1e-10


def test_throughput_identity(chain):
    res = solve_fixed_point(chain, probes=0)
    np.testing.assert_allclose(res.gamma, chain.L * res.rho * res.G, rtol=1e-12)
    states = res.pi.pi
    from mfcsma.envchain import all_states
    z = all_states(3)
    occ = np.array([states[z[:, c] == 1].sum() for c in range(3)])
    np.testing.assert_allclose(res.gamma, occ, rtol=1e-12)
    np.testing.assert_allclose(throughput(res.pi, res.rho, chain), res.gamma)


def test_chain_symmetry_and_starvation(chain):
    res = solve_fixed_point(chain)
    assert res.gamma[0] == pytest.approx(res.gamma[2], rel=1e-12)
    assert res.gamma_per_user[0] > res.gamma_per_user[1]
    assert res.probe_max_diff < 1e-10


def test_geometric_matches_linear_solve(chain):
    res = solve_fixed_point(chain, probes=0)
    Qg, rg = exp_backoff_geometric(res.G, res.H, res.I, chain)
    Ql, rl = level_balance(res.G, res.H, res.I, chain)
    np.testing.assert_allclose(Qg, Ql, atol=1e-12)
    np.testing.assert_allclose(rg, rl, atol=1e-14)
    assert np.max(np.abs(level_residuals(res, chain))) < 1e-14
    gap = np.abs(untruncated_rho(res.G, res.H, chain) - res.rho)
    assert gap.max() < 1e-12


def test_geometric_rejects_divergent_class(single):
    with pytest.raises(InfeasibleError):
        exp_backoff_geometric(np.array([0.1]), np.array([0.2]), np.array([0.3]), single)


def test_nonconvergence_reports_trace(chain):
    with pytest.raises(ConvergenceError) as err:
        solve_fixed_point(chain, max_iter=2, probes=0)
    assert len(err.value.trace) == 3


def test_argument_checks(single):
    with pytest.raises(ValueError):
        solve_fixed_point(single, damping=0)
    with pytest.raises(ValueError):
        solve_fixed_point(single, tol=0)


def test_custom_policy_uses_linear_solve():
    spec = from_dict({"classes": ["a", "b"], "mu": [0.4, 0.6], "adjacency": [[1, 1], [1, 1]],
                      "p0": 0.2, "L": 20, "Lc": 10, "n_max": 3,
                      "policy": {"levels": [0.2, 0.1, 0.04, 0.01],
                                 "success_map": [0, 0, 1, 2], "collision_map": [1, 2, 3, 3]}})
    res = solve_fixed_point(spec)
    assert np.max(np.abs(level_residuals(res, spec))) < 1e-14
    np.testing.assert_allclose(res.Q.sum(axis=1), spec.mu_array, atol=1e-14)
    # both classes see the same channel, so they share a per-user law
    np.testing.assert_allclose(res.Q[0] / 0.4, res.Q[1] / 0.6, atol=1e-12)


def test_to_dict(single):
    d = solve_fixed_point(single, probes=0).to_dict(L=100)
    assert d["packets_per_slot"][0] == pytest.approx(d["gamma"][0] / 100)
    assert d["converged"] is True
