import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcsma import (IntegrationError, closed_form_full_interference, full_interference_rhs,
                    integrate, mean_rates, ode_rhs, single_class_spec, solve_fixed_point)
from mfcsma.meanfield import env_averages, total_variation
from mfcsma.model import chain_spec, point_mass_mixture


def random_mixture(spec, rng, depth=8):
    q = np.zeros((spec.n_classes, spec.n_levels))
    for c in range(spec.n_classes):
        q[c, :depth] = rng.dirichlet(np.ones(depth)) * spec.mu[c]
    return q


def test_rhs_conserves_class_mass(chain):
    q = random_mixture(chain, np.random.default_rng(1))
    np.testing.assert_allclose(ode_rhs(q, chain).sum(axis=1), 0.0, atol=1e-16)


def test_mean_rates_shape(chain):
    fs, fc = mean_rates(point_mass_mixture(chain), chain)
    assert fs.shape == fc.shape == (3, chain.n_levels)
    assert np.all(fs > 0) and np.all(fc >= 0)


def test_fixed_point_is_rest_point(chain):
    res = solve_fixed_point(chain, probes=0)
    assert np.max(np.abs(ode_rhs(res.Q, chain))) < 1e-14
    tr = integrate(res.Q, chain, 200.0, dt=1.0)
    assert np.max(np.abs(tr.Q - res.Q)) < 1e-8


def test_full_interference_rest_point():
    _, Q = closed_form_full_interference(1 / 16)
    assert np.max(np.abs(full_interference_rhs(Q, 1 / 16))) < 1e-15


@pytest.mark.parametrize("L,Lc", [(1, 1), (100, 100), (10, 3)])
def test_time_change_identity(L, Lc):
    # with one class every transition happens at a clear slot, so the full
    # model runs the reduced dynamics at speed I(rho)
    spec = single_class_spec(L=L, Lc=Lc)
    rng = np.random.default_rng(L)
    for _ in range(5):
        q = random_mixture(spec, rng, depth=20)
        rho = q @ spec.probs
        _, _, I = env_averages(spec, rho)
        np.testing.assert_allclose(ode_rhs(q, spec)[0], I[0] * full_interference_rhs(q[0], spec.p0),
                                   rtol=1e-12, atol=1e-17)


def test_conservation_and_convergence_chain(chain):
    res = solve_fixed_point(chain, probes=0)
    tr = integrate(point_mass_mixture(chain), chain, 3000.0, dt=1.0, record_every=500)
    assert tr.max_drift < 1e-12
    tv = [total_variation(q, res.Q) for q in tr.Q]
    assert tv[-1] < 1e-3
    assert all(b <= a * 1.0001 for a, b in zip(tv[1:], tv[2:]))


def test_argument_checks(single):
    q = point_mass_mixture(single)
    with pytest.raises(ValueError, match="dt"):
        integrate(q, single, 10.0, dt=2.0)
    with pytest.raises(ValueError):
        integrate(q, single, 0.0)
    with pytest.raises(ValueError, match="initial"):
        integrate(q * 2, single, 10.0)
    with pytest.raises(ValueError):
        full_interference_rhs(np.zeros((2, 3)), 0.1)


def test_blow_up_detected(single):
    q = point_mass_mixture(single)
    with pytest.raises(IntegrationError, match="negative"):
        integrate(q, single, 5.0, rhs=lambda y: -np.ones_like(y))
    with pytest.raises(IntegrationError, match="non-finite"):
        integrate(q, single, 5.0, rhs=lambda y: np.full_like(y, np.inf))


def test_tiny_negative_values_are_clamped(single):
    q = point_mass_mixture(single)

    def nudge(y):
        out = np.zeros_like(y)
        out[0, 1] = -1e-14
        out[0, 0] = 1e-14
        return out

    tr = integrate(q, single, 1.0, dt=1.0, rhs=nudge)
    assert tr.clamped == 1
    assert tr.final.min() == 0.0


def test_final_partial_step(single):
    tr = integrate(point_mass_mixture(single), single, 2.5, dt=1.0)
    assert tr.t[-1] == 2.5 and len(tr.t) == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 30))
def test_rhs_keeps_empty_levels_nonnegative(seed, depth):
    spec = chain_spec(n_max=30)
    rng = np.random.default_rng(seed)
    q = random_mixture(spec, rng, depth=depth)
    keep = q == q.max(axis=1, keepdims=True)
    q[(q < 0.05) & ~keep] = 0.0
    q *= (spec.mu_array / q.sum(axis=1))[:, None]
    d = ode_rhs(q, spec)
    assert np.all(d[q == 0] >= 0)
    np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-15)
