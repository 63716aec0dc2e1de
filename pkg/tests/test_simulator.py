import math

import numpy as np
import pytest

from mfcsma import Simulation, chaos_metric, occupation_check, simulate, solve_fixed_point
from mfcsma.model import chain_spec, single_class_spec
from mfcsma.simulator import class_counts, run


def naive_run(spec, N, n_slots, seed):
    """Per-slot Bernoulli simulation written directly from the slot rules."""
    rng = np.random.default_rng(seed)
    C = spec.n_classes
    cls = np.repeat(np.arange(C), class_counts(spec, N))
    level = np.zeros(N, dtype=int)
    z = np.zeros(C, dtype=int)
    A = spec.A
    busy_slots = np.zeros(C)
    level_occ = np.zeros(spec.n_levels)
    for _ in range(n_slots):
        busy_slots += z == 1
        level_occ += np.bincount(level, minlength=spec.n_levels)
        clear = np.array([not any(z[d] for d in range(C) if A[c, d]) for c in range(C)])
        new = z.copy()
        for c in range(C):
            if z[c] and rng.random() < (1 / spec.L if z[c] == 1 else 1 / spec.Lc):
                new[c] = 0
        att = (rng.random(N) < spec.probs[level] / N) & clear[cls]
        n_att = np.bincount(cls[att], minlength=C)
        for c in range(C):
            if n_att[c]:
                other = any(n_att[d] for d in range(C) if d != c and A[c, d])
                ok = n_att[c] == 1 and not other
                new[c] = 1 if ok else 2
                who = att & (cls == c)
                level[who] = [spec.policy.success_map[x] if ok else spec.policy.collision_map[x]
                              for x in level[who]]
        z = new
    return busy_slots / n_slots, level_occ / (n_slots * N)


def test_matches_per_slot_simulation():
    spec = chain_spec(p0=0.5, L=4, n_max=6)
    N, slots = 6, 60000
    g_naive, q_naive = naive_run(spec, N, slots, seed=3)
    reps = [simulate(spec, N, slots / N, seed=s, burnin=0.0) for s in range(4)]
    g_event = np.mean([r.throughput for r in reps], axis=0)
    q_event = np.mean([r.Q_hat.sum(axis=0) for r in reps], axis=0)
    np.testing.assert_allclose(g_event, g_naive, atol=0.02)
    np.testing.assert_allclose(q_event[:3], q_naive[:3], atol=0.02)


def test_deterministic_given_seed(chain):
    a = simulate(chain, 60, 200, seed=11)
    b = simulate(chain, 60, 200, seed=11)
    assert a.to_json() == b.to_json()
    np.testing.assert_array_equal(a.xz_occupancy, b.xz_occupancy)
    c = simulate(chain, 60, 200, seed=12)
    assert c.to_json() != a.to_json()


def test_single_user_renewal_chain():
    # one user never collides: idle spells last Geom(p0), successes Geom(1/L)
    spec = single_class_spec(p0=1 / 16, L=100)
    slots = 200_000
    rep = simulate(spec, 1, slots, seed=5, burnin=0.0)
    L, p = 100.0, 1 / 16
    g = L / (L + 1 / p)
    var_cycle = (1 - g) ** 2 * (L * L - L) + g ** 2 * (1 - p) / p ** 2
    sigma = math.sqrt(var_cycle / (slots / (L + 1 / p))) / (L + 1 / p)
    assert abs(rep.throughput[0] - g) < 3 * sigma
    assert rep.collisions[0] == 0
    assert rep.Q_hat[0, 0] == 1.0


def test_channel_consistency_every_event(chain):
    sim = Simulation(chain, 40, seed=2, check=True)
    run(sim, 300, burnin=0.0)
    assert sim.attempts.sum() > 0


def test_step_and_resume(single):
    sim = Simulation(single, 10, seed=1)
    for _ in range(5):
        sim.step()
    assert sim.k == 5
    a = Simulation(single, 10, seed=1)
    a.advance_to(5000)
    b = Simulation(single, 10, seed=1)
    b.advance_to(1234)
    b.advance_to(5000)
    assert a.level.tolist() == b.level.tolist() and a.z == b.z


def test_zero_attempt_rate(chain):
    rep = simulate(chain, 30, 100, seed=0, attempt_scale=0.0)
    assert rep.throughput.sum() == 0 and rep.attempts.sum() == 0
    oc = occupation_check(rep)
    assert oc.pi[0] == 1.0
    assert np.nanmax(oc.divergence) == 0.0


@pytest.mark.parametrize("N", [50, 200])
def test_pair_transitions_are_rare(single, N):
    rep = simulate(single, N, 400, seed=N)
    bound = (single.p0 / N) ** 2
    assert rep.pair_joint_prob <= bound
    assert rep.pair_joint_count <= 10 * bound * rep.counted_slots + 3


def test_simulator_agrees_with_fixed_point(single):
    fp = solve_fixed_point(single, probes=0)
    g = [simulate(single, 200, 500, seed=s).throughput[0] for s in range(5)]
    assert abs(np.mean(g) - fp.gamma[0]) / fp.gamma[0] < 0.05


def test_chain_simulation_agrees_with_fixed_point(chain):
    fp = solve_fixed_point(chain, probes=0)
    rep = simulate(chain, 300, 2000, seed=1)
    np.testing.assert_allclose(rep.throughput, fp.gamma, rtol=0.05)
    np.testing.assert_allclose(rep.rho_hat, fp.rho, rtol=0.05)


@pytest.mark.parametrize("name", ["single", "chain"])
def test_level_law_approaches_fixed_point_with_N(name, request):
    # long horizon so the time averages are dominated by the stationary
    # regime; the remaining noise floor is about 0.015
    spec = request.getfixturevalue(name)
    fp = solve_fixed_point(spec, probes=0)

    def tv(N):
        vals = [0.5 * np.abs(simulate(spec, N, 3000, seed=s).Q_hat - fp.Q).sum()
                for s in range(5)]
        return np.median(vals)

    assert tv(200) < tv(10)


def test_class_assignment():
    spec = chain_spec(mu=(0.25, 0.5, 0.25))
    counts = class_counts(spec, 10)
    assert counts.sum() == 10 and counts[1] == 5 and sorted(counts[[0, 2]]) == [2, 3]
    sim = Simulation(spec, 1000, seed=0, assignment="iid")
    assert sim.class_sizes.sum() == 1000
    assert abs(sim.class_sizes[1] - 500) < 100
    with pytest.raises(ValueError):
        Simulation(spec, 10, assignment="random")


def test_argument_checks(single):
    with pytest.raises(ValueError):
        Simulation(single, 0)
    with pytest.raises(ValueError):
        Simulation(single, 3, levels=[0, 0, 99])
    with pytest.raises(ValueError):
        Simulation(single, 3, pair=(1, 1))
    with pytest.raises(ValueError):
        simulate(single, 10, 0)
    with pytest.raises(ValueError):
        simulate(single, 10, 10, burnin=1.0)


def test_series_export(single):
    rep = simulate(single, 5, 40, seed=0, record_series=True)
    ser = rep.strided_series(10)
    assert len(ser) == 20 and ser[0] == (0, (0,))
    assert all(z[0] in (0, 1, 2) for _, z in ser)


def test_chaos_metric():
    indep = np.outer([0.7, 0.3], [0.6, 0.4])
    assert chaos_metric(indep) == pytest.approx(0.0, abs=1e-15)
    assert chaos_metric(np.diag([0.5, 0.5])) == pytest.approx(1.0)
