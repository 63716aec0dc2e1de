import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcsma import SpecError, from_dict, load_spec, serialize, to_dict, validate_spec
from mfcsma.model import check_mixture, point_mass_mixture, rho_of


def base_doc(**kw):
    doc = {"classes": ["a", "b"], "mu": [0.5, 0.5], "adjacency": [[1, 1], [1, 1]],
           "p0": 0.0625, "L": 100, "policy": "exponential"}
    doc.update(kw)
    return doc


def test_defaults_and_exponential_levels():
    spec = from_dict(base_doc())
    assert spec.Lc == spec.L == 100
    assert spec.n_max == 64
    np.testing.assert_allclose(spec.probs[:4], [1 / 16, 1 / 32, 1 / 64, 1 / 128])
    assert spec.policy.collision_map[-1] == 64
    assert set(spec.policy.success_map) == {0}


def test_missing_self_interference_is_reported():
    with pytest.raises(SpecError) as err:
        from_dict(base_doc(adjacency=[[0, 1], [1, 1]]))
    assert "adjacency: A_cc must be 1" in err.value.violations


@pytest.mark.parametrize("p0", [0.0, -0.1, 1.5])
def test_p0_range(p0):
    with pytest.raises(SpecError) as err:
        from_dict(base_doc(p0=p0))
    assert "p0: must lie in (0,1]" in err.value.violations


def test_mu_tiny_drift_is_normalized_but_larger_is_rejected():
    spec = from_dict(base_doc(mu=[0.5, 0.5 + 5e-10]))
    assert abs(sum(spec.mu) - 1.0) <= 1e-12
    with pytest.raises(SpecError):
        from_dict(base_doc(mu=[0.5, 0.51]))


@pytest.mark.parametrize("change", [
    {"bogus": 1},
    {"L": 0.5},
    {"mu": [0.5]},
    {"policy": "linear"},
    {"adjacency": [[1, 2], [1, 1]]},
    {"classes": ["a", "a"]},
])
def test_rejections(change):
    with pytest.raises(SpecError):
        from_dict(base_doc(**change))


def test_missing_key():
    doc = base_doc()
    del doc["L"]
    with pytest.raises(SpecError, match="missing"):
        from_dict(doc)


def test_custom_policy():
    doc = base_doc(policy={"levels": [0.0625, 0.03, 0.01], "success_map": [0, 0, 1],
                           "collision_map": [1, 2, 2]})
    spec = from_dict(doc)
    assert spec.n_max == 2 and spec.policy.name == "custom"
    assert from_dict(to_dict(spec)) == spec
    bad = dict(doc["policy"], collision_map=[0, 0, 0])
    with pytest.raises(SpecError, match="collision_map"):
        from_dict(base_doc(policy=bad))


def test_load_from_path_and_string(tmp_path):
    text = json.dumps(base_doc())
    p = tmp_path / "spec.json"
    p.write_text(text)
    assert load_spec(p) == load_spec(text) == load_spec(base_doc())
    with pytest.raises(SpecError):
        load_spec(tmp_path / "missing.json")
    with pytest.raises(SpecError):
        load_spec("{not json")


def test_replace_rebuilds_policy():
    spec = from_dict(base_doc())
    other = spec.replace(p0=0.125)
    assert other.probs[0] == 0.125 and other.probs[1] == 0.0625
    assert hash(spec) != hash(other) or spec != other


def test_rho_of_and_mixtures(single):
    q = point_mass_mixture(single, level=2)
    assert rho_of(q, single)[0] == pytest.approx(1 / 64)
    assert check_mixture(q, single) == []
    with pytest.raises(ValueError):
        rho_of(np.zeros((2, 3)), single)
    assert check_mixture(-q, single)


@st.composite
def docs(draw):
    C = draw(st.integers(1, 4))
    w = draw(st.lists(st.integers(1, 20), min_size=C, max_size=C))
    mu = [x / sum(w) for x in w]
    upper = draw(st.lists(st.booleans(), min_size=C * C, max_size=C * C))
    A = [[1 if i == j else int(upper[min(i, j) * C + max(i, j)]) for j in range(C)]
         for i in range(C)]
    return {
        "classes": [f"c{i}" for i in range(C)],
        "mu": mu,
        "adjacency": A,
        "p0": draw(st.floats(1e-3, 1.0)),
        "L": draw(st.floats(1.0, 1e3)),
        "Lc": draw(st.floats(1.0, 1e3)),
        "policy": "exponential",
        "n_max": draw(st.integers(0, 80)),
    }


@settings(max_examples=60, deadline=None)
@given(docs())
def test_round_trip(doc):
    spec = from_dict(doc)
    assert validate_spec(spec) == []
    again = load_spec(serialize(spec))
    assert again == spec
    assert serialize(again) == serialize(spec)
