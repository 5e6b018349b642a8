import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsurrogacy.diagnostics import assess_draws, autocorr, ess, rhat


def iid(seed, shape=(2, 5000)):
    return np.random.default_rng(seed).standard_normal(shape)


@pytest.mark.parametrize("seed", range(5))
def test_iid_chains_rhat_near_one(seed):
    assert 1.0 - 1e-6 <= rhat(iid(seed)) <= 1.01


def test_separated_chains_flagged():
    x = iid(0)
    x[1] += 10
    r = rhat(x)
    assert r > 1.05
    rep = assess_draws({"a": x})
    assert any(f.startswith("a: rhat") for f in rep.flags)
    assert not rep.passed


def test_constant_chain_is_degenerate():
    rep = assess_draws({"c": np.full((2, 5000), 0.3), "z": iid(1)})
    p = rep.params["c"]
    assert p.rhat == 1.0 and p.degenerate
    assert "c: degenerate" in rep.flags
    assert rep.passed


@pytest.mark.parametrize("seed", range(5))
def test_iid_ess_close_to_n(seed):
    x = iid(seed, (1, 5000))
    assert ess(x) == pytest.approx(5000, rel=0.2)


def test_autocorrelated_series_has_low_ess():
    rng = np.random.default_rng(2)
    x = np.zeros((2, 5000))
    for t in range(1, 5000):
        x[:, t] = 0.95 * x[:, t - 1] + rng.standard_normal(2)
    assert ess(x) < 1000
    ac = autocorr(x)
    assert ac[1] == pytest.approx(0.95, abs=0.03)
    assert assess_draws({"ar": x}).params["ar"].ess < 400


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 1000))
def test_rhat_affine_invariant(a, b, seed):
    x = iid(seed, (3, 300))
    x[0] += 0.3
    assert rhat(a * x + b) == pytest.approx(rhat(x), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(100, 600), st.floats(-0.9, 0.99), st.integers(0, 1000))
def test_ess_bounded_by_draws(m, n, phi, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((m, n))
    x = np.zeros_like(e)
    x[:, 0] = e[:, 0]
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    assert 0 < ess(x) <= m * n
    if m > 1:
        assert rhat(x) >= 1 - 1e-6


def test_single_chain_degrades_with_warning():
    with pytest.warns(UserWarning, match="single chain"):
        rep = assess_draws({"a": iid(0, (1, 500))})
    assert rep.params["a"].rhat is None
    assert rep.warnings


def test_too_few_draws_rejected():
    with pytest.raises(ValueError, match="at least 100"):
        assess_draws({"a": iid(0, (2, 50))})


def test_report_json_ready():
    rep = assess_draws({"a": iid(0)})
    d = rep.to_dict()
    assert d["passed"] is True
    assert set(d["params"]["a"]["autocorr"]) == {"1", "5", "10", "50"}
