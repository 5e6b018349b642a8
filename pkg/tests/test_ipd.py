import numpy as np
import pytest

from conftest import simulate_ipd
from mvsurrogacy._rng import stream
from mvsurrogacy.data import IpdRecord, compute_log_or, parse_ipd_csv
from mvsurrogacy.ipd import (
    BootstrapConfig, NewtonDivergence, NonIdentifiable, _cox_binary, bootstrap_effects,
    estimate_within_correlations, fit_log_hr, fit_log_or_ipd,
)


def breslow_loglik(beta, time, event, arm):
    """Breslow partial log-likelihood evaluated patient by patient."""
    ll = 0.0
    for t in np.unique(time[event == 1]):
        dying = (time == t) & (event == 1)
        risk = time >= t
        ll += beta * arm[dying].sum() - dying.sum() * np.log(np.exp(beta * arm[risk]).sum())
    return ll


def grid_mle(time, event, arm):
    grid = np.linspace(-5, 5, 100001)
    ll = np.array([breslow_loglik(b, time, event, arm) for b in grid[::100]])
    i = int(np.argmax(ll)) * 100
    fine = grid[max(i - 100, 0): i + 101]
    ll = np.array([breslow_loglik(b, time, event, arm) for b in fine])
    return fine[int(np.argmax(ll))]


def records(time, event, arm, resp=None):
    resp = resp if resp is not None else [False] * len(time)
    return [IpdRecord(str(i), int(a), bool(r), float(t), bool(e), float(t), bool(e))
            for i, (t, e, a, r) in enumerate(zip(time, event, arm, resp))]


def test_identical_arms_give_zero():
    t = [1.0, 2.0, 3.0, 4.0]
    ipd = records(t + t, [1, 1, 0, 1] * 2, [0] * 4 + [1] * 4)
    assert abs(fit_log_hr(ipd, "pfs")) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_small_sample_matches_grid_search(seed):
    # interleaved event times with ties and censoring, at most 5 per arm
    rng = np.random.default_rng(seed)
    time = rng.integers(1, 6, size=9).astype(float)
    event = np.array([1, 1, 0, 1, 1, 1, 1, 0, 1])
    arm = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1])
    est = _cox_binary(time, event, arm)
    assert est == pytest.approx(grid_mle(time, event, arm), abs=1e-4)


def test_relabelling_arms_negates():
    rng = np.random.default_rng(5)
    time = rng.exponential(5, 40)
    event = (rng.random(40) < 0.8).astype(float)
    arm = np.arange(40) % 2
    assert _cox_binary(time, event, arm) == pytest.approx(-_cox_binary(time, event, 1 - arm), abs=1e-9)


def test_separated_arms_diverge_with_trace():
    # every control death precedes every experimental death: no finite MLE
    time = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    event = np.ones(6)
    arm = np.array([0, 0, 0, 1, 1, 1])
    with pytest.raises(NewtonDivergence) as info:
        _cox_binary(time, event, arm)
    assert len(info.value.trace) > 1
    assert info.value.trace[-1][0] < info.value.trace[1][0]


def test_no_events_in_arm_is_non_identifiable():
    ipd = records([1.0, 2.0, 3.0, 4.0], [1, 1, 0, 0], [0, 0, 1, 1])
    with pytest.raises(NonIdentifiable, match="non-identifiable"):
        fit_log_hr(ipd, "os")


def test_log_or_from_ipd():
    resp = [True] * 3 + [False] * 7 + [True] * 6 + [False] * 4
    arm = [1] * 10 + [0] * 10
    ipd = records([1.0] * 20, [1] * 20, arm, resp)
    assert fit_log_or_ipd(ipd) == compute_log_or(3, 10, 6, 10)[0]
    assert fit_log_or_ipd(ipd) == pytest.approx(np.log(3 * 4 / (7 * 6)), rel=1e-14)


def test_log_or_from_ipd_all_responders_is_finite():
    resp = [True] * 10 + [True] * 4 + [False] * 6
    arm = [1] * 10 + [0] * 10
    v = fit_log_or_ipd(records([1.0] * 20, [1] * 20, arm, resp))
    assert np.isfinite(v)
    assert v == pytest.approx(np.log(10.5 * 6.5 / (0.5 * 4.5)))


def test_bootstrap_preserves_arm_sizes():
    ipd = simulate_ipd(61, 0)
    arm = np.array([r.arm for r in ipd])
    arms = [np.flatnonzero(arm == g) for g in (0, 1)]
    for b in range(20):
        rng = stream(3, "bootstrap", b)
        idx = np.concatenate([ix[rng.integers(0, len(ix), size=len(ix))] for ix in arms])
        assert (arm[idx] == 0).sum() == len(arms[0])
        assert (arm[idx] == 1).sum() == len(arms[1])


def test_bootstrap_deterministic_and_seed_sensitive():
    ipd = simulate_ipd(300, 1)
    a = bootstrap_effects(ipd, BootstrapConfig(400, 7))
    b = bootstrap_effects(ipd, BootstrapConfig(400, 7))
    c = bootstrap_effects(ipd, BootstrapConfig(400, 8))
    assert a.correlations == b.correlations
    assert np.array_equal(a.statistics, b.statistics)
    assert a.correlations != c.correlations
    se = (1 - np.array([a.correlations.rho_12, a.correlations.rho_13, a.correlations.rho_23]) ** 2) / np.sqrt(400)
    diff = np.abs(np.array([a.correlations.rho_12 - c.correlations.rho_12,
                            a.correlations.rho_13 - c.correlations.rho_13,
                            a.correlations.rho_23 - c.correlations.rho_23]))
    assert np.all(diff < 3 * np.sqrt(2) * se)


def test_identical_pfs_os_gives_unit_correlation():
    r = estimate_within_correlations(simulate_ipd(200, 2, identical_times=True), BootstrapConfig(500, 1))
    assert r.rho_23 > 0.98


def test_correlations_form_psd_matrix():
    r = estimate_within_correlations(simulate_ipd(200, 3), BootstrapConfig(300, 2))
    assert np.linalg.eigvalsh(r.matrix()).min() > -1e-8
    for v in (r.rho_12, r.rho_13, r.rho_23):
        assert -1 <= v <= 1


def test_too_many_failures_raise():
    # tiny arms make some resamples lose all events in an arm
    ipd = records([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0], [0, 0, 1, 1], [True, False, True, False])
    with pytest.raises(RuntimeError, match="failed"):
        bootstrap_effects(ipd, BootstrapConfig(200, 0))


def test_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(1, 0)
    with pytest.raises(ValueError):
        BootstrapConfig(10, -1)


def test_parse_ipd_csv(tmp_path):
    p = tmp_path / "ipd.csv"
    p.write_text("patient_id,arm,responder,pfs_time,pfs_event,os_time,os_event\n"
                 "p1,1,true,3.5,1,10.2,0\np2,0,,2.0,1,,\n")
    a, b = parse_ipd_csv(p)
    assert (a.arm, a.responder, a.pfs_time, a.pfs_event, a.os_event) == (1, True, 3.5, True, False)
    assert b.responder is None and b.os_time is None
