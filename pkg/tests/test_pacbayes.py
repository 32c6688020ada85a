import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsce.pacbayes import LAMBDA_GRID, POSTERIOR_PROXY, BoundInputs, best_lambda, bound_terms, gaussian_kl


def _inputs(**kw):
    base = dict(K=1.0, lam=1.0, delta=0.05, m=[100.0], empirical_risk=[0.1], kl=[0.0])
    base.update(kw)
    return BoundInputs(**base)


def test_throughput_term_example():
    assert bound_terms(_inputs()).throughput == 0.005


def test_half_factor_toggle():
    assert bound_terms(_inputs(half_factor=False)).throughput == 0.01


def test_zero_divergence():
    assert bound_terms(_inputs(kl=[0.0])).divergence == 0.0


def test_constant_example():
    terms = bound_terms(_inputs(m=[100.0, 50.0], empirical_risk=[0.1, 0.2], kl=[0.0, 0.0]))
    assert terms.constant == pytest.approx(7.3778, abs=1e-4)
    assert abs(terms.constant - 2 * math.log(40)) <= 1e-12


def test_worked_example_by_substitution():
    lam, K, delta = 2.5, 1.5, 0.1
    m, r, kl = [120.0, 80.0, 200.0], [0.2, 0.05, 0.3], [1.5, 0.0, 4.0]
    t = bound_terms(BoundInputs(K, lam, delta, m, r, kl))
    expected = sum(r) + sum(lam * K**2 / (2 * mt) for mt in m) + sum(k / lam for k in kl) + 3 * math.log(3 / delta) / lam
    assert abs(t.total - expected) <= 1e-12
    assert abs(t.total - (t.empirical_risk + t.throughput + t.divergence + t.constant)) <= 1e-12
    assert t.posterior == POSTERIOR_PROXY


@pytest.mark.parametrize(
    "kw",
    [{"K": 0.0}, {"lam": -1.0}, {"delta": 1.0}, {"m": [0.0]}, {"kl": [-0.1]}, {"m": [1.0, 2.0]}, {"m": [], "empirical_risk": [], "kl": []}],
)
def test_invalid_inputs(kw):
    with pytest.raises(ValueError):
        _inputs(**kw)


task_lists = st.integers(1, 4).flatmap(
    lambda T: st.tuples(
        st.lists(st.floats(1, 1e5), min_size=T, max_size=T),
        st.lists(st.floats(0, 1), min_size=T, max_size=T),
        st.lists(st.floats(0, 1e3), min_size=T, max_size=T),
    )
)


@given(task_lists, st.floats(1e-3, 1e3), st.floats(0.01, 10), st.floats(0.0, 1e3), st.data())
@settings(max_examples=200, deadline=None)
def test_monotone_in_m_and_kl(tasks, lam, bump_m, bump_kl, data):
    m, r, kl = (list(x) for x in tasks)
    t = data.draw(st.integers(0, len(m) - 1))
    base = bound_terms(BoundInputs(1.0, lam, 0.05, m, r, kl)).total
    more_m = list(m)
    more_m[t] += bump_m
    more_kl = list(kl)
    more_kl[t] += bump_kl
    assert bound_terms(BoundInputs(1.0, lam, 0.05, more_m, r, kl)).total <= base
    assert bound_terms(BoundInputs(1.0, lam, 0.05, m, r, more_kl)).total >= base


def test_grid_search_beats_endpoints():
    inputs = _inputs(m=[100.0, 400.0], empirical_risk=[0.1, 0.2], kl=[3.0, 5.0])
    best = best_lambda(inputs)
    assert best.lam in LAMBDA_GRID
    for lam in (LAMBDA_GRID[0], LAMBDA_GRID[-1]):
        assert best.total <= bound_terms(_inputs(lam=lam, m=inputs.m, empirical_risk=inputs.empirical_risk, kl=inputs.kl)).total
    assert best.total == min(
        bound_terms(_inputs(lam=lam, m=inputs.m, empirical_risk=inputs.empirical_risk, kl=inputs.kl)).total for lam in LAMBDA_GRID
    )


@pytest.mark.parametrize("dist, sigma, kl", [(0.0, 0.1, 0.0), (1.0, 1.0, 0.5), (2.0, 2.0, 0.5)])
def test_gaussian_kl_examples(dist, sigma, kl):
    a = np.array([0.3, -1.2, 4.0])
    direction = np.array([3.0, 4.0, 0.0]) / 5.0
    assert gaussian_kl(a + dist * direction, a, sigma) == pytest.approx(kl, abs=1e-12)


def test_gaussian_kl_rejects_bad_input():
    with pytest.raises(ValueError):
        gaussian_kl(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        gaussian_kl(np.zeros(3), np.zeros(3), sigma=0.0)
