import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_scbo.trust_region import (
    TrustRegionConfig,
    TrustRegionState,
    default_failure_tolerance,
    tr_bounds,
    tr_sides,
    tr_update,
)


def _state(**kw):
    cfg = TrustRegionConfig(**kw)
    return TrustRegionState.initial(cfg)


def test_defaults():
    cfg = TrustRegionConfig()
    assert (cfg.length_init, cfg.length_min, cfg.length_max) == (0.8, 0.5**7, 1.6)
    assert cfg.success_tolerance == 3


@pytest.mark.parametrize("D,q,expected", [(7, 1, 7), (2, 1, 4), (108, 10, 11), (7, 10, 1), (3, 2, 2)])
def test_failure_tolerance(D, q, expected):
    assert default_failure_tolerance(D, q) == expected
    assert TrustRegionConfig.for_problem(D, q).failure_tolerance == expected


def test_invalid_config():
    with pytest.raises(ValueError):
        TrustRegionConfig(length_min=1.0, length_init=0.8)
    with pytest.raises(ValueError):
        TrustRegionConfig(failure_tolerance=0)


def test_three_successes_double_length():
    s = _state()
    for _ in range(3):
        s = tr_update(s, True)
    assert s.length == 1.6 and s.success_count == 0


def test_doubling_capped():
    s = _state()
    for _ in range(9):
        s = tr_update(s, True)
    assert s.length == 1.6


def test_failures_halve_length():
    s = _state(failure_tolerance=4)
    for _ in range(3):
        s = tr_update(s, False)
    assert s.length == 0.8
    s = tr_update(s, False)
    assert s.length == 0.4 and s.failure_count == 0


def test_success_resets_failure_counter():
    s = _state(failure_tolerance=2)
    s = tr_update(s, False)
    s = tr_update(s, True)
    s = tr_update(s, False)
    assert s.length == 0.8 and s.failure_count == 1


def test_collapse_triggers_restart():
    s = _state(failure_tolerance=1)
    for k in range(1, 7):
        s = tr_update(s, False)
        assert s.length == 0.8 * 0.5**k and not s.restart_pending
    # 0.8 / 128 < 0.5**7, so the seventh halving restarts
    s = tr_update(s, False)
    assert s.restart_pending and s.length == 0.8 and s.restart_count == 1
    s = tr_update(s, True)
    assert not s.restart_pending and s.restart_count == 1


@given(st.lists(st.booleans(), max_size=200), st.integers(1, 12))
@settings(max_examples=80, deadline=None)
def test_length_stays_in_range(outcomes, tau_fail):
    s = _state(failure_tolerance=tau_fail)
    for ok in outcomes:
        s = tr_update(s, ok)
        assert s.config.length_min <= s.length <= s.config.length_max
        assert 0 <= s.success_count < s.config.success_tolerance
        assert 0 <= s.failure_count < s.config.failure_tolerance


def test_center_index_update():
    s = tr_update(_state(), True, center_index=5)
    assert s.center_index == 5
    assert tr_update(s, False).center_index == 5


def test_sides_hand_value():
    s = TrustRegionState(TrustRegionConfig(), length=0.8)
    assert np.allclose(tr_sides(s, np.array([1.0, 4.0])), [0.4, 1.6], rtol=0, atol=1e-15)


def test_bounds_isotropic():
    s = _state()
    lo, hi = tr_bounds(s, np.full(3, 0.5), np.ones(3))
    assert np.allclose(lo, 0.1) and np.allclose(hi, 0.9)


def test_bounds_clipped_to_cube():
    s = _state()
    lo, hi = tr_bounds(s, np.array([0.0, 1.0]), np.ones(2))
    assert np.array_equal(lo, [0.0, 0.6]) and np.array_equal(hi, [0.4, 1.0])


@given(
    st.lists(st.floats(0.01, 100.0), min_size=1, max_size=8),
    st.floats(0.5**7, 1.6),
)
@settings(max_examples=60, deadline=None)
def test_bounds_volume_independent_of_lengthscales(ls, L):
    ls = np.array(ls)
    s = TrustRegionState(TrustRegionConfig(), length=L)
    lo, hi = tr_bounds(s, np.full(ls.size, 0.5), ls)
    sides = 2 * np.minimum(hi - 0.5, 0.5 - lo)
    full = L * ls / np.exp(np.mean(np.log(ls)))
    # unclipped sides multiply to L^D
    assert np.prod(full) == pytest.approx(L**ls.size, rel=1e-9)
    assert np.all(sides <= full + 1e-12)
    # longer lengthscale never gives a shorter side
    order = np.argsort(ls)
    assert np.all(np.diff(full[order]) >= -1e-12)


def test_bounds_reject_bad_lengthscale():
    with pytest.raises(ValueError):
        tr_bounds(_state(), np.full(2, 0.5), np.array([1.0, 0.0]))
