import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from beaconopt.beacon_layer import (Placement, RegSchedule, TemperatureSchedule, alpha_at,
                                    harden, harden_slots, lambda_at, regularizer,
                                    softmax_assign, softmax_backward)

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(2, 9)),
                    elements=st.floats(-5, 5))


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_assign(np.zeros((3, 5)), 7.0), 0.2, rtol=1e-15)


def test_softmax_two_entries():
    np.testing.assert_allclose(softmax_assign(np.array([[1.0, 0.0]]), 1.0),
                               [[0.7310585786300049, 0.2689414213699951]], rtol=1e-12)


def test_softmax_huge_alpha():
    out = softmax_assign(np.array([[0.1, 0.3, 0.2]]), 1e6)
    assert out[0, 1] > 1 - 1e-9
    assert np.all(np.isfinite(out))


def test_softmax_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        softmax_assign(np.zeros((1, 2)), 0.0)


@settings(max_examples=200, deadline=None)
@given(w=logit_rows, alpha=st.floats(1e-3, 50))
def test_softmax_rows_on_simplex(w, alpha):
    s = softmax_assign(w, alpha)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((s >= 0) & (s <= 1))


def fd_softmax(w, alpha, ds, h=1e-6):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        g[idx] = np.sum(ds * (softmax_assign(wp, alpha) - softmax_assign(wm, alpha))) / (2 * h)
    return g


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), alpha=st.floats(0.1, 5.0))
def test_softmax_backward_matches_fd(seed, alpha):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 5))
    ds = rng.normal(size=(4, 5))
    s = softmax_assign(w, alpha)
    analytic = softmax_backward(s, alpha, ds)
    numeric = fd_softmax(w, alpha, ds)
    scale = max(np.abs(numeric).max(), 1e-3)
    assert np.abs(analytic - numeric).max() / scale < 1e-6


def test_softmax_backward_constant_upstream():
    s = softmax_assign(np.random.default_rng(0).normal(size=(3, 4)), 2.0)
    np.testing.assert_allclose(softmax_backward(s, 2.0, np.full((3, 4), 0.7)), 0.0, atol=1e-15)


def test_softmax_backward_linear_in_alpha():
    rng = np.random.default_rng(1)
    s = softmax_assign(rng.normal(size=(3, 4)), 1.5)
    ds = rng.normal(size=(3, 4))
    assert np.array_equal(softmax_backward(s, 3.0, ds), 2 * softmax_backward(s, 1.5, ds))


def test_softmax_backward_shape_mismatch():
    with pytest.raises(ValueError):
        softmax_backward(np.ones((2, 3)) / 3, 1.0, np.ones((2, 4)))


@pytest.mark.parametrize("row, idx", [((0.5, 0.5, 0.1), 0), ((0, 3, 1), 1)])
def test_harden_rows(row, idx):
    assert harden_slots(np.array([row]))[0] == idx


@settings(max_examples=200, deadline=None)
@given(w=logit_rows, shift=st.floats(-100, 100), alpha=st.floats(0.01, 100))
def test_harden_invariances(w, shift, alpha):
    base = harden_slots(w)
    assert np.array_equal(harden_slots(w + shift), harden_slots(w + shift))
    # argmax of exp(alpha*w)/Z equals argmax of w unless rounding merges near-ties
    s = softmax_assign(w, alpha)
    top2 = np.sort(w, axis=1)[:, -2:] if w.shape[1] > 1 else None
    distinct = (top2[:, 1] - top2[:, 0]) * alpha > 1e-9
    assert np.array_equal(harden_slots(s)[distinct], base[distinct])
    shifted = w + np.arange(len(w))[:, None] * 0.0 + shift
    assert np.array_equal(harden_slots(shifted)[distinct], base[distinct])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_softmax_converges_to_hard(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(6, 4))
    gaps = np.diff(np.sort(w, axis=1)[:, -2:], axis=1)
    if gaps.min() < 1e-3:
        return
    hard = np.eye(4)[harden_slots(w)]
    errs = [np.abs(softmax_assign(w, a) - hard).max() for a in (10.0, 1e3, 1e5)]
    assert errs[0] >= errs[1] >= errs[2]
    assert errs[2] < 1e-6


def test_regularizer_values():
    none = np.tile([1.0, 0.0, 0.0], (10, 1))
    assert regularizer(none, 0.7)[0] == 0.0
    full = np.tile([0.0, 0.5, 0.5], (625, 1))
    assert regularizer(full, 0.2)[0] == pytest.approx(125.0, rel=1e-12)


def test_regularizer_as_printed_sign():
    soft = np.tile([0.25, 0.75], (4, 1))
    value, grad = regularizer(soft, 2.0, sign="as_printed")
    assert value == pytest.approx(2.0)
    np.testing.assert_array_equal(grad[:, 0], 2.0)


@pytest.mark.parametrize("sign", ["intent", "as_printed"])
def test_regularizer_gradient_fd(sign):
    rng = np.random.default_rng(2)
    soft = rng.random((5, 4))
    value, grad = regularizer(soft, 0.3, sign)
    h = 1e-6
    num = np.zeros_like(soft)
    for idx in np.ndindex(soft.shape):
        sp, sm = soft.copy(), soft.copy()
        sp[idx] += h
        sm[idx] -= h
        num[idx] = (regularizer(sp, 0.3, sign)[0] - regularizer(sm, 0.3, sign)[0]) / (2 * h)
    assert np.abs(num - grad).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(slots=st.lists(st.integers(0, 4), min_size=1, max_size=50), lam=st.floats(0, 10))
def test_regularizer_counts_beacons_on_onehot(slots, lam):
    slots = np.array(slots)
    pl = Placement(np.zeros((len(slots), 2)), slots, 4)
    assert regularizer(pl.assign, lam)[0] == pytest.approx(lam * pl.beacon_count, abs=1e-12)


def test_alpha_schedule_paper_constants():
    sched = TemperatureSchedule(1.0, 1.25e-9, 900_000)
    assert alpha_at(0, sched).alpha == 1.0
    temp = alpha_at(900_000, sched)
    assert temp.alpha == 1013.5
    assert temp.hard
    assert not alpha_at(899_999, sched).hard


def test_alpha_schedule_constant():
    sched = TemperatureSchedule(2.5, 0.0, 10)
    assert {alpha_at(t, sched).alpha for t in (0, 5, 10**6)} == {2.5}


def test_lambda_schedules():
    assert lambda_at(123_456, RegSchedule("fixed", 0.04)) == 0.04
    annealed = RegSchedule("annealed", 0.2, 0.25, 100_000)
    assert lambda_at(0, annealed) == 0.2
    assert lambda_at(250_000, annealed) == pytest.approx(0.0125, rel=1e-15)


def test_reg_schedule_validation():
    with pytest.raises(ValueError):
        RegSchedule("sometimes")
    with pytest.raises(ValueError):
        RegSchedule("annealed", 0.2, 0.25, 0)


def test_placement_views_and_round_trip(tmp_path):
    sites = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    pl = Placement(sites, [0, 1, 3, 1], 3, "m")
    assert pl.beacon_count == 3
    assert pl.beacon_count == len(pl.slots) - int(pl.assign[:, 0].sum())
    chans = pl.channel_sites()
    np.testing.assert_array_equal(chans[0], [[1, 0], [1, 1]])
    assert len(chans[1]) == 0
    pl.save(tmp_path / "p.json")
    again = Placement.load(tmp_path / "p.json")
    np.testing.assert_array_equal(again.slots, pl.slots)
    np.testing.assert_array_equal(again.sites, pl.sites)


def test_placement_accepts_minus_one():
    pl = Placement.from_dict({"map": "m", "C": 2, "assignments": [-1, 2],
                              "locations": [[0, 0], [1, 1]]})
    np.testing.assert_array_equal(pl.slots, [0, 2])


def test_harden_placement():
    pl = harden(np.array([[3.0, 0, 0], [0, 0, 1]]), np.zeros((2, 2)), "m")
    np.testing.assert_array_equal(pl.slots, [0, 2])
    assert pl.n_channels == 2
