import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparkle.strategy import (
    Strategy,
    custom_strategy,
    prepare_mixing,
    recursion_form,
    strategy_matrices,
)
from sparkle.topology import TopologyError, build_topology

CORRECTED = ["ed", "extra", "atc-gt", "semi-atc-gt", "non-atc-gt"]
ALL = CORRECTED + ["dgd"]


def test_ed_on_complete_graph():
    m = strategy_matrices("ed", build_topology("complete", 4))
    avg = np.full((4, 4), 0.25)
    np.testing.assert_allclose(m.a_mat, avg, atol=1e-15)
    np.testing.assert_allclose(m.c_mat, avg, atol=1e-15)
    np.testing.assert_allclose(m.b_sq, np.eye(4) - avg, atol=1e-15)
    assert m.uses_dual


def test_identity_is_rejected_before_extra():
    with pytest.raises(TopologyError, match="strongly_connected"):
        strategy_matrices("extra", np.eye(4))


def test_atc_gt_bsq_matches_direct_arithmetic():
    w = build_topology("ring_adjusted", 10, a=0.4)
    m = strategy_matrices("atc-gt", w)
    lap = np.eye(10) - np.array(w.w)
    np.testing.assert_allclose(m.b_sq, lap @ lap, atol=1e-15)
    assert np.max(np.abs(m.b_sq @ np.ones(10))) <= 1e-12


@pytest.mark.parametrize(
    "name,expected",
    [
        ("ed", ("W", "I-W", "W")),
        ("extra", ("I", "I-W", "W")),
        ("atc-gt", ("W2", "L2", "W2")),
        ("semi-atc-gt", ("W", "L2", "W2")),
        ("non-atc-gt", ("I", "L2", "W2")),
        ("dgd", ("W", "0", "W")),
    ],
)
def test_triples(name, expected):
    w = np.array(build_topology("ring_adjusted", 7, a=0.3).w)
    eye = np.eye(7)
    table = {"W": w, "I": eye, "I-W": eye - w, "W2": w @ w, "L2": (eye - w) @ (eye - w), "0": 0 * w}
    m = strategy_matrices(name, w)
    for got, key in zip((m.a_mat, m.b_sq, m.c_mat), expected):
        np.testing.assert_allclose(got, table[key], atol=1e-15)
    assert m.uses_dual == (name != "dgd")
    m.check()


@pytest.mark.parametrize("name", CORRECTED)
def test_leading_matrix_is_two_w(name):
    mix = build_topology("five_peer", 9)
    m = strategy_matrices(name, mix)
    lead = np.eye(9) - m.b_sq + m.c_mat
    np.testing.assert_allclose(lead, 2 * np.array(mix.w), atol=1e-12)


@pytest.mark.parametrize("name", ALL)
def test_triples_commute_with_w(name):
    mix = build_topology("torus", rows=3, cols=4)
    W = np.array(mix.w)
    m = strategy_matrices(name, mix)
    for mat in (m.a_mat, m.b_sq, m.c_mat):
        assert np.max(np.abs(mat @ W - W @ mat)) <= 1e-10


def test_parse_names_and_errors():
    assert Strategy.parse("ATC_GT") is Strategy.ATC_GT
    assert Strategy.parse("gt") is Strategy.ATC_GT
    assert [s.value for s in Strategy] == ALL
    with pytest.raises(ValueError, match="unknown strategy 'foo'"):
        Strategy.parse("foo")


def test_recursion_forms():
    assert recursion_form("ed").kind == "two-step" and recursion_form("ed").mix_direction
    assert recursion_form("extra").kind == "two-step" and not recursion_form("extra").mix_direction
    atc = recursion_form("atc-gt")
    assert atc.kind == "tracker" and atc.atc_tracker and atc.atc_iterate and atc.mix_initial
    non = recursion_form("non-atc-gt")
    assert not (non.atc_tracker or non.atc_iterate or non.mix_initial)
    with pytest.raises(ValueError, match="dgd"):
        recursion_form("dgd")


def test_pd_shift_only_for_ed_extra():
    ring = build_topology("ring", 10)
    assert ring.lambda_min < 0
    assert prepare_mixing("ed", ring).lambda_min > 0
    assert prepare_mixing("extra", ring).params.get("pd_shift")
    assert prepare_mixing("atc-gt", ring) is ring
    assert prepare_mixing("ed", ring, pd_shift=False) is ring


def test_custom_triple_validation():
    W = np.array(build_topology("ring", 5).w)
    m = custom_strategy(W, np.eye(5) - W, W, name="mine")
    assert m.strategy == "mine" and m.uses_dual
    with pytest.raises(ValueError, match="annihilate"):
        custom_strategy(W, np.eye(5), W)
    with pytest.raises(ValueError, match="doubly stochastic"):
        custom_strategy(2 * W, np.eye(5) - W, W)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 25), a=st.floats(0.05, 0.95), name=st.sampled_from(CORRECTED))
def test_exact_correction_property(n, a, name):
    m = strategy_matrices(name, build_topology("ring_adjusted", n, a=a))
    ones = np.ones(n)
    assert np.max(np.abs(m.b_sq @ ones)) <= 1e-12
    assert np.max(np.abs(m.a_mat @ ones - 1)) <= 1e-12
    assert np.max(np.abs(m.c_mat @ ones - 1)) <= 1e-12
    assert np.linalg.eigvalsh(m.b_sq).min() >= -1e-12
