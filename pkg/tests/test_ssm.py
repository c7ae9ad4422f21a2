import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambafusion.gradsuite import OP_TOL, check_case, discretize_case, scan_case
from mambafusion.numerics import ShapeError, make_rng
from mambafusion.reference import naive_discretize, naive_scan
from mambafusion.ssm import (
    DiscretizedParams, SSMParams, discretize, flops_of_scan, selective_scan, selective_scan_chunked,
)


def rand_dp(rng, L, D, E, lead=()):
    delta = rng.uniform(0.01, 1.0, size=(*lead, L, D))
    A = -rng.uniform(0.1, 3.0, size=(D, E))
    A_bar, B_bar = discretize(delta, A, rng.normal(size=(*lead, L, E)))
    return DiscretizedParams(A_bar, B_bar, rng.normal(size=(*lead, L, E)), delta)


def scalar_dp(L, a=0.5, b=1.0, c=1.0):
    return DiscretizedParams(np.full((L, 1, 1), a), np.full((L, 1, 1), b), np.full((L, 1), c))


dims = st.tuples(st.integers(1, 24), st.integers(1, 5), st.integers(1, 5))


# --- discretize ---

def test_discretize_analytic_values():
    A_bar, _ = discretize(np.array([[math.log(2)]]), np.array([[-1.0]]), np.array([[0.0]]))
    assert A_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    _, B_bar = discretize(np.array([[0.5]]), np.array([[-1.0]]), np.array([[2.0]]))
    assert B_bar[0, 0, 0] == 1.0


def test_discretize_small_step_limit():
    A_bar, B_bar = discretize(np.array([[1e-12]]), np.array([[-3.0]]), np.array([[5.0]]))
    assert abs(A_bar[0, 0, 0] - 1) < 1e-10 and abs(B_bar[0, 0, 0]) < 1e-10


def test_discretize_matches_naive():
    rng = make_rng(2)
    delta, A, B = rng.uniform(0.1, 1, (6, 3)), -rng.uniform(0.1, 2, (3, 4)), rng.normal(size=(6, 4))
    for got, want in zip(discretize(delta, A, B), naive_discretize(delta, A, B)):
        assert np.max(np.abs(got - want)) < 1e-15


def test_discretize_rejects_nonpositive_step_and_bad_shapes():
    with pytest.raises(ValueError):
        discretize(np.array([[0.0]]), np.array([[-1.0]]), np.array([[1.0]]))
    with pytest.raises(ShapeError):
        discretize(np.ones((3, 2)), -np.ones((3, 4)), np.ones((3, 4)))


@settings(max_examples=30)
@given(dims, st.integers(0, 10_000))
def test_a_bar_strictly_inside_unit_interval(shape, seed):
    dp = rand_dp(make_rng(seed), *shape)
    assert np.all((dp.A_bar > 0) & (dp.A_bar < 1))


def test_ssm_params_a_negative():
    p = SSMParams(4, 6, make_rng(0))
    assert np.all(p.A < 0) and p.A.shape == (4, 6)
    with pytest.raises(ValueError):
        SSMParams(0, 3)


# --- scan examples ---

def test_scan_single_step():
    res = selective_scan(scalar_dp(1), np.array([[3.0]]))
    assert res.Y[0, 0] == 3.0 and res.final_state[0, 0] == 3.0


def test_scan_two_steps_hand_recurrence():
    res = selective_scan(scalar_dp(2), np.array([[3.0], [1.0]]), keep_states=True)
    assert np.array_equal(res.all_states[:, 0, 0], [3.0, 2.5])
    assert np.array_equal(res.Y[:, 0], [3.0, 2.5])


def test_scan_matches_naive_oracle():
    rng = make_rng(17)
    dp = rand_dp(rng, 17, 5, 4)
    X, h0 = rng.normal(size=(17, 5)), rng.normal(size=(5, 4))
    Y_ref, h_ref = naive_scan(dp.A_bar, dp.B_bar, dp.C, X, h0)
    res = selective_scan(dp, X, h0)
    assert np.max(np.abs(res.Y - Y_ref)) < 1e-12
    assert np.max(np.abs(res.final_state - h_ref)) < 1e-12


def test_scan_final_state_is_last_materialized():
    rng = make_rng(1)
    dp = rand_dp(rng, 9, 3, 2)
    res = selective_scan(dp, rng.normal(size=(9, 3)), keep_states=True)
    assert np.array_equal(res.final_state, res.all_states[-1])


def test_scan_shape_errors():
    dp = rand_dp(make_rng(0), 5, 3, 2)
    with pytest.raises(ShapeError):
        selective_scan(dp, np.ones((5, 4)))
    with pytest.raises(ShapeError):
        selective_scan(dp, np.ones((5, 3)), h0=np.ones((2, 2)))
    with pytest.raises(ShapeError):
        DiscretizedParams(np.ones((5, 3, 2)), np.ones((5, 3, 2)), np.ones((5, 3)))


# --- chunked ---

def test_chunk_one_and_full_match_sequential():
    rng = make_rng(4)
    dp = rand_dp(rng, 23, 4, 3)
    X, h0 = rng.normal(size=(23, 4)), rng.normal(size=(4, 3))
    ref = selective_scan(dp, X, h0)
    for chunk in (1, 23):
        got = selective_scan_chunked(dp, X, h0, chunk=chunk)
        assert np.max(np.abs(got.Y - ref.Y)) < 1e-12
        assert np.max(np.abs(got.final_state - ref.final_state)) < 1e-12


def test_chunk8_long_sequence():
    rng = make_rng(8)
    dp = rand_dp(rng, 100, 6, 5)
    X = rng.normal(size=(100, 6))
    assert np.max(np.abs(selective_scan_chunked(dp, X, chunk=8).Y - selective_scan(dp, X).Y)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(dims, st.integers(1, 30), st.integers(0, 10_000))
def test_chunked_equals_sequential_property(shape, chunk, seed):
    rng = make_rng(seed)
    dp = rand_dp(rng, *shape, lead=(2,))
    X, h0 = rng.normal(size=(2, shape[0], shape[1])), rng.normal(size=(2, shape[1], shape[2]))
    a, b = selective_scan(dp, X, h0, keep_states=True), selective_scan_chunked(dp, X, h0, chunk, keep_states=True)
    assert np.max(np.abs(a.Y - b.Y)) < 1e-10
    assert np.max(np.abs(a.all_states - b.all_states)) < 1e-10


# --- scan invariants ---

@settings(max_examples=30)
@given(dims, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_scan_linear_in_input(shape, alpha, beta, seed):
    rng = make_rng(seed)
    dp = rand_dp(rng, *shape)
    X1, X2 = rng.normal(size=(2, shape[0], shape[1]))
    lhs = selective_scan(dp, alpha * X1 + beta * X2).Y
    rhs = alpha * selective_scan(dp, X1).Y + beta * selective_scan(dp, X2).Y
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_zero_input_and_zero_readout():
    rng = make_rng(0)
    dp = rand_dp(rng, 7, 3, 4)
    res = selective_scan(dp, np.zeros((7, 3)))
    assert not res.Y.any() and not res.final_state.any()
    X = rng.normal(size=(7, 3))
    dp0 = DiscretizedParams(dp.A_bar, dp.B_bar, np.zeros_like(dp.C))
    res0 = selective_scan(dp0, X)
    assert not res0.Y.any()
    assert np.array_equal(res0.final_state, selective_scan(dp, X).final_state)


def test_stability_on_long_constant_input():
    L, D, E = 2000, 3, 4
    rng = make_rng(9)
    A_bar = np.broadcast_to(rng.uniform(0.3, 0.95, size=(D, E)), (L, D, E)).copy()
    B_bar = np.broadcast_to(rng.normal(size=(D, E)), (L, D, E)).copy()
    X = np.ones((L, D))
    res = selective_scan(DiscretizedParams(A_bar, B_bar, np.ones((L, E))), X, keep_states=True)
    bound = np.max(np.abs(B_bar[0])) / (1 - np.max(A_bar))
    assert np.max(np.abs(res.all_states)) <= bound + 1e-12
    prev = np.abs(res.all_states[:-1])
    step = np.abs(res.all_states[1:])
    assert np.all(step <= prev * np.max(A_bar) + np.max(np.abs(B_bar[0])) + 1e-12)


@settings(max_examples=40)
@given(dims, st.integers(0, 10_000), st.data())
def test_prefix_property(shape, seed, data):
    L = shape[0]
    k = data.draw(st.integers(0, L))
    rng = make_rng(seed)
    dp = rand_dp(rng, *shape)
    X = rng.normal(size=(L, shape[1]))
    full = selective_scan(dp, X)
    first = selective_scan(DiscretizedParams(dp.A_bar[:k], dp.B_bar[:k], dp.C[:k]), X[:k])
    second = selective_scan(DiscretizedParams(dp.A_bar[k:], dp.B_bar[k:], dp.C[k:]), X[k:], first.final_state)
    assert np.max(np.abs(np.concatenate([first.Y, second.Y]) - full.Y)) < 1e-12
    assert np.max(np.abs(second.final_state - full.final_state)) < 1e-12


# --- counting ---

def test_flops_of_scan():
    assert flops_of_scan(1, 1, 1) == 3
    assert flops_of_scan(0, 4, 4) == 0
    assert flops_of_scan(20, 3, 5) == 2 * flops_of_scan(10, 3, 5)


# --- gradients ---

@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("make", [discretize_case, scan_case])
def test_backward_seeds(make, seed):
    rep = check_case(make(seed), OP_TOL)
    assert rep.passed, rep
