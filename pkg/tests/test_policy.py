import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drc_agd import policy
from drc_agd.policy import DrcConstraintSet, DrcParams


def test_vectorize_roundtrip_and_row_order():
    rng = np.random.default_rng(0)
    blocks = rng.standard_normal((3, 2, 4))
    P = policy.vectorize(blocks)
    np.testing.assert_array_equal(policy.vectorize(policy.devectorize(P, 3, 2, 4)), P)
    q = 2 * 4
    for s in range(3):
        for j in range(2):
            np.testing.assert_array_equal(P[s * q + j * 4 : s * q + (j + 1) * 4], blocks[s, j, :])


def test_params_record_roundtrip():
    p = DrcParams.from_blocks(np.arange(12.0).reshape(2, 3, 2))
    back = DrcParams.from_record(p.to_record())
    assert (back.m, back.du, back.dy) == (2, 3, 2)
    np.testing.assert_array_equal(back.P, p.P)
    with pytest.raises(ValueError):
        DrcParams(2, 1, 1, np.zeros(3))


def test_control_input_trivial():
    assert np.all(policy.control_input(DrcParams.zeros(3, 2, 2), np.ones((3, 2))) == 0)
    y = np.array([0.7, -0.2])
    np.testing.assert_array_equal(policy.control_input(np.eye(2)[None], [y]), y)


def test_control_input_triple_loop_oracle():
    rng = np.random.default_rng(1)
    m, du, dy = 4, 3, 2
    M = rng.standard_normal((m, du, dy))
    hist = rng.standard_normal((m, dy))
    expect = np.zeros(du)
    for s in range(m):
        for i in range(du):
            for j in range(dy):
                expect[i] += M[s, i, j] * hist[s, j]
    np.testing.assert_allclose(policy.control_input(M, hist), expect, atol=1e-12)
    # short history is zero padded
    np.testing.assert_allclose(policy.control_input(M, hist[:2]), np.einsum("sij,sj->i", M[:2], hist[:2]), atol=1e-12)


def test_input_map_matches_control_input():
    rng = np.random.default_rng(2)
    P = rng.standard_normal(3 * 2 * 2)
    win = rng.standard_normal((3, 2))
    Y = policy.input_map(win, 2)
    np.testing.assert_allclose(Y @ P, policy.control_input(policy.devectorize(P, 3, 2, 2), win), atol=1e-12)


def test_control_input_linear_in_P():
    rng = np.random.default_rng(3)
    P1, P2 = rng.standard_normal((2, 12))
    hist = rng.standard_normal((3, 2))
    u = lambda P: policy.control_input(policy.devectorize(P, 3, 2, 2), hist)
    np.testing.assert_allclose(u(2.0 * P1 - 0.5 * P2), 2.0 * u(P1) - 0.5 * u(P2), atol=1e-12)


def test_project_interior_unchanged():
    cset = DrcConstraintSet(3, 2, 2, 2.0)
    P = policy.random_feasible(cset, np.random.default_rng(0), fill=0.5)
    assert cset.group_norms(P).sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(policy.project(P, cset), P)


def test_project_single_group_is_ball_shrink():
    cset = DrcConstraintSet(1, 2, 3, 1.5)
    P = np.random.default_rng(4).standard_normal(6) * 3
    np.testing.assert_allclose(policy.project(P, cset), P * min(1.0, 1.5 / np.linalg.norm(P)), atol=1e-12)


def grid_projection(p, radius, rounds=40, n=61):
    """Brute-force nearest point of {|q1|+|q2|+|q3| <= radius} on its boundary."""
    s3 = np.sign(p[2]) or 1.0
    center, half = np.zeros(2), radius

    def best_on(c, w):
        g = np.linspace(-w, w, n)
        q1, q2 = np.meshgrid(c[0] + g, c[1] + g, indexing="ij")
        rest = radius - np.abs(q1) - np.abs(q2)
        ok = rest >= 0
        q3 = s3 * np.where(ok, rest, 0.0)
        d = (q1 - p[0]) ** 2 + (q2 - p[1]) ** 2 + (q3 - p[2]) ** 2
        d[~ok] = np.inf
        k = np.unravel_index(np.argmin(d), d.shape)
        return np.array([q1[k], q2[k], q3[k]])

    for _ in range(rounds):
        q = best_on(center, half)
        center, half = q[:2], half * 0.3
    return q


def test_project_matches_grid_oracle():
    rng = np.random.default_rng(5)
    cset = DrcConstraintSet(3, 1, 1, 1.0)
    for _ in range(20):
        p = rng.standard_normal(3) * 2
        if np.abs(p).sum() <= 1:
            continue
        np.testing.assert_allclose(policy.project(p, cset), grid_projection(p, 1.0), atol=1e-5)


def test_projection_minimizes_distance():
    rng = np.random.default_rng(6)
    cset = DrcConstraintSet(4, 2, 1, 1.0)
    for _ in range(20):
        P = rng.standard_normal(cset.dim) * 2
        dist = np.linalg.norm(P - policy.project(P, cset))
        for _ in range(1000 // 20):
            Q = policy.random_feasible(cset, rng)
            assert dist <= np.linalg.norm(P - Q) + 1e-9


vectors = arrays(np.float64, 8, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, st.floats(0.1, 5.0))
def test_projection_idempotent_feasible_nonexpansive(p1, p2, radius):
    cset = DrcConstraintSet(4, 1, 2, radius)
    a, b = policy.project(p1, cset), policy.project(p2, cset)
    assert cset.contains(a)
    np.testing.assert_allclose(policy.project(a, cset), a, atol=1e-9)
    assert np.linalg.norm(a - b) <= np.linalg.norm(p1 - p2) + 1e-9


def test_random_feasible_inside():
    rng = np.random.default_rng(7)
    cset = DrcConstraintSet(5, 2, 3, 0.7)
    for _ in range(100):
        assert cset.contains(policy.random_feasible(cset, rng))


def test_diameter():
    assert policy.diameter(1, 1, 2.0) == 4.0
    assert policy.diameter(4, 1, 1.0) == 2.0
    assert policy.diameter(3, 5, 3.0) == pytest.approx(3 * policy.diameter(3, 5, 1.0))
    with pytest.raises(ValueError):
        policy.diameter(0, 1, 1.0)
