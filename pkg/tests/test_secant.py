import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import gram_schmidt_conjugate, random_spd, random_symmetric, w_with_direction
from problinsolve.gaussian import INVERSE, MatrixGaussian, ObservationSet, posterior_symmetric
from problinsolve.secant import (
    Rule,
    SkippedUpdate,
    dennis_update,
    inverse_rule,
    iterate_dennis,
    named_c,
)

NAMED = [Rule.SR1, Rule.PSB, Rule.GREENSTADT, Rule.DFP, Rule.BFGS]


def spd_problem(rng, n, m):
    B = random_spd(rng, n)
    B0 = random_spd(rng, n)
    S = rng.standard_normal((n, m))
    return B, B0, S


class TestDennisUpdate:
    def test_zero_residual_leaves_b_unchanged(self, rng):
        B = random_symmetric(rng, 3)
        s = rng.standard_normal(3)
        c = rng.standard_normal(3)
        np.testing.assert_allclose(dennis_update(B, s, B @ s, c), B, rtol=1e-14, atol=1e-14)

    def test_scale_invariant_in_c(self, rng):
        B = random_symmetric(rng, 4)
        s, y, c = rng.standard_normal((3, 4))
        np.testing.assert_allclose(dennis_update(B, s, y, c), dennis_update(B, s, y, 2.0 * c), rtol=1e-13)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 7))
    def test_secant_and_symmetry(self, seed, n):
        rng = np.random.default_rng(seed)
        B = random_symmetric(rng, n)
        s, y, c = rng.standard_normal((3, n))
        if abs(c @ s) < 1e-3 * np.linalg.norm(c) * np.linalg.norm(s):
            return
        Bp = dennis_update(B, s, y, c)
        np.testing.assert_array_equal(Bp, Bp.T)
        np.testing.assert_allclose(Bp @ s, y, rtol=1e-8, atol=1e-8 * np.abs(Bp).max() * np.abs(s).max())

    def test_rank_two_change(self, rng):
        B = random_symmetric(rng, 6)
        s, y, c = rng.standard_normal((3, 6))
        assert np.linalg.matrix_rank(dennis_update(B, s, y, c) - B) <= 2

    def test_orthogonal_c_is_skipped(self):
        with pytest.raises(SkippedUpdate):
            dennis_update(np.eye(2), np.array([1.0, 0.0]), np.array([1.0, 1.0]), np.array([0.0, 1.0]))

    def test_zero_s_rejected(self):
        with pytest.raises(ValueError):
            dennis_update(np.eye(2), np.zeros(2), np.ones(2), np.ones(2))


class TestNamedC:
    def test_psb_is_s(self, rng):
        s, y = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(named_c(Rule.PSB, s, y, np.eye(3)), s)

    def test_dfp_is_y(self, rng):
        s, y = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(named_c("dfp", s, y, np.eye(3)), y)

    def test_sr1_is_residual(self, rng):
        B = random_symmetric(rng, 3)
        s, y = rng.standard_normal((2, 3))
        np.testing.assert_allclose(named_c("SR1", s, y, B), y - B @ s)

    def test_greenstadt_is_bs(self, rng):
        B = random_symmetric(rng, 3)
        s, y = rng.standard_normal((2, 3))
        np.testing.assert_allclose(named_c(Rule.GREENSTADT, s, y, B), B @ s)

    def test_bfgs_matches_closed_form(self, rng):
        B, B0, S = spd_problem(rng, 4, 1)
        s = S[:, 0]
        y = B @ s
        expected = y + np.sqrt((y @ s) / (s @ B0 @ s)) * (B0 @ s)
        np.testing.assert_allclose(named_c(Rule.BFGS, s, y, B0), expected, rtol=1e-14)

    def test_bfgs_gives_textbook_update(self, rng):
        B, B0, S = spd_problem(rng, 4, 1)
        s = S[:, 0]
        y = B @ s
        Bs = B0 @ s
        textbook = B0 - np.outer(Bs, Bs) / (s @ Bs) + np.outer(y, y) / (y @ s)
        np.testing.assert_allclose(iterate_dennis(Rule.BFGS, B0, ObservationSet(S, y[:, None])), textbook, rtol=1e-11)

    def test_dfp_gives_textbook_update(self, rng):
        B, B0, S = spd_problem(rng, 4, 1)
        s = S[:, 0]
        y = B @ s
        ys = y @ s
        E = np.eye(4) - np.outer(y, s) / ys
        textbook = E @ B0 @ E.T + np.outer(y, y) / ys
        np.testing.assert_allclose(iterate_dennis(Rule.DFP, B0, ObservationSet(S, y[:, None])), textbook, rtol=1e-11)

    def test_bfgs_rejects_negative_curvature(self):
        with pytest.raises(ValueError):
            named_c(Rule.BFGS, np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.eye(2))

    def test_custom_callable(self, rng):
        s, y = rng.standard_normal((2, 3))
        np.testing.assert_allclose(named_c(lambda s, y, B: 3 * s, s, y, np.eye(3)), 3 * s)


class TestOneStepEquivalence:
    @pytest.mark.parametrize("rule", NAMED, ids=lambda r: r.value)
    def test_matches_exact_posterior(self, rule, rng):
        n = 5
        checked = 0
        for _ in range(20):
            B, B0, S = spd_problem(rng, n, 1)
            s, y = S[:, 0], B @ S[:, 0]
            c = named_c(rule, s, y, B0)
            W = w_with_direction(rng, s, c)
            if W is None:
                continue
            post = posterior_symmetric(MatrixGaussian.prior(B0, W), ObservationSet(S, y[:, None]))
            np.testing.assert_allclose(dennis_update(B0, s, y, c), post.mean, rtol=1e-10, atol=1e-10)
            checked += 1
        assert checked >= 5


class TestConjugateEquivalence:
    def test_w_conjugate_directions_match_batch_posterior(self, rng):
        n, m = 6, 4
        B, B0, S = spd_problem(rng, n, m)
        W = random_spd(rng, n)
        S = gram_schmidt_conjugate(S, W)
        obs = ObservationSet(S, B @ S)
        seq = iterate_dennis(lambda s, y, Bc: W @ s, B0, obs)
        batch = posterior_symmetric(MatrixGaussian.prior(B0, W), obs).mean
        np.testing.assert_allclose(seq, batch, rtol=1e-9, atol=1e-9)

    def test_non_conjugate_directions_differ(self, rng):
        n, m = 6, 4
        B, B0, S = spd_problem(rng, n, m)
        W = random_spd(rng, n)
        obs = ObservationSet(S, B @ S)
        seq = iterate_dennis(lambda s, y, Bc: W @ s, B0, obs)
        batch = posterior_symmetric(MatrixGaussian.prior(B0, W), obs).mean
        assert np.abs(seq - batch).max() > 1e-6


class TestIterate:
    def test_latest_secant_holds(self, rng):
        B, B0, S = spd_problem(rng, 5, 3)
        Y = B @ S
        for rule in NAMED:
            Bm = iterate_dennis(rule, B0, ObservationSet(S, Y))
            np.testing.assert_allclose(Bm @ S[:, -1], Y[:, -1], rtol=1e-9)

    def test_skipped_step_keeps_estimate(self, caplog):
        S = np.array([[1.0, 0.0], [0.0, 1.0]])
        Y = np.eye(2)
        # SR1 with B0 = I has zero residual and c = 0 on both steps.
        out = iterate_dennis(Rule.SR1, np.eye(2), ObservationSet(S, Y))
        np.testing.assert_array_equal(out, np.eye(2))
        assert "skipped" in caplog.text

    def test_rejects_inverse_observations(self, rng):
        S = rng.standard_normal((3, 1))
        with pytest.raises(ValueError):
            iterate_dennis(Rule.PSB, np.eye(3), ObservationSet(S, S, INVERSE))


class TestInverse:
    def test_one_step_inverse_bfgs_inverts_direct_bfgs(self, rng):
        B, B0, S = spd_problem(rng, 5, 1)
        Y = B @ S
        H1 = inverse_rule(Rule.BFGS, np.linalg.inv(B0), ObservationSet(S, Y, INVERSE))
        B1 = iterate_dennis(Rule.BFGS, B0, ObservationSet(S, Y))
        np.testing.assert_allclose(H1, np.linalg.inv(B1), rtol=1e-10, atol=1e-12)

    def test_one_step_inverse_dfp_inverts_direct_dfp(self, rng):
        B, B0, S = spd_problem(rng, 5, 1)
        Y = B @ S
        H1 = inverse_rule(Rule.DFP, np.linalg.inv(B0), ObservationSet(S, Y, INVERSE))
        B1 = iterate_dennis(Rule.DFP, B0, ObservationSet(S, Y))
        np.testing.assert_allclose(H1, np.linalg.inv(B1), rtol=1e-10, atol=1e-12)

    def test_inverse_bfgs_uses_c_equal_s(self, rng):
        B, H0, S = spd_problem(rng, 4, 1)
        y = np.linalg.solve(B, S[:, 0])
        s = S[:, 0]
        H1 = inverse_rule(Rule.BFGS, H0, ObservationSet(S, y[:, None], INVERSE))
        np.testing.assert_allclose(H1, dennis_update(H0, y, s, s), rtol=1e-14)

    @pytest.mark.parametrize("rule", NAMED, ids=lambda r: r.value)
    def test_inverse_secant(self, rule, rng):
        H, H0, Y = spd_problem(rng, 5, 3)
        S = H @ Y
        Hm = inverse_rule(rule, H0, ObservationSet(S, Y, INVERSE))
        np.testing.assert_allclose(Hm @ Y[:, -1], S[:, -1], rtol=1e-9)

    def test_consistent_prior_unchanged(self, rng):
        _, H0, Y = spd_problem(rng, 4, 2)
        Hm = inverse_rule(Rule.BFGS, H0, ObservationSet(H0 @ Y, Y, INVERSE))
        np.testing.assert_allclose(Hm, H0, rtol=1e-12, atol=1e-12)
