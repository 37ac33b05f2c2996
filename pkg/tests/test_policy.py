import numpy as np
import pytest

from _helpers import random_params

from netspc.policy import (PackedDecision, PolicyParams, StructureViolation,
                           evaluate_controls, lambda_mask, null_control_instants,
                           pack, packed_header, packed_row, regularizer,
                           stage_rows, theta_mask, unpack, xi_length,
                           theta_free_length)


class TestPacking:
    def test_zero_params_lengths(self):
        p = pack(PolicyParams.zeros(4, 1, 3))
        assert p.xi.shape == (10,)          # 4 offsets + 6 dropout-gain entries
        assert p.theta_free.shape == (18,)
        assert xi_length(4, 1) == 10
        assert theta_free_length(4, 1, 3) == 18
        # total decision entries: mN (1 + (N-1)(d+1)/2) = 28
        assert p.xi.size + p.theta_free.size == 28

    def test_single_lambda_entry(self):
        params = PolicyParams(eta=np.zeros(2), Theta=np.zeros((2, 1)),
                              Lambda=np.array([[0.0], [3.5]]), N=2, m=1, d=1)
        p = pack(params)
        assert p.xi.tolist() == [0.0, 0.0, 3.5]

    def test_round_trip_exact(self):
        rng = np.random.default_rng(0)
        for N, m, d in [(2, 1, 1), (4, 1, 3), (3, 2, 2), (5, 2, 1)]:
            params = random_params(N, m, d, rng)
            back = unpack(pack(params))
            assert np.array_equal(back.eta, params.eta)
            assert np.array_equal(back.Theta, params.Theta)
            assert np.array_equal(back.Lambda, params.Lambda)

    def test_structural_zeros_restored_exactly(self):
        rng = np.random.default_rng(1)
        params = random_params(4, 2, 2, rng)
        back = unpack(pack(params))
        assert np.all(back.Theta[~theta_mask(4, 2, 2)] == 0.0)
        assert np.all(back.Lambda[~lambda_mask(4, 2)] == 0.0)

    def test_structure_violation(self):
        Theta = np.zeros((4, 3))
        Theta[0, 0] = 1e-9  # block row 0 must be all zero
        params = PolicyParams(eta=np.zeros(4), Theta=Theta,
                              Lambda=np.zeros((4, 3)), N=4, m=1, d=1)
        with pytest.raises(StructureViolation):
            pack(params)

    def test_packed_row_matches_header(self):
        rng = np.random.default_rng(2)
        params = random_params(3, 2, 2, rng)
        row = packed_row(params)
        assert row.shape == (len(packed_header(3, 2, 2)),)


class TestEvaluate:
    def test_offsets_only(self):
        rng = np.random.default_rng(3)
        params = PolicyParams(eta=rng.standard_normal(4),
                              Theta=np.zeros((4, 9)), Lambda=np.zeros((4, 3)),
                              N=4, m=1, d=3)
        u = evaluate_controls(params, rng.standard_normal(9), rng.integers(0, 2, 3))
        assert np.array_equal(u, params.eta)

    def test_hand_example(self):
        Theta = np.array([[0.0], [2.0]])
        Lam = np.array([[0.0], [3.0]])
        params = PolicyParams(eta=np.zeros(2), Theta=Theta, Lambda=Lam, N=2, m=1, d=1)
        u = evaluate_controls(params, [0.5], [1.0])
        assert u.tolist() == [0.0, 2 * 0.5 + 3]

    def test_causality_by_perturbation(self):
        rng = np.random.default_rng(4)
        N, m, d = 5, 2, 2
        params = random_params(N, m, d, rng)
        e = rng.standard_normal(d * (N - 1))
        nu = rng.integers(0, 2, N - 1).astype(float)
        u0 = evaluate_controls(params, e, nu)
        for ell in range(N - 1):
            nu2 = nu.copy()
            nu2[ell] = 1 - nu2[ell]
            e2 = e.copy()
            e2[ell * d:(ell + 1) * d] += rng.standard_normal(d)
            u2 = evaluate_controls(params, e2, nu2)
            # stages up to ell must not see the change at index ell
            assert np.array_equal(u2[: (ell + 1) * m], u0[: (ell + 1) * m])

    def test_affine_in_parameters(self):
        rng = np.random.default_rng(5)
        N, m, d = 4, 1, 2
        p1 = random_params(N, m, d, rng)
        p2 = random_params(N, m, d, rng)
        e = rng.standard_normal(d * (N - 1))
        nu = rng.integers(0, 2, N - 1).astype(float)
        for a in (0.0, 0.3, 1.0):
            mix = PolicyParams(eta=a * p1.eta + (1 - a) * p2.eta,
                               Theta=a * p1.Theta + (1 - a) * p2.Theta,
                               Lambda=a * p1.Lambda + (1 - a) * p2.Lambda,
                               N=N, m=m, d=d)
            u_mix = evaluate_controls(mix, e, nu)
            u_lin = a * evaluate_controls(p1, e, nu) + (1 - a) * evaluate_controls(p2, e, nu)
            assert np.abs(u_mix - u_lin).max() <= 1e-12


class TestRegularizer:
    def test_zero(self):
        assert regularizer(PolicyParams.zeros(4, 2, 3)) == 0.0

    def test_hand_value(self):
        # stage rows (1) and (0.3, 0.5, -0.7): sum of row max-abs = 1 + 0.7
        params = PolicyParams(eta=np.array([1.0, 0.3]),
                              Theta=np.array([[0.0], [0.5]]),
                              Lambda=np.array([[0.0], [-0.7]]), N=2, m=1, d=1)
        assert regularizer(params) == pytest.approx(1.7, abs=1e-15)

    def test_positive_definite_on_parameters(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            params = random_params(3, 1, 2, rng)
            assert regularizer(params) > 0
        assert regularizer(PolicyParams.zeros(3, 1, 2)) == 0.0

    def test_absolute_homogeneity_and_triangle(self):
        rng = np.random.default_rng(7)
        N, m, d = 4, 2, 2
        for _ in range(25):
            p1 = random_params(N, m, d, rng)
            p2 = random_params(N, m, d, rng)
            c = rng.uniform(-3, 3)
            scaled = PolicyParams(eta=c * p1.eta, Theta=c * p1.Theta,
                                  Lambda=c * p1.Lambda, N=N, m=m, d=d)
            assert regularizer(scaled) == pytest.approx(abs(c) * regularizer(p1), rel=1e-12)
            summed = PolicyParams(eta=p1.eta + p2.eta, Theta=p1.Theta + p2.Theta,
                                  Lambda=p1.Lambda + p2.Lambda, N=N, m=m, d=d)
            assert regularizer(summed) <= regularizer(p1) + regularizer(p2) + 1e-12

    def test_stage_rows_are_a_permutation(self):
        rng = np.random.default_rng(8)
        params = random_params(4, 2, 3, rng)
        F = np.hstack([params.eta.reshape(-1, 1), params.Theta, params.Lambda])
        assert sorted(stage_rows(params).ravel()) == pytest.approx(sorted(F.ravel()))


class TestNullInstants:
    def test_all_zero(self):
        assert null_control_instants(PolicyParams.zeros(4, 1, 3), 1e-9) == {0, 1, 2, 3}

    def test_no_null_for_dense_params(self):
        params = PolicyParams(eta=np.array([1.0, 0.3]),
                              Theta=np.array([[0.0], [0.5]]),
                              Lambda=np.array([[0.0], [-0.7]]), N=2, m=1, d=1)
        assert null_control_instants(params, 1e-9) == set()

    def test_single_null_stage(self):
        params = PolicyParams(eta=np.array([0.0, 5.0]), Theta=np.zeros((2, 1)),
                              Lambda=np.zeros((2, 1)), N=2, m=1, d=1)
        assert null_control_instants(params, 1e-9) == {0}
