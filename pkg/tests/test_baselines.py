import numpy as np
import pytest
import scipy.linalg

from conftest import param_values
from mtwb.baselines import (
    MLPFeedback, angular_dictionary, fully_digital_precoder, ls_estimate, mlp_feedback_baseline, mlp_param_count,
    somp, somp_estimate, ss_hp, zero_forcing,
)
from mtwb.channel import PRESETS, gen_channels, nmse_db
from mtwb.errors import ConfigError, NumericError
from mtwb.hbf import sum_rate, sum_rate_precoder, user_channels

DESK = PRESETS["desk"]
SOMP_RECOVERY_RATE = 0.95  # pinned: first oracle run recovered 194/200 supports
SSHP_RATE_RATIO = 0.5  # pinned: first 200-sample oracle run gave 0.545 of the ZF rate at N_RF = U = 2


def complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


class TestDictionary:
    @pytest.mark.parametrize("oversampling", [1, 2, 3])
    def test_shape_and_norms(self, oversampling):
        d = angular_dictionary(DESK, oversampling)
        assert d.atoms.shape == (16, 16 * oversampling ** 2)
        np.testing.assert_allclose(np.linalg.norm(d.atoms, axis=0), 1.0, atol=1e-14)

    def test_unit_oversampling_is_unitary(self):
        D = angular_dictionary(DESK, 1).atoms
        np.testing.assert_allclose(D.conj().T @ D, np.eye(16), atol=1e-13)

    def test_rejects_zero(self):
        with pytest.raises(ConfigError, match="oversampling"):
            angular_dictionary(DESK, 0)


class TestSOMP:
    def test_one_sparse_exact(self, rng):
        d = angular_dictionary(DESK, 2)
        A = complex_normal(rng, (6, 16))
        H = np.outer(complex_normal(rng, 8), d.atoms[:, 37])
        H_hat = somp_estimate(H @ A.T, A, d, 1)
        assert nmse_db(H_hat, H) <= -100.0

    def test_recovery_rate(self):
        d = angular_dictionary(DESK, 1)
        rng = np.random.default_rng(2024)
        hits = 0
        for _ in range(200):
            A = complex_normal(rng, (8, 16))
            support = rng.choice(d.size, 3, replace=False)
            H = (d.atoms[:, support] @ complex_normal(rng, (3, 8))).T
            res = somp(A @ d.atoms, (H @ A.T).T, 3)
            hits += set(res.support) == set(support)
            assert np.all(np.diff(res.residual_norms) <= 1e-12)
        assert hits / 200 >= SOMP_RECOVERY_RATE

    def test_residual_monotone_on_channels(self, rng):
        d = angular_dictionary(DESK, 2)
        for H in gen_channels(DESK, 20, 7):
            A = complex_normal(rng, (6, 16))
            Y = H @ A.T + 0.1 * complex_normal(rng, (8, 6))
            res = somp(A @ d.atoms, Y.T, 6)
            assert np.all(np.diff(res.residual_norms) <= 1e-12)

    def test_full_support_equals_least_squares(self, rng):
        Phi = complex_normal(rng, (5, 12))
        Y = complex_normal(rng, (5, 3))
        res = somp(Phi, Y, 5)
        sub = Phi[:, res.support]
        expected = np.linalg.solve(sub, Y)
        np.testing.assert_allclose(res.coefficients, expected, atol=1e-10)

    def test_zero_measurements(self, rng):
        d = angular_dictionary(DESK, 2)
        H_hat = somp_estimate(np.zeros((8, 6), dtype=complex), complex_normal(rng, (6, 16)), d, 3)
        np.testing.assert_array_equal(H_hat, 0)

    def test_sparsity_exceeds_measurements(self, rng):
        with pytest.raises(ConfigError, match="sparsity"):
            somp(complex_normal(rng, (4, 10)), complex_normal(rng, (4, 2)), 5)

    def test_rank_deficient_support(self):
        # the residual ends up orthogonal to every atom, so the second pick is dependent
        Phi = np.array([[1.0, 2.0], [0.0, 0.0]])
        with pytest.raises(NumericError, match=r"\[0, 1\]"):
            somp(Phi, np.array([[1.0], [1.0]]), 2)


class TestLeastSquares:
    def test_unitary_exact(self, rng):
        A = np.linalg.qr(complex_normal(rng, (16, 16)))[0]
        H = gen_channels(DESK, 1, 0)[0]
        np.testing.assert_allclose(ls_estimate(H @ A.T, A), H, atol=1e-12)

    def test_large_ridge_vanishes(self, rng):
        A = complex_normal(rng, (6, 16))
        H = gen_channels(DESK, 1, 0)[0]
        assert np.abs(ls_estimate(H @ A.T, A, ridge=1e12)).max() < 1e-9

    def test_matches_independent_solver(self, rng):
        A = complex_normal(rng, (20, 16))
        Y = complex_normal(rng, (8, 20))
        ridge = 0.3
        M = np.vstack([A, np.sqrt(ridge) * np.eye(16)])
        rhs = np.vstack([Y.T, np.zeros((16, 8))])
        expected = scipy.linalg.lstsq(M, rhs)[0].T
        np.testing.assert_allclose(ls_estimate(Y, A, ridge), expected, atol=1e-10)

    def test_singular(self, rng):
        with pytest.raises(NumericError):
            ls_estimate(complex_normal(rng, (8, 6)), complex_normal(rng, (6, 16)))

    def test_negative_ridge(self, rng):
        with pytest.raises(ConfigError, match="ridge"):
            ls_estimate(np.ones((1, 2)), np.eye(2), -1.0)


@pytest.fixture(scope="module")
def user_pairs():
    return user_channels(gen_channels(DESK, 400, 21), 2)


class TestPrecoding:
    def test_single_user_is_matched_filter(self, rng):
        h = complex_normal(rng, (1, 16))
        w = zero_forcing(h)[:, 0]
        # direction of h^H
        np.testing.assert_allclose(w / np.linalg.norm(w), h[0].conj() / np.linalg.norm(h), atol=1e-13)

    def test_zero_interference(self, user_pairs):
        for ch in user_pairs[:20]:
            W = fully_digital_precoder(ch)
            assert W.shape == (8, 16, 2)
            np.testing.assert_allclose(np.linalg.norm(W, axis=(1, 2)) ** 2, 2.0, atol=1e-12)
            for k in range(8):
                G = ch[:, k, :] @ W[k]
                assert abs(G[0, 1]) <= 1e-9 and abs(G[1, 0]) <= 1e-9

    def test_rank_deficient(self, rng):
        h = complex_normal(rng, 16)
        with pytest.raises(NumericError):
            zero_forcing(np.stack([h, 2 * h]))

    def test_zf_beats_random(self, user_pairs, rng):
        for ch in user_pairs[:100]:
            W = complex_normal(rng, (8, 16, 2))
            W *= (np.sqrt(2) / np.linalg.norm(W, axis=(1, 2)))[:, None, None]
            zf = sum_rate_precoder(ch, fully_digital_precoder(ch)).item()
            assert zf >= sum_rate_precoder(ch, W).item()


class TestSSHP:
    def test_representable_target(self, rng):
        d = angular_dictionary(DESK, 2)
        atom = d.atoms[:, 11]
        ch = complex_normal(rng, (1, 8, 16))
        F_opt = np.broadcast_to(atom[None, :, None], (8, 16, 1)).copy()
        F_RF, F_BB = ss_hp(F_opt, d, 1)
        np.testing.assert_allclose(F_RF[:, 0], atom, atol=1e-15)
        assert sum_rate(ch, F_RF, F_BB).item() == pytest.approx(sum_rate_precoder(ch, F_opt).item(), abs=1e-9)

    def test_power_and_shapes(self, user_pairs):
        d = angular_dictionary(DESK, 2)
        F_RF, F_BB = ss_hp(fully_digital_precoder(user_pairs[0]), d, 2)
        assert F_RF.shape == (16, 2) and F_BB.shape == (8, 2, 2)
        np.testing.assert_allclose(np.linalg.norm(F_RF[None] @ F_BB, axis=(1, 2)) ** 2, 2.0, atol=1e-12)
        np.testing.assert_allclose(np.abs(F_RF), 0.25, atol=1e-15)

    def test_rate_ratio_and_bound(self, user_pairs):
        d = angular_dictionary(DESK, 2)
        hybrid, digital = [], []
        for ch in user_pairs[:200]:
            F_opt = fully_digital_precoder(ch)
            F_RF, F_BB = ss_hp(F_opt, d, 2)
            hybrid.append(sum_rate(ch, F_RF, F_BB).item())
            digital.append(sum_rate_precoder(ch, F_opt).item())
        assert np.all(np.array(hybrid) <= np.array(digital) + 1e-12)
        assert np.mean(hybrid) >= SSHP_RATE_RATIO * np.mean(digital)

    def test_more_chains_never_hurt(self, user_pairs):
        d = angular_dictionary(DESK, 2)
        for ch in user_pairs[:10]:
            F_opt = fully_digital_precoder(ch)
            rates = [sum_rate(ch, *ss_hp(F_opt, d, n)).item() for n in (2, 4, 8, 16)]
            assert np.all(np.diff(rates) >= -1e-9)

    def test_too_many_chains(self):
        d = angular_dictionary(DESK, 1)
        with pytest.raises(ConfigError, match="n_rf"):
            ss_hp(np.ones((8, 16, 2)), d, 17)


class TestMLP:
    def test_param_count_formula(self):
        m = MLPFeedback(DESK, 8, 4, encoder_widths=(100, 50, 8), decoder_widths=(60, 70, 256))
        expected = (256 * 100 + 100) + (100 * 50 + 50) + (50 * 8 + 8) + (8 * 60 + 60) + (60 * 70 + 70) + (70 * 256 + 256)
        assert m.param_count() == expected == sum(v.size for v in param_values(m).values())
        assert mlp_param_count(256, (100, 50, 8), (60, 70, 256)) == expected

    def test_interface(self, rng):
        m = mlp_feedback_baseline(DESK, 8, 4)
        s = m.encode(gen_channels(DESK, 3, 0))
        assert s.shape == (3, 8) and np.all((s.data > 0) & (s.data < 1))
        assert m.decode(s).shape == (3, 8, 32)

    @pytest.mark.parametrize("enc, dec", [((10, 8), (5, 5, 256)), ((10, 5, 7), (5, 5, 256)), ((10, 5, 8), (5, 5, 9))])
    def test_rejects_widths(self, enc, dec):
        with pytest.raises(ConfigError):
            MLPFeedback(DESK, 8, 4, enc, dec)
