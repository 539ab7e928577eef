import numpy as np
import pytest

from bellmanfilter.numerics import (BlockSystem, NonFinite, NonStationary,
                                    SingularBlock, block_inverse, fd_gradient,
                                    fd_hessian, is_pos_def, predict_info_lg,
                                    predict_info_woodbury, stationary_moments)


def random_spd(rng, n, jitter=0.1):
    a = rng.normal(size=(n, n))
    return a @ a.T + jitter * np.eye(n)


class TestBlockInverse:
    def test_identity_blocks(self):
        eye2 = np.eye(2)
        zero = np.zeros((2, 2))
        b11, b12, b21, b22 = block_inverse(BlockSystem(eye2, zero, zero, eye2))
        np.testing.assert_allclose(b11, eye2)
        np.testing.assert_allclose(b12, zero)
        np.testing.assert_allclose(b21, zero)
        np.testing.assert_allclose(b22, eye2)

    def test_matches_dense_inverse(self, rng):
        full = random_spd(rng, 4)
        sys = BlockSystem(full[:2, :2], full[:2, 2:], full[2:, :2], full[2:, 2:])
        b11, b12, b21, b22 = block_inverse(sys)
        got = np.block([[b11, b12], [b21, b22]])
        np.testing.assert_allclose(got, np.linalg.inv(full), rtol=1e-10, atol=1e-10)

    def test_singular_a22(self):
        with pytest.raises(SingularBlock):
            block_inverse(BlockSystem(np.eye(2), np.zeros((2, 2)),
                                      np.zeros((2, 2)), np.zeros((2, 2))))

    def test_reassembly_identity_up_to_dim10(self, rng):
        for _ in range(25):
            n = int(rng.integers(2, 11))
            p = int(rng.integers(1, n))
            full = random_spd(rng, n, jitter=0.5)
            sys = BlockSystem(full[:p, :p], full[:p, p:], full[p:, :p], full[p:, p:])
            b11, b12, b21, b22 = block_inverse(sys)
            inv = np.block([[b11, b12], [b21, b22]])
            np.testing.assert_allclose(inv @ full, np.eye(n), rtol=0, atol=1e-10)


class TestPredictInfo:
    def test_unit_dynamics_zero_noise(self):
        out = predict_info_lg([[1.0]], [[0.0]], [[5.0]])
        np.testing.assert_allclose(out, [[5.0]])

    def test_stationary_fixed_point(self):
        info = 1.0 / 0.5681818181818182
        out = predict_info_lg([[0.98]], [[0.0225]], [[info]])
        np.testing.assert_allclose(out[0, 0], info, rtol=1e-12)
        wb = predict_info_woodbury([[0.98]], [[0.0225]], [[info]])
        np.testing.assert_allclose(wb, out, rtol=1e-10)

    def test_dual_formulas_agree(self, rng):
        for _ in range(50):
            t_mat = rng.normal(size=(2, 2)) * 0.5
            q = random_spd(rng, 2)
            info = random_spd(rng, 2)
            a = predict_info_lg(t_mat, q, info)
            b = predict_info_woodbury(t_mat, q, info)
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


class TestStationaryMoments:
    def test_scalar_values(self):
        mean, cov = stationary_moments([0.0], [[0.98]], [[0.0225]])
        np.testing.assert_allclose(mean, [0.0])
        np.testing.assert_allclose(cov, [[0.568182]], rtol=1e-5)
        mean, cov = stationary_moments([0.02], [[0.98]], [[0.01]])
        np.testing.assert_allclose(mean, [1.0], rtol=1e-12)
        np.testing.assert_allclose(cov, [[0.252525]], rtol=1e-5)

    def test_unit_root_rejected(self):
        with pytest.raises(NonStationary):
            stationary_moments([0.0], [[1.0]], [[1.0]])

    def test_lyapunov_identity(self, rng):
        for _ in range(20):
            m = int(rng.integers(1, 4))
            t_mat = rng.normal(size=(m, m))
            t_mat *= 0.9 / max(1.0, np.abs(np.linalg.eigvals(t_mat)).max())
            q = random_spd(rng, m)
            c = rng.normal(size=m)
            mean, cov = stationary_moments(c, t_mat, q)
            np.testing.assert_allclose(cov, t_mat @ cov @ t_mat.T + q,
                                       rtol=0, atol=1e-10 * max(1, np.abs(cov).max()))
            assert is_pos_def(cov + 1e-12 * np.eye(m))


class TestFiniteDifferences:
    def test_quadratic(self):
        grad = fd_gradient(lambda x: float(x[0] ** 2), [3.0])
        np.testing.assert_allclose(grad, [6.0], atol=1e-8)

    def test_poisson_score(self):
        from bellmanfilter.obsmodels import get_model
        model = get_model("poisson")
        grad = fd_gradient(lambda x: model.logpdf(3.0, x[0]), [0.0])
        np.testing.assert_allclose(grad, [2.0], atol=1e-6)

    def test_constant(self):
        np.testing.assert_allclose(fd_gradient(lambda x: 1.23, [0.4, -2.0]), 0.0)

    def test_hessian_cross_terms(self, rng):
        a = random_spd(rng, 3)
        hess = fd_hessian(lambda x: -0.5 * float(x @ a @ x), rng.normal(size=3))
        np.testing.assert_allclose(hess, -a, rtol=1e-5, atol=1e-6)

    def test_nonfinite_raises(self):
        with pytest.raises(NonFinite):
            fd_gradient(lambda x: float("nan"), [0.0])
