import numpy as np
import pytest

from msk import fields


RADIAL = fields.get_field("radial1")
SKEW = fields.make_polynomial_field(
    "skewnoise", [(0, 0, 1.0), (2, 0, 1.0), (0, 2, 1.0)], sigma=[[1, 1], [0, 1]])
CONSTANT = fields.make_polynomial_field("flat", [(0, 0, 1.0)], lam0=1.0)


def random_points(n, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 2))


class TestFieldModels:
    def test_registry_names(self):
        assert fields.field_names() == ["doublewell", "radial-drift", "radial1"]

    def test_radial_values(self):
        q = np.array([1.0, 2.0])
        assert RADIAL.lam(q) == pytest.approx(6.0)
        assert RADIAL.grad_lam(q) == pytest.approx([2.0, 4.0])
        assert RADIAL.hess_lam(q) == pytest.approx(2 * np.eye(2))

    def test_consistency_checks_pass(self):
        for name in fields.field_names():
            fields.get_field(name).check_consistency(random_points(64, seed=3))

    def test_doublewell_gradient(self):
        f = fields.get_field("doublewell")
        q = np.array([0.7, -0.3])
        x, y = q
        assert f.lam(q) == pytest.approx((x**2 - 1) ** 2 + 0.2 * x + y**2 + 1)
        assert f.grad_lam(q) == pytest.approx([4 * x * (x**2 - 1) + 0.2, 2 * y])

    def test_field_from_config(self):
        f = fields.field_from_config({
            "name": "custom", "lambda_terms": [[0, 0, 2.0], [2, 0, 3.0]],
            "sigma": [[2, 0], [0, 1]],
        })
        assert f.lam(np.array([1.0, 5.0])) == pytest.approx(5.0)
        assert f.sigma(np.zeros(2)) == pytest.approx(np.array([[2.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            fields.field_from_config({"sigma": [[1, 0], [0, 1]]})
        assert fields.field_from_config("radial1").name == "radial1"


class TestNoiseMoments:
    def test_identity(self):
        m = fields.noise_moments(RADIAL, np.zeros(2))
        assert (m.beta0, m.beta1, m.beta2) == (0.5, 0.0, 0.0)

    def test_degenerate_diagonal(self):
        f = fields.make_polynomial_field("deg", [(0, 0, 1.0)], sigma=[[2, 0], [0, 0]])
        m = fields.noise_moments(f, np.zeros(2))
        assert (m.beta0, m.beta1, m.beta2) == (1.0, 1.0, 0.0)

    def test_skew(self):
        # sigma*sigma^T = [[2,1],[1,1]] by hand
        m = fields.noise_moments(SKEW, np.zeros(2))
        assert (m.beta0, m.beta1, m.beta2) == (0.75, 0.25, 0.5)


class TestFrictionMatrix:
    def test_entries(self):
        q = np.array([1.0, 0.0])  # lam = 2
        assert fields.friction_matrix(RADIAL, q, 1.0) == pytest.approx(
            np.array([[1.0, 2.0], [-2.0, 1.0]]))

    def test_eps_zero_is_pure_rotation_part(self):
        q = np.array([1.0, 0.0])
        m = fields.friction_matrix(RADIAL, q, 0.0)
        assert m == pytest.approx(2.0 * fields.ROTATION_GENERATOR)

    def test_quadratic_form_identity(self):
        rng = np.random.default_rng(1)
        qs = random_points(100, seed=2)
        ps = rng.normal(size=(100, 2))
        for eps in (0.0, 0.3, 2.0):
            m = fields.friction_matrix(RADIAL, qs, eps)
            quad = np.einsum("ni,nij,nj->n", ps, m, ps)
            assert quad == pytest.approx(eps * (ps**2).sum(axis=1))


class TestFrictionInverse:
    def test_hand_values(self):
        assert fields.friction_inverse(RADIAL, np.array([1.0, 0.0]), 1.0) == \
            pytest.approx(np.array([[0.2, -0.4], [0.4, 0.2]]))
        f1 = fields.make_polynomial_field("one", [(0, 0, 1.0)], lam0=1.0)
        assert fields.friction_inverse(f1, np.zeros(2), 1.0) == \
            pytest.approx(np.array([[0.5, -0.5], [0.5, 0.5]]))

    def test_product_is_identity(self):
        rng = np.random.default_rng(7)
        qs = random_points(100, seed=7)
        for eps in rng.uniform(0.01, 2.0, size=5):
            prod = (fields.friction_matrix(RADIAL, qs, eps)
                    @ fields.friction_inverse(RADIAL, qs, eps))
            assert np.abs(prod - np.eye(2)).max() < 1e-12

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValueError):
            fields.friction_inverse(RADIAL, np.zeros(2), 0.0)
        with pytest.raises(ValueError):
            fields.friction_inverse(RADIAL, np.zeros(2), -1.0)


class TestHEpsilon:
    def test_decomposition_identity(self):
        qs = random_points(50, seed=11)
        lam = RADIAL.lam(qs)
        for eps in (1.0, 0.1, 0.01):
            h = fields.h_epsilon(RADIAL, qs, eps)
            rebuilt = (-fields.ROTATION_GENERATOR / lam[:, None, None]
                       + eps * h)
            inv = fields.friction_inverse(RADIAL, qs, eps)
            assert np.abs(rebuilt - inv).max() < 1e-12

    def test_hand_value(self):
        # lam=2, eps=1: (I + A/2)/5; frozen from the decomposition identity.
        h = fields.h_epsilon(RADIAL, np.array([1.0, 0.0]), 1.0)
        assert h == pytest.approx(np.array([[1.0, 0.5], [-0.5, 1.0]]) / 5.0)

    def test_bounded_in_eps(self):
        q = np.array([1.0, 0.0])
        sup = max(np.abs(fields.h_epsilon(RADIAL, q, e)).max()
                  for e in (1.0, 0.1, 0.01))
        assert sup < 1.0

    def test_small_eps_limit(self):
        q = np.array([1.0, 0.0])  # lam = 2
        h = fields.h_epsilon(RADIAL, q, 1e-8)
        assert h == pytest.approx(np.eye(2) / 4.0, abs=1e-8)


class TestLyapunov:
    def test_identity_noise(self):
        qs = random_points(20, seed=5)
        for eps in (1.0, 0.25):
            j = fields.lyapunov_solution(RADIAL, qs, eps)
            assert np.abs(j - np.eye(2) / (2 * eps)).max() < 1e-12

    def test_hand_entries(self):
        f = fields.make_polynomial_field(
            "deg2", [(0, 0, 1.0), (2, 0, 1.0), (0, 2, 1.0)], sigma=[[2, 0], [0, 0]])
        j = fields.lyapunov_solution(f, np.array([1.0, 0.0]), 1.0)
        assert j == pytest.approx(np.array([[1.2, 0.4], [0.4, 0.8]]))

    def _residual(self, field, qs, eps, j):
        lam_mat = fields.friction_matrix(field, qs, eps)
        ssq = field.sigma_squared(qs)
        return j @ np.swapaxes(lam_mat, -1, -2) + lam_mat @ j - ssq

    def test_residual_vanishes(self):
        qs = random_points(50, seed=13)
        for field in (RADIAL, SKEW):
            for eps in (1.0, 0.05):
                j = fields.lyapunov_solution(field, qs, eps)
                assert np.abs(self._residual(field, qs, eps, j)).max() < 1e-10

    def test_quadrature_matches_closed_form(self):
        rng = np.random.default_rng(17)
        qs = random_points(50, seed=17)
        eps_list = rng.uniform(0.05, 1.0, size=50)
        for field in (RADIAL, SKEW):
            for q, eps in zip(qs[:25], eps_list[:25]):
                jc = fields.lyapunov_solution(field, q, eps)
                jq = fields.lyapunov_quadrature(field, q, eps, tol=1e-9)
                assert np.abs(jq - jc).max() / np.abs(jc).max() < 1e-6

    def test_quadrature_residual(self):
        q = np.array([0.4, -1.1])
        tol = 1e-8
        jq = fields.lyapunov_quadrature(SKEW, q, 0.2, tol=tol)
        assert np.abs(self._residual(SKEW, q, 0.2, jq)).max() < 10 * tol

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            fields.lyapunov_solution(RADIAL, np.zeros(2), -0.1)
        with pytest.raises(ValueError):
            fields.lyapunov_quadrature(RADIAL, np.zeros(2), 1.0, tol=0.0)


class TestNoiseInducedDrift:
    def test_frozen_points(self):
        assert fields.noise_induced_drift_direct(
            RADIAL, np.array([1.0, 0.0]), 1.0) == pytest.approx([-0.16, -0.12])
        assert fields.noise_induced_drift_direct(
            RADIAL, np.array([0.0, 1.0]), 1.0) == pytest.approx([0.12, -0.16])

    def test_constant_intensity_gives_zero(self):
        qs = random_points(30, seed=23)
        s = fields.noise_induced_drift_direct(CONSTANT, qs, 0.7)
        assert np.abs(s).max() == 0.0

    def test_decomposition_pieces_frozen(self):
        d = fields.drift_decomposition(RADIAL, np.array([1.0, 0.0]), 1.0)
        assert d.leading == pytest.approx([0.0, -0.25])
        assert d.m_term == pytest.approx([-0.25, 0.0])
        assert d.r_term == pytest.approx([0.09, 0.13])
        assert d.total == pytest.approx([-0.16, -0.12])
        r = fields.remainder_matrix(RADIAL, np.array([1.0, 0.0]), 1.0)
        assert r == pytest.approx(np.array([[0.045, -0.065], [0.065, 0.045]]))

    def test_total_is_exact_sum(self):
        d = fields.drift_decomposition(SKEW, random_points(16, seed=29), 0.3)
        assert np.array_equal(d.total, d.leading + d.m_term + d.r_term)

    @pytest.mark.parametrize("field", [RADIAL, SKEW], ids=["radial1", "skew"])
    def test_routes_agree(self, field):
        rng = np.random.default_rng(31)
        qs = random_points(200, seed=31)
        eps_list = rng.uniform(0.01, 2.0, size=200)
        for q, eps in zip(qs, eps_list):
            direct = fields.noise_induced_drift_direct(field, q, eps)
            total = fields.drift_decomposition(field, q, eps).total
            assert np.abs(direct - total).max() < 1e-10

    def test_direct_matches_finite_difference_inverse(self):
        # Differentiate the friction-inverse entries numerically instead of
        # using the analytic entry derivatives.
        q = np.array([0.8, -0.4])
        eps, h = 0.6, 1e-6
        j = fields.lyapunov_solution(SKEW, q, eps)
        s_fd = np.zeros(2)
        for i, e_i in enumerate(np.eye(2)):
            dinv = (fields.friction_inverse(SKEW, q + h * e_i, eps)
                    - fields.friction_inverse(SKEW, q - h * e_i, eps)) / (2 * h)
            s_fd += dinv @ j[:, i]
        direct = fields.noise_induced_drift_direct(SKEW, q, eps)
        assert direct == pytest.approx(s_fd, abs=1e-7)

    def test_remainder_scaling(self):
        qs = random_points(64, seed=37)
        for field in (RADIAL, SKEW):
            norms = [np.abs(fields.remainder_matrix(field, qs, e)).max() / e
                     for e in (1e-1, 1e-2, 1e-3, 1e-4)]
            assert max(norms) < 2 * min(norms) + 1e-12


class TestLimitCoefficients:
    def test_hand_values(self):
        lc = fields.limit_coefficients(RADIAL, np.array([1.0, 0.0]), 1.0)
        assert lc.B == pytest.approx([-0.25, 0.0])
        # Sigma is the eps -> 0 limit of the friction inverse applied to sigma.
        assert lc.Sigma == pytest.approx(-fields.ROTATION_GENERATOR / 2.0)

    def test_sigma_identity(self):
        qs = random_points(60, seed=41)
        for field in (RADIAL, SKEW):
            for eps in (1.0, 0.2, 0.01):
                lc = fields.limit_coefficients(field, qs, eps)
                full = fields.friction_inverse(field, qs, eps) @ field.sigma(qs)
                assert np.abs(lc.Sigma + eps * lc.Sigma_eps - full).max() < 1e-12

    def test_drift_reconstruction(self):
        rng = np.random.default_rng(43)
        qs = random_points(100, seed=43)
        eps_list = rng.uniform(0.01, 1.5, size=100)
        field = fields.get_field("radial-drift")
        for q, eps in zip(qs, eps_list):
            lc = fields.limit_coefficients(field, q, eps)
            d = fields.drift_decomposition(field, q, eps)
            lhs = fields.friction_inverse(field, q, eps) @ field.b(q) + d.total
            rhs = d.leading + lc.B + eps * lc.B_eps
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_small_eps_diffusion_limit(self):
        q = np.array([0.3, 0.9])
        lam = RADIAL.lam(q)
        target = -fields.ROTATION_GENERATOR @ RADIAL.sigma(q) / lam
        for eps in (1e-2, 1e-4):
            lc = fields.limit_coefficients(RADIAL, q, eps)
            assert np.abs(eps * lc.Sigma_eps).max() < 2 * eps
            assert lc.Sigma + eps * lc.Sigma_eps == pytest.approx(target, abs=2 * eps)


class TestGenerators:
    def test_intensity_at_reference_point(self):
        ga = fields.apply_generators(RADIAL, np.array([1.0, 0.0]), 0.5,
                                     fields.lambda_function(RADIAL))
        assert ga.g == pytest.approx(0.0, abs=1e-14)
        assert float((ga.a**2).sum()) == pytest.approx(1.0)

    def test_constant_function_is_killed(self):
        const = fields.PlaneFunction(
            value=lambda q: np.ones(np.asarray(q).shape[:-1]),
            grad=lambda q: np.zeros(np.asarray(q).shape),
            hess=lambda q: np.zeros(np.asarray(q).shape[:-1] + (2, 2)))
        ga = fields.apply_generators(SKEW, np.array([0.4, 0.2]), 0.3, const)
        assert ga.g == 0.0 and ga.g_eps == 0.0
        assert np.all(ga.a == 0.0) and np.all(ga.a_eps == 0.0)

    def test_generator_matches_one_step_monte_carlo(self):
        # d/dt E[lam(q(t))] at t=0 estimated with one Euler step.
        rng = np.random.default_rng(47)
        q0 = np.array([1.0, 0.0])
        eps, dt, n = 0.5, 1e-4, 100_000
        lc = fields.limit_coefficients(RADIAL, q0, eps)
        d = fields.drift_decomposition(RADIAL, q0, eps)
        drift = d.leading + lc.B + eps * lc.B_eps
        diff = lc.Sigma + eps * lc.Sigma_eps
        dw = rng.normal(scale=np.sqrt(dt), size=(n, 2))
        q1 = q0 + drift * dt + dw @ diff.T
        vals = (RADIAL.lam(q1) - RADIAL.lam(q0)) / dt
        ga = fields.apply_generators(RADIAL, q0, eps, fields.lambda_function(RADIAL))
        expected = ga.g + eps * ga.g_eps
        se = vals.std(ddof=1) / np.sqrt(n)
        assert abs(vals.mean() - expected) < 3 * se + 5 * dt
