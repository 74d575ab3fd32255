import numpy as np
import pytest
from scipy.stats import ncx2

from robustpl import (
    EvalMethod,
    GaussianQuadratic,
    PowerAllocation,
    QoSSpec,
    ScenarioInstance,
    build_outage_form,
    build_zf,
    cdf_quadrature,
    complex_normal,
    decompose,
    mc_probability,
    outage_probability,
)
from robustpl.quadform import _pick_beta

from conftest import make_instance, make_zf_setup


def random_hermitian(rng, n, scale=1.0):
    x = complex_normal(rng, n, n) * scale
    return 0.5 * (x + x.conj().T)


class TestDecompose:
    def test_identity_zero_center(self):
        spec = decompose(GaussianQuadratic(M=np.eye(2, dtype=complex),
                                           z=np.zeros(2), tau=1.0))
        np.testing.assert_allclose(spec.eigenvalues, [1.0, 1.0])
        np.testing.assert_allclose(spec.z_tilde, 0.0)
        assert spec.beta == 1.0

    def test_offset_rule_for_indefinite(self):
        spec = decompose(GaussianQuadratic(M=np.diag([1.0, -0.5]).astype(complex),
                                           z=np.zeros(2), tau=0.0))
        assert spec.beta == pytest.approx(1.0)
        assert np.all(1.0 + spec.beta * spec.eigenvalues > 0)

    def test_reconstruction_and_norms(self, rng):
        m = random_hermitian(rng, 3)
        z = complex_normal(rng, 3)
        spec = decompose(GaussianQuadratic(M=m, z=z, tau=0.2))
        assert np.all(np.diff(spec.eigenvalues) <= 1e-12)
        assert np.linalg.norm(spec.z_tilde) == pytest.approx(
            np.linalg.norm(z), abs=1e-10)
        w = np.linalg.eigvalsh(m)
        np.testing.assert_allclose(np.sort(spec.eigenvalues), w, atol=1e-10)


class TestCdfQuadrature:
    def test_exponential_case(self):
        # |x|^2 for scalar CN(0,1) is Exp(1)
        gq = GaussianQuadratic(M=np.array([[1.0]]), z=np.array([0.0]),
                               tau=np.log(2.0))
        est = cdf_quadrature(decompose(gq), np.log(2.0))
        assert est.value == pytest.approx(0.5, abs=1e-8)
        assert est.method is EvalMethod.QUADRATURE

    def test_zero_matrix_is_indicator(self):
        gq = GaussianQuadratic(M=np.zeros((3, 3)), z=np.ones(3), tau=1.0)
        assert cdf_quadrature(decompose(gq), 1.0).value == 1.0
        gq = GaussianQuadratic(M=np.zeros((3, 3)), z=np.ones(3), tau=-1.0)
        assert cdf_quadrature(decompose(gq), -1.0).value == 0.0

    def test_noncentral_chi_square_oracle(self):
        # 2|x - z|^2 ~ noncentral chi-square, 2 dof, noncentrality 2|z|^2
        gq = GaussianQuadratic(M=np.array([[1.0]]), z=np.array([1.0]), tau=2.0)
        est = cdf_quadrature(decompose(gq), 2.0)
        assert est.value == pytest.approx(ncx2.cdf(4.0, 2, 2.0), abs=1e-7)

    def test_scaled_noncentral_cases(self, rng):
        for _ in range(10):
            lam = float(rng.uniform(0.1, 3.0))
            z = complex_normal(rng, 1)
            tau = float(rng.uniform(0.0, 4.0))
            gq = GaussianQuadratic(M=np.array([[lam]]), z=z, tau=tau)
            est = cdf_quadrature(decompose(gq), tau)
            oracle = ncx2.cdf(2.0 * tau / lam, 2, 2.0 * abs(z[0]) ** 2)
            assert est.value == pytest.approx(oracle, abs=1e-7)

    def test_negative_definite_complement(self, rng):
        for _ in range(5):
            lam = -float(rng.uniform(0.1, 2.0))
            z = complex_normal(rng, 1)
            tau = -float(rng.uniform(0.1, 3.0))
            gq = GaussianQuadratic(M=np.array([[lam]]), z=z, tau=tau)
            est = cdf_quadrature(decompose(gq), tau)
            oracle = ncx2.sf(2.0 * tau / lam, 2, 2.0 * abs(z[0]) ** 2)
            assert est.value == pytest.approx(oracle, abs=1e-7)

    def test_indefinite_against_monte_carlo(self, rng):
        for trial in range(4):
            n = int(rng.integers(2, 5))
            m = random_hermitian(rng, n)
            z = complex_normal(rng, n)
            x = complex_normal(np.random.default_rng(trial), 400_000, n)
            vals = np.einsum("ij,jk,ik->i", (x - z).conj(), m, x - z).real
            # mid-range quantile keeps the binomial comparison informative
            tau = float(np.quantile(vals, rng.uniform(0.1, 0.9)))
            est = cdf_quadrature(decompose(GaussianQuadratic(M=m, z=z, tau=tau)), tau)
            freq = float(np.mean(vals <= tau))
            se = np.sqrt(freq * (1 - freq) / 400_000)
            assert abs(est.value - freq) <= 4 * se

    def test_contour_offset_independence(self, rng):
        tol = 1e-8
        for _ in range(6):
            m = random_hermitian(rng, 3, scale=0.5)
            z = complex_normal(rng, 3)
            tau = float(rng.normal())
            spec = decompose(GaussianQuadratic(M=m, z=z, tau=tau))
            lam = spec.eigenvalues
            zt2 = np.abs(spec.z_tilde) ** 2
            bstar = _pick_beta(lam, zt2, tau)
            cap = 1.0 / abs(lam.min()) if lam.min() < 0 else np.inf
            b1 = 0.5 * bstar
            b2 = min(2.0 * bstar, 0.5 * (bstar + cap)) if np.isfinite(cap) else 2.0 * bstar
            v1 = cdf_quadrature(spec, tau, tol=tol, beta=b1).value
            v2 = cdf_quadrature(spec, tau, tol=tol, beta=b2).value
            assert abs(v1 - v2) <= 10 * tol

    def test_raw_value_stays_in_clamped_range(self, rng):
        tol = 1e-8
        for _ in range(20):
            m = random_hermitian(rng, 3, scale=0.3)
            z = complex_normal(rng, 3)
            tau = float(rng.normal())
            est = cdf_quadrature(decompose(GaussianQuadratic(M=m, z=z, tau=tau)), tau)
            assert -10 * tol <= est.raw_value <= 1.0 + 10 * tol

    def test_rejects_inadmissible_offset(self):
        gq = GaussianQuadratic(M=np.diag([1.0, -0.5]).astype(complex),
                               z=np.zeros(2), tau=0.1)
        with pytest.raises(ValueError):
            cdf_quadrature(decompose(gq), 0.1, beta=3.0)


class TestOutageProbability:
    def test_deterministic_when_no_uncertainty(self):
        inst = make_instance(5)
        inst0 = ScenarioInstance(true_channels=inst.true_channels,
                                 est_channels=inst.est_channels,
                                 error_cov=np.zeros_like(inst.error_cov),
                                 noise_var=inst.noise_var)
        b = build_zf(inst0.est_channels)
        qos = QoSSpec.from_db(5.0, 0.05, 3)
        form_lo = build_outage_form(inst0, b, PowerAllocation(
            powers=qos.gamma * 0.01 * 0.99), qos, 0)
        form_hi = build_outage_form(inst0, b, PowerAllocation(
            powers=qos.gamma * 0.01 * 1.01), qos, 0)
        assert outage_probability(form_lo).value == 0.0
        assert outage_probability(form_hi).value == 1.0

    def test_saturates_at_large_power(self):
        inst, b, qos = make_zf_setup(7)
        p = qos.gamma * 0.01
        p_big = p.copy()
        p_big[0] *= 1e6
        form = build_outage_form(inst, b, PowerAllocation(powers=p_big), qos, 0)
        assert outage_probability(form).value >= 0.999

    def test_matches_monte_carlo_on_zf_instance(self):
        inst, b, qos = make_zf_setup(9)
        p = PowerAllocation(powers=qos.gamma * 0.01 * 1.4)
        for k in range(3):
            form = build_outage_form(inst, b, p, qos, k)
            quad = outage_probability(form).value
            mc = mc_probability(inst, b, p, qos, k, 1_000_000, [9, k])
            assert abs(quad - mc.value) <= 4 * max(mc.abs_error_bound, 1e-6)

    def test_monotone_in_own_and_cross_powers(self, rng):
        inst, b, qos = make_zf_setup(13)
        for _ in range(15):
            p = rng.uniform(0.3, 3.0, 3) * 0.01 * qos.gamma
            k = int(rng.integers(0, 3))
            base = outage_probability(build_outage_form(
                inst, b, PowerAllocation(powers=p), qos, k)).value
            up = p.copy()
            up[k] *= 1.05
            hi = outage_probability(build_outage_form(
                inst, b, PowerAllocation(powers=up), qos, k)).value
            assert hi >= base - 1e-8
            j = (k + 1) % 3
            up = p.copy()
            up[j] *= 1.05
            lo = outage_probability(build_outage_form(
                inst, b, PowerAllocation(powers=up), qos, k)).value
            assert lo <= base + 1e-8


class TestMonteCarlo:
    def test_deterministic_under_seed(self):
        inst, b, qos = make_zf_setup(15)
        p = PowerAllocation(powers=qos.gamma * 0.01)
        a = mc_probability(inst, b, p, qos, 0, 50_000, 321)
        c = mc_probability(inst, b, p, qos, 0, 50_000, 321)
        assert a.value == c.value
        assert a.method is EvalMethod.MONTE_CARLO

    def test_zero_uncertainty_is_exact_indicator(self):
        inst = make_instance(17)
        inst0 = ScenarioInstance(true_channels=inst.true_channels,
                                 est_channels=inst.est_channels,
                                 error_cov=np.zeros_like(inst.error_cov),
                                 noise_var=inst.noise_var)
        b = build_zf(inst0.est_channels)
        qos = QoSSpec.from_db(3.0, 0.05, 3)
        hi = mc_probability(inst0, b, PowerAllocation(
            powers=qos.gamma * 0.01 * 1.01), qos, 0, 1000, 1)
        lo = mc_probability(inst0, b, PowerAllocation(
            powers=qos.gamma * 0.01 * 0.99), qos, 0, 1000, 1)
        assert hi.value == 1.0 and lo.value == 0.0

    def test_zero_power_never_succeeds(self):
        inst, b, qos = make_zf_setup(19)
        p = PowerAllocation(powers=np.array([0.0, 0.05, 0.05]))
        est = mc_probability(inst, b, p, qos, 0, 2000, 2)
        assert est.value == 0.0

    def test_standard_error_matches_binomial(self):
        inst, b, qos = make_zf_setup(23)
        p = PowerAllocation(powers=qos.gamma * 0.01 * 1.3)
        est = mc_probability(inst, b, p, qos, 0, 10_000, 3)
        assert est.abs_error_bound == pytest.approx(
            np.sqrt(est.value * (1 - est.value) / 10_000))
