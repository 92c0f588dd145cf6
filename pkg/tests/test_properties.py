"""Property-based checks of the structural invariants."""

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy import stats

from ddpm_lab import metrics as met
from ddpm_lab import tweedie as tw
from ddpm_lab.estimators import matching_identity_check
from ddpm_lab.samplers import ExactModel, ReverseSamplerSpec, clip_psd, reverse_kernel, run_reverse
from ddpm_lab.schedules import from_beta, make_constant, make_li
from ddpm_lab.targets import AtomCloud, GaussianMixture, derivatives, gaussian, log_density, marginal, posterior_origin
from ddpm_lab.verify import fd_relative_errors

SETTINGS = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
SLOW = settings(max_examples=6, deadline=None, suppress_health_check=[HealthCheck.too_slow])

coord = st.floats(-3.0, 3.0, allow_nan=False)
weight_vec = lambda n: st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n).map(lambda w: np.array(w) / np.sum(w))


@st.composite
def mixtures(draw, d=None, max_components=3):
    d = d or draw(st.integers(1, 2))
    n = draw(st.integers(1, max_components))
    w = draw(weight_vec(n))
    means = np.array(draw(st.lists(st.lists(coord, min_size=d, max_size=d), min_size=n, max_size=n)))
    covs = []
    for _ in range(n):
        A = np.array(draw(st.lists(st.floats(-0.8, 0.8), min_size=d * d, max_size=d * d))).reshape(d, d)
        covs.append(A @ A.T + draw(st.floats(0.1, 1.0)) * np.eye(d))
    return GaussianMixture(w, means, np.array(covs))


@st.composite
def atom_clouds(draw, d=None):
    d = d or draw(st.integers(1, 2))
    n = draw(st.integers(1, 3))
    w = draw(weight_vec(n))
    atoms = np.array(draw(st.lists(st.lists(coord, min_size=d, max_size=d), min_size=n, max_size=n)))
    return AtomCloud(w, atoms)


targets = st.one_of(mixtures(), atom_clouds())
abars = st.floats(0.05, 0.99)


@SETTINGS
@given(targets, abars, st.integers(0, 2**31 - 1))
def test_derivatives_agree_with_finite_differences(target, abar, seed):
    o = marginal(target, abar)
    x = np.random.default_rng(seed).standard_normal(target.dim)
    h = 1e-3 * math.sqrt(float(np.min(np.linalg.eigvalsh(o.component_covs))))
    assert max(fd_relative_errors(o, x, h)) <= 1e-5


@SETTINGS
@given(targets, abars, st.integers(0, 2**31 - 1))
def test_posterior_origin_is_a_proper_average(target, abar, seed):
    x = np.random.default_rng(seed).standard_normal(target.dim) * 2
    r = posterior_origin(marginal(target, abar), x)
    assert r.responsibilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.linalg.eigvalsh(r.central_cov) >= -1e-12)


@SETTINGS
@given(targets, abars, st.integers(0, 2**31 - 1))
def test_score_is_scaled_posterior_mean(target, abar, seed):
    """Tweedie at the origin: score = (sqrt(abar) E[X0 | x] - x) / (1 - abar)."""
    x = np.random.default_rng(seed).standard_normal(target.dim)
    o = marginal(target, abar)
    s = derivatives(o, x)[0]
    m = posterior_origin(o, x).mean
    np.testing.assert_allclose(s, (math.sqrt(abar) * m - x) / (1 - abar), rtol=1e-9, atol=1e-9)


@SETTINGS
@given(st.integers(2, 4000), st.floats(0.5, 6.0))
def test_constant_schedule_invariants(T, c):
    if c * math.log(T) / T >= 1:
        return
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = make_constant(T, c)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.abar) < 0)
    np.testing.assert_allclose(s.abar + s.one_minus_abar, 1.0, atol=1e-15)


@SETTINGS
@given(st.integers(16, 4000), st.floats(2.5, 6.0), st.floats(0.0, 1.0))
def test_li_schedule_invariants(T, c, u):
    lo = math.exp(-c)
    delta = lo + (0.99 - lo) * u + 1e-9
    if c * math.log(T) / T >= 1:
        return
    s = make_li(T, c, delta)
    assert s.beta_at(1) == delta
    assert np.all(s.beta[1:] <= c * math.log(T) / T * (1 + 1e-15))
    assert np.all(np.diff(s.beta[1:]) >= -1e-18)


@SETTINGS
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_gaussian_kl_nonnegative_and_pinsker_bounded(d, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((2, d, d))
    S0, S1 = A @ A.T + 0.1 * np.eye(d), B @ B.T + 0.1 * np.eye(d)
    m0, m1 = rng.standard_normal((2, d))
    kl = met.gaussian_kl(m0, S0, m1, S1)
    assert kl >= 0
    assert 0 <= met.pinsker_tv(kl) <= 1
    assert met.gaussian_kl(m0, S0, m0, S0) == 0.0


@SETTINGS
@given(mixtures(max_components=1), st.sampled_from(["regular", "accelerated"]), st.floats(0.0, 1e-2), st.integers(16, 256))
def test_chain_breakdown_consistency(target, kind, eps, T):
    spec = ReverseSamplerSpec(kind=kind, estimator="perturbed" if eps > 0 else "exact", eps2=eps, epsH2=eps if kind == "accelerated" else 0.0)
    st_ = met.gaussian_chain(target, make_constant(T, 3.0), spec)
    b = st_.breakdown
    assert b.total == pytest.approx(b.init_error + b.est_error + float(np.sum(b.rev_error_per_step)), abs=1e-10)
    assert b.init_error >= -1e-12 and b.est_error >= -1e-12 and np.all(b.rev_error_per_step >= -1e-12)
    assert st_.kl >= -1e-12
    for C in st_.covs:
        assert np.allclose(C, C.T, atol=1e-12) and np.linalg.eigvalsh(C).min() > 0


@SLOW
@given(mixtures(d=1, max_components=1), st.sampled_from(["regular", "accelerated"]), st.sampled_from([0.0, 1e-3]))
def test_decomposition_quadrature_equals_chain_termwise(target, kind, eps):
    s = make_constant(32, 3.0)
    spec = ReverseSamplerSpec(kind=kind, estimator="perturbed" if eps > 0 else "exact", eps2=eps, epsH2=eps if kind == "accelerated" else 0.0)
    a = met.gaussian_chain(target, s, spec).breakdown
    b = met.kl_decomposition_quadrature(target, s, spec)
    assert abs(a.init_error - b.init_error) <= 1e-7
    assert abs(a.est_error - b.est_error) <= 1e-7
    np.testing.assert_allclose(a.rev_error_per_step, b.rev_error_per_step, atol=1e-7, rtol=0)


@SETTINGS
@given(st.floats(1e-4, 1e-1), st.integers(1, 2**31 - 1))
def test_constant_bias_estimation_term_exact(eps2, seed):
    s = make_constant(128, 2.0)
    spec = ReverseSamplerSpec(estimator="perturbed", eps2=eps2, perturbation="systematic_bias")
    b = met.gaussian_chain(gaussian([0.2, 0.0], np.diag([1.0, 0.25])), s, spec, seed=seed).breakdown
    assert b.est_error == pytest.approx(float(np.sum(s.beta)) / 2 * eps2, rel=1e-12)


@SLOW
@given(mixtures(d=1, max_components=2), st.floats(-2.0, 2.0))
def test_tweedie_formula_matches_quadrature(target, x):
    s = make_constant(64, 2.0)
    F = tw.posterior_moments_formula(target, s, 20, [x])
    Q = tw.posterior_moments_quadrature(target, s, 20, [x])
    np.testing.assert_allclose(F.mean, Q.mean, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(F.cov, Q.cov, rtol=1e-7, atol=1e-12)
    np.testing.assert_allclose(F.fourth, Q.fourth, rtol=1e-5, atol=1e-10)


@SLOW
@given(st.one_of(mixtures(d=1, max_components=2), atom_clouds(d=1)), st.integers(0, 1000))
def test_matching_objective_difference_is_theta_free(target, seed):
    r = matching_identity_check(target, make_constant(64, 2.0), 8, "poly2", 0, 3, seed, method="quadrature")
    assert r["max_discrepancy"] <= 1e-6 * max(1.0, max(abs(v) for v in r["L_ideal"]))


@SETTINGS
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_clipped_kernel_covariance_is_psd(seed, shift):
    A = np.random.default_rng(seed).standard_normal((3, 2, 2))
    cov = A + np.swapaxes(A, 1, 2) + shift * np.eye(2)
    c, root, _ = clip_psd(cov, 1e-6)
    assert np.all(np.linalg.eigvalsh(c) >= 1e-6 * (1 - 1e-9))
    np.testing.assert_allclose(np.einsum("nij,njk->nik", root, root), c, atol=1e-10)


@SETTINGS
@given(targets, st.integers(0, 2**31 - 1))
def test_reverse_run_is_deterministic(target, seed):
    s = make_constant(8, 2.0)
    spec = ReverseSamplerSpec(stop_at=1 if isinstance(target, AtomCloud) else 0)
    a = run_reverse(spec, target, s, 4, seed).x
    b = run_reverse(spec, target, s, 4, seed).x
    np.testing.assert_array_equal(a, b)


def test_reverse_step_term_is_second_order():
    """Single reverse-step KL against the step size with abar_t held fixed: order >= 1.9."""
    target = GaussianMixture([0.3, 0.7], [[-1.5], [1.0]], [[[0.4]], [[0.6]]])
    hs = np.array([2 * math.log(T) / T for T in (128, 256, 512, 1024, 2048)])
    rev = []
    for h in hs:
        s = from_beta([1.0 - 0.5 / (1.0 - h), h])
        rev.append(met.kl_decomposition_quadrature(target, s, ReverseSamplerSpec(stop_at=1), atol=1e-16).rev_error_per_step[-1])
    assert stats.linregress(np.log(hs), np.log(rev)).slope >= 1.9
