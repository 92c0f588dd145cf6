import math
import warnings

import numpy as np
import pytest

from ddpm_lab import metrics as met
from ddpm_lab.samplers import ReverseSamplerSpec
from ddpm_lab.schedules import make_constant, make_li
from ddpm_lab.targets import AtomCloud, ContractError, gaussian, point_mass, standard_normal
from ddpm_lab.verify import default_mixture_1d


def test_gaussian_kl_examples():
    assert met.gaussian_kl([0.0], [[1.0]], [0.0], [[1.0]]) == 0.0
    assert met.pinsker_tv(0.0) == 0.0
    assert met.gaussian_kl([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5, rel=1e-15)
    assert met.pinsker_tv(2.0) == 1.0


def test_gaussian_kl_against_textbook_formula():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((2, 3, 3))
    S0, S1 = A @ A.T + np.eye(3), B @ B.T + np.eye(3)
    m0, m1 = rng.standard_normal((2, 3))
    S1i = np.linalg.inv(S1)
    ref = 0.5 * (np.trace(S1i @ S0) - 3 + (m1 - m0) @ S1i @ (m1 - m0) + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])
    assert met.gaussian_kl(m0, S0, m1, S1) == pytest.approx(ref, rel=1e-12)


def test_gaussian_kl_small_difference_keeps_precision():
    d = 1e-9
    v = met.gaussian_kl_delta(np.eye(1), d * np.eye(1), np.zeros(1))
    assert v == pytest.approx(d**2 / 4, rel=1e-6)


def test_gaussian_kl_rejects_non_spd():
    with pytest.raises(ContractError):
        met.gaussian_kl([0.0], [[1.0]], [0.0], [[-1.0]])


def test_chain_standard_normal_symmetric_mean():
    s = make_constant(128, 2.0)
    st = met.gaussian_chain(standard_normal(2), s, ReverseSamplerSpec())
    np.testing.assert_array_equal(st.means[-1], 0.0)
    assert st.kl == pytest.approx(met.gaussian_kl(np.zeros(2), np.eye(2), np.zeros(2), st.covs[-1]), rel=1e-6)
    for C in st.covs:
        assert np.allclose(C, C.T) and np.linalg.eigvalsh(C).min() > 0


def test_chain_matches_naive_recursion():
    g = gaussian([0.3, -0.2], [[1.0, 0.2], [0.2, 0.5]])
    s = make_constant(64, 2.0)
    st = met.gaussian_chain(g, s, ReverseSamplerSpec())
    m, C = np.zeros(2), np.eye(2)
    for t in range(64, 0, -1):
        ab, a, b = s.abar_at(t), s.alpha_at(t), s.beta_at(t)
        P = np.linalg.inv(ab * g.covs[0] + (1 - ab) * np.eye(2))
        mt = math.sqrt(ab) * g.means[0]
        A = (np.eye(2) - b * P) / math.sqrt(a)
        m = A @ m + b * P @ mt / math.sqrt(a)
        C = A @ C @ A.T + b / a * np.eye(2)
    np.testing.assert_allclose(st.means[-1], m, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(st.covs[-1], C, rtol=1e-10)


def test_chain_kl_decreases_and_scaled_kl_bounded():
    Ts = [64, 128, 256, 512, 1024, 2048, 4096]
    kls = [met.gaussian_chain(gaussian([0.0, 0.0], np.diag([1.0, 0.25])), make_constant(T, 2.0), ReverseSamplerSpec()).kl for T in Ts]
    assert all(a > b for a, b in zip(kls, kls[1:]))
    scaled = [k * T / math.log(T) ** 2 for k, T in zip(kls, Ts)]
    assert max(scaled) < 1.0


def test_constant_bias_estimation_term():
    s = make_constant(128, 2.0)
    spec = ReverseSamplerSpec(estimator="perturbed", eps2=1e-3, perturbation="systematic_bias")
    st = met.gaussian_chain(gaussian([0.0, 0.0], np.diag([1.0, 0.25])), s, spec)
    assert st.breakdown.est_error == pytest.approx(float(np.sum(s.beta)) / 2 * 1e-3, rel=1e-12)


def test_chain_rejects_nonaffine_and_mixtures():
    s = make_constant(16, 2.0)
    spec = ReverseSamplerSpec(estimator="perturbed", eps2=1e-3, perturbation="additive_gaussian")
    with pytest.raises(ContractError, match="Gaussian closure broken"):
        met.gaussian_chain(standard_normal(1), s, spec)
    with pytest.raises(ContractError):
        met.gaussian_chain(default_mixture_1d(), s, ReverseSamplerSpec())


@pytest.mark.parametrize("kind", ["regular", "accelerated"])
@pytest.mark.parametrize("eps", [0.0, 1e-3])
def test_decomposition_quadrature_matches_chain(kind, eps):
    g = gaussian([0.5], [[0.6]])
    s = make_constant(64, 3.0)
    spec = ReverseSamplerSpec(kind=kind, estimator="perturbed" if eps else "exact", eps2=eps, epsH2=eps if kind == "accelerated" else 0.0)
    chain = met.gaussian_chain(g, s, spec).breakdown
    quad = met.kl_decomposition_quadrature(g, s, spec)
    assert quad.total == pytest.approx(chain.total, abs=1e-8)
    np.testing.assert_allclose(quad.rev_error_per_step, chain.rev_error_per_step, atol=1e-7)
    assert quad.est_error == pytest.approx(chain.est_error, abs=1e-7)
    if not eps:
        assert quad.est_error == 0.0


def test_marginal_quadrature_matches_chain():
    g = gaussian([0.5], [[0.6]])
    for kind in ("regular", "accelerated"):
        s = make_constant(64, 3.0)
        spec = ReverseSamplerSpec(kind=kind, estimator="perturbed", eps2=1e-3, epsH2=1e-3 if kind == "accelerated" else 0.0)
        assert met.kl_marginal_quadrature(g, s, spec) == pytest.approx(met.gaussian_chain(g, s, spec).kl, rel=1e-8)


def test_decomposition_budget():
    with pytest.raises(ContractError, match="T <= 512"):
        met.kl_decomposition_quadrature(standard_normal(1), make_constant(1024, 2.0), ReverseSamplerSpec())


def test_two_atom_reverse_terms_nonnegative():
    s = make_li(64, 3.0, 0.05)
    bd = met.kl_decomposition_quadrature(AtomCloud([0.5, 0.5], [[-1.0], [1.0]]), s, ReverseSamplerSpec(stop_at=1), atol=1e-13)
    assert bd.rev_error_per_step.min() >= 0.0
    assert bd.total == pytest.approx(bd.init_error + bd.est_error + bd.rev_error_per_step.sum(), abs=1e-10)


def test_init_error_stationary_target():
    exact, bound = met.init_error(standard_normal(2), make_constant(64, 2.0))
    assert exact == 0.0


def test_init_error_point_mass():
    mu = np.array([1.0, -2.0])
    s = make_constant(64, 2.0)
    exact, bound = met.init_error(point_mass(mu), s)
    ab = s.abar_at(64)
    ref = 0.5 * ab * (mu @ mu) + 0.5 * 2 * (-ab - math.log1p(-ab))
    assert exact == pytest.approx(ref, rel=1e-12)
    assert exact <= 0.5 * (mu @ mu) * ab + 2 * ab**2
    assert exact <= bound * (1 + 1e-12)


def test_init_error_vanishes_with_abar():
    vals = [met.init_error(point_mass([1.0]), make_constant(T, 2.0)) for T in (64, 1024, 16384)]
    assert vals[-1][0] < vals[0][0] * 1e-3 and vals[-1][1] < vals[0][1] * 1e-3


def test_init_error_quadrature_1d():
    gm = default_mixture_1d()
    exact, bound = met.init_error(gm, make_constant(32, 2.0))
    assert 0 < exact <= bound * 1.01


def test_w2_examples():
    r = met.coupling_w2_check(point_mass([0.0, 0.0]), 0.9, 10**5, 0)
    assert r["bound"] == pytest.approx(0.2) and r["M2"] == 0.0
    assert abs(r["mc_estimate"] - 0.2) <= 4 * r["mc_se"]
    r = met.coupling_w2_check(standard_normal(2), 0.9, 10**5, 0)
    assert r["bound"] == pytest.approx(0.4)
    assert r["mc_estimate"] <= r["bound"] + 4 * r["mc_se"]
    r = met.coupling_w2_check(standard_normal(2), 1.0, 1000, 0)
    assert r["mc_estimate"] == 0.0 and r["bound"] == 0.0


def test_fit_rate_examples():
    Ts = [64, 128, 256, 512]
    f = met.fit_rate([(T, 1.0 / T) for T in Ts])
    assert f.slope == pytest.approx(-1.0, abs=1e-12) and f.r_squared == pytest.approx(1.0, abs=1e-12)
    Ts = [64, 128, 256, 512, 1024, 2048, 4096]
    f = met.fit_rate([(T, math.log(T) ** 2 / T**2) for T in Ts])
    assert -2.0 < f.slope < -1.6
    with pytest.raises(ContractError, match="degenerate abscissa"):
        met.fit_rate([(64, 1.0), (64, 2.0), (64, 3.0), (64, 4.0)])


def test_fit_rate_excludes_nonpositive_with_warning():
    pts = [(64, 1.0), (128, 0.5), (256, 0.25), (512, 0.125), (1024, 0.0)]
    with pytest.warns(UserWarning, match="excluded"):
        f = met.fit_rate(pts)
    assert f.slope == pytest.approx(-1.0) and len(f.excluded) == 1


def test_fit_rate_needs_four_points():
    with pytest.raises(ContractError):
        met.fit_rate([(64, 1.0), (128, 0.5), (256, 0.25)])


def test_rate_point_breakdown_is_upper_bound():
    s = make_constant(128, 2.0)
    r = met.rate_point(gaussian([0.0, 0.0], np.diag([1.0, 0.25])), s, ReverseSamplerSpec())
    assert r["kl_init"] + r["kl_est"] + r["kl_rev"] >= r["kl_total"]
