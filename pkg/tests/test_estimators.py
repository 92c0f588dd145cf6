import numpy as np
import pytest

from ddpm_lab import estimators as est
from ddpm_lab.samplers import TAG_FIT, _forward, stream
from ddpm_lab.schedules import make_constant
from ddpm_lab.targets import AtomCloud, ContractError, derivatives, gaussian, point_mass, standard_normal
from ddpm_lab.verify import default_mixture_1d


def ols_se(Phi, Y, coef):
    """Heteroskedasticity-robust standard errors of each coefficient column."""
    Ginv = np.linalg.inv(Phi.T @ Phi)
    E = Y - Phi @ coef
    out = np.zeros_like(coef)
    for j in range(Y.shape[1]):
        meat = (Phi * E[:, j : j + 1]).T @ (Phi * E[:, j : j + 1])
        out[:, j] = np.sqrt(np.diag(Ginv @ meat @ Ginv))
    return out


def test_linear_basis_recovers_standard_normal_score():
    s = make_constant(64, 2.0)
    t, n, seed = 12, 10**5, 1
    f = est.fit_score(standard_normal(1), s, t, "linear", n, seed)
    assert f.basis.names == ["1", "x1"]
    _, w, xt = _forward(standard_normal(1), s, t, n, stream(seed, s.T, TAG_FIT, t))
    Y = -w / np.sqrt(s.one_minus_abar_at(t))
    se = ols_se(f.basis(xt), Y, f.coef)
    z = (f.coef[:, 0] - np.array([0.0, -1.0])) / se[:, 0]
    assert np.all(np.abs(z) <= 3)


def test_constant_basis_is_misspecified():
    s = make_constant(64, 2.0)
    f = est.fit_score(standard_normal(2), s, 12, "constant", 10**5, 2)
    assert np.all(np.abs(f.coef) < 0.02)
    assert f.diagnostics["eps2"] == pytest.approx(2.0, rel=0.03)


def test_realizable_fit_error_shrinks():
    s = make_constant(64, 2.0)
    small = est.fit_score(gaussian([0.5], [[0.6]]), s, 8, "linear", 10**3, 0).diagnostics["eps2"]
    large = est.fit_score(gaussian([0.5], [[0.6]]), s, 8, "linear", 10**6, 0).diagnostics["eps2"]
    assert large < small / 100


def test_point_mass_v_fit_matches_analytic():
    s = make_constant(64, 2.0)
    t, n, seed = 8, 10**6, 4
    target = point_mass([0.0])
    f = est.fit_v(target, s, t, "poly2", n, seed)
    _, w, xt = _forward(target, s, t, n, stream(seed, s.T, TAG_FIT, t))
    Y = (w[:, 0] ** 2 / s.one_minus_abar_at(t))[:, None]
    se = ols_se(f.basis(xt), Y, f.coef)
    probes = np.linspace(-1.0, 1.0, 7)[:, None]
    Phi_p = f.basis(probes)
    G = np.linalg.inv(f.basis(xt).T @ f.basis(xt))
    E = Y - f.basis(xt) @ f.coef
    meat = (f.basis(xt) * E).T @ (f.basis(xt) * E)
    cov = G @ meat @ G
    pred_se = np.sqrt(np.einsum("pk,kl,pl->p", Phi_p, cov, Phi_p))
    truth = est.v_star(s.oracle(target, t), probes)[:, 0, 0]
    # w is a deterministic function of x_t here, so the fit is exact up to rounding
    assert np.all(np.abs(f(probes)[:, 0, 0] - truth) <= 3 * pred_se + 1e-12)
    assert se.shape == f.coef.shape


def test_standard_normal_assembled_hessian():
    s = make_constant(64, 2.0)
    t = 8
    sf = est.fit_score(standard_normal(1), s, t, "poly2", 10**6, 5)
    vf = est.fit_v(standard_normal(1), s, t, "poly2", 10**6, 5)
    probes = np.linspace(-1.5, 1.5, 5)[:, None]
    H = est.assemble_H(vf, sf, s, t)(probes)
    se = est.assembled_hessian_se(standard_normal(1), s, t, "poly2", 10**6, 5, probes)
    assert np.all(np.abs(H + 1.0) <= 3 * se)


def test_assemble_exact_inputs_is_identity():
    gm = default_mixture_1d()
    s = make_constant(64, 2.0)
    t = 20
    o = s.oracle(gm, t)
    x = np.linspace(-3, 3, 9)[:, None]
    H = est.assemble_H(lambda z: est.v_star(o, z), lambda z: derivatives(o, z)[0], s, t)
    np.testing.assert_allclose(H(x), derivatives(o, x)[1], rtol=1e-9, atol=1e-9)


def test_assemble_cancellation():
    s = make_constant(64, 2.0)
    t = 20
    c = 1.0 / s.one_minus_abar_at(t)
    H = est.assemble_H(lambda z: np.broadcast_to(c * np.eye(2), z.shape[:-1] + (2, 2)), lambda z: np.zeros_like(z), s, t)
    np.testing.assert_array_equal(H(np.ones((3, 2))), 0.0)


def test_matching_identity_single_theta_is_zero():
    r = est.matching_identity_check(default_mixture_1d(), make_constant(64, 2.0), 8, "poly2", 0, 1, 0)
    assert r["max_discrepancy"] == 0.0


def test_matching_identity_closed_form_gaussian():
    r = est.matching_identity_check(gaussian([0.5], [[0.6]]), make_constant(64, 2.0), 8, "poly2", 0, 6, 1)
    assert r["method"] == "closed_form" and r["max_discrepancy"] <= 1e-8


def test_matching_identity_two_atoms_quadrature():
    r = est.matching_identity_check(AtomCloud([0.3, 0.7], [[0.0], [1.0]]), make_constant(64, 2.0), 8, "poly2", 0, 5, 2)
    assert r["method"] == "quadrature" and r["max_discrepancy"] <= 1e-6


def test_responsibility_basis_improves_mixture_fit():
    gm = default_mixture_1d()
    s = make_constant(64, 2.0)
    poly = est.fit_score(gm, s, 6, "poly2", 50_000, 0).diagnostics["eps2"]
    resp = est.fit_score(gm, s, 6, "responsibility", 50_000, 0).diagnostics["eps2"]
    assert resp < poly


def test_score_and_v_fits_share_samples():
    s = make_constant(64, 2.0)
    a = est._samples(standard_normal(1), s, 5, 100, 3)[2]
    b = est._samples(standard_normal(1), s, 5, 100, 3)[2]
    np.testing.assert_array_equal(a, b)


def test_too_few_samples_rejected():
    with pytest.raises(ContractError, match="samples"):
        est.fit_score(standard_normal(1), make_constant(64, 2.0), 5, "poly2", 10, 0)


def test_fitted_model_has_no_gaussian_closure():
    m = est.FittedModel(standard_normal(1), make_constant(16, 2.0), n_samples=1000)
    with pytest.raises(ContractError, match="Gaussian closure broken"):
        m.affine_error(3)
