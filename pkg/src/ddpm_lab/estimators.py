"""Denoising score matching and Hessian matching with feature-linear models."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .quadrature import QuadratureSpec, integrate
from .samplers import TAG_FIT, _forward, stream
from .schedules import NoiseSchedule
from .targets import AtomCloud, ContractError, GaussianMixture, Target, derivatives, log_density


class FeatureBasis:
    """phi_1..phi_K: polynomials through degree 2, optionally with responsibility features."""

    def __init__(self, d: int, name: str = "poly2", oracle=None, degree: int = 2):
        if name not in ("poly2", "responsibility", "linear", "constant"):
            raise ContractError(f"unknown basis {name!r}")
        if name == "responsibility" and oracle is None:
            raise ContractError("responsibility features need the marginal oracle")
        self.d = d
        self.name = name
        self.oracle = oracle
        deg = {"constant": 0, "linear": 1}.get(name, degree)
        self.monomials = [m for k in range(deg + 1) for m in itertools.combinations_with_replacement(range(d), k)]
        self.n_resp = oracle.target.n_components - 1 if name == "responsibility" else 0

    @property
    def K(self) -> int:
        return len(self.monomials) + self.n_resp * (1 + self.d)

    @property
    def names(self) -> list[str]:
        out = ["1" if not m else "*".join(f"x{i + 1}" for i in m) for m in self.monomials]
        for n in range(self.n_resp):
            out += [f"r{n + 1}"] + [f"r{n + 1}*x{i + 1}" for i in range(self.d)]
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cols = [np.prod(x[..., list(m)], axis=-1) if m else np.ones(x.shape[:-1]) for m in self.monomials]
        if self.n_resp:
            r = self.oracle.responsibilities(x)
            for n in range(self.n_resp):
                cols.append(r[..., n])
                cols += [r[..., n] * x[..., i] for i in range(self.d)]
        return np.stack(cols, axis=-1)


def make_basis(name: str, target: Target, schedule: NoiseSchedule, t: int) -> FeatureBasis:
    oracle = schedule.oracle(target, t) if name == "responsibility" else None
    return FeatureBasis(target.dim, name, oracle)


@dataclass
class FittedEstimator:
    kind: str  # "score" | "v_matrix"
    basis: FeatureBasis
    coef: np.ndarray  # (K, outputs)
    t: int
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.basis(x) @ self.coef
        d = self.basis.d
        if self.kind == "score":
            return out
        V = out.reshape(out.shape[:-1] + (d, d))
        return 0.5 * (V + np.swapaxes(V, -1, -2))


def _lstsq(Phi: np.ndarray, Y: np.ndarray):
    """Normal-equations solve with the fixed ridge fallback for degenerate Grams."""
    G = Phi.T @ Phi
    K = G.shape[0]
    rhs = Phi.T @ Y
    ridge = False
    try:
        if np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        ridge = True
        G = G + 1e-8 * np.trace(G) / K * np.eye(K)
        L = np.linalg.cholesky(G)
    coef = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    return coef, ridge


def _samples(target, schedule, t, n, seed):
    if not 1 <= t <= schedule.T:
        raise ContractError(f"t must lie in 1..{schedule.T}")
    return _forward(target, schedule, t, n, stream(seed, schedule.T, TAG_FIT, t))


def _check_n(basis, n):
    if n < 10 * basis.K:
        raise ContractError(f"need at least {10 * basis.K} samples for {basis.K} features")


def fit_score(target: Target, schedule: NoiseSchedule, t: int, basis: FeatureBasis | str, n_samples: int, seed: int) -> FittedEstimator:
    """Least squares of s_theta(x_t) against -w / sqrt(1 - abar_t)."""
    if isinstance(basis, str):
        basis = make_basis(basis, target, schedule, t)
    _check_n(basis, n_samples)
    _, w, xt = _samples(target, schedule, t, n_samples, seed)
    Phi = basis(xt)
    Y = -w / np.sqrt(schedule.one_minus_abar_at(t))
    coef, ridge = _lstsq(Phi, Y)
    fit = Phi @ coef
    exact = derivatives(schedule.oracle(target, t), xt)[0]
    err = np.sum((fit - exact) ** 2, axis=1)
    diag = {
        "n_samples": n_samples,
        "residual_mse": float(np.mean(np.sum((fit - Y) ** 2, axis=1))),
        "eps2": float(err.mean()),
        "eps4": float(np.mean(err**2)),
        "ridge": ridge,
    }
    return FittedEstimator("score", basis, coef, t, diag)


def fit_v(target: Target, schedule: NoiseSchedule, t: int, basis: FeatureBasis | str, n_samples: int, seed: int) -> FittedEstimator:
    """Hessian matching: regress v_theta(x_t) onto w w^T / (1 - abar_t) in Frobenius norm."""
    if isinstance(basis, str):
        basis = make_basis(basis, target, schedule, t)
    _check_n(basis, n_samples)
    _, w, xt = _samples(target, schedule, t, n_samples, seed)
    d = target.dim
    Phi = basis(xt)
    Y = np.einsum("ni,nj->nij", w, w).reshape(n_samples, d * d) / schedule.one_minus_abar_at(t)
    coef, ridge = _lstsq(Phi, Y)
    est = FittedEstimator("v_matrix", basis, coef, t)
    V = est(xt)
    Vstar = v_star(schedule.oracle(target, t), xt)
    est.diagnostics = {
        "n_samples": n_samples,
        "residual_mse": float(np.mean(np.sum((V.reshape(n_samples, -1) - Y) ** 2, axis=1))),
        "v_mse": float(np.mean(np.sum((V - Vstar) ** 2, axis=(1, 2)))),
        "ridge": ridge,
    }
    return est


def v_star(oracle, x) -> np.ndarray:
    """Population minimizer of Hessian matching: Hess q / q + I / (1 - abar)."""
    s, h, _ = derivatives(oracle, x)
    d = oracle.dim
    return h + np.einsum("...i,...j->...ij", s, s) + np.eye(d) / oracle.one_minus_abar


def assemble_H(v, s, schedule: NoiseSchedule, t: int):
    """x -> v(x) - I / (1 - abar_t) - s(x) s(x)^T, symmetrized."""
    c = 1.0 / schedule.one_minus_abar_at(t)

    def H(x):
        sv = np.asarray(s(x))
        V = np.asarray(v(x))
        out = V - c * np.eye(sv.shape[-1]) - np.einsum("...i,...j->...ij", sv, sv)
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    return H


def assembled_hessian_se(
    target: Target, schedule: NoiseSchedule, t: int, basis: FeatureBasis | str, n_samples: int, seed: int, probes
) -> np.ndarray:
    """Sandwich standard errors of H_t at ``probes`` for fits on the shared sample set.

    Score and v fits with the same (t, n_samples, seed) see the same draws, so the
    joint coefficient covariance is estimated from stacked residuals and mapped
    through the delta method.
    """
    if isinstance(basis, str):
        basis = make_basis(basis, target, schedule, t)
    _, w, xt = _samples(target, schedule, t, n_samples, seed)
    d, K = target.dim, basis.K
    v_ = schedule.one_minus_abar_at(t)
    Phi = basis(xt)
    Y = np.concatenate([-w / np.sqrt(v_), np.einsum("ni,nj->nij", w, w).reshape(n_samples, d * d) / v_], axis=1)
    Ginv = np.linalg.inv(Phi.T @ Phi)
    coef = Ginv @ (Phi.T @ Y)
    O = Y.shape[1]
    meat = np.zeros((O * K, O * K))
    for lo in range(0, n_samples, 200_000):
        P, E = Phi[lo : lo + 200_000], (Y - Phi @ coef)[lo : lo + 200_000]
        U = np.einsum("no,nk->nok", E, P).reshape(P.shape[0], O * K)
        meat += U.T @ U
    bread = np.kron(np.eye(O), Ginv)
    cov = bread @ meat @ bread
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    out = np.zeros((probes.shape[0], d, d))
    for p, x in enumerate(probes):
        phi = basis(x)
        s = phi @ coef[:, :d]
        J = np.zeros((d * d, O * K))
        for i in range(d):
            for j in range(d):
                row = i * d + j
                # v part, symmetrized read-out
                for a, b in ((i, j), (j, i)):
                    J[row, (d + a * d + b) * K : (d + a * d + b + 1) * K] += 0.5 * phi
                # -s_i s_j part
                J[row, i * K : (i + 1) * K] -= s[j] * phi
                J[row, j * K : (j + 1) * K] -= s[i] * phi
        out[p] = np.sqrt(np.diag(J @ cov @ J.T)).reshape(d, d)
    return out


def _gaussian_raw_moment(k: int) -> float:
    return 0.0 if k % 2 else float(math.prod(range(k - 1, 0, -2)))


def _poly_sq_closed_form(target: GaussianMixture, abar: float, one_minus: float, theta: np.ndarray, coef_V: np.ndarray):
    """Both population objectives for a single 1D Gaussian and the basis (1, x, x^2)."""
    m0, s0 = float(target.means[0, 0]), float(target.covs[0, 0, 0])
    m, beta, gamma = np.sqrt(abar) * m0, np.sqrt(one_minus), np.sqrt(abar * s0)

    def mom(a: int, b: int) -> float:
        # E[X^a W^b] with X = m + beta W + gamma Z, (W, Z) independent standard normals
        tot = 0.0
        for i in range(a + 1):
            for j in range(a - i + 1):
                k = a - i - j
                c = math.comb(a, i) * math.comb(a - i, j) * m**i * beta**j * gamma**k
                tot += c * _gaussian_raw_moment(j + b) * _gaussian_raw_moment(k)
        return tot

    diff = theta - coef_V
    L1 = sum(diff[i] * diff[j] * mom(i + j, 0) for i in range(3) for j in range(3))
    L2 = sum(theta[i] * theta[j] * mom(i + j, 0) for i in range(3) for j in range(3))
    L2 -= 2.0 / one_minus * sum(theta[i] * mom(i, 2) for i in range(3))
    L2 += mom(0, 4) / one_minus**2
    return L1, L2


def _quadrature_objectives(target: Target, oracle, basis: FeatureBasis, thetas: np.ndarray, spec: QuadratureSpec):
    """Both objectives for a 1D target by quadrature; returns arrays over theta."""
    abar, v_ = oracle.abar, oracle.one_minus_abar
    mu, S = oracle.component_means[:, 0], np.asarray(oracle.component_covs)[:, 0, 0]
    lo, hi = float(np.min(mu - 14 * np.sqrt(S))), float(np.max(mu + 14 * np.sqrt(S)))

    def f1(nodes):
        x = nodes
        q = np.exp(log_density(oracle, x))
        r = basis(x) @ thetas.T - v_star(oracle, x)[:, 0, :1]
        return q[:, None] * r**2

    L1 = integrate(f1, [lo], [hi], spec, atol=1e-300)
    L2 = np.zeros(thetas.shape[0])
    for n, wn in enumerate(target.weights):
        if isinstance(target, AtomCloud):

            def f2(nodes, a=float(target.atoms[n, 0])):
                wv = nodes[:, 0]
                x = (np.sqrt(abar) * a + np.sqrt(v_) * wv)[:, None]
                phi = np.exp(-0.5 * wv**2) / np.sqrt(2 * np.pi)
                r = basis(x) @ thetas.T - (wv**2 / v_)[:, None]
                return phi[:, None] * r**2

            L2 += wn * integrate(f2, [-14.0], [14.0], spec, atol=1e-300)
        else:
            m0, s0 = float(target.means[n, 0]), float(target.covs[n, 0, 0])

            def f2(nodes, m0=m0, s0=s0):
                z, wv = nodes[:, 0], nodes[:, 1]
                x = (np.sqrt(abar) * (m0 + np.sqrt(s0) * z) + np.sqrt(v_) * wv)[:, None]
                phi = np.exp(-0.5 * (z**2 + wv**2)) / (2 * np.pi)
                r = basis(x) @ thetas.T - (wv**2 / v_)[:, None]
                return phi[:, None] * r**2

            L2 += wn * integrate(f2, [-12.0, -12.0], [12.0, 12.0], spec, atol=1e-300)
    return L1, L2


def matching_identity_check(
    target: Target,
    schedule: NoiseSchedule,
    t: int,
    basis: FeatureBasis | str,
    n_samples: int,
    n_thetas: int,
    seed: int,
    method: str = "auto",
) -> dict:
    """Check that the Hessian-matching objective differs from the ideal one by a theta-free constant.

    L_ideal(theta) = E ||v_theta(X_t) - (Hess q_t / q_t + I/(1-abar))||_F^2
    L_match(theta) = E ||v_theta(X_t) - W W^T / (1-abar)||_F^2
    Reports max over theta pairs of |Delta(theta_1) - Delta(theta_2)|, Delta = L_ideal - L_match.
    """
    if isinstance(basis, str):
        basis = make_basis(basis, target, schedule, t)
    if target.dim != 1:
        raise ContractError("matching_identity_check supports d = 1")
    oracle = schedule.oracle(target, t)
    rng = stream(seed, schedule.T, TAG_FIT, t, 99)
    thetas = rng.standard_normal((n_thetas, basis.K))
    closed = isinstance(target, GaussianMixture) and target.n_components == 1 and basis.name == "poly2"
    if method == "auto":
        method = "closed_form" if closed else "quadrature"
    if method == "closed_form":
        if not closed:
            raise ContractError("closed form needs a single Gaussian and the poly2 basis")
        # V*(x) is quadratic for a Gaussian target: recover its coefficients exactly
        S = float(oracle.component_covs[0, 0, 0])
        mt = float(oracle.component_means[0, 0])
        c2 = 1.0 / S**2
        c1 = -2.0 * mt / S**2
        c0 = -1.0 / S + mt**2 / S**2 + 1.0 / oracle.one_minus_abar
        cV = np.array([c0, c1, c2])
        pairs = [_poly_sq_closed_form(target, oracle.abar, oracle.one_minus_abar, th, cV) for th in thetas]
        L1 = np.array([p[0] for p in pairs])
        L2 = np.array([p[1] for p in pairs])
    elif method == "quadrature":
        L1, L2 = _quadrature_objectives(target, oracle, basis, thetas, QuadratureSpec(rtol=1e-13))
    else:
        raise ContractError(f"unknown method {method!r}")
    delta = L1 - L2
    return {
        "method": method,
        "n_thetas": n_thetas,
        "n_samples": n_samples,
        "L_ideal": L1.tolist(),
        "L_match": L2.tolist(),
        "delta": delta.tolist(),
        "max_discrepancy": float(delta.max() - delta.min()),
    }


class FittedModel:
    """Score/Hessian model fitted lazily at each t on fresh forward samples."""

    def __init__(self, target: Target, schedule: NoiseSchedule, basis: str = "poly2", n_samples: int = 20000, seed: int = 0):
        self.target = target
        self.schedule = schedule
        self.basis = basis
        self.n_samples = n_samples
        self.seed = seed
        self._fits: dict[int, tuple] = {}

    def fits(self, t: int):
        if t not in self._fits:
            s = fit_score(self.target, self.schedule, t, self.basis, self.n_samples, self.seed)
            v = fit_v(self.target, self.schedule, t, s.basis, self.n_samples, self.seed)
            self._fits[t] = (s, v, assemble_H(v, s, self.schedule, t))
        return self._fits[t]

    def score(self, t, x):
        return self.fits(t)[0](x)

    def hessian(self, t, x):
        return self.fits(t)[2](x)

    def affine_error(self, t):
        raise ContractError("Gaussian closure broken: fitted estimators are not tracked in closed form")

    hessian_error = affine_error
