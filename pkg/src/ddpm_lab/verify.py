"""Verification suites: one measurement per acceptance criterion, each with its pass rule."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import estimators as est
from . import metrics as met
from . import tweedie as tw
from .samplers import ReverseSamplerSpec, stream
from .schedules import diagnostics, from_beta, make_constant, make_li
from .targets import AtomCloud, GaussianMixture, derivatives, gaussian, log_density, marginal, point_mass, standard_normal

RATE_TS = (64, 128, 256, 512, 1024, 2048, 4096)
ORDER_TS = (128, 256, 512, 1024, 2048)
SUPPORT_TS = (64, 128, 256, 512)


def default_mixture_1d() -> GaussianMixture:
    """Asymmetric two-component mixture used by the posterior-moment checks."""
    return GaussianMixture([0.3, 0.7], [[-4.0], [3.0]], [[[1.0]], [[0.5]]])


def rate_target() -> GaussianMixture:
    return gaussian([0.0, 0.0], np.diag([1.0, 0.25]))


@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"value": self.value, "threshold": self.threshold, "pass": bool(self.passed)}


def _le(name, value, limit, **detail):
    return Check(name, float(value), f"<= {limit!r}", bool(value <= limit), detail)


def _ge(name, value, limit, **detail):
    return Check(name, float(value), f">= {limit!r}", bool(value >= limit), detail)


def _within(name, value, lo, hi, **detail):
    return Check(name, float(value), f"in [{lo!r}, {hi!r}]", bool(lo <= value <= hi), detail)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# rates -------------------------------------------------------------------------------------------


def _chain_sweep(kind: str, c: float, Ts) -> met.RateFit:
    pts = []
    for T in Ts:
        sch = make_constant(T, c, kind=kind)
        pts.append((T, met.gaussian_chain(rate_target(), sch, ReverseSamplerSpec(kind=kind)).kl))
    return met.fit_rate(pts)


def criterion_regular_rate(quick: bool = False) -> list[Check]:
    fit, secs = _timed(lambda: _chain_sweep("regular", 2.0, RATE_TS))
    return [
        _within("regular_rate_slope", fit.slope, -1.6, -0.8, kl=fit.values.tolist()),
        _ge("regular_rate_r2", fit.r_squared, 0.98),
        _le("regular_rate_runtime_s", secs, 30.0),
    ]


def criterion_accelerated_rate(quick: bool = False) -> list[Check]:
    fit, secs = _timed(lambda: _chain_sweep("accelerated", 3.0, RATE_TS))
    reg = _chain_sweep("regular", 2.0, RATE_TS)
    return [
        _within("accelerated_rate_slope", fit.slope, -2.8, -1.6, kl=fit.values.tolist()),
        _ge("accelerated_rate_r2", fit.r_squared, 0.98),
        _ge("rate_slope_gap", reg.slope - fit.slope, 0.7),
        _le("accelerated_rate_runtime_s", secs, 30.0),
    ]


def criterion_estimation_term(quick: bool = False, T: int = 256) -> list[Check]:
    """Constant score bias: estimation term in closed form and linear KL excess."""
    target = rate_target()
    sch = make_constant(T, 2.0)
    base = met.gaussian_chain(target, sch, ReverseSamplerSpec()).kl
    eps_list = (1e-2, 1e-3, 1e-4)
    rel, excess = [], []
    for eps2 in eps_list:
        spec = ReverseSamplerSpec(estimator="perturbed", eps2=eps2, perturbation="systematic_bias")
        st = met.gaussian_chain(target, sch, spec)
        predicted = sum(sch.beta_at(t) / 2.0 * eps2 for t in range(1, T + 1))
        rel.append(abs(st.breakdown.est_error - predicted) / predicted)
        excess.append(st.kl - base)
    slope = stats.linregress(np.log(eps_list), np.log(excess)).slope
    return [
        _le("est_term_rel_error", max(rel), 1e-12),
        _within("kl_excess_eps2_slope", slope, 0.9, 1.1, excess=excess),
    ]


def criterion_bounded_support(quick: bool = False) -> list[Check]:
    """Two-atom cloud, Li schedule, early stopping at t = 1.

    Quick mode checks the per-step reverse terms on T <= 256 only.
    """
    target = AtomCloud([0.5, 0.5], [[-1.0], [1.0]])
    spec = ReverseSamplerSpec(stop_at=1)
    t0 = time.perf_counter()
    pts, min_rev = [], np.inf
    for T in SUPPORT_TS:
        sch = make_li(T, 3.0, 0.05)
        pts.append((T, met.kl_marginal_quadrature(target, sch, spec)))
        if quick and T > 256:
            continue
        bd = met.kl_decomposition_quadrature(target, sch, spec, atol=1e-13)
        min_rev = min(min_rev, float(bd.rev_error_per_step.min()))
    secs = time.perf_counter() - t0
    fit = met.fit_rate(pts)
    return [
        _le("support_kl_slope", fit.slope, -0.7, kl=fit.values.tolist()),
        _ge("support_min_rev_term", min_rev, -1e-10),
        _le("support_runtime_s", secs, 300.0),
    ]


# tweedie -----------------------------------------------------------------------------------------

MOMENT_PROBES = (-4.3, -1.7, 0.4, 1.1, 2.6)


def moment_setup():
    target = default_mixture_1d()
    T = 64
    sch = make_constant(T, 1.5)
    return target, sch, T // 2


def _fourth_diag(m4: np.ndarray) -> np.ndarray:
    return np.array([m4[(i,) * 4] for i in range(m4.shape[0])])


def criterion_tweedie_moments(quick: bool = False) -> list[Check]:
    target, sch, t = moment_setup()
    worst = {"mean": 0.0, "cov": 0.0, "third": 0.0, "fourth": 0.0, "sixth": 0.0}

    def rel(a, b):
        a, b = np.ravel(a), np.ravel(b)
        return float(np.max(np.abs(a - b) / np.abs(b)))

    for x in MOMENT_PROBES:
        F = tw.posterior_moments_formula(target, sch, t, [x])
        Q = tw.posterior_moments_quadrature(target, sch, t, [x])
        worst["mean"] = max(worst["mean"], rel(F.mean, Q.mean))
        worst["cov"] = max(worst["cov"], rel(F.cov, Q.cov))
        worst["third"] = max(worst["third"], rel(F.third, Q.third))
        worst["fourth"] = max(worst["fourth"], rel(_fourth_diag(F.fourth), _fourth_diag(Q.fourth)))
        keys = sorted(F.sixth_diag)
        worst["sixth"] = max(worst["sixth"], rel([F.sixth_diag[k] for k in keys], [Q.sixth_diag[k] for k in keys]))
    limits = {"mean": 1e-8, "cov": 1e-7, "third": 1e-6, "fourth": 1e-5, "sixth": 1e-4}
    return [_le(f"tweedie_{k}_rel_error", worst[k], limits[k]) for k in limits]


def _step_sizes(Ts, c: float = 2.0) -> np.ndarray:
    return np.array([c * math.log(T) / T for T in Ts])


def _two_level(h: float, abar_prev: float = 0.5):
    """Schedule with abar_1 = abar_prev and a final step of size h; isolates the step-size dependence."""
    return from_beta([1.0 - abar_prev, h])


def criterion_moment_orders(quick: bool = False, x: float = 0.4) -> list[Check]:
    """Central posterior moments of order 3..6 against the step size 1 - alpha_t."""
    target = default_mixture_1d()
    hs = _step_sizes(ORDER_TS)
    vals = {p: [] for p in (3, 4, 5, 6)}
    for h in hs:
        F = tw.posterior_moments_formula(target, _two_level(h), 2, [x])
        vals[3].append(abs(F.third.ravel()[0]))
        vals[4].append(abs(F.fourth.ravel()[0]))
        vals[5].append(abs(F.fifth_diag[0]))
        vals[6].append(abs(F.sixth_diag[(0,) * 6]))
    out = []
    for p, v in vals.items():
        order = stats.linregress(np.log(hs), np.log(v)).slope
        floor = (p + 3) / 2 - 0.2 if p % 2 else p / 2 - 0.1
        out.append(_ge(f"moment_order_p{p}", order, floor))
    return out


def tilting_reconstruction_error(target, sch, t, x, n_points: int = 200) -> float:
    """max |q(y|x) - p(y|x) e^zeta(y) c(x)| / q(y|x) over a grid spanning the posterior."""
    alpha, beta = sch.alpha_at(t), sch.beta_at(t)
    o_t, o_prev = sch.oracle(target, t), sch.oracle(target, t - 1)
    xv = np.array([x], dtype=float)
    s, h, _ = derivatives(o_t, xv)
    mu = (xv + beta * s) / np.sqrt(alpha)
    sd = math.sqrt(beta / alpha * max(1.0, 1.0 + beta * float(h[0, 0])))
    y = np.linspace(mu[0] - 6 * sd, mu[0] + 6 * sd, n_points)[:, None]
    lq_t = float(log_density(o_t, xv))
    log_bayes = log_density(o_prev, y) - 0.5 * (xv[0] - math.sqrt(alpha) * y[:, 0]) ** 2 / beta - 0.5 * math.log(2 * math.pi * beta) - lq_t
    sigma2 = beta / alpha
    log_p = -0.5 * (y[:, 0] - mu[0]) ** 2 / sigma2 - 0.5 * math.log(2 * math.pi * sigma2)
    log_c = -0.5 * math.log(alpha) + float(log_density(o_prev, mu)) - 0.5 * beta * float(s @ s) - lq_t
    recon = log_p + tw.zeta(target, sch, t, xv, y) + log_c
    return float(np.max(np.abs(np.expm1(recon - log_bayes))))


def criterion_tilting_identity(quick: bool = False) -> list[Check]:
    target, sch, t = moment_setup()
    err = max(tilting_reconstruction_error(target, sch, t, x) for x in MOMENT_PROBES)
    return [_le("tilting_reconstruction_rel_error", err, 1e-8)]


def criterion_leading_order(quick: bool = False, x: float = 0.4) -> list[Check]:
    """Residuals of the leading-order tilting expansions against the step size."""
    target = default_mixture_1d()
    hs = _step_sizes(ORDER_TS)
    r_ep, r_diff = [], []
    for h in hs:
        rep = tw.leading_order_report(target, _two_level(h), 2, [x])
        r_ep.append(abs(rep.residuals["EP"]))
        r_diff.append(abs(rep.residuals["diff"]))
    o_ep = stats.linregress(np.log(hs), np.log(r_ep)).slope
    o_diff = stats.linregress(np.log(hs), np.log(r_diff)).slope
    return [
        _ge("leading_EP_residual_order", o_ep, 1.9, residuals=r_ep),
        _ge("leading_quad_diff_residual_order", o_diff, 2.7, residuals=r_diff),
    ]


# oracles -----------------------------------------------------------------------------------------


def fd_targets():
    mix = GaussianMixture(
        [0.3, 0.5, 0.2],
        [[-1.0, 0.5], [1.5, -0.5], [0.0, 2.0]],
        [[[0.6, 0.2], [0.2, 0.4]], [[0.3, -0.1], [-0.1, 0.5]], [[0.8, 0.0], [0.0, 0.2]]],
    )
    atoms = AtomCloud([0.2, 0.5, 0.3], [[-1.0, 0.0], [1.0, 0.5], [0.0, -1.5]])
    return {"mixture": mix, "atoms": atoms}


def fd_relative_errors(oracle, x: np.ndarray, h: float) -> tuple[float, float, float]:
    """Score, Hessian and third tensor against central differences at one point.

    Score and Hessian difference the log-density; the third tensor differences the
    analytic score twice, which keeps rounding error below the check level.
    """
    d = x.size
    E = np.eye(d) * h
    f = lambda z: float(log_density(oracle, z))
    sc = lambda z: derivatives(oracle, z)[0]
    s, H, T3 = derivatives(oracle, x)
    s_fd = np.array([(f(x + E[i]) - f(x - E[i])) / (2 * h) for i in range(d)])
    H_fd = np.zeros((d, d))
    f0 = f(x)
    for i in range(d):
        H_fd[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / h**2
        for j in range(i + 1, d):
            H_fd[i, j] = H_fd[j, i] = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h**2)
    T_fd = np.zeros((d, d, d))
    s0 = sc(x)
    for i in range(d):
        for j in range(d):
            if i == j:
                T_fd[i, j] = (sc(x + E[i]) - 2 * s0 + sc(x - E[i])) / h**2
            else:
                T_fd[i, j] = (sc(x + E[i] + E[j]) - sc(x + E[i] - E[j]) - sc(x - E[i] + E[j]) + sc(x - E[i] - E[j])) / (4 * h**2)

    def rel(a, ref):
        return float(np.max(np.abs(a - ref)) / max(np.max(np.abs(ref)), 1.0))

    return rel(s, s_fd), rel(H, H_fd), rel(T3, T_fd)


def criterion_derivative_oracles(quick: bool = False, n_probes: int = 50, seed: int = 0) -> list[Check]:
    if quick:
        n_probes = min(n_probes, 10)
    worst = np.zeros(3)
    for k, (name, target) in enumerate(fd_targets().items()):
        for j, abar in enumerate((0.99, 0.9, 0.5, 0.1)):
            o = marginal(target, abar)
            rng = stream(seed, k, j)
            x0 = target.sample(n_probes, rng)
            probes = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * rng.standard_normal(x0.shape)
            scale = math.sqrt(float(np.min(np.linalg.eigvalsh(o.component_covs))))
            for x in probes:
                worst = np.maximum(worst, fd_relative_errors(o, x, 1e-3 * scale))
    return [
        _le("fd_score_rel_error", worst[0], 1e-5),
        _le("fd_hessian_rel_error", worst[1], 1e-5),
        _le("fd_third_rel_error", worst[2], 1e-5),
    ]


def criterion_hessian_matching(quick: bool = False, n_samples: int = 10**6, seed: int = 3) -> list[Check]:
    if quick:
        n_samples = min(n_samples, 2 * 10**5)
    sch = make_constant(64, 2.0)
    t = 8
    g = gaussian([0.5], [[0.6]])
    closed = est.matching_identity_check(g, sch, t, "poly2", 0, 6, seed, method="closed_form")["max_discrepancy"]
    quad = max(
        est.matching_identity_check(tg, sch, t, "poly2", 0, 4, seed, method="quadrature")["max_discrepancy"]
        for tg in (g, default_mixture_1d(), AtomCloud([0.3, 0.7], [[0.0], [1.0]]))
    )
    s = est.fit_score(g, sch, t, "poly2", n_samples, seed)
    v = est.fit_v(g, sch, t, "poly2", n_samples, seed)
    H = est.assemble_H(v, s, sch, t)
    probes = np.linspace(-1.5, 2.0, 10)[:, None]
    se = est.assembled_hessian_se(g, sch, t, "poly2", n_samples, seed, probes)
    z = np.abs(H(probes) - derivatives(sch.oracle(g, t), probes)[1]) / se
    return [
        _le("matching_identity_quadrature", quad, 1e-6),
        _le("matching_identity_closed_form", closed, 1e-8),
        _le("assembled_hessian_max_z", float(z.max()), 3.0),
    ]


# schedules and bounds ----------------------------------------------------------------------------


def criterion_schedule_properties(quick: bool = False) -> list[Check]:
    T, c, delta = 1024, 3.0, 0.05
    sch = make_li(T, c, delta)
    diag = diagnostics(sch, 2)
    return [
        _le("li_first_step_offset", abs(sch.beta_at(1) - delta), 0.0),
        _le("li_abar_T", diag["abar_T"], T ** (-c / 2 + 0.2)),
        _le("li_max_ratio_p2", diag["max_ratio"], 16 * c * math.log(T) / (delta * T)),
    ]


def criterion_w2_first_step(quick: bool = False, n: int = 10**5, seed: int = 0) -> list[Check]:
    alpha_1 = 1.0 - 0.05
    out = []
    for name, target in (("gaussian", standard_normal(2)), ("atoms", AtomCloud([0.4, 0.6], [[-1.0, 0.5], [1.0, -0.5]]))):
        r = met.coupling_w2_check(target, alpha_1, n, seed)
        limit = r["bound"] * (1 + 4 / math.sqrt(n))
        out.append(_le(f"w2_first_step_{name}", r["mc_estimate"] / limit, 1.0, **r))
    return out


def criterion_init_error(quick: bool = False) -> list[Check]:
    mu = np.array([1.0, -2.0])
    out = []
    for T in (256, 1024):
        sch = make_li(T, 3.0, 0.05)
        exact, _ = met.init_error(point_mass(mu), sch)
        ab = sch.abar_at(T)
        limit = 0.5 * float(mu @ mu) * ab + 2 * ab**2
        out.append(_le(f"init_error_ratio_T{T}", exact / limit, 1.0, exact=exact, bound=limit))
    return out


CRITERIA = {
    1: criterion_regular_rate,
    2: criterion_accelerated_rate,
    3: criterion_estimation_term,
    4: criterion_tweedie_moments,
    5: criterion_moment_orders,
    6: criterion_tilting_identity,
    7: criterion_leading_order,
    8: criterion_derivative_oracles,
    9: criterion_hessian_matching,
    10: criterion_schedule_properties,
    11: criterion_w2_first_step,
    12: criterion_init_error,
    13: criterion_bounded_support,
}

SUITES = {
    "rates": (1, 2, 3, 13),
    "tweedie": (4, 5, 6, 7),
    "oracles": (8, 9),
    "bounds": (10, 11, 12),
}
SUITES["all"] = tuple(sorted(set().union(*SUITES.values())))


def run_suite(name: str, quick: bool = False) -> list[Check]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    checks = []
    for k in SUITES[name]:
        checks.extend(CRITERIA[k](quick=quick))
    return checks
