"""Posterior moments of Q_{t-1|t}, tilting factors and their expansions.

Work in the tilted coordinate xt~ = sqrt(alpha_t) / (1 - alpha_t) x_t.  The
posterior of x_{t-1} given x_t is an exponential family in xt~ whose log
partition function kappa satisfies

    d kappa / d xt~            = mu_t(x_t)
    d^2 kappa / d xt~^2        = (1-a)/a I + (1-a)^2/a  Hess log q_t
    d^k kappa / d xt~^k        = (1-a)^k / a^(k/2)  d^k log q_t      (k >= 3)

so the derivatives of kappa are the posterior cumulants and every central
moment is a sum over set partitions (blocks of size >= 2) of products of them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ._combinatorics import fill_symmetric, moments_from_cumulants, partitions_min_block
from .quadrature import QuadratureError, QuadratureSpec, refine
from .schedules import NoiseSchedule
from .targets import ContractError, Target, derivative_tensors, derivatives, log_density

DEFAULT_QUAD = QuadratureSpec()


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    cov: np.ndarray
    third: np.ndarray
    fourth: np.ndarray | None
    fifth_diag: np.ndarray
    sixth_diag: dict[tuple[int, ...], float]
    sixth_diag_pairs: dict[tuple[int, ...], float] | None = None
    log_normalizer: float | None = None


@dataclass
class TiltingReport:
    E_P_zeta: float
    E_Q_zeta: float
    E_P_zeta2: float
    E_P_zeta3: float
    E_Q_zeta_prime: float
    E_Paccel_zeta_prime: float
    leading_EP: float
    leading_EQ: float
    leading_diff: float
    residuals: dict = field(default_factory=dict)

    @property
    def quad_diff(self) -> float:
        return self.E_Q_zeta_prime - self.E_Paccel_zeta_prime


def sixth_patterns(d: int) -> list[tuple[int, ...]]:
    """Index tuples (i, i, j, j, k, k) with i <= j <= k."""
    return [(i, i, j, j, k, k) for i, j, k in itertools.combinations_with_replacement(range(d), 3)]


def _step(schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.T:
        raise ContractError(f"t must lie in 1..{schedule.T}")
    return schedule.alpha_at(t), schedule.beta_at(t)


def kappa_derivatives(target: Target, schedule: NoiseSchedule, t: int, x_t, order: int = 6) -> dict[int, np.ndarray]:
    """Derivatives of kappa in xt~ up to ``order`` (posterior cumulants)."""
    alpha, beta = _step(schedule, t)
    x = np.asarray(x_t, dtype=float)
    D = derivative_tensors(schedule.oracle(target, t), x, order)
    d = x.size
    kap = {1: (x + beta * D[0]) / np.sqrt(alpha), 2: beta / alpha * np.eye(d) + beta**2 / alpha * D[1]}
    for k in range(3, order + 1):
        kap[k] = beta**k / alpha ** (k / 2) * D[k - 1]
    return kap


def posterior_moments_formula(target: Target, schedule: NoiseSchedule, t: int, x_t) -> PosteriorMoments:
    kap = kappa_derivatives(target, schedule, t, x_t, 6)
    d = kap[1].size
    fourth = fill_symmetric(d, 4, lambda idx: moments_from_cumulants(kap, idx)) if d <= 4 else None
    fifth = np.array([moments_from_cumulants(kap, (i,) * 5) for i in range(d)])
    sixth = {p: float(moments_from_cumulants(kap, p)) for p in sixth_patterns(d)}
    pairs = {}
    for p in sixth_patterns(d):
        tot = 0.0
        for part in partitions_min_block(6, 2):
            if all(len(b) == 2 for b in part):
                tot += np.prod([kap[2][p[b[0]], p[b[1]]] for b in part])
        pairs[p] = float(tot)
    return PosteriorMoments(kap[1], kap[2], kap[3], fourth, fifth, sixth, pairs)


def _posterior_setup(target, schedule, t, x):
    if target.dim > 2:
        raise ContractError("quadrature oracles support d <= 2")
    alpha, beta = _step(schedule, t)
    o_t = schedule.oracle(target, t)
    o_prev = schedule.oracle(target, t - 1) if t > 1 else _origin_oracle(target)
    s, h, _ = derivatives(o_t, x)
    center = (x + beta * s) / np.sqrt(alpha)
    cov = beta / alpha * (np.eye(x.size) + beta * h)
    sd = np.sqrt(max(beta / alpha, float(np.linalg.eigvalsh(cov).max())))

    def logp(y):
        r = x - np.sqrt(alpha) * y
        return log_density(o_prev, y) - 0.5 * np.sum(r * r, axis=-1) / beta

    return center, sd, logp, o_prev


def _origin_oracle(target):
    from .targets import MarginalOracle

    return MarginalOracle(target, 1.0, 0.0)


def _posterior_expect(target, schedule, t, x, functionals, spec: QuadratureSpec, atol_scale):
    """E_Q[f(y)] for each f in ``functionals`` plus the grid mass; returns (values, log_Z)."""
    center, sd, logp, _ = _posterior_setup(target, schedule, t, x)
    hw = spec.half_width * sd
    lo, hi = center - hw, center + hw
    ref = float(logp(center))

    def evaluate(nodes, w):
        p = np.exp(logp(nodes) - ref)
        Z = w @ p
        vals = [w @ (p * f(nodes)) / Z for f in functionals]
        return np.array([Z] + vals)

    atol = np.concatenate([[0.0], np.asarray(atol_scale, dtype=float)])
    val, nodes, w = refine(evaluate, lo, hi, spec, atol)
    p = np.exp(logp(nodes) - ref)
    outer = np.any(np.abs(nodes - center) > hw * (11.0 / 12.0), axis=-1)
    deficit = (w @ (p * outer)) / val[0]
    if deficit > spec.deficit_tol:
        raise QuadratureError(f"grid too narrow: outer-band mass fraction {deficit:.3g}")
    d = x.size
    log_Z = np.log(val[0]) + ref - 0.5 * d * np.log(2.0 * np.pi * schedule.beta_at(t))
    return val[1:], log_Z


def posterior_moments_quadrature(
    target: Target, schedule: NoiseSchedule, t: int, x_t, grid: QuadratureSpec = DEFAULT_QUAD
) -> PosteriorMoments:
    """Moments of q_{t-1|t}(. | x_t) by brute-force integration (d <= 2)."""
    x = np.asarray(x_t, dtype=float)
    d = x.size
    center, sd, _, _ = _posterior_setup(target, schedule, t, x)
    # pass 1: mean
    mean_vals, _ = _posterior_expect(
        target, schedule, t, x, [lambda y, i=i: y[:, i] for i in range(d)], grid, np.full(d, 1e-15 * sd)
    )
    m = mean_vals
    keys = []
    for k in range(2, 7):
        keys += list(itertools.combinations_with_replacement(range(d), k))
    funcs = [lambda y, idx=idx: np.prod((y - m)[:, list(idx)], axis=1) for idx in keys]
    atol = [1e-14 * sd ** len(idx) for idx in keys]
    vals, log_Z = _posterior_expect(target, schedule, t, x, funcs, grid, atol)
    table = dict(zip(keys, vals))

    def entry(idx):
        return table[tuple(sorted(idx))]

    cov = fill_symmetric(d, 2, entry)
    third = fill_symmetric(d, 3, entry)
    fourth = fill_symmetric(d, 4, entry)
    fifth = np.array([entry((i,) * 5) for i in range(d)])
    sixth = {p: float(entry(p)) for p in sixth_patterns(d)}
    return PosteriorMoments(m, cov, third, fourth, fifth, sixth, None, float(log_Z))


def _tilt_parts(target, schedule, t, x):
    alpha, beta = _step(schedule, t)
    x = np.asarray(x, dtype=float)
    o_t = schedule.oracle(target, t)
    o_prev = schedule.oracle(target, t - 1) if t > 1 else _origin_oracle(target)
    s, h, _ = derivatives(o_t, x)
    mu = (x + beta * s) / np.sqrt(alpha)
    return alpha, beta, s, h, mu, o_prev


def _B_matrix(beta, h):
    M = np.eye(h.shape[0]) + beta * h
    if np.linalg.cond(M) > 1e14:
        raise ContractError("accelerated tilting undefined at this step size")
    return np.eye(h.shape[0]) - np.linalg.inv(M)


def zeta(target: Target, schedule: NoiseSchedule, t: int, x_t, x_prev, accelerated: bool = False):
    """Tilting exponent zeta (or zeta' when ``accelerated``) at x_prev; vectorized over x_prev."""
    alpha, beta, s, h, mu, o_prev = _tilt_parts(target, schedule, t, x_t)
    y = np.asarray(x_prev, dtype=float)
    dy = y - mu
    z = log_density(o_prev, y) - log_density(o_prev, mu) - dy @ (np.sqrt(alpha) * s)
    if accelerated:
        B = _B_matrix(beta, h)
        z = z - 0.5 * alpha / beta * np.einsum("...i,ij,...j->...", dy, B, dy)
    return z


def _gaussian_expect(mean, cov, f, spec: QuadratureSpec, atol=0.0):
    """E[f(y)] for y ~ N(mean, cov) in whitened coordinates."""
    lam, V = np.linalg.eigh(cov)
    if np.any(lam <= 0):
        raise ContractError("reverse kernel covariance is not positive definite")
    L = V * np.sqrt(lam)
    d = mean.size
    hw = np.full(d, spec.half_width)

    def evaluate(nodes, w):
        phi = np.exp(-0.5 * np.sum(nodes**2, axis=1)) / (2 * np.pi) ** (d / 2)
        vals = f(mean + nodes @ L.T)
        return np.atleast_1d(np.tensordot(w * phi, vals, axes=(0, 0)))

    return refine(evaluate, -hw, hw, spec, atol)[0]


def expected_zeta(
    target: Target,
    schedule: NoiseSchedule,
    t: int,
    x_t,
    law: str = "P",
    power: int = 1,
    grid: QuadratureSpec = DEFAULT_QUAD,
    prime: bool | None = None,
) -> float:
    """E[zeta^power] under P = N(mu_t, sigma_t^2 I), P_accel = N(mu_t, Sigma_t) or the true posterior Q.

    By default zeta' is used under P_accel and zeta otherwise.
    """
    if power not in (1, 2, 3):
        raise ContractError("power must be 1, 2 or 3")
    if target.dim > 2:
        raise ContractError("quadrature oracles support d <= 2")
    if prime is None:
        prime = law == "P_accel"
    alpha, beta, s, h, mu, _ = _tilt_parts(target, schedule, t, x_t)
    x = np.asarray(x_t, dtype=float)
    d = x.size
    # zeta scales like (1 - alpha); the absolute floor tracks that size
    atol = 1e-15 * beta**power

    def f(y):
        return zeta(target, schedule, t, x, y, accelerated=prime) ** power

    if law == "P":
        return float(_gaussian_expect(mu, beta / alpha * np.eye(d), f, grid, atol)[0])
    if law == "P_accel":
        return float(_gaussian_expect(mu, beta / alpha * (np.eye(d) + beta * h), f, grid, atol)[0])
    if law == "Q":
        return float(_posterior_expect(target, schedule, t, x, [f], grid, [atol])[0][0])
    raise ContractError(f"unknown law {law!r}")


def leading_order_report(target: Target, schedule: NoiseSchedule, t: int, x_t, grid: QuadratureSpec = DEFAULT_QUAD) -> TiltingReport:
    """Quadrature values of the tilting expectations next to their leading-order predictions."""
    alpha, beta, s, h, mu, o_prev = _tilt_parts(target, schedule, t, x_t)
    x = np.asarray(x_t, dtype=float)
    d = x.size
    sigma2 = beta / alpha
    Dp = derivative_tensors(o_prev, mu, 4)
    H_prev, T_prev, F_prev = Dp[1], Dp[2], Dp[3]
    T_t = derivatives(schedule.oracle(target, t), x)[2]
    fourth_term = sigma2**2 / 8.0 * sum(F_prev[i, i, j, j] for i in range(d) for j in range(d))
    lead_EP = 0.5 * sigma2 * np.trace(H_prev) + fourth_term
    cov_Q = sigma2 * np.eye(d) + beta**2 / alpha * h
    lead_EQ = 0.5 * np.sum(H_prev * cov_Q) + fourth_term
    lead_diff = beta**3 / (6.0 * alpha**1.5) * float(np.sum(T_prev * T_t))

    ev = {}
    for key, law, power, prime in (
        ("EP", "P", 1, False),
        ("EQ", "Q", 1, False),
        ("EP2", "P", 2, False),
        ("EP3", "P", 3, False),
        ("EQp", "Q", 1, True),
        ("EPap", "P_accel", 1, True),
    ):
        ev[key] = expected_zeta(target, schedule, t, x, law, power, grid, prime)
    rep = TiltingReport(
        ev["EP"], ev["EQ"], ev["EP2"], ev["EP3"], ev["EQp"], ev["EPap"], float(lead_EP), float(lead_EQ), lead_diff
    )
    rep.residuals = {
        "EP": rep.E_P_zeta - rep.leading_EP,
        "EQ": rep.E_Q_zeta - rep.leading_EQ,
        "diff": rep.quad_diff - rep.leading_diff,
    }
    return rep
