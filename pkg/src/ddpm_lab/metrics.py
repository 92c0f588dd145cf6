"""KL machinery: exact Gaussian chains, quadrature decompositions, W2 checks and rate fits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .quadrature import QuadratureSpec, integrate, refine
from .samplers import ExactModel, ReverseSamplerSpec, build_model, clip_psd, stream
from .schedules import NoiseSchedule
from .targets import ContractError, GaussianMixture, Target, derivatives, is_single_gaussian, log_density


@dataclass
class KLBreakdown:
    init_error: float
    est_error: float
    rev_error_per_step: np.ndarray  # indexed by t = stop_at+1..T, ascending
    est_error_per_step: np.ndarray | None = None
    steps: np.ndarray | None = None

    @property
    def rev_error(self) -> float:
        return float(np.sum(self.rev_error_per_step))

    @property
    def total(self) -> float:
        return self.init_error + self.est_error + self.rev_error


@dataclass
class GaussianChainState:
    ts: np.ndarray  # T, T-1, ..., stop_at
    means: np.ndarray
    covs: np.ndarray
    kl: float  # KL(Q_stop || P^_stop)
    breakdown: KLBreakdown
    clip_events: int = 0


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    Ts: np.ndarray
    values: np.ndarray
    excluded: list = field(default_factory=list)


def _xm_log1p(mu: np.ndarray) -> np.ndarray:
    """mu - log(1 + mu) without cancellation for small mu."""
    mu = np.asarray(mu, dtype=float)
    small = np.abs(mu) < 1e-3
    series = mu**2 / 2 - mu**3 / 3 + mu**4 / 4 - mu**5 / 5
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = mu - np.log1p(mu)
    return np.where(small, series, direct)


def gaussian_kl_delta(S0, D, dm) -> float:
    """KL(N(m, S0) || N(m + dm, S0 + D)) computed from the differences directly."""
    S0 = np.atleast_2d(np.asarray(S0, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    dm = np.atleast_1d(np.asarray(dm, dtype=float))
    S1 = S0 + D
    try:
        L = np.linalg.cholesky(S1)
        np.linalg.cholesky(S0)
    except np.linalg.LinAlgError as exc:
        raise ContractError("covariances must be symmetric positive definite") from exc
    Li_D = np.linalg.solve(L, D)
    M = np.linalg.solve(L, Li_D.T)
    mu = np.linalg.eigvalsh(-0.5 * (M + M.T))
    z = np.linalg.solve(L, dm)
    return float(0.5 * (np.sum(_xm_log1p(mu)) + z @ z))


def gaussian_kl(m0, S0, m1, S1) -> float:
    S0 = np.atleast_2d(np.asarray(S0, dtype=float))
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    return gaussian_kl_delta(S0, S1 - S0, np.atleast_1d(m1) - np.atleast_1d(m0))


def pinsker_tv(kl: float) -> float:
    if kl < 0:
        raise ContractError("KL must be nonnegative")
    return float(min(1.0, np.sqrt(kl / 2.0)))


def _as_model(spec, target, schedule, model, seed):
    return model if model is not None else build_model(spec, target, schedule, seed)


def gaussian_chain(target: Target, schedule: NoiseSchedule, spec: ReverseSamplerSpec, model=None, seed: int = 0) -> GaussianChainState:
    """Exact marginals of the reverse chain for a Gaussian Q_0 and affine score errors.

    Tracks the deviation of every marginal from the true q_t so that tiny KL
    values keep their relative precision.
    """
    if not (isinstance(target, GaussianMixture) and is_single_gaussian(target)):
        raise ContractError("gaussian_chain needs a single Gaussian target")
    model = _as_model(spec, target, schedule, model, seed)
    d = target.dim
    I = np.eye(d)
    m0, S0 = target.means[0], target.covs[0]
    T, stop = schedule.T, spec.stop_at

    def marg(t):
        ab, v = schedule.abar_at(t), schedule.one_minus_abar_at(t)
        return np.sqrt(ab) * m0, ab * S0 + v * I

    mT, ST = marg(T)
    dev_m = -mT
    dev_S = schedule.abar_at(T) * (I - S0)
    init = gaussian_kl_delta(ST, dev_S, dev_m)
    ts, means, covs = [T], [mT + dev_m], [ST + dev_S]
    est, rev = np.zeros(T - stop), np.zeros(T - stop)
    clips = 0
    for t in range(T, stop, -1):
        alpha, beta = schedule.alpha_at(t), schedule.beta_at(t)
        sa, sigma2 = np.sqrt(alpha), beta / alpha
        m_t, S_t = marg(t)
        P = np.linalg.inv(S_t)
        L, b = model.affine_error(t)
        A = (I - beta * P + beta * L) / sa
        A0 = (I - beta * P) / sa
        C = sigma2 * I - beta**2 / alpha * P  # true posterior covariance
        if spec.kind == "regular":
            K0 = sigma2 * I
            K = K0
            dK = np.zeros((d, d))
        else:
            K0 = C
            E = model.hessian_error(t)
            K, _, n_clip = clip_psd(sigma2 * (I + beta * (-P + E)), spec.psd_floor * sigma2)
            clips += n_clip
            dK = K - K0
        # one-step defects of the propagated marginal relative to q_{t-1}
        cross = beta / sa * (L @ S_t @ A0.T + A0 @ S_t @ L.T) + beta**2 / alpha * L @ S_t @ L.T
        base = beta**2 / alpha * P if spec.kind == "regular" else np.zeros((d, d))
        defect_S = base + cross + dK
        defect_m = beta / sa * (L @ m_t + b)
        dev_m = A @ dev_m + defect_m
        dev_S = A @ dev_S @ A.T + defect_S
        dev_S = 0.5 * (dev_S + dev_S.T)
        m_prev, S_prev = marg(t - 1)
        ts.append(t - 1)
        means.append(m_prev + dev_m)
        covs.append(S_prev + dev_S)
        i = t - stop - 1
        # estimation term: E_{Q_t} E_{Q_{t-1|t}} log p / p^
        Ki = np.linalg.inv(K)
        e_mean = L @ m_t + b
        quad = beta**2 / alpha * (e_mean @ Ki @ e_mean + np.trace(L.T @ Ki @ L @ S_t))
        if isinstance(model, ExactModel):
            est[i] = 0.0
        elif spec.kind == "regular":
            est[i] = 0.5 * quad
        else:
            est[i] = 0.5 * (np.linalg.slogdet(K)[1] - np.linalg.slogdet(K0)[1] + np.trace(Ki @ C) - d + quad)
        # reverse-step term: KL(N(mu, C) || N(mu, K0)); exact zero for the accelerated kernel
        rev[i] = gaussian_kl_delta(C, K0 - C, np.zeros(d)) if spec.kind == "regular" else 0.0
    m_stop, S_stop = marg(stop)
    kl = gaussian_kl_delta(S_stop, dev_S, dev_m)
    steps = np.arange(stop + 1, T + 1)
    bd = KLBreakdown(init, float(est.sum()), rev, est, steps)
    return GaussianChainState(np.array(ts), np.array(means), np.array(covs), kl, bd, clips)


def _window(oracle, pad: float = 14.0):
    mu = oracle.component_means[:, 0]
    sd = np.sqrt(np.asarray(oracle.component_covs)[:, 0, 0])
    return float(np.min(mu - pad * sd)), float(np.max(mu + pad * sd))


def _require_1d(target):
    if target.dim != 1:
        raise ContractError("quadrature KL machinery supports d = 1")


def init_kl_quadrature(target: Target, schedule: NoiseSchedule, spec: QuadratureSpec = QuadratureSpec(), atol: float = 1e-15) -> float:
    _require_1d(target)
    o = schedule.oracle(target, schedule.T)
    lo, hi = _window(o)

    def f(nodes):
        lq = log_density(o, nodes)
        return np.exp(lq) * (lq + 0.5 * nodes[:, 0] ** 2 + 0.5 * np.log(2 * np.pi))

    return float(integrate(f, [lo], [hi], spec, atol=atol))


def _kernel_terms(spec, model, schedule, t, x):
    """True kernel (mu, K0), estimated kernel (muh, K), posterior variance C at 1D points x (m, 1)."""
    alpha, beta = schedule.alpha_at(t), schedule.beta_at(t)
    sigma2 = beta / alpha
    o = schedule.oracle(model.target, t)
    s, h, _ = derivatives(o, x)
    s, h = s[:, 0], h[:, 0, 0]
    xs = x[:, 0]
    mu = (xs + beta * s) / np.sqrt(alpha)
    C = sigma2 * (1.0 + beta * h)
    if isinstance(model, ExactModel):
        sh, hh = s, h
    else:
        sh = model.score(t, x)[:, 0]
        hh = model.hessian(t, x)[:, 0, 0]
    muh = (xs + beta * sh) / np.sqrt(alpha)
    if spec.kind == "regular":
        K0 = np.full_like(xs, sigma2)
        K = K0
    else:
        K0 = C
        K = np.maximum(sigma2 * (1.0 + beta * hh), spec.psd_floor * sigma2)
    return mu, K0, muh, K, C


def kl_decomposition_quadrature(
    target: Target,
    schedule: NoiseSchedule,
    spec: ReverseSamplerSpec,
    grid: QuadratureSpec = QuadratureSpec(rtol=1e-10, rule="trapezoid"),
    model=None,
    seed: int = 0,
    max_T: int = 512,
    atol: float = 1e-15,
) -> KLBreakdown:
    """init + estimation + reverse-step terms for a 1D target by (nested) quadrature."""
    _require_1d(target)
    if schedule.T > max_T:
        raise ContractError(f"nested quadrature budget allows T <= {max_T}")
    model = _as_model(spec, target, schedule, model, seed)
    exact = isinstance(model, ExactModel)
    init = init_kl_quadrature(target, schedule, grid, atol)
    T, stop = schedule.T, spec.stop_at
    est, rev = np.zeros(T - stop), np.zeros(T - stop)
    U = 12.0
    for t in range(stop + 1, T + 1):
        i = t - stop - 1
        alpha, beta = schedule.alpha_at(t), schedule.beta_at(t)
        o_t = schedule.oracle(target, t)
        o_prev = schedule.oracle(target, t - 1)
        lo, hi = _window(o_t)
        if not exact:

            def fe(nodes):
                mu, K0, muh, K, C = _kernel_terms(spec, model, schedule, t, nodes)
                val = 0.5 * (np.log(K / K0) + C / K - C / K0 + (mu - muh) ** 2 / K)
                return np.exp(log_density(o_t, nodes)) * val

            est[i] = float(integrate(fe, [lo], [hi], grid, atol=atol))

        def fr(nodes):
            x = nodes[:, :1]
            u = nodes[:, 1]
            mu, K0, _, _, C = _kernel_terms(spec, model, schedule, t, x)
            sd = np.sqrt(C)
            y = (mu + sd * u)[:, None]
            lq_t = log_density(o_t, x)
            log_post = (
                log_density(o_prev, y)
                - 0.5 * (x[:, 0] - np.sqrt(alpha) * y[:, 0]) ** 2 / beta
                - 0.5 * np.log(2 * np.pi * beta)
                - lq_t
            )
            log_p = -0.5 * (y[:, 0] - mu) ** 2 / K0 - 0.5 * np.log(2 * np.pi * K0)
            post = np.exp(log_post)
            return np.exp(lq_t) * sd * post * (log_post - log_p)

        rev[i] = float(integrate(fr, [lo, -U], [hi, U], grid, atol=atol))
    steps = np.arange(stop + 1, T + 1)
    return KLBreakdown(init, float(est.sum()), rev, est, steps)


def kl_marginal_quadrature(
    target: Target, schedule: NoiseSchedule, spec: ReverseSamplerSpec, model=None, seed: int = 0, points_per_sd: float = 4.0
) -> float:
    """KL(Q_stop || P^_stop) for a 1D target by propagating the sampler density on a grid.

    The transition integral uses the trapezoid rule on a uniform grid, which is
    spectrally accurate for these smooth, rapidly decaying integrands.
    """
    _require_1d(target)
    model = _as_model(spec, target, schedule, model, seed)
    T, stop = schedule.T, spec.stop_at
    o_stop = schedule.oracle(target, stop)
    lo0, hi0 = _window(o_stop, 12.0)
    lo, hi = min(lo0, -12.0), max(hi0, 12.0)
    # grid spacing resolves the narrowest kernel anywhere in the chain
    probe = np.linspace(lo, hi, 2001)[:, None]
    sd_min = np.inf
    for t in range(stop + 1, T + 1):
        _, _, _, K, _ = _kernel_terms(spec, model, schedule, t, probe)
        sd_min = min(sd_min, float(np.sqrt(K.min())))
    h = sd_min / points_per_sd
    x = np.arange(lo, hi + h / 2, h)
    n = x.size
    p = np.exp(-0.5 * x**2) / np.sqrt(2 * np.pi)
    band = 12.0
    for t in range(T, stop, -1):
        _, _, muh, K, _ = _kernel_terms(spec, model, schedule, t, x[:, None])
        sd = np.sqrt(K)
        half = int(np.ceil(band * sd.max() / h)) + 1
        offs = np.arange(-half, half + 1)
        centre = np.rint((muh - lo) / h).astype(int)
        idx = centre[:, None] + offs[None, :]
        ok = (idx >= 0) & (idx < n)
        idxc = np.clip(idx, 0, n - 1)
        y = x[idxc]
        kern = np.exp(-0.5 * (y - muh[:, None]) ** 2 / K[:, None]) / np.sqrt(2 * np.pi * K[:, None])
        contrib = np.where(ok, kern * (p * h)[:, None], 0.0)
        p = np.bincount(idxc.ravel(), weights=contrib.ravel(), minlength=n)
    lq = log_density(o_stop, x[:, None])
    q = np.exp(lq)
    keep = q >= 1e-25 * q.max()
    if np.any(p[keep] <= 0):
        return float("inf")
    return float(h * np.sum(q[keep] * (lq[keep] - np.log(p[keep]))))


def init_error(target: Target, schedule: NoiseSchedule) -> tuple[float, float]:
    """Exact KL(Q_T || N(0, I)) and the bound E||X_0||^2 abar_T / 2 - (d/2)(abar_T + log(1 - abar_T))."""
    d = target.dim
    ab, v = schedule.abar_at(schedule.T), schedule.one_minus_abar_at(schedule.T)
    if is_single_gaussian(target):
        if isinstance(target, GaussianMixture):
            m0, S0 = target.means[0], target.covs[0]
        else:
            m0, S0 = target.atoms[0], np.zeros((d, d))
        S = ab * S0 + v * np.eye(d)
        exact = gaussian_kl_delta(S, np.eye(d) - S, -np.sqrt(ab) * m0)
    elif d == 1:
        exact = init_kl_quadrature(target, schedule)
    else:
        raise ContractError("exact initialization error needs a single component or d = 1")
    second = float(np.trace(target.second_moment()))
    bound = 0.5 * second * ab - 0.5 * d * (ab + np.log1p(-ab))
    return float(exact), float(bound)


def coupling_w2_check(target: Target, alpha_1: float, n_samples: int, seed: int) -> dict:
    """Synchronous coupling X_1 = sqrt(alpha_1) X_0 + sqrt(1 - alpha_1) W against the first-step bound."""
    if not 0.0 < alpha_1 <= 1.0:
        raise ContractError("alpha_1 must lie in (0, 1]")
    d = target.dim
    rng = stream(seed, 0, 7)
    x0 = target.sample(n_samples, rng)
    w = rng.standard_normal((n_samples, d))
    x1 = np.sqrt(alpha_1) * x0 + np.sqrt(1.0 - alpha_1) * w
    dist2 = np.sum((x1 - x0) ** 2, axis=1)
    M2 = float(np.linalg.eigvalsh(target.second_moment()).max())
    second = float(np.trace(target.second_moment()))
    return {
        "mc_estimate": float(dist2.mean()),
        "mc_se": float(dist2.std(ddof=1) / np.sqrt(n_samples)),
        "bound": (1.0 - alpha_1) * (M2 + 1.0) * d,
        "exact": (1.0 - alpha_1) * d + (1.0 - np.sqrt(alpha_1)) ** 2 * second,
        "M2": M2,
    }


def fit_rate(points) -> RateFit:
    """Least-squares slope of log(value) against log(T)."""
    pts = [(float(T), float(v)) for T, v in points]
    excluded = [p for p in pts if not (p[1] > 0 and np.isfinite(p[1]))]
    if excluded:
        warnings.warn(f"excluded {len(excluded)} nonpositive or non-finite values from the rate fit", stacklevel=2)
    pts = [p for p in pts if p not in excluded]
    if len(pts) < 4:
        raise ContractError("rate fit needs at least 4 positive points")
    Ts = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    if np.unique(Ts).size < 2:
        raise ContractError("degenerate abscissa")
    res = stats.linregress(np.log(Ts), np.log(vals))
    return RateFit(float(res.slope), float(res.intercept), float(res.rvalue**2), Ts, vals, excluded)


def rate_point(target: Target, schedule: NoiseSchedule, spec: ReverseSamplerSpec, seed: int = 0, max_quad_T: int = 512) -> dict:
    """KL at the end of the reverse chain plus its decomposition terms for one (T, seed) cell.

    kl_total is the exact KL(Q_stop || P^_stop); the three terms are the upper-bound
    decomposition, so kl_init + kl_est + kl_rev >= kl_total. Terms that the budget
    does not allow are NaN.
    """
    if is_single_gaussian(target) and isinstance(target, GaussianMixture):
        try:
            st = gaussian_chain(target, schedule, spec, seed=seed)
        except ContractError:
            if target.dim != 1:
                raise
        else:
            b = st.breakdown
            return {"kl_total": st.kl, "kl_init": b.init_error, "kl_est": b.est_error, "kl_rev": b.rev_error}
    if target.dim != 1:
        raise ContractError("no KL oracle for this target: need a single Gaussian or d = 1")
    model = build_model(spec, target, schedule, seed)
    out = {"kl_total": kl_marginal_quadrature(target, schedule, spec, model=model)}
    if schedule.T <= max_quad_T:
        b = kl_decomposition_quadrature(target, schedule, spec, model=model, max_T=max_quad_T)
        out.update(kl_init=b.init_error, kl_est=b.est_error, kl_rev=b.rev_error)
    else:
        out.update(kl_init=init_kl_quadrature(target, schedule), kl_est=float("nan"), kl_rev=float("nan"))
    return out
