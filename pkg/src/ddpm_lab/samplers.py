"""Forward noising and the regular / accelerated reverse chains."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np

from .schedules import NoiseSchedule
from .targets import AtomCloud, ContractError, Target, derivatives

Kind = Literal["regular", "accelerated"]

# stream tags mixed into every derived seed
TAG_INIT, TAG_STEP, TAG_FORWARD, TAG_FIT, TAG_PERTURB = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...); SeedSequence hashes the key into the state."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))))


class SamplerFailure(ArithmeticError):
    def __init__(self, t: int, x: np.ndarray, what: str):
        super().__init__(f"non-finite {what} at t={t}")
        self.t = t
        self.x = x


@dataclass
class SampleBatch:
    t: int
    x: np.ndarray
    rng_lineage: dict
    trajectory: dict[int, np.ndarray] | None = None
    clip_events: int = 0


class ScoreModel(Protocol):
    target: Target
    schedule: NoiseSchedule

    def score(self, t: int, x: np.ndarray) -> np.ndarray: ...

    def hessian(self, t: int, x: np.ndarray) -> np.ndarray: ...


class ExactModel:
    """True score and Hessian of log q_t."""

    def __init__(self, target: Target, schedule: NoiseSchedule):
        self.target = target
        self.schedule = schedule
        self._oracles: dict[int, object] = {}

    def oracle(self, t: int):
        if t not in self._oracles:
            self._oracles[t] = self.schedule.oracle(self.target, t)
        return self._oracles[t]

    def derivs(self, t: int, x: np.ndarray):
        s, h, _ = derivatives(self.oracle(t), x)
        return s, h

    def score(self, t, x):
        return self.derivs(t, x)[0]

    def hessian(self, t, x):
        return self.derivs(t, x)[1]

    def affine_error(self, t):
        d = self.target.dim
        return np.zeros((d, d)), np.zeros(d)

    def hessian_error(self, t):
        return np.zeros((self.target.dim,) * 2)


class _FourierField:
    """Smooth random field sum_k C_k cos(w_k . x + phi_k), frozen given the seed."""

    def __init__(self, d: int, out_shape: tuple[int, ...], rng: np.random.Generator, n_features: int = 16, length: float = 1.0):
        self.omega = rng.standard_normal((n_features, d)) / length
        self.phase = rng.uniform(0.0, 2.0 * np.pi, n_features)
        C = rng.standard_normal((n_features,) + out_shape)
        if len(out_shape) == 2:
            C = 0.5 * (C + np.swapaxes(C, 1, 2))
        self.coef = C / np.sqrt(n_features)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        arg = x @ self.omega.T + self.phase
        return np.tensordot(np.cos(arg), self.coef, axes=(-1, 0))

    def mean_square(self, means: np.ndarray, covs: np.ndarray, weights: np.ndarray) -> float:
        """E||field||^2 under a Gaussian mixture, in closed form.

        For x ~ N(m, S): E cos(a.x + b) = cos(a.m + b) exp(-a^T S a / 2).
        """

        def ecos(a, b):
            quad = np.einsum("kji,nil,kjl->kjn", a, covs, a)
            lin = np.einsum("kji,ni->kjn", a, means) + b[..., None]
            return np.einsum("n,kjn->kj", weights, np.cos(lin) * np.exp(-0.5 * quad))

        w, p = self.omega, self.phase
        diff = ecos(w[:, None] - w[None], p[:, None] - p[None])
        summ = ecos(w[:, None] + w[None], p[:, None] + p[None])
        flat = self.coef.reshape(self.coef.shape[0], -1)
        return float(np.einsum("ka,ja,kj->", flat, flat, 0.5 * (diff + summ)))


class PerturbedModel:
    """Base model plus a controlled error in either the score or the Hessian.

    additive_gaussian: a frozen smooth random field rescaled at every t so that
    E_{Q_t}||error||^2 equals the prescribed value exactly.
    systematic_bias: a constant vector (score) or constant symmetric matrix (Hessian).
    """

    def __init__(self, base, mse_target: float, mode: str, seed: int, component: str = "score"):
        if mse_target < 0:
            raise ContractError("mse_target must be nonnegative")
        if mode not in ("additive_gaussian", "systematic_bias"):
            raise ContractError(f"unknown perturbation mode {mode!r}")
        if component not in ("score", "hessian"):
            raise ContractError("component must be 'score' or 'hessian'")
        self.base = base
        self.target = base.target
        self.schedule = base.schedule
        self.mse_target = float(mse_target)
        self.mode = mode
        self.component = component
        d = self.target.dim
        shape = (d,) if component == "score" else (d, d)
        rng = stream(seed, TAG_PERTURB, 0 if component == "score" else 1)
        if mode == "systematic_bias":
            b = rng.standard_normal(shape)
            if component == "hessian":
                b = 0.5 * (b + b.T)
            self.bias = np.sqrt(self.mse_target) * b / np.linalg.norm(b)
        else:
            self.field = _FourierField(d, shape, rng)
            self._scale: dict[int, float] = {}

    def scale(self, t: int) -> float:
        if t not in self._scale:
            o = self.schedule.oracle(self.target, t)
            ms = self.field.mean_square(o.component_means, np.asarray(o.component_covs), self.target.weights)
            self._scale[t] = np.sqrt(self.mse_target / ms)
        return self._scale[t]

    def error(self, t: int, x: np.ndarray) -> np.ndarray:
        if self.mode == "systematic_bias":
            return np.broadcast_to(self.bias, x.shape[:-1] + self.bias.shape)
        return self.scale(t) * self.field(x)

    def realized_mse(self, t: int) -> float:
        """E_{Q_t}||error||^2; equals mse_target by construction."""
        if self.mode == "systematic_bias":
            return float(np.sum(self.bias**2))
        o = self.schedule.oracle(self.target, t)
        return self.scale(t) ** 2 * self.field.mean_square(o.component_means, np.asarray(o.component_covs), self.target.weights)

    def score(self, t, x):
        s = self.base.score(t, x)
        return s + self.error(t, x) if self.component == "score" else s

    def hessian(self, t, x):
        h = self.base.hessian(t, x)
        return h + self.error(t, x) if self.component == "hessian" else h

    def affine_error(self, t):
        L, b = self.base.affine_error(t)
        if self.component == "score":
            if self.mode != "systematic_bias":
                raise ContractError("Gaussian closure broken: score perturbation is not affine")
            b = b + self.bias
        return L, b

    def hessian_error(self, t):
        E = self.base.hessian_error(t)
        if self.component == "hessian":
            if self.mode != "systematic_bias":
                raise ContractError("Gaussian closure broken: Hessian perturbation is not constant")
            E = E + self.bias
        return E


def make_perturbed(model, mse_target: float, mode: str = "additive_gaussian", seed: int = 0, component: str = "score"):
    """Wrap ``model`` with an injected error of mean square ``mse_target`` at every t."""
    if mse_target == 0:
        return model
    return PerturbedModel(model, mse_target, mode, seed, component)


@dataclass(frozen=True)
class ReverseSamplerSpec:
    kind: Kind = "regular"
    estimator: Literal["exact", "perturbed", "fitted"] = "exact"
    eps2: float = 0.0
    epsH2: float = 0.0
    perturbation: Literal["additive_gaussian", "systematic_bias"] = "systematic_bias"
    psd_floor: float = 1e-6
    stop_at: int = 0
    keep_trajectory: bool = False
    fit_basis: str = "poly2"
    fit_samples: int = 20000
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("regular", "accelerated"):
            raise ContractError(f"unknown sampler kind {self.kind!r}")
        if self.estimator not in ("exact", "perturbed", "fitted"):
            raise ContractError(f"unknown estimator {self.estimator!r}")
        if self.eps2 < 0 or self.epsH2 < 0:
            raise ContractError("perturbation sizes must be nonnegative")
        if self.psd_floor < 0:
            raise ContractError("psd_floor must be nonnegative")
        if self.kind == "accelerated" and self.estimator != "exact" and self.psd_floor <= 0:
            raise ContractError("accelerated sampling with estimated Hessians needs psd_floor > 0")
        if self.stop_at not in (0, 1):
            raise ContractError("stop_at must be 0 or 1")


def build_model(spec: ReverseSamplerSpec, target: Target, schedule: NoiseSchedule, seed: int = 0):
    model = ExactModel(target, schedule)
    if spec.estimator == "perturbed":
        model = make_perturbed(model, spec.eps2, spec.perturbation, seed, "score")
        if spec.kind == "accelerated":
            model = make_perturbed(model, spec.epsH2, spec.perturbation, seed, "hessian")
    elif spec.estimator == "fitted":
        from .estimators import FittedModel

        model = FittedModel(target, schedule, spec.fit_basis, spec.fit_samples, seed)
    return model


@dataclass
class KernelOutput:
    mean: np.ndarray
    cov: np.ndarray
    sqrt_cov: np.ndarray
    n_clipped: int


def clip_psd(cov: np.ndarray, floor: float):
    """Symmetric square root with eigenvalues clipped from below at ``floor``."""
    lam, V = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    clipped = lam < floor
    lam = np.where(clipped, floor, lam)
    cov_c = np.einsum("...ij,...j,...kj->...ik", V, lam, V)
    root = np.einsum("...ij,...j,...kj->...ik", V, np.sqrt(lam), V)
    n = int(np.count_nonzero(clipped.any(axis=-1))) if clipped.ndim > 1 else int(clipped.any())
    return cov_c, root, n


def reverse_kernel(spec: ReverseSamplerSpec, model, schedule: NoiseSchedule, t: int, x_t) -> KernelOutput:
    """Mean and covariance of the (estimated) reverse kernel p_{t-1|t}(. | x_t)."""
    x = np.asarray(x_t, dtype=float)
    alpha, beta = schedule.alpha_at(t), schedule.beta_at(t)
    sigma2 = beta / alpha
    d = x.shape[-1]
    if spec.kind == "regular":
        s = model.score(t, x)
        if not np.all(np.isfinite(s)):
            raise SamplerFailure(t, x, "score")
        mean = (x + beta * s) / np.sqrt(alpha)
        cov = np.broadcast_to(sigma2 * np.eye(d), x.shape[:-1] + (d, d))
        return KernelOutput(mean, cov, np.sqrt(sigma2) * np.eye(d), 0)
    if hasattr(model, "derivs"):
        s, h = model.derivs(t, x)
    else:
        s, h = model.score(t, x), model.hessian(t, x)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(h))):
        raise SamplerFailure(t, x, "score or Hessian")
    mean = (x + beta * s) / np.sqrt(alpha)
    cov = sigma2 * (np.eye(d) + beta * h)
    cov, root, n_clip = clip_psd(cov, spec.psd_floor * sigma2)
    return KernelOutput(mean, cov, root, n_clip)


def _forward(target: Target, schedule: NoiseSchedule, t: int, n: int, rng: np.random.Generator):
    x0 = target.sample(n, rng)
    w = rng.standard_normal((n, target.dim))
    if t == 0:
        return x0, w, x0.copy()
    xt = np.sqrt(schedule.abar_at(t)) * x0 + np.sqrt(schedule.one_minus_abar_at(t)) * w
    return x0, w, xt


def simulate_forward(target: Target, schedule: NoiseSchedule, t: int, n: int, seed: int) -> SampleBatch:
    """n draws from Q_t by one-shot aggregation of the noise."""
    if not 0 <= t <= schedule.T:
        raise ContractError(f"t must lie in 0..{schedule.T}")
    key = (schedule.T, TAG_FORWARD, t)
    _, _, xt = _forward(target, schedule, t, n, stream(seed, *key))
    return SampleBatch(t, xt, {"seed": seed, "key": key})


def run_reverse(spec: ReverseSamplerSpec, target: Target, schedule: NoiseSchedule, n: int, seed: int, model=None) -> SampleBatch:
    """Draw x_T ~ N(0, I) and apply the reverse kernels for t = T..stop_at+1."""
    if isinstance(target, AtomCloud) and spec.stop_at == 0:
        raise ContractError("early stopping required for atom targets")
    if model is None:
        model = build_model(spec, target, schedule, seed)
    T, d = schedule.T, target.dim
    x = stream(seed, T, TAG_INIT).standard_normal((n, d))
    traj = {T: x.copy()} if spec.keep_trajectory else None
    clips = 0
    for t in range(T, spec.stop_at, -1):
        k = reverse_kernel(spec, model, schedule, t, x)
        z = stream(seed, T, TAG_STEP, t).standard_normal((n, d))
        if spec.kind == "regular":
            x = k.mean + z @ k.sqrt_cov.T
        else:
            x = k.mean + np.einsum("nij,nj->ni", k.sqrt_cov, z)
        clips += k.n_clipped
        if traj is not None:
            traj[t - 1] = x.copy()
    lineage = {"seed": seed, "T": T, "init_key": (T, TAG_INIT), "step_keys": f"({T}, {TAG_STEP}, t) for t={T}..{spec.stop_at + 1}"}
    return SampleBatch(spec.stop_at, x, lineage, traj, clips)
