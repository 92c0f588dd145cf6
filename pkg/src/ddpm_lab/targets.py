"""Analytic targets Q_0 and exact oracles for the forward marginals q_t.

Both target families push forward to Gaussian mixtures at every noise level:

* ``GaussianMixture``: component n becomes N(sqrt(abar) mu_n, abar Sigma_n + (1 - abar) I).
* ``AtomCloud``: atom m becomes N(sqrt(abar) x_m, (1 - abar) I).

Derivatives of log q_t are joint cumulants of a formal Gaussian mixture whose
component "means" are the per-component scores and whose "covariances" are the
per-component Hessians, mixed by the posterior responsibilities.  Per component
the score and Hessian are the images of the conditional origin mean and
covariance under the change-of-measure identities

    score_n = (sqrt(abar) m_n - x) / (1 - abar)
    hess_n  = -I / (1 - abar) + abar / (1 - abar)^2 C_n

so pooling them is the same as applying the identities to the pooled posterior
moments, but without the 1/(1 - abar)^2 cancellation near abar = 1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import logsumexp

from ._combinatorics import (
    cumulants_from_central_moments,
    fill_symmetric,
    singles_and_pairs,
)

LOG_2PI = float(np.log(2.0 * np.pi))
EIG_FLOOR = 1e-10
RESP_FLOOR = float(np.exp(-745.0))


class ContractError(ValueError):
    """Input violates an operation's preconditions."""


class DegeneratePosterior(ArithmeticError):
    pass


def _as_simplex(w, name: str, strict_positive: bool) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size == 0:
        raise ContractError(f"{name}: empty weight vector")
    if np.any(w < 0) or (strict_positive and np.any(w <= 0)):
        raise ContractError(f"{name}: weights must be {'positive' if strict_positive else 'nonnegative'}")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ContractError(f"{name}: weights sum to {w.sum()!r}, expected 1 within 1e-12")
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = _as_simplex(self.weights, "GaussianMixture", strict_positive=True)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        n, d = mu.shape
        S = np.asarray(self.covs, dtype=float)
        if S.ndim == 2 and d == 1 and S.shape == (n, 1):
            S = S[:, :, None]
        if S.shape != (n, d, d) or w.size != n:
            raise ContractError(f"GaussianMixture: inconsistent shapes weights {w.shape}, means {mu.shape}, covs {S.shape}")
        if not np.allclose(S, np.swapaxes(S, 1, 2), rtol=0.0, atol=1e-12):
            raise ContractError("GaussianMixture: covariance not symmetric within 1e-12")
        S = 0.5 * (S + np.swapaxes(S, 1, 2))
        lam, V = np.linalg.eigh(S)
        if np.any(lam < EIG_FLOOR):
            warnings.warn("covariance eigenvalues below 1e-10 were raised to the floor", stacklevel=3)
            lam = np.maximum(lam, EIG_FLOOR)
            S = np.einsum("nij,nj,nkj->nik", V, lam, V)
        for name, arr in (("weights", w), ("means", mu), ("covs", S)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def second_moment(self) -> np.ndarray:
        """E[X X^T] under Q_0."""
        return np.einsum("n,nij->ij", self.weights, self.covs + np.einsum("ni,nj->nij", self.means, self.means))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        L = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", L[comp], z)


@dataclass(frozen=True, eq=False)
class AtomCloud:
    weights: np.ndarray
    atoms: np.ndarray
    radius_bound: float | None = None

    def __post_init__(self):
        w = _as_simplex(self.weights, "AtomCloud", strict_positive=False)
        x = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if x.shape[0] != w.size:
            raise ContractError(f"AtomCloud: {w.size} weights for {x.shape[0]} atoms")
        if self.radius_bound is not None and np.any(np.linalg.norm(x, axis=1) > self.radius_bound):
            raise ContractError("AtomCloud: atom outside radius_bound")
        # zero-weight atoms carry no mass; dropping them keeps log-weights finite
        keep = w > 0
        w, x = w[keep], x[keep]
        for name, arr in (("weights", w), ("atoms", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def second_moment(self) -> np.ndarray:
        return np.einsum("m,mi,mj->ij", self.weights, self.atoms, self.atoms)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.atoms[rng.choice(self.n_components, size=n, p=self.weights)]


Target = Union[GaussianMixture, AtomCloud]


def standard_normal(d: int) -> GaussianMixture:
    return GaussianMixture([1.0], np.zeros((1, d)), np.eye(d)[None])


def gaussian(mean, cov) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return GaussianMixture([1.0], mean[None], cov[None])


def point_mass(x) -> AtomCloud:
    return AtomCloud([1.0], np.atleast_1d(np.asarray(x, dtype=float))[None])


def is_single_gaussian(target: Target) -> bool:
    return target.n_components == 1


@dataclass(frozen=True, eq=False)
class PosteriorOriginMoments:
    mean: np.ndarray
    central_cov: np.ndarray
    central_third: np.ndarray
    responsibilities: np.ndarray


@dataclass(frozen=True, eq=False)
class MarginalOracle:
    """Exact law of q_t for a given aggregate retention abar."""

    target: Target
    abar: float
    one_minus: float | None = None  # 1 - abar when known more precisely than the rounded difference
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        abar = float(self.abar)
        if not (0.0 < abar <= 1.0):
            raise ContractError(f"abar must lie in (0, 1], got {abar!r}")
        object.__setattr__(self, "abar", abar)
        t, d = self.target, self.target.dim
        sa = np.sqrt(abar)
        v = float(self.one_minus) if self.one_minus is not None else 1.0 - abar
        if isinstance(t, GaussianMixture):
            means = sa * t.means
            covs = abar * t.covs + v * np.eye(d)
            L = np.linalg.cholesky(covs)
            Linv = np.linalg.inv(L)
            prec = np.einsum("nki,nkj->nij", Linv, Linv)
            logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(-1)
        else:
            means = sa * t.atoms
            covs = np.broadcast_to(v * np.eye(d), (t.n_components, d, d))
            if v > 0:
                prec = np.broadcast_to(np.eye(d) / v, (t.n_components, d, d))
                logdet = np.full(t.n_components, d * np.log(v))
            else:
                prec = logdet = None
        self._cache.update(means=means, covs=covs, prec=prec, logdet=logdet, one_minus_abar=v)

    @property
    def dim(self) -> int:
        return self.target.dim

    @property
    def one_minus_abar(self) -> float:
        return self._cache["one_minus_abar"]

    @property
    def component_means(self) -> np.ndarray:
        return self._cache["means"]

    @property
    def component_covs(self) -> np.ndarray:
        return self._cache["covs"]

    def _require_density(self):
        if self._cache["prec"] is None:
            raise ContractError("density undefined: atom targets need abar < 1")

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ContractError(f"expected points with trailing dimension {self.dim}, got shape {x.shape}")
        return x

    def _component_terms(self, x: np.ndarray):
        """Per-component log densities and local scores at x (..., d)."""
        self._require_density()
        diff = x[..., None, :] - self.component_means
        g = -np.einsum("nij,...nj->...ni", self._cache["prec"], diff)
        quad = -np.einsum("...ni,...ni->...n", diff, g)
        logp = np.log(self.target.weights) - 0.5 * (self.dim * LOG_2PI + self._cache["logdet"]) - 0.5 * quad
        return logp, g

    def responsibilities(self, x) -> np.ndarray:
        x = self._check_x(x)
        logp, _ = self._component_terms(x)
        return _softmax(logp)


def _softmax(logp: np.ndarray) -> np.ndarray:
    lse = logsumexp(logp, axis=-1, keepdims=True)
    if not np.all(np.isfinite(lse)):
        raise DegeneratePosterior("posterior numerically degenerate")
    r = np.maximum(np.exp(logp - lse), RESP_FLOOR)
    return r / r.sum(-1, keepdims=True)


def marginal(target: Target, abar: float, one_minus: float | None = None) -> MarginalOracle:
    return MarginalOracle(target, abar, one_minus)


def log_density(oracle: MarginalOracle, x) -> np.ndarray | float:
    """log q_t(x) by log-sum-exp over the pushed-forward components."""
    x = oracle._check_x(x)
    logp, _ = oracle._component_terms(x)
    out = logsumexp(logp, axis=-1)
    return float(out) if out.ndim == 0 else out


def _local(oracle: MarginalOracle, x: np.ndarray):
    logp, g = oracle._component_terms(x)
    r = _softmax(logp)
    G = -oracle._cache["prec"]
    return r, g, G


def derivatives(oracle: MarginalOracle, x):
    """Score, Hessian and third-derivative tensor of log q_t at x.

    Accepts a single point (d,) or a batch (..., d); outputs carry the same
    leading shape.
    """
    x = oracle._check_x(x)
    r, g, G = _local(oracle, x)
    s = np.einsum("...n,...ni->...i", r, g)
    delta = g - s[..., None, :]
    Gbar = np.einsum("...n,nij->...ij", r, G)
    hess = Gbar + np.einsum("...n,...ni,...nj->...ij", r, delta, delta)
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    # shifting every component Hessian by Gbar leaves orders >= 3 unchanged
    Gc = G - Gbar[..., None, :, :]
    third = np.einsum("...n,...ni,...nj,...nk->...ijk", r, delta, delta, delta)
    cross = np.einsum("...n,...nij,...nk->...ijk", r, Gc, delta)
    third = _symmetrize3(third + 3.0 * _symmetrize3(cross))
    return s, hess, third


def _symmetrize3(T: np.ndarray) -> np.ndarray:
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    nb = T.ndim - 3
    lead = tuple(range(nb))
    return sum(np.transpose(T, lead + tuple(nb + p for p in perm)) for perm in perms) / 6.0


def derivative_tensors(oracle: MarginalOracle, x, order: int) -> list[np.ndarray]:
    """[grad, hess, d3, ..., d^order] of log q_t at a single point x (order <= 6)."""
    if not 1 <= order <= 6:
        raise ContractError("order must be between 1 and 6")
    x = oracle._check_x(x)
    if x.ndim != 1:
        raise ContractError("derivative_tensors takes a single point")
    s, h, t3 = derivatives(oracle, x)
    out = [s, h, t3][:order]
    if order <= 3:
        return out
    r, g, G = _local(oracle, x)
    delta = g - s
    Gc = G - np.einsum("n,nij->ij", r, G)
    cache: dict[tuple[int, ...], float] = {}

    def central(idx):
        if idx not in cache:
            total = np.zeros_like(r)
            for part in singles_and_pairs(len(idx)):
                term = np.ones_like(r)
                for block in part:
                    if len(block) == 1:
                        term = term * delta[:, idx[block[0]]]
                    else:
                        term = term * Gc[:, idx[block[0]], idx[block[1]]]
                total = total + term
            cache[idx] = float(r @ total)
        return cache[idx]

    d = oracle.dim
    for k in range(4, order + 1):
        out.append(fill_symmetric(d, k, lambda idx: cumulants_from_central_moments(central, idx)))
    return out


def posterior_origin(oracle: MarginalOracle, x) -> PosteriorOriginMoments:
    """Moments of X_0 given x_t = x under the tilted posterior."""
    if not (0.0 < oracle.abar < 1.0):
        raise ContractError("posterior_origin needs abar in (0, 1)")
    x = oracle._check_x(x)
    if x.ndim != 1:
        raise ContractError("posterior_origin takes a single point")
    r = oracle.responsibilities(x)
    t, abar, d = oracle.target, oracle.abar, oracle.dim
    if isinstance(t, AtomCloud):
        m_n = t.atoms
        C_n = np.zeros((t.n_components, d, d))
    else:
        S0 = t.covs
        K = np.einsum("nij,njk->nik", S0, oracle._cache["prec"])  # Sigma0 S^-1
        resid = x - np.sqrt(abar) * t.means
        m_n = t.means + np.sqrt(abar) * np.einsum("nij,nj->ni", K, resid)
        C_n = oracle.one_minus_abar * K
        C_n = 0.5 * (C_n + np.swapaxes(C_n, 1, 2))
    m = r @ m_n
    e = m_n - m
    cov = np.einsum("n,nij->ij", r, C_n) + np.einsum("n,ni,nj->ij", r, e, e)
    third = np.einsum("n,ni,nj,nk->ijk", r, e, e, e)
    cross = np.einsum("n,nij,nk->ijk", r, C_n, e)
    third = third + _symmetrize3(cross) * 3.0
    return PosteriorOriginMoments(m, 0.5 * (cov + cov.T), _symmetrize3(third), r)


def target_from_dict(doc: dict) -> Target:
    try:
        kind = doc["kind"]
        d = int(doc["dim"])
        if kind == "gaussian_mixture":
            comps = doc["components"]
            w = [c["weight"] for c in comps]
            mu = np.array([c["mean"] for c in comps], dtype=float).reshape(len(comps), d)
            S = np.array([c["cov"] for c in comps], dtype=float).reshape(len(comps), d, d)
            return GaussianMixture(w, mu, S)
        if kind == "atom_cloud":
            atoms = doc["atoms"]
            w = [a["weight"] for a in atoms]
            x = np.array([a["x"] for a in atoms], dtype=float).reshape(len(atoms), d)
            return AtomCloud(w, x, doc.get("radius_bound"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ContractError):
            raise
        raise ContractError(f"malformed target document: {exc}") from exc
    raise ContractError(f"unknown target kind {kind!r}")


def target_to_dict(target: Target) -> dict:
    if isinstance(target, GaussianMixture):
        return {
            "kind": "gaussian_mixture",
            "dim": target.dim,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "cov": S.tolist()}
                for w, m, S in zip(target.weights, target.means, target.covs)
            ],
        }
    doc = {
        "kind": "atom_cloud",
        "dim": target.dim,
        "atoms": [{"weight": float(w), "x": a.tolist()} for w, a in zip(target.weights, target.atoms)],
    }
    if target.radius_bound is not None:
        doc["radius_bound"] = target.radius_bound
    return doc


def load_target(path: str | Path) -> Target:
    return target_from_dict(json.loads(Path(path).read_text()))
