"""Closed-form conjugate linear-regression analytics.

Everything here is exact arithmetic on Gaussian moments: the posterior
and evidence of the conjugate model, the uniform mixture of
power-scaled subset posteriors that minibatch chains converge to, and
the perturbed posterior induced by a weighted surrogate together with
its trace bound.  These ground the statistical tests: chains are
compared against these numbers, never against other chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .model import LOG_2PI, Dataset


@dataclass(frozen=True)
class GaussianMoments:
    """Mean and precision of a Gaussian; precision must be SPD."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        prec = np.asarray(self.precision, dtype=np.float64)
        if prec.ndim == 0:
            prec = prec.reshape(1, 1)
        d = mean.shape[0]
        if prec.shape != (d, d):
            raise ValueError("precision must be %dx%d, got %s" % (d, d, prec.shape))
        if not np.allclose(prec, prec.T, rtol=0, atol=1e-10):
            raise ValueError("precision must be symmetric")
        np.linalg.cholesky(prec)  # raises LinAlgError unless SPD
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)

    def log_density(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=np.float64)
        r = z - self.mean
        sign, logdet = np.linalg.slogdet(self.precision)
        return float(-0.5 * self.d * LOG_2PI + 0.5 * logdet - 0.5 * r @ self.precision @ r)


@dataclass(frozen=True)
class LikelihoodQuadratic:
    """Coefficients of the affine log-likelihood score a - B z."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64)
        if b.ndim == 0:
            b = b.reshape(1, 1)
        d = a.shape[0]
        if b.shape != (d, d):
            raise ValueError("B must be %dx%d, got %s" % (d, d, b.shape))
        if not np.allclose(b, b.T, rtol=0, atol=1e-10):
            raise ValueError("B must be symmetric")
        if np.linalg.eigvalsh(b).min() < -1e-10:
            raise ValueError("B must be positive semi-definite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class MixtureMoments:
    """Uniform mixture over subset posteriors: overall moments plus the
    component list."""

    mean: np.ndarray
    covariance: np.ndarray
    components: tuple


def likelihood_quadratic(data: Dataset, sigma_obs: float) -> LikelihoodQuadratic:
    """a = X^T y / sigma^2 and B = X^T X / sigma^2."""
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be positive")
    var = sigma_obs**2
    return LikelihoodQuadratic(a=data.X.T @ data.y / var, b=data.X.T @ data.X / var)


def exact_posterior(
    prior: GaussianMoments, data: Dataset | None, sigma_obs: float
) -> GaussianMoments:
    """Conjugate update: precision adds X^T X / sigma^2, mean solves the
    combined normal equations.  No data returns the prior unchanged."""
    if data is None:
        return prior
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be positive")
    var = sigma_obs**2
    prec = prior.precision + data.X.T @ data.X / var
    rhs = prior.precision @ prior.mean + data.X.T @ data.y / var
    return GaussianMoments(mean=np.linalg.solve(prec, rhs), precision=prec)


def log_evidence(prior: GaussianMoments, data: Dataset | None, sigma_obs: float) -> float:
    """Marginal log-likelihood of the conjugate model, computed in the
    D-dimensional parameter space rather than the N-dimensional data
    space."""
    if data is None:
        return 0.0
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be positive")
    post = exact_posterior(prior, data, sigma_obs)
    var = sigma_obs**2
    _, logdet0 = np.linalg.slogdet(prior.precision)
    _, logdet1 = np.linalg.slogdet(post.precision)
    quad = (
        data.y @ data.y / var
        + prior.mean @ prior.precision @ prior.mean
        - post.mean @ post.precision @ post.mean
    )
    return float(
        -0.5 * data.n * (LOG_2PI + 2.0 * math.log(sigma_obs))
        + 0.5 * logdet0
        - 0.5 * logdet1
        - 0.5 * quad
    )


def aggregate_pseudo_posterior(
    prior: GaussianMoments, data: Dataset, sigma_obs: float, batch: int
) -> MixtureMoments:
    """Uniform mixture over all size-B subsets, each with its likelihood
    raised to the power N/B (the observation variance shrinks to
    sigma^2 B / N).  Moments come from the law of total variance."""
    n = data.n
    if not 1 <= batch <= n:
        raise ValueError("batch must be in [1, %d], got %d" % (n, batch))
    if math.comb(n, batch) > 100_000:
        raise ValueError(
            "C(%d, %d) = %d subsets exceeds the enumeration guard of 100000"
            % (n, batch, math.comb(n, batch))
        )
    sigma_eff = sigma_obs * math.sqrt(batch / n)
    comps = []
    for subset in combinations(range(n), batch):
        idx = np.array(subset)
        comps.append(
            exact_posterior(prior, Dataset(data.X[idx], data.y[idx]), sigma_eff)
        )
    means = np.stack([c.mean for c in comps])
    mix_mean = means.mean(axis=0)
    second = np.zeros((prior.d, prior.d))
    for c in comps:
        dev = c.mean - mix_mean
        second += c.covariance() + np.outer(dev, dev)
    return MixtureMoments(
        mean=mix_mean, covariance=second / len(comps), components=tuple(comps)
    )


def surrogate_posterior(
    posterior: GaussianMoments, delta_a: np.ndarray, delta_b: np.ndarray
) -> GaussianMoments:
    """Exact perturbed posterior: precision gains delta_b, and the mean
    solves against the shifted natural parameter."""
    delta_a = np.atleast_1d(np.asarray(delta_a, dtype=np.float64))
    delta_b = np.asarray(delta_b, dtype=np.float64)
    if delta_b.ndim == 0:
        delta_b = delta_b.reshape(1, 1)
    prec = posterior.precision + delta_b
    rhs = posterior.precision @ posterior.mean + delta_a
    return GaussianMoments(mean=np.linalg.solve(prec, rhs), precision=prec)


def surrogate_bias_trace(posterior: GaussianMoments, delta_b: np.ndarray) -> float:
    """|trace(precision^-1 delta_b)|, the leading term of the variational
    gap induced by a surrogate perturbation."""
    delta_b = np.asarray(delta_b, dtype=np.float64)
    if delta_b.ndim == 0:
        delta_b = delta_b.reshape(1, 1)
    return float(abs(np.trace(np.linalg.solve(posterior.precision, delta_b))))
