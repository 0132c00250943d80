"""Vectorized many-sample evaluation of the bound estimators.

The tape estimators process one sample at a time so every parameter
stays differentiable.  Statistical checks and post-training reports need
tens of thousands of independent samples where no gradients are wanted,
so this module re-evaluates the same arithmetic with batched numpy.  It
is consistency-tested against the tape path to within rounding; any
disagreement is a bug in one of the two routes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anneal import AnnealingState
from .dais import sample_minibatch
from .model import LOG_2PI, Dataset, ModelDensity, sigmoid_np, log_sigmoid_np
from .surrogate import SurrogateLikelihood
from .vardist import FullRankNormal, MeanFieldNormal

METHODS = ("dais", "ns-dais", "sl-dais", "parametric")


@dataclass(frozen=True)
class BatchResult:
    """Per-sample bound values and final chain positions."""

    values: np.ndarray
    z_final: np.ndarray


class _Proposal:
    """Batched sampling, log-density, and score for either Gaussian family."""

    def __init__(self, q0):
        self.d = q0.d
        self.loc = q0.loc
        if isinstance(q0, MeanFieldNormal):
            scale = np.exp(q0.log_scale)
            self._sample = lambda eps: self.loc + scale * eps
            self.logdet_cov = 2.0 * q0.log_scale.sum()
            self.prec = None
            self.inv_var = np.exp(-2.0 * q0.log_scale)
        elif isinstance(q0, FullRankNormal):
            L = q0.tril_factor()
            self._sample = lambda eps: self.loc + eps @ L.T
            self.logdet_cov = 2.0 * np.log(np.diag(L)).sum()
            self.prec = np.linalg.inv(L @ L.T)
            self.inv_var = None
        else:
            raise ValueError("unsupported proposal type %r" % type(q0).__name__)

    def sample(self, eps: np.ndarray) -> np.ndarray:
        return self._sample(eps)

    def log_density(self, z: np.ndarray) -> np.ndarray:
        r = z - self.loc
        if self.prec is None:
            quad = (r * r * self.inv_var).sum(axis=1)
        else:
            quad = ((r @ self.prec) * r).sum(axis=1)
        return -0.5 * self.d * LOG_2PI - 0.5 * self.logdet_cov - 0.5 * quad

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        r = z - self.loc
        if self.prec is None:
            return -r * self.inv_var
        return -r @ self.prec


class _Model:
    """Batched prior and likelihood pieces."""

    def __init__(self, model: ModelDensity):
        self.model = model
        self.lam0 = model.lam0
        self.mu0 = model.mu0
        sign, logdet = np.linalg.slogdet(model.lam0)
        self.logdet_lam0 = logdet
        self.d = model.d

    def log_prior(self, z: np.ndarray) -> np.ndarray:
        r = z - self.mu0
        quad = ((r @ self.lam0) * r).sum(axis=1)
        return -0.5 * self.d * LOG_2PI + 0.5 * self.logdet_lam0 - 0.5 * quad

    def grad_log_prior(self, z: np.ndarray) -> np.ndarray:
        return -(z - self.mu0) @ self.lam0

    def loglik(self, X: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        s = z @ X.T
        if self.model.kind == "linear":
            var = self.model.sigma_obs**2
            r = s - y
            m = X.shape[0]
            return (
                -0.5 * m * LOG_2PI
                - m * np.log(self.model.sigma_obs)
                - 0.5 * (r * r).sum(axis=1) / var
            )
        return (y * log_sigmoid_np(s) + (1.0 - y) * log_sigmoid_np(-s)).sum(axis=1)

    def grad_loglik(self, X: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        s = z @ X.T
        if self.model.kind == "linear":
            return -((s - y) / self.model.sigma_obs**2) @ X
        return (y - sigmoid_np(s)) @ X

    def loglik_gathered(self, Xg, yg, z):
        """Per-sample subsets: Xg is (S, B, D), yg is (S, B)."""
        s = np.einsum("sbd,sd->sb", Xg, z)
        if self.model.kind == "linear":
            var = self.model.sigma_obs**2
            r = s - yg
            b = Xg.shape[1]
            return (
                -0.5 * b * LOG_2PI
                - b * np.log(self.model.sigma_obs)
                - 0.5 * (r * r).sum(axis=1) / var
            )
        return (yg * log_sigmoid_np(s) + (1.0 - yg) * log_sigmoid_np(-s)).sum(axis=1)

    def grad_loglik_gathered(self, Xg, yg, z):
        s = np.einsum("sbd,sd->sb", Xg, z)
        if self.model.kind == "linear":
            u = (s - yg) / self.model.sigma_obs**2
            return -np.einsum("sb,sbd->sd", u, Xg)
        return np.einsum("sb,sbd->sd", yg - sigmoid_np(s), Xg)


def _draw_index_matrix(n, batch, rows, rng):
    out = np.empty((rows, batch), dtype=np.int64)
    for s in range(rows):
        out[s] = sample_minibatch(n, batch, rng)
    return out


def batch_estimates(
    model: ModelDensity,
    data: Dataset,
    q0,
    anneal: AnnealingState | None,
    method: str,
    n_samples: int,
    rng: np.random.Generator,
    surr: SurrogateLikelihood | None = None,
    batch_size: int | None = None,
    ns_prime: bool = False,
    eps_z: np.ndarray | None = None,
    eps_v: np.ndarray | None = None,
    idx_dynamics: np.ndarray | None = None,
    idx_final: np.ndarray | None = None,
) -> BatchResult:
    """Evaluate `n_samples` independent single-sample bounds at fixed
    parameters.  Noise and minibatch indices are drawn from `rng` unless
    supplied explicitly (the consistency tests inject the exact noise the
    tape path consumed)."""
    if method not in METHODS:
        raise ValueError("method must be one of %s, got %r" % (METHODS, method))
    if method != "dais" and batch_size is None:
        raise ValueError("method %r requires batch_size" % method)
    if method == "sl-dais" and surr is None:
        raise ValueError("sl-dais requires a surrogate")
    q = _Proposal(q0)
    m = _Model(model)
    d, s_n = model.d, int(n_samples)
    k = 0 if (anneal is None or method == "parametric") else anneal.k
    n = data.n
    scale_factor = 1.0 if method == "dais" else n / batch_size

    if eps_z is None:
        eps_z = rng.standard_normal((s_n, d))
    if k > 0 and eps_v is None:
        eps_v = rng.standard_normal((s_n, k + 1, d))

    z = q.sample(eps_z)
    values = -q.log_density(z)

    if k > 0:
        betas = anneal.betas()
        etas = np.array([anneal.step_size(b) for b in betas])
        gamma = anneal.gamma()
        mass = anneal.mass_diag()
        inv_mass = 1.0 / mass
        sqrt_mass = np.sqrt(mass)
        kick = np.sqrt(1.0 - gamma**2)
        v = eps_v[:, 0, :] * sqrt_mass

        if method == "ns-dais" and not ns_prime:
            if idx_dynamics is None:
                idx_dynamics = _draw_index_matrix(n, batch_size, s_n, rng)
            Xg, yg = data.X[idx_dynamics], data.y[idx_dynamics]
        if method == "sl-dais":
            w = surr.weights()
            xs, ys = surr.x, surr.y

        # non-finite states are detected and reported below, so the
        # intermediate overflow itself is expected and silenced
        with np.errstate(over="ignore", invalid="ignore"):
            for step, (beta, eta) in enumerate(zip(betas, etas), start=1):
                zh = z + 0.5 * eta * inv_mass * v
                if method == "dais":
                    g_lik = m.grad_loglik(data.X, data.y, zh)
                elif method == "sl-dais":
                    s_lin = zh @ xs.T
                    if model.kind == "linear":
                        u = (s_lin - ys) / model.sigma_obs**2
                        g_lik = -(u * w) @ xs
                    else:
                        g_lik = ((ys - sigmoid_np(s_lin)) * w) @ xs
                else:
                    if ns_prime:
                        if idx_dynamics is not None:
                            idx_step = idx_dynamics[:, step - 1, :]
                        else:
                            idx_step = _draw_index_matrix(n, batch_size, s_n, rng)
                        Xs, ys_g = data.X[idx_step], data.y[idx_step]
                    else:
                        Xs, ys_g = Xg, yg
                    g_lik = scale_factor * m.grad_loglik_gathered(Xs, ys_g, zh)
                g = (1.0 - beta) * q.grad_log_density(zh) + beta * (
                    m.grad_log_prior(zh) + g_lik
                )
                v_hat = v + eta * g
                z = zh + 0.5 * eta * inv_mass * v_hat
                values += -0.5 * ((v_hat * v_hat - v * v) * inv_mass).sum(axis=1)
                if (
                    not np.isfinite(z).all()
                    or not np.isfinite(v_hat).all()
                    or not np.isfinite(values).all()
                ):
                    raise FloatingPointError(
                        "non-finite batch state at step %d; reduce the step size"
                        % step
                    )
                if step < k:
                    v = gamma * v_hat + kick * sqrt_mass * eps_v[:, step, :]
                else:
                    v = v_hat

    values += m.log_prior(z)
    if method == "dais":
        values += m.loglik(data.X, data.y, z)
    else:
        if idx_final is None:
            idx_final = _draw_index_matrix(n, batch_size, s_n, rng)
        values += scale_factor * m.loglik_gathered(
            data.X[idx_final], data.y[idx_final], z
        )
    return BatchResult(values=values, z_final=z)
