"""Factored-likelihood models over a dataset with one global latent vector.

Two concrete likelihoods: conjugate Bayesian linear regression and
Bayesian logistic regression.  Each density is evaluable two ways: plain
numpy (for oracles and vectorized post-training evaluation) and bound to
an autodiff tape (for training).  The tape bindings also expose the
closed-form gradient of each log-density in z, recorded as tape
operations, so chains that consume gradients stay first-order
differentiable in every parameter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Var,
    add,
    affine,
    dot,
    exp,
    log_sigmoid,
    mul,
    neg,
    scale,
    sigmoid,
    square,
    sub,
    vsum,
)

LOG_2PI = math.log(2.0 * math.pi)


def sigmoid_np(x):
    """Numerically stable logistic function."""
    return np.exp(-np.logaddexp(0.0, -x))


def log_sigmoid_np(x):
    """-log(1 + exp(-x)) with the large-|x| branch handled by logaddexp."""
    return -np.logaddexp(0.0, -x)


@dataclass(frozen=True)
class Dataset:
    """Covariate matrix X (N x d) and response vector y (length N)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("X must be a 2-D matrix, got shape %s" % (X.shape,))
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(
                "y must be a length-%d vector, got shape %s" % (X.shape[0], y.shape)
            )
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("need N >= 1 and d >= 1, got %s" % (X.shape,))
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Load from CSV: header row required, response column named "y",
        all other columns are covariates in header order."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError("%s: empty file, expected a header row" % path)
            header = [h.strip() for h in header]
            if "y" not in header:
                raise ValueError('%s: no column named "y" in header %s' % (path, header))
            y_col = header.index("y")
            x_cols = [i for i in range(len(header)) if i != y_col]
            if not x_cols:
                raise ValueError("%s: no covariate columns besides y" % path)
            xs, ys = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ValueError(
                        "%s: line %d has %d cells, expected %d"
                        % (path, lineno, len(row), len(header))
                    )
                try:
                    vals = [float(c) for c in row]
                except ValueError:
                    bad = next(c for c in row if not _is_float(c))
                    raise ValueError(
                        "%s: line %d: non-numeric cell %r" % (path, lineno, bad)
                    )
                ys.append(vals[y_col])
                xs.append([vals[i] for i in x_cols])
        if not xs:
            raise ValueError("%s: no data rows" % path)
        return cls(X=np.array(xs), y=np.array(ys))


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def _as_precision(lam0, d: int) -> np.ndarray:
    lam0 = np.asarray(lam0, dtype=np.float64)
    if lam0.ndim == 0:
        lam0 = np.eye(d) * float(lam0)
    elif lam0.ndim == 1:
        if lam0.shape[0] != d:
            raise ValueError("diagonal precision length %d != D=%d" % (lam0.shape[0], d))
        lam0 = np.diag(lam0)
    if lam0.shape != (d, d):
        raise ValueError("precision must be %dx%d, got %s" % (d, d, lam0.shape))
    if not np.allclose(lam0, lam0.T):
        raise ValueError("prior precision must be symmetric")
    np.linalg.cholesky(lam0)  # raises LinAlgError if not positive definite
    return lam0


class ModelDensity:
    """Gaussian prior N(mu0, Lam0^-1) with a linear or logistic likelihood.

    For the linear kind the observation scale is learnable through
    log(sigma_obs) when model learning is enabled; otherwise theta is
    treated as a constant.
    """

    def __init__(self, mu0, lam0, kind: str, sigma_obs: float | None = None):
        if kind not in ("linear", "logistic"):
            raise ValueError("kind must be 'linear' or 'logistic', got %r" % kind)
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
        if self.mu0.ndim != 1:
            raise ValueError("mu0 must be a vector")
        self.d = self.mu0.shape[0]
        self.lam0 = _as_precision(lam0, self.d)
        self.kind = kind
        if kind == "linear":
            if sigma_obs is None or sigma_obs <= 0:
                raise ValueError("linear kind requires sigma_obs > 0")
            self.sigma_obs = float(sigma_obs)
        else:
            if sigma_obs is not None:
                raise ValueError("sigma_obs only applies to the linear kind")
            self.sigma_obs = None
        sign, logdet = np.linalg.slogdet(self.lam0)
        self._logdet_lam0 = float(logdet)

    def validate_data(self, data: Dataset):
        if data.d != self.d:
            raise ValueError(
                "dataset has d=%d covariates but model has D=%d" % (data.d, self.d)
            )
        if self.kind == "logistic" and not np.isin(data.y, (0.0, 1.0)).all():
            raise ValueError("logistic responses must all be 0 or 1")

    # --- plain numpy evaluation ------------------------------------------

    def log_prior(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.d,):
            raise ValueError("z must have shape (%d,), got %s" % (self.d, z.shape))
        r = z - self.mu0
        return float(
            -0.5 * self.d * LOG_2PI + 0.5 * self._logdet_lam0 - 0.5 * r @ self.lam0 @ r
        )

    def grad_log_prior(self, z: np.ndarray) -> np.ndarray:
        return -self.lam0 @ (np.asarray(z, dtype=np.float64) - self.mu0)

    def _check_idx(self, data: Dataset, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            return idx
        if idx.min() < 0 or idx.max() >= data.n:
            raise ValueError("index out of range [0, %d)" % data.n)
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate indices in idx")
        return idx

    def pointwise_loglik(self, data: Dataset, z: np.ndarray, idx) -> np.ndarray:
        """Per-datum log-likelihood over the index set."""
        idx = self._check_idx(data, idx)
        z = np.asarray(z, dtype=np.float64)
        X, y = data.X[idx], data.y[idx]
        if self.kind == "linear":
            r = X @ z - y
            s2 = self.sigma_obs**2
            return -0.5 * LOG_2PI - math.log(self.sigma_obs) - 0.5 * r * r / s2
        s = X @ z
        return y * log_sigmoid_np(s) + (1.0 - y) * log_sigmoid_np(-s)

    def log_lik_subset(self, data: Dataset, z: np.ndarray, idx) -> float:
        """Sum of per-datum log-likelihoods over idx; empty idx gives 0."""
        idx = self._check_idx(data, idx)
        if idx.size == 0:
            return 0.0
        return float(np.sum(self.pointwise_loglik(data, z, idx)))

    def grad_log_lik_subset(self, data: Dataset, z: np.ndarray, idx) -> np.ndarray:
        idx = self._check_idx(data, idx)
        z = np.asarray(z, dtype=np.float64)
        if idx.size == 0:
            return np.zeros(self.d)
        X, y = data.X[idx], data.y[idx]
        if self.kind == "linear":
            return -X.T @ ((X @ z - y) / self.sigma_obs**2)
        return X.T @ (y - sigmoid_np(X @ z))

    # --- tape bindings ----------------------------------------------------

    def bind(self, tape: Tape, learn_model: bool = False) -> "ModelOnTape":
        return ModelOnTape(self, tape, learn_model)


class ModelOnTape:
    """Per-tape view of a ModelDensity: constants recorded once, density
    and score functions recorded per evaluation point."""

    def __init__(self, model: ModelDensity, tape: Tape, learn_model: bool):
        self.model = model
        self.tape = tape
        self.d = model.d
        self._mu0 = tape.leaf(model.mu0)
        self._lam0_flat = tape.leaf(model.lam0.ravel())
        self._prior_const = tape.leaf(
            -0.5 * model.d * LOG_2PI + 0.5 * model._logdet_lam0
        )
        self._half = tape.leaf(0.5)
        if model.kind == "linear":
            self.log_sigma = tape.leaf(math.log(model.sigma_obs))
            # 1/sigma^2 as a tape value so theta gradients flow
            self._inv_var = exp(mul(self.log_sigma, tape.leaf(-2.0)))
        else:
            self.log_sigma = None
            self._inv_var = None
        self.learn_model = learn_model
        self._full_ctx = None

    def theta_params(self) -> list:
        if self.learn_model and self.log_sigma is not None:
            return [("log_sigma", self.log_sigma)]
        return []

    def log_prior(self, z: Var) -> Var:
        r = sub(z, self._mu0)
        quad = dot(r, affine(self._lam0_flat, r, None, self.d, self.d))
        return sub(self._prior_const, mul(self._half, quad))

    def grad_log_prior(self, z: Var) -> Var:
        r = sub(z, self._mu0)
        return neg(affine(self._lam0_flat, r, None, self.d, self.d))

    def subset(self, data: Dataset, idx) -> "LikSubset":
        """Record this index set's constants; reusable across many z."""
        return LikSubset(self, data, idx)

    def full(self, data: Dataset) -> "LikSubset":
        if self._full_ctx is None:
            self._full_ctx = LikSubset(self, data, np.arange(data.n))
        return self._full_ctx


class LikSubset:
    """Likelihood over a fixed index set, bound to one tape."""

    def __init__(self, bound: ModelOnTape, data: Dataset, idx):
        model = bound.model
        idx = model._check_idx(data, idx)
        self.bound = bound
        self.m = int(idx.size)
        self.d = model.d
        tape = bound.tape
        if self.m > 0:
            Xs = data.X[idx]
            self._Xf = tape.leaf(Xs.ravel())
            self._XfT = tape.leaf(np.ascontiguousarray(Xs.T).ravel())
            if model.kind == "linear":
                self._neg_y = tape.leaf(-data.y[idx])
            else:
                ys = data.y[idx]
                self._y = tape.leaf(ys)
                self._one_minus_y = tape.leaf(1.0 - ys)

    def loglik(self, z: Var) -> Var:
        bound, m = self.bound, self.m
        tape = bound.tape
        if m == 0:
            return tape.leaf(0.0)
        if bound.model.kind == "linear":
            r = affine(self._Xf, z, self._neg_y, m, self.d)
            c = sub(
                tape.leaf(-0.5 * m * LOG_2PI),
                mul(tape.leaf(float(m)), bound.log_sigma),
            )
            quad = mul(bound._inv_var, vsum(square(r)))
            return sub(c, mul(bound._half, quad))
        s = affine(self._Xf, z, None, m, self.d)
        return add(
            dot(self._y, log_sigmoid(s)),
            dot(self._one_minus_y, log_sigmoid(neg(s))),
        )

    def grad(self, z: Var) -> Var:
        """Score of the subset log-likelihood in z, recorded on the tape."""
        bound, m = self.bound, self.m
        if m == 0:
            return bound.tape.leaf(np.zeros(self.d))
        if bound.model.kind == "linear":
            r = affine(self._Xf, z, self._neg_y, m, self.d)
            u = scale(bound._inv_var, r)
            return neg(affine(self._XfT, u, None, self.d, m))
        s = affine(self._Xf, z, None, m, self.d)
        dlt = sub(self._y, sigmoid(s))
        return affine(self._XfT, dlt, None, self.d, m)
