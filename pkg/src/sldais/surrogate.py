"""Weighted-subset surrogate log-likelihood used to guide chain dynamics.

A small set of data points is drawn once, uniformly without replacement,
and frozen; only the positive per-point weights learn (in log space).
The weighted sum of per-point log-likelihoods approximates the full-data
log-likelihood at a cost independent of the dataset size.
"""

from __future__ import annotations

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
from .model import LOG_2PI, Dataset, ModelDensity, ModelOnTape, log_sigmoid_np, sigmoid_np


def _sample_without_replacement(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """First m entries of a partial Fisher-Yates pass over range(n)."""
    idx = np.arange(n)
    for i in range(m):
        j = i + int(rng.integers(0, n - i))
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:m]


@dataclass
class SurrogateLikelihood:
    """Frozen point subset with learnable log-weights.

    Indices are kept sorted so the full-subset configuration reproduces
    the dataset's own row order exactly.
    """

    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray
    raw_log_weights: np.ndarray
    n_data: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.raw_log_weights = np.asarray(self.raw_log_weights, dtype=np.float64)
        m = self.indices.shape[0]
        if m < 1:
            raise ValueError("need at least one surrogate point")
        if self.x.shape[0] != m or self.y.shape != (m,):
            raise ValueError("points and indices disagree in length")
        if self.raw_log_weights.shape != (m,):
            raise ValueError("raw_log_weights must have length %d" % m)

    @property
    def n_surr(self) -> int:
        return self.indices.shape[0]

    @classmethod
    def init_rand(cls, data: Dataset, n_surr: int, rng) -> "SurrogateLikelihood":
        """Draw n_surr points uniformly without replacement; set every
        weight to N / n_surr so the total weight equals N."""
        if not 1 <= n_surr <= data.n:
            raise ValueError(
                "n_surr must be in [1, %d], got %d" % (data.n, n_surr)
            )
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        idx = np.sort(_sample_without_replacement(data.n, n_surr, rng))
        return cls(
            indices=idx,
            x=data.X[idx].copy(),
            y=data.y[idx].copy(),
            raw_log_weights=np.full(n_surr, np.log(data.n / n_surr)),
            n_data=data.n,
        )

    def weights(self) -> np.ndarray:
        return np.exp(self.raw_log_weights)

    # --- plain numpy evaluation ------------------------------------------

    def loglik(self, model: ModelDensity, z: np.ndarray) -> float:
        w = self.weights()
        s = self.x @ z
        if model.kind == "linear":
            r = s - self.y
            var = model.sigma_obs**2
            point = -0.5 * LOG_2PI - np.log(model.sigma_obs) - 0.5 * r * r / var
        else:
            point = self.y * log_sigmoid_np(s) + (1.0 - self.y) * log_sigmoid_np(-s)
        return float(w @ point)

    def grad_loglik(self, model: ModelDensity, z: np.ndarray) -> np.ndarray:
        w = self.weights()
        s = self.x @ z
        if model.kind == "linear":
            u = (s - self.y) / model.sigma_obs**2
            return -self.x.T @ (u * w)
        return self.x.T @ (w * (self.y - sigmoid_np(s)))

    def quadratic_coefficients(self, model: ModelDensity):
        """Coefficients (a, B) of the affine score a - B z implied by the
        weighted points, for the conjugate linear model only."""
        if model.kind != "linear":
            raise ValueError("quadratic coefficients exist only for kind='linear'")
        w = self.weights()
        var = model.sigma_obs**2
        a = self.x.T @ (w * self.y) / var
        b = (self.x.T * w) @ self.x / var
        return a, b

    # --- trainer plumbing --------------------------------------------------

    def get_params(self) -> list:
        return [("raw_log_weights", self.raw_log_weights)]

    def set_params(self, raw_log_weights):
        self.raw_log_weights = np.asarray(raw_log_weights, dtype=np.float64).copy()

    def to_json(self) -> dict:
        return {
            "indices": [int(i) for i in self.indices],
            "raw_log_weights": [float(v) for v in self.raw_log_weights],
        }

    @classmethod
    def from_json(cls, payload: dict, data: Dataset) -> "SurrogateLikelihood":
        idx = np.asarray(payload["indices"], dtype=np.int64)
        return cls(
            indices=idx,
            x=data.X[idx].copy(),
            y=data.y[idx].copy(),
            raw_log_weights=np.asarray(payload["raw_log_weights"], dtype=np.float64),
            n_data=data.n,
        )

    def bind(self, bound: ModelOnTape) -> "SurrogateOnTape":
        return SurrogateOnTape(self, bound)


class SurrogateOnTape:
    """Tape view mirroring the structure of the exact-subset binding, so
    unit weights reproduce the exact gradient values bit for bit."""

    def __init__(self, surr: SurrogateLikelihood, bound: ModelOnTape):
        if surr.x.shape[1] != bound.model.d:
            raise ValueError("surrogate covariates do not match model dimension")
        self.bound = bound
        self.m = surr.n_surr
        self.d = bound.model.d
        tape = bound.tape
        self.raw_log_weights = tape.leaf(surr.raw_log_weights)
        self.w = exp(self.raw_log_weights)
        self._Xf = tape.leaf(surr.x.ravel())
        self._XfT = tape.leaf(np.ascontiguousarray(surr.x.T).ravel())
        if bound.model.kind == "linear":
            self._neg_y = tape.leaf(-surr.y)
        else:
            self._y = tape.leaf(surr.y)
            self._one_minus_y = tape.leaf(1.0 - surr.y)

    def params(self) -> list:
        return [("raw_log_weights", self.raw_log_weights)]

    def loglik(self, z: Var) -> Var:
        bound, m = self.bound, self.m
        tape = bound.tape
        sumw = vsum(self.w)
        if bound.model.kind == "linear":
            r = affine(self._Xf, z, self._neg_y, m, self.d)
            c = sub(
                mul(tape.leaf(-0.5 * LOG_2PI), sumw),
                mul(sumw, bound.log_sigma),
            )
            quad = mul(bound._inv_var, dot(self.w, square(r)))
            return sub(c, mul(bound._half, quad))
        s = affine(self._Xf, z, None, m, self.d)
        return add(
            dot(mul(self.w, self._y), log_sigmoid(s)),
            dot(mul(self.w, self._one_minus_y), log_sigmoid(neg(s))),
        )

    def grad(self, z: Var) -> Var:
        """Weighted score in z, recorded on the tape; identical op shapes
        to the exact-subset score with the weights folded in once."""
        bound, m = self.bound, self.m
        if bound.model.kind == "linear":
            r = affine(self._Xf, z, self._neg_y, m, self.d)
            u = scale(bound._inv_var, r)
            return neg(affine(self._XfT, mul(u, self.w), None, self.d, m))
        s = affine(self._Xf, z, None, m, self.d)
        dlt = sub(self._y, sigmoid(s))
        return affine(self._XfT, mul(dlt, self.w), None, self.d, m)
