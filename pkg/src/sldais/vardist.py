"""Reparameterizable Gaussian base distributions: mean-field and full-rank.

Both kinds evaluate in plain numpy and bind to an autodiff tape.  The
full-rank factor L is lower triangular with a log-parameterized
diagonal, so the implied covariance L L^T is positive definite by
construction and the log-determinant is 2 * sum(log diag L), read off
the raw parameters directly.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    Tape,
    Var,
    add,
    affine,
    div,
    dot,
    exp,
    mul,
    neg,
    scale,
    square,
    sub,
    vsum,
)
from .model import LOG_2PI


def _tril_size(d: int) -> int:
    return d * (d + 1) // 2


def _tril_index(i: int, j: int) -> int:
    # row-major position of (i, j), j <= i, in the packed lower triangle
    return i * (i + 1) // 2 + j


class MeanFieldNormal:
    """Diagonal Gaussian: z = loc + exp(log_scale) * eps."""

    kind = "mean-field"

    def __init__(self, loc, log_scale):
        self.loc = np.atleast_1d(np.asarray(loc, dtype=np.float64)).copy()
        self.log_scale = np.atleast_1d(np.asarray(log_scale, dtype=np.float64)).copy()
        if self.loc.shape != self.log_scale.shape or self.loc.ndim != 1:
            raise ValueError("loc and log_scale must be equal-length vectors")
        self.d = self.loc.shape[0]

    @classmethod
    def init(cls, d: int) -> "MeanFieldNormal":
        return cls(np.zeros(d), np.zeros(d))

    def covariance(self) -> np.ndarray:
        return np.diag(np.exp(2.0 * self.log_scale))

    def sample_reparam(self, eps: np.ndarray) -> np.ndarray:
        eps = np.asarray(eps, dtype=np.float64)
        return self.loc + np.exp(self.log_scale) * eps

    def log_density(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=np.float64)
        u = (z - self.loc) * np.exp(-self.log_scale)
        return float(
            -0.5 * self.d * LOG_2PI - np.sum(self.log_scale) - 0.5 * np.dot(u, u)
        )

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        return -(np.asarray(z, dtype=np.float64) - self.loc) * np.exp(
            -2.0 * self.log_scale
        )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "loc": self.loc.tolist(),
            "log_scale": self.log_scale.tolist(),
        }

    def get_params(self) -> list:
        return [("loc", self.loc), ("log_scale", self.log_scale)]

    def set_params(self, loc: np.ndarray, log_scale: np.ndarray):
        self.loc = np.asarray(loc, dtype=np.float64).copy()
        self.log_scale = np.asarray(log_scale, dtype=np.float64).copy()

    def bind(self, tape: Tape) -> "MeanFieldOnTape":
        return MeanFieldOnTape(self, tape)


class MeanFieldOnTape:
    def __init__(self, q: MeanFieldNormal, tape: Tape):
        self.tape = tape
        self.d = q.d
        self.loc = tape.leaf(q.loc)
        self.log_scale = tape.leaf(q.log_scale)
        self._scale = exp(self.log_scale)
        self._inv_scale = exp(neg(self.log_scale))
        self._neg2 = tape.leaf(-2.0)
        self._half = tape.leaf(0.5)
        self._const = tape.leaf(-0.5 * q.d * LOG_2PI)
        self._inv_var = None

    def params(self) -> list:
        return [("loc", self.loc), ("log_scale", self.log_scale)]

    def sample(self, eps: np.ndarray) -> Var:
        return add(self.loc, mul(self._scale, self.tape.leaf(eps)))

    def log_density(self, z: Var) -> Var:
        u = mul(sub(z, self.loc), self._inv_scale)
        c = sub(self._const, vsum(self.log_scale))
        return sub(c, mul(self._half, vsum(square(u))))

    def grad_log_density(self, z: Var) -> Var:
        if self._inv_var is None:
            self._inv_var = exp(mul(self.log_scale, self._neg2))
        return neg(mul(sub(z, self.loc), self._inv_var))


class FullRankNormal:
    """Gaussian with covariance L L^T.

    Raw parameters are the packed lower triangle of L in row-major
    order; diagonal entries are stored as logs.
    """

    kind = "full-rank"

    def __init__(self, loc, raw_tril):
        self.loc = np.atleast_1d(np.asarray(loc, dtype=np.float64)).copy()
        self.raw_tril = np.asarray(raw_tril, dtype=np.float64).copy()
        self.d = self.loc.shape[0]
        if self.raw_tril.shape != (_tril_size(self.d),):
            raise ValueError(
                "raw_tril must have length %d for D=%d"
                % (_tril_size(self.d), self.d)
            )
        self._diag_pos = np.array([_tril_index(i, i) for i in range(self.d)])

    @classmethod
    def init(cls, d: int) -> "FullRankNormal":
        return cls(np.zeros(d), np.zeros(_tril_size(d)))  # L = I

    def tril_factor(self) -> np.ndarray:
        L = np.zeros((self.d, self.d))
        k = 0
        for i in range(self.d):
            for j in range(i + 1):
                L[i, j] = self.raw_tril[k]
                k += 1
        np.fill_diagonal(L, np.exp(np.diag(L)))
        return L

    def covariance(self) -> np.ndarray:
        L = self.tril_factor()
        return L @ L.T

    def sample_reparam(self, eps: np.ndarray) -> np.ndarray:
        return self.loc + self.tril_factor() @ np.asarray(eps, dtype=np.float64)

    def log_density(self, z: np.ndarray) -> float:
        L = self.tril_factor()
        w = np.linalg.solve(L, np.asarray(z, dtype=np.float64) - self.loc)
        logdet_l = float(np.sum(self.raw_tril[self._diag_pos]))
        return float(-0.5 * self.d * LOG_2PI - logdet_l - 0.5 * np.dot(w, w))

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        L = self.tril_factor()
        w = np.linalg.solve(L, np.asarray(z, dtype=np.float64) - self.loc)
        return -np.linalg.solve(L.T, w)

    def to_json(self) -> dict:
        rows = []
        k = 0
        for i in range(self.d):
            rows.append(self.raw_tril[k : k + i + 1].tolist())
            k += i + 1
        return {"kind": self.kind, "loc": self.loc.tolist(), "tril_rows": rows}

    def get_params(self) -> list:
        return [("loc", self.loc), ("raw_tril", self.raw_tril)]

    def set_params(self, loc: np.ndarray, raw_tril: np.ndarray):
        self.loc = np.asarray(loc, dtype=np.float64).copy()
        self.raw_tril = np.asarray(raw_tril, dtype=np.float64).copy()

    def bind(self, tape: Tape) -> "FullRankOnTape":
        return FullRankOnTape(self, tape)


class FullRankOnTape:
    """Tape view of the full-rank Gaussian.

    Sampling uses the split L@eps = diag part + strict-lower part, both
    linear maps with constant coefficient matrices, so the whole draw is
    recorded with vector ops.  Densities and scores run a forward (and
    for scores a backward) substitution with scalar nodes; O(D^2) ops.
    """

    def __init__(self, q: FullRankNormal, tape: Tape):
        self.tape = tape
        self.d = q.d
        d = q.d
        self.loc = tape.leaf(q.loc)
        self.raw_tril = tape.leaf(q.raw_tril)
        t = _tril_size(d)
        e_diag = np.zeros((d, t))
        for i in range(d):
            e_diag[i, _tril_index(i, i)] = 1.0
        self._raw_diag = affine(tape.leaf(e_diag.ravel()), self.raw_tril, None, d, t)
        self._diag = exp(self._raw_diag)
        self._n_off = t - d
        if self._n_off > 0:
            e_off = np.zeros((self._n_off, t))
            self._off_cols = {}
            k = 0
            for i in range(d):
                for j in range(i):
                    e_off[k, _tril_index(i, j)] = 1.0
                    self._off_cols[(i, j)] = k
                    k += 1
            self._off = affine(tape.leaf(e_off.ravel()), self.raw_tril, None, self._n_off, t)
        else:
            self._off = None
        self._half = tape.leaf(0.5)
        self._const = tape.leaf(-0.5 * d * LOG_2PI)
        self._basis = [None] * d
        self._off_sel = {}

    def params(self) -> list:
        return [("loc", self.loc), ("raw_tril", self.raw_tril)]

    def _unit(self, i: int) -> Var:
        if self._basis[i] is None:
            e = np.zeros(self.d)
            e[i] = 1.0
            self._basis[i] = self.tape.leaf(e)
        return self._basis[i]

    def _l_entry(self, i: int, j: int) -> Var:
        # strict lower-triangle entry as a scalar node
        key = (i, j)
        if key not in self._off_sel:
            e = np.zeros(self._n_off)
            e[self._off_cols[key]] = 1.0
            self._off_sel[key] = dot(self.tape.leaf(e), self._off)
        return self._off_sel[key]

    def sample(self, eps: np.ndarray) -> Var:
        eps = np.asarray(eps, dtype=np.float64)
        out = add(self.loc, mul(self._diag, self.tape.leaf(eps)))
        if self._n_off > 0:
            c = np.zeros((self.d, self._n_off))
            k = 0
            for i in range(self.d):
                for j in range(i):
                    c[i, k] = eps[j]
                    k += 1
            out = add(out, affine(self.tape.leaf(c.ravel()), self._off, None, self.d, self._n_off))
        return out

    def _forward_substitute(self, z: Var) -> list:
        """Scalar nodes for w = L^{-1}(z - loc)."""
        r = sub(z, self.loc)
        w = []
        for i in range(self.d):
            acc = dot(self._unit(i), r)
            for j in range(i):
                acc = sub(acc, mul(self._l_entry(i, j), w[j]))
            w.append(div(acc, dot(self._unit(i), self._diag)))
        return w

    def log_density(self, z: Var) -> Var:
        w = self._forward_substitute(z)
        quad = square(w[0])
        for i in range(1, self.d):
            quad = add(quad, square(w[i]))
        c = sub(self._const, vsum(self._raw_diag))
        return sub(c, mul(self._half, quad))

    def grad_log_density(self, z: Var) -> Var:
        # -L^{-T} w via back substitution, assembled into a vector
        w = self._forward_substitute(z)
        u = [None] * self.d
        for i in range(self.d - 1, -1, -1):
            acc = w[i]
            for j in range(i + 1, self.d):
                acc = sub(acc, mul(self._l_entry(j, i), u[j]))
            u[i] = div(acc, dot(self._unit(i), self._diag))
        out = scale(u[0], self._unit(0))
        for i in range(1, self.d):
            out = add(out, scale(u[i], self._unit(i)))
        return neg(out)


def from_json(obj: dict):
    """Rebuild a base distribution from its JSON form."""
    kind = obj.get("kind")
    if kind == "mean-field":
        return MeanFieldNormal(np.array(obj["loc"]), np.array(obj["log_scale"]))
    if kind == "full-rank":
        rows = obj["tril_rows"]
        flat = [v for row in rows for v in row]
        return FullRankNormal(np.array(obj["loc"]), np.array(flat))
    raise ValueError("unknown base distribution kind %r" % kind)
