"""Annealing schedule and integrator hyperparameters as learnable
transforms of unconstrained raw parameters.

Inverse temperatures come from an exponential transform plus cumulative
summation, normalized so the final temperature is exactly 1; step sizes
are clip(eta_tilde + kappa * beta_k, 0, eta_max); the refresh
coefficient gamma lives in [0, 1) through a scaled sigmoid; the mass
matrix is diagonal with log parameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var, add, clip, div, dot, exp, mul, neg, sigmoid

GAMMA_CAP = 0.999


def _raw_from_gamma(gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1), got %r" % gamma)
    p = max(gamma / GAMMA_CAP, 1e-300)
    if p >= 1.0:
        raise ValueError("gamma too close to the cap %r" % GAMMA_CAP)
    return math.log(p / (1.0 - p))


@dataclass
class AnnealingState:
    """K chain steps over a D-dimensional latent."""

    k: int
    raw_beta: np.ndarray
    raw_eta: float
    raw_kappa: float
    eta_max: float
    raw_gamma: float
    raw_mass: np.ndarray

    def __post_init__(self):
        self.raw_beta = np.atleast_1d(np.asarray(self.raw_beta, dtype=np.float64))
        self.raw_mass = np.atleast_1d(np.asarray(self.raw_mass, dtype=np.float64))
        if self.raw_beta.shape != (self.k,):
            raise ValueError("raw_beta must have length K=%d" % self.k)
        if self.eta_max <= 0:
            raise ValueError("eta_max must be positive")

    @classmethod
    def init(
        cls,
        k: int,
        d: int,
        eta_init: float = 1e-3,
        gamma_init: float = 0.9,
        eta_max: float = 0.25,
    ) -> "AnnealingState":
        return cls(
            k=k,
            raw_beta=np.zeros(k),
            raw_eta=float(eta_init),
            raw_kappa=0.0,
            eta_max=float(eta_max),
            raw_gamma=_raw_from_gamma(gamma_init),
            raw_mass=np.zeros(d),
        )

    # --- plain numpy evaluation ------------------------------------------

    def betas(self) -> np.ndarray:
        """Strictly increasing inverse temperatures with beta_K = 1 exactly."""
        if self.k == 0:
            return np.zeros(0)
        cs = np.cumsum(np.exp(self.raw_beta))
        return cs / cs[-1]

    def step_size(self, beta_k: float) -> float:
        return float(
            min(max(self.raw_eta + self.raw_kappa * beta_k, 0.0), self.eta_max)
        )

    def gamma(self) -> float:
        return GAMMA_CAP / (1.0 + math.exp(-self.raw_gamma))

    def mass_diag(self) -> np.ndarray:
        return np.exp(self.raw_mass)

    def get_params(self) -> list:
        return [
            ("raw_beta", self.raw_beta),
            ("raw_eta", np.array([self.raw_eta])),
            ("raw_kappa", np.array([self.raw_kappa])),
            ("raw_gamma", np.array([self.raw_gamma])),
            ("raw_mass", self.raw_mass),
        ]

    def set_params(self, raw_beta, raw_eta, raw_kappa, raw_gamma, raw_mass):
        self.raw_beta = np.asarray(raw_beta, dtype=np.float64).copy()
        self.raw_eta = float(np.asarray(raw_eta).reshape(-1)[0])
        self.raw_kappa = float(np.asarray(raw_kappa).reshape(-1)[0])
        self.raw_gamma = float(np.asarray(raw_gamma).reshape(-1)[0])
        self.raw_mass = np.asarray(raw_mass, dtype=np.float64).copy()

    def bind(self, tape: Tape) -> "AnnealOnTape":
        return AnnealOnTape(self, tape)


class AnnealOnTape:
    """Tape view: every derived quantity is recorded so gradients reach
    the raw parameters through the chain."""

    def __init__(self, state: AnnealingState, tape: Tape):
        self.tape = tape
        self.k = state.k
        self.eta_max = state.eta_max
        self.raw_beta = tape.leaf(state.raw_beta) if state.k > 0 else None
        self.raw_eta = tape.leaf(state.raw_eta)
        self.raw_kappa = tape.leaf(state.raw_kappa)
        self.raw_gamma = tape.leaf(state.raw_gamma)
        self.raw_mass = tape.leaf(state.raw_mass)
        self.gamma = mul(sigmoid(self.raw_gamma), tape.leaf(GAMMA_CAP))
        self.mass_diag = exp(self.raw_mass)
        self.inv_mass = exp(neg(self.raw_mass))
        self.sqrt_mass = exp(mul(self.raw_mass, tape.leaf(0.5)))
        self._betas = None

    def params(self) -> list:
        out = []
        if self.raw_beta is not None:
            out.append(("raw_beta", self.raw_beta))
        out.extend(
            [
                ("raw_eta", self.raw_eta),
                ("raw_kappa", self.raw_kappa),
                ("raw_gamma", self.raw_gamma),
                ("raw_mass", self.raw_mass),
            ]
        )
        return out

    def betas(self) -> list:
        """List of K scalar Vars; the K-th is 1 exactly (x/x division)."""
        if self._betas is None:
            k = self.k
            w = exp(self.raw_beta)
            total = None
            prefixes = []
            for i in range(1, k + 1):
                mask = np.zeros(k)
                mask[:i] = 1.0
                prefixes.append(dot(w, self.tape.leaf(mask)))
            total = prefixes[-1]
            self._betas = [div(p, total) for p in prefixes]
        return self._betas

    def step_size(self, beta_k: Var) -> Var:
        raw = add(self.raw_eta, mul(self.raw_kappa, beta_k))
        return clip(raw, 0.0, self.eta_max)
