"""Annealed ELBO estimators built on unadjusted leapfrog dynamics.

Four estimators share one chain skeleton and differ only in which
log-likelihood gradient steers the dynamics and which subset feeds the
final likelihood term:

- the full-data annealed bound (exact gradient, exact final term),
- naive subsampling (one scaled minibatch steers the whole chain, an
  independent minibatch scales the final term),
- surrogate-guided (a weighted point subset steers the chain; data
  subsampling occurs only in the final term),
- the plain parametric bound (no chain at all).

The extended-space bound needs only kinetic-energy differences from the
momenta plus endpoint terms, so any dynamics gradient yields a valid
lower bound.  Every estimator is a deterministic function of its
parameters and an explicit noise bundle; gradients of recorded
log-density scores flow to all parameters through the closed-form score
expressions, keeping the whole estimate first-order differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    NonFiniteOperationError,
    Tape,
    Var,
    add,
    div,
    dot,
    log,
    mul,
    neg,
    scale,
    sqrt,
    square,
    sub,
    vsum,
)
from .model import LOG_2PI, Dataset, ModelDensity
from .surrogate import SurrogateLikelihood, _sample_without_replacement


class DivergenceError(RuntimeError):
    """Chain state became non-finite; carries the 1-based step index."""

    def __init__(self, step: int):
        self.step = step
        super().__init__("non-finite chain state at step %d" % step)


@dataclass(frozen=True)
class NoiseBundle:
    """All randomness of one estimator call: one latent draw and K+1
    momentum draws (initial momentum plus one per possible refresh)."""

    eps_z: np.ndarray
    eps_v: np.ndarray

    def __post_init__(self):
        eps_z = np.atleast_1d(np.asarray(self.eps_z, dtype=np.float64))
        eps_v = np.asarray(self.eps_v, dtype=np.float64)
        if eps_v.ndim != 2 or eps_v.shape[1] != eps_z.shape[0] or eps_v.shape[0] < 1:
            raise ValueError(
                "eps_v must be (K+1) x %d, got %s" % (eps_z.shape[0], eps_v.shape)
            )
        object.__setattr__(self, "eps_z", eps_z)
        object.__setattr__(self, "eps_v", eps_v)

    @property
    def k(self) -> int:
        return self.eps_v.shape[0] - 1

    @classmethod
    def draw(cls, rng: np.random.Generator, d: int, k: int) -> "NoiseBundle":
        return cls(
            eps_z=rng.standard_normal(d),
            eps_v=rng.standard_normal((k + 1, d)),
        )


@dataclass
class ElboEstimate:
    """Single-sample bound estimate with its differentiable output node,
    the final chain position, and per-step diagnostics (length K)."""

    value: float
    node: Var
    z_final: np.ndarray
    z_node: Var
    etas: list
    betas: list
    kinetics: list
    param_vars: list

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("estimate value must be finite")


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    if np.isscalar(x) or isinstance(x, (int, float)):
        return tape.leaf(float(x))
    return tape.leaf(np.asarray(x, dtype=np.float64))


def sample_minibatch(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform size-`batch` subset of range(n), sorted.  The full-batch
    case returns range(n) without consuming any randomness, so full-batch
    runs of different methods share identical noise streams."""
    if not 1 <= batch <= n:
        raise ValueError("batch must be in [1, %d], got %d" % (n, batch))
    if batch == n:
        return np.arange(n)
    return np.sort(_sample_without_replacement(n, batch, rng))


# --- chain primitives ------------------------------------------------------


def leapfrog(z: Var, v: Var, eta, mass_diag, grad_logdensity, inv_mass=None):
    """One position-velocity-position leapfrog step under the supplied
    log-density gradient (the negative potential gradient).

    Returns (z_new, v_hat).  An optional precomputed inverse mass avoids
    re-deriving it on the tape each step.
    """
    tape = z.tape
    eta = _as_var(tape, eta)
    if inv_mass is None:
        inv_mass = div(tape.leaf(1.0), _as_var(tape, mass_diag))
    half_eta = mul(eta, tape.leaf(0.5))
    z_half = add(z, scale(half_eta, mul(inv_mass, v)))
    g = grad_logdensity(z_half)
    v_hat = add(v, scale(eta, g))
    z_new = add(z_half, scale(half_eta, mul(inv_mass, v_hat)))
    return z_new, v_hat


def refresh(v_hat: Var, gamma, mass_diag, eps, sqrt_mass=None) -> Var:
    """Partial momentum refreshment: gamma * v_hat plus a fresh
    sqrt(1 - gamma^2) sqrt(M) eps kick."""
    tape = v_hat.tape
    gamma = _as_var(tape, gamma)
    if sqrt_mass is None:
        sqrt_mass = sqrt(_as_var(tape, mass_diag))
    kick = sqrt(sub(tape.leaf(1.0), square(gamma)))
    return add(scale(gamma, v_hat), scale(kick, mul(sqrt_mass, _as_var(tape, eps))))


def kinetic_diff(v_hat: Var, v_prev: Var, mass_diag, inv_mass=None) -> Var:
    """log N(v_hat | 0, M) - log N(v_prev | 0, M); the normalizers cancel
    so only the quadratic forms remain."""
    tape = v_hat.tape
    if inv_mass is None:
        inv_mass = div(tape.leaf(1.0), _as_var(tape, mass_diag))
    q_hat = dot(v_hat, mul(inv_mass, v_hat))
    q_prev = dot(v_prev, mul(inv_mass, v_prev))
    return mul(tape.leaf(-0.5), sub(q_hat, q_prev))


def refresh_log_density(v_to: Var, v_from: Var, gamma, mass_diag) -> Var:
    """Gaussian log-density of v_to under mean gamma*v_from and
    covariance (1-gamma^2) M."""
    tape = v_to.tape
    gamma = _as_var(tape, gamma)
    g = float(np.asarray(gamma.value))
    if g >= 1.0:
        raise ValueError("gamma must be < 1 for a non-degenerate kernel, got %r" % g)
    mass_diag = _as_var(tape, mass_diag)
    d = np.atleast_1d(np.asarray(v_to.value)).shape[0]
    shrink = sub(tape.leaf(1.0), square(gamma))
    r = sub(v_to, scale(gamma, v_from))
    quad = div(dot(r, div(r, mass_diag)), shrink)
    logdet = add(mul(tape.leaf(float(d)), log(shrink)), vsum(log(mass_diag)))
    return sub(
        tape.leaf(-0.5 * d * LOG_2PI),
        mul(tape.leaf(0.5), add(logdet, quad)),
    )


# --- shared estimator skeleton ----------------------------------------------


def _collect_params(bq, ba=None, bs=None, bm=None) -> list:
    out = [("q0." + n, v) for n, v in bq.params()]
    if ba is not None:
        out.extend(("anneal." + n, v) for n, v in ba.params())
    if bs is not None:
        out.extend(("surr." + n, v) for n, v in bs.params())
    if bm is not None:
        out.extend(("model." + n, v) for n, v in bm.theta_params())
    return out


def _run_chain(tape, bq, bm, ba, noise, lik_grad, k):
    """Anneal from the proposal toward the (possibly approximated)
    posterior, accumulating kinetic-energy differences."""
    z = bq.sample(noise.eps_z)
    elbo = neg(bq.log_density(z))
    etas, betas, kinetics = [], [], []
    if k == 0:
        return z, elbo, etas, betas, kinetics
    v = mul(ba.sqrt_mass, tape.leaf(noise.eps_v[0]))
    one = tape.leaf(1.0)
    step = 0
    try:
        for i, beta in enumerate(ba.betas(), start=1):
            step = i
            eta = ba.step_size(beta)
            one_minus_beta = sub(one, beta)

            def grad_fn(zh, beta=beta, one_minus_beta=one_minus_beta):
                target = bm.grad_log_prior(zh)
                if lik_grad is not None:
                    target = add(target, lik_grad(zh))
                return add(
                    scale(one_minus_beta, bq.grad_log_density(zh)),
                    scale(beta, target),
                )

            z, v_hat = leapfrog(z, v, eta, ba.mass_diag, grad_fn, inv_mass=ba.inv_mass)
            kd = kinetic_diff(v_hat, v, ba.mass_diag, inv_mass=ba.inv_mass)
            elbo = add(elbo, kd)
            if i < k:
                v = refresh(
                    v_hat, ba.gamma, ba.mass_diag, noise.eps_v[i], sqrt_mass=ba.sqrt_mass
                )
            else:
                v = v_hat
            etas.append(eta.value)
            betas.append(beta.value)
            kinetics.append(kd.value)
    except NonFiniteOperationError as exc:
        raise DivergenceError(step) from exc
    return z, elbo, etas, betas, kinetics


def _finish(elbo, z, bm, lik_final, scale_var, k):
    try:
        term = bm.log_prior(z)
        if lik_final is not None:
            ll = lik_final.loglik(z)
            if scale_var is not None:
                ll = mul(scale_var, ll)
            term = add(term, ll)
        return add(elbo, term)
    except NonFiniteOperationError as exc:
        raise DivergenceError(max(k, 1)) from exc


def _check_noise(noise: NoiseBundle, d: int, k: int):
    if noise.eps_z.shape[0] != d:
        raise ValueError("noise has dimension %d, expected %d" % (noise.eps_z.shape[0], d))
    if noise.k != k:
        raise ValueError("noise bundle carries %d momentum rows, expected %d" % (noise.k + 1, k + 1))


# --- the four estimators -----------------------------------------------------


def elbo_dais(model: ModelDensity, data, q0, anneal, noise: NoiseBundle,
              learn_model: bool = False) -> ElboEstimate:
    """Full-data annealed bound: exact likelihood gradient in the
    dynamics and the exact full-data final term.  `data=None` drops the
    likelihood entirely (a degenerate model whose evidence is 1)."""
    _check_noise(noise, model.d, anneal.k)
    if data is not None:
        model.validate_data(data)
    tape = Tape()
    bq = q0.bind(tape)
    bm = model.bind(tape, learn_model)
    ba = anneal.bind(tape)
    lik = bm.full(data) if data is not None else None
    lik_grad = lik.grad if lik is not None else None
    z, elbo, etas, betas, kinetics = _run_chain(tape, bq, bm, ba, noise, lik_grad, anneal.k)
    node = _finish(elbo, z, bm, lik, None, anneal.k)
    return ElboEstimate(
        value=node.value, node=node, z_final=np.array(z.value, copy=True), z_node=z,
        etas=etas, betas=betas, kinetics=kinetics,
        param_vars=_collect_params(bq, ba, None, bm),
    )


def elbo_ns_dais(model: ModelDensity, data: Dataset, q0, anneal, batch_size: int,
                 rng: np.random.Generator, noise: NoiseBundle,
                 ns_prime: bool = False, learn_model: bool = False) -> ElboEstimate:
    """Naive subsampling: one minibatch J, scaled by N/B, steers every
    chain step; an independent minibatch I scales the final term.  With
    `ns_prime` a fresh minibatch is drawn for each dynamics evaluation
    instead of a single J."""
    _check_noise(noise, model.d, anneal.k)
    model.validate_data(data)
    n = data.n
    tape = Tape()
    bq = q0.bind(tape)
    bm = model.bind(tape, learn_model)
    ba = anneal.bind(tape)
    sfac = tape.leaf(n / batch_size)
    if anneal.k == 0:
        lik_grad = None
    elif ns_prime:
        def lik_grad(zh):
            fresh = bm.subset(data, sample_minibatch(n, batch_size, rng))
            return scale(sfac, fresh.grad(zh))
    else:
        lik_j = bm.subset(data, sample_minibatch(n, batch_size, rng))

        def lik_grad(zh):
            return scale(sfac, lik_j.grad(zh))

    z, elbo, etas, betas, kinetics = _run_chain(tape, bq, bm, ba, noise, lik_grad, anneal.k)
    lik_i = bm.subset(data, sample_minibatch(n, batch_size, rng))
    node = _finish(elbo, z, bm, lik_i, sfac, anneal.k)
    return ElboEstimate(
        value=node.value, node=node, z_final=np.array(z.value, copy=True), z_node=z,
        etas=etas, betas=betas, kinetics=kinetics,
        param_vars=_collect_params(bq, ba, None, bm),
    )


def elbo_sl_dais(model: ModelDensity, data: Dataset, q0, anneal,
                 surr: SurrogateLikelihood, batch_size: int,
                 rng: np.random.Generator, noise: NoiseBundle,
                 learn_model: bool = False) -> ElboEstimate:
    """Surrogate-guided chain: the weighted point subset supplies every
    dynamics gradient (cost O(N_surr) per step, dataset never touched),
    and data subsampling occurs solely in the final likelihood term."""
    _check_noise(noise, model.d, anneal.k)
    model.validate_data(data)
    n = data.n
    tape = Tape()
    bq = q0.bind(tape)
    bm = model.bind(tape, learn_model)
    ba = anneal.bind(tape)
    if anneal.k > 0:
        bs = surr.bind(bm)
        lik_grad = bs.grad
    else:
        bs = None
        lik_grad = None
    z, elbo, etas, betas, kinetics = _run_chain(tape, bq, bm, ba, noise, lik_grad, anneal.k)
    sfac = tape.leaf(n / batch_size)
    lik_i = bm.subset(data, sample_minibatch(n, batch_size, rng))
    node = _finish(elbo, z, bm, lik_i, sfac, anneal.k)
    return ElboEstimate(
        value=node.value, node=node, z_final=np.array(z.value, copy=True), z_node=z,
        etas=etas, betas=betas, kinetics=kinetics,
        param_vars=_collect_params(bq, ba, bs, bm),
    )


def elbo_parametric(model: ModelDensity, data: Dataset, q0, batch_size: int,
                    rng: np.random.Generator, eps: np.ndarray,
                    learn_model: bool = False) -> ElboEstimate:
    """Plain single-sample bound with an (N/B)-scaled minibatch
    likelihood; the chain-free baseline."""
    model.validate_data(data)
    eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
    if eps.shape[0] != model.d:
        raise ValueError("eps has dimension %d, expected %d" % (eps.shape[0], model.d))
    n = data.n
    tape = Tape()
    bq = q0.bind(tape)
    bm = model.bind(tape, learn_model)
    z = bq.sample(eps)
    elbo = neg(bq.log_density(z))
    sfac = tape.leaf(n / batch_size)
    lik_i = bm.subset(data, sample_minibatch(n, batch_size, rng))
    node = _finish(elbo, z, bm, lik_i, sfac, 0)
    return ElboEstimate(
        value=node.value, node=node, z_final=np.array(z.value, copy=True), z_node=z,
        etas=[], betas=[], kinetics=[],
        param_vars=_collect_params(bq, None, None, bm),
    )
