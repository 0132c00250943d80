"""Training loop and run orchestration.

One Adam loop drives every method.  All learnable parameters live in a
single flat vector with a fixed group order (proposal, annealing raws,
surrogate log-weights, then model theta) so optimizer state is portable
across checkpoints.  Each step draws an explicit noise bundle, evaluates
one (or S averaged) single-sample bound estimates, backpropagates to the
raw parameters, and applies one bias-corrected Adam update.  Frozen
groups participate with zeroed gradients, which leaves them exactly
unchanged.  Divergent samples skip the update, count toward a windowed
abort threshold, and still emit a metrics record.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from .anneal import AnnealingState
from .autodiff import gradient
from .dais import (
    DivergenceError,
    NoiseBundle,
    elbo_dais,
    elbo_ns_dais,
    elbo_parametric,
    elbo_sl_dais,
    sample_minibatch,
)
from .model import Dataset, ModelDensity
from .oracle import GaussianMoments, log_evidence
from .sampling import batch_estimates
from .surrogate import SurrogateLikelihood
from .vardist import FullRankNormal, MeanFieldNormal
from .vardist import from_json as dist_from_json

logger = logging.getLogger(__name__)

METHODS = ("mf", "mvn", "dais", "ns-dais", "sl-dais")
ANNEALED = ("dais", "ns-dais", "sl-dais")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_CONFIG_DEFAULTS = {
    "k": 0,
    "batch_size": None,
    "n_surr": None,
    "seed": 0,
    "steps": 1000,
    "lr": (1e-3, 1e-4, 1e-5),
    "dataset": None,
    "prior": None,
    "model": None,
    "learn_mass": True,
    "ns_prime": False,
    "standardize": False,
    "learn_weights": True,
    "freeze": (),
    "q0_init": None,
    "eta_init": 1e-3,
    "eta_max": 0.25,
    "gamma_init": 0.9,
    "s_samples": 1,
    "report_samples": 10_000,
    "out": None,
    "checkpoint": None,
}


@dataclass
class RunConfig:
    """Everything that determines a run; (config, seed) fixes the whole
    metrics stream."""

    method: str
    k: int = 0
    batch_size: int | None = None
    n_surr: int | None = None
    seed: int = 0
    steps: int = 1000
    lr: tuple = (1e-3, 1e-4, 1e-5)
    dataset: str | None = None
    prior: dict | None = None
    model: dict | None = None
    learn_mass: bool = True
    ns_prime: bool = False
    standardize: bool = False
    learn_weights: bool = True
    freeze: tuple = ()
    q0_init: str | None = None
    eta_init: float = 1e-3
    eta_max: float = 0.25
    gamma_init: float = 0.9
    s_samples: int = 1
    report_samples: int = 10_000
    out: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(
                "method must be one of %s, got %r" % ("/".join(METHODS), self.method)
            )
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.k < 0:
            raise ValueError("K must be >= 0")
        if self.method not in ANNEALED and self.k > 0:
            raise ValueError("K applies only to annealed methods, not %r" % self.method)
        if self.method == "sl-dais":
            if self.n_surr is None:
                raise ValueError("sl-dais requires n_surr")
        elif self.n_surr is not None:
            raise ValueError("n_surr applies only to sl-dais")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.lr = tuple(float(v) for v in self.lr)
        if len(self.lr) != 3 or any(v <= 0 for v in self.lr):
            raise ValueError("lr must be a triple of positive rates")
        if self.s_samples < 1:
            raise ValueError("s_samples must be >= 1")
        self.freeze = tuple(self.freeze)
        if self.q0_init not in (None, "prior"):
            raise ValueError("q0_init must be null or 'prior'")

    @classmethod
    def from_json(cls, payload: dict) -> "RunConfig":
        if "method" not in payload:
            raise ValueError("config is missing the required key 'method'")
        unknown = set(payload) - set(_CONFIG_DEFAULTS) - {"method"}
        if unknown:
            raise ValueError("unknown config keys: %s" % ", ".join(sorted(unknown)))
        return cls(**payload)

    def to_json(self) -> dict:
        out = asdict(self)
        out["lr"] = list(self.lr)
        return out


@dataclass
class AdamState:
    """Bias-corrected first/second moment accumulators."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float,
              maximize: bool = False):
    """One Adam update.  Descends by default; with `maximize` the caller
    passes the objective gradient and the step ascends.  A non-finite
    gradient skips the update entirely and logs the event."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient, and state shapes must match")
    if not np.isfinite(grad).all():
        logger.warning("skipping optimizer step %d: non-finite gradient", state.t + 1)
        return state, params.copy()
    g = -grad if maximize else grad
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return AdamState(m=m, v=v, t=t), new_params


def lr_at(lrs, step: int, total_steps: int) -> float:
    """Piecewise-constant schedule: breakpoints at 1e5 and 2e5 steps, or
    at 1/3 and 2/3 of the run when it is shorter than 3e5 steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total_steps >= 300_000:
        b1, b2 = 100_000, 200_000
    else:
        b1, b2 = total_steps / 3.0, 2.0 * total_steps / 3.0
    if step >= b2:
        return lrs[2]
    if step >= b1:
        return lrs[1]
    return lrs[0]


def load_csv(path: str) -> Dataset:
    return Dataset.from_csv(path)


def emit_metrics(stream, record: dict):
    """Write one newline-terminated JSON object."""
    stream.write(json.dumps(record) + "\n")


# --- model/parameter assembly ------------------------------------------------


def build_model(config: RunConfig, d: int) -> ModelDensity:
    prior = config.prior or {}
    mu0 = np.asarray(prior.get("mu0", 0.0), dtype=np.float64)
    if mu0.ndim == 0:
        mu0 = np.full(d, float(mu0))
    lam0 = prior.get("lam0", 1.0)
    spec = config.model or {}
    kind = spec.get("kind", "linear")
    sigma = spec.get("sigma_obs", 1.0 if kind == "linear" else None)
    return ModelDensity(mu0, lam0, kind, sigma_obs=sigma)


def _prior_proposal(model: ModelDensity, full_rank: bool):
    """Proposal whose density equals the prior exactly."""
    d = model.d
    if full_rank:
        L = np.linalg.cholesky(np.linalg.inv(model.lam0))
        raw = []
        for i in range(d):
            for j in range(i + 1):
                raw.append(math.log(L[i, i]) if i == j else L[i, j])
        return FullRankNormal(model.mu0.copy(), np.array(raw))
    off = model.lam0 - np.diag(np.diag(model.lam0))
    if np.abs(off).max() > 0:
        raise ValueError("q0_init='prior' with a mean-field proposal needs a "
                         "diagonal prior precision")
    return MeanFieldNormal(model.mu0.copy(), -0.5 * np.log(np.diag(model.lam0)))


def _standardized(data: Dataset) -> Dataset:
    mean = data.X.mean(axis=0)
    std = data.X.std(axis=0)
    std[std == 0.0] = 1.0
    return Dataset((data.X - mean) / std, data.y)


def _init_state(config: RunConfig, data: Dataset, surrogate=None):
    d = data.d
    model = build_model(config, d)
    model.validate_data(data)
    if config.batch_size is not None and config.batch_size > data.n:
        raise ValueError(
            "batch size %d exceeds dataset size %d" % (config.batch_size, data.n)
        )
    q0 = (
        FullRankNormal.init(d)
        if config.method == "mvn"
        else MeanFieldNormal.init(d)
    )
    if config.q0_init == "prior":
        q0 = _prior_proposal(model, full_rank=config.method == "mvn")
    anneal = None
    if config.method in ANNEALED:
        anneal = AnnealingState.init(
            k=config.k, d=d, eta_init=config.eta_init,
            gamma_init=config.gamma_init, eta_max=config.eta_max,
        )
    surr = None
    if config.method == "sl-dais":
        if surrogate is not None:
            if surrogate.n_surr != config.n_surr:
                raise ValueError(
                    "supplied surrogate has %d points but the config says %d"
                    % (surrogate.n_surr, config.n_surr)
                )
            surr = surrogate
        else:
            surr = SurrogateLikelihood.init_rand(
                data, config.n_surr, np.random.default_rng([config.seed, 1])
            )
    elif surrogate is not None:
        raise ValueError("a surrogate only applies to sl-dais")
    return model, q0, anneal, surr


def _param_groups(q0, anneal, surr):
    groups = [("q0." + n, a) for n, a in q0.get_params()]
    if anneal is not None:
        groups.extend(("anneal." + n, a) for n, a in anneal.get_params())
    if surr is not None:
        groups.extend(("surr." + n, a) for n, a in surr.get_params())
    return groups


def _flatten(groups) -> np.ndarray:
    if not groups:
        return np.zeros(0)
    return np.concatenate([np.atleast_1d(np.asarray(a, dtype=np.float64)).ravel()
                           for _, a in groups])


def _apply_flat(flat: np.ndarray, groups, q0, anneal, surr):
    values = {}
    pos = 0
    for name, a in groups:
        size = np.atleast_1d(a).size
        values[name] = flat[pos:pos + size]
        pos += size
    q0.set_params(*(values["q0." + n] for n, _ in q0.get_params()))
    if anneal is not None:
        anneal.set_params(*(values["anneal." + n] for n, _ in anneal.get_params()))
    if surr is not None:
        surr.set_params(values["surr.raw_log_weights"])


def _freeze_mask(groups, config: RunConfig) -> np.ndarray:
    """1 where a coordinate learns, 0 where it is frozen.  `freeze`
    entries name either a whole group prefix ("q0") or a single group
    ("anneal.raw_gamma")."""
    parts = []
    for name, a in groups:
        size = np.atleast_1d(a).size
        on = 1.0
        if name == "anneal.raw_mass" and not config.learn_mass:
            on = 0.0
        if name == "surr.raw_log_weights" and not config.learn_weights:
            on = 0.0
        prefix = name.split(".", 1)[0]
        if name in config.freeze or prefix in config.freeze:
            on = 0.0
        parts.append(np.full(size, on))
    return np.concatenate(parts) if parts else np.zeros(0)


def _gather_grads(est, groups) -> np.ndarray:
    """Flat objective gradient aligned with the numpy group order; groups
    absent from the tape (frozen or structurally unused) get zeros."""
    by_name = dict(est.param_vars)
    wanted = [(name, by_name.get(name)) for name, _ in groups]
    present = [v for _, v in wanted if v is not None]
    grads = gradient(est.node, present) if present else []
    out = []
    it = iter(grads)
    for (name, var), (_, a) in zip(wanted, groups):
        size = np.atleast_1d(a).size
        if var is None:
            out.append(np.zeros(size))
        else:
            out.append(np.atleast_1d(np.asarray(next(it), dtype=np.float64)).ravel())
    return np.concatenate(out) if out else np.zeros(0)


def _estimate(config: RunConfig, model, data, q0, anneal, surr, batch_size,
              rng: np.random.Generator):
    d = model.d
    if config.method in ("mf", "mvn"):
        eps = rng.standard_normal(d)
        return elbo_parametric(model, data, q0, batch_size, rng, eps)
    noise = NoiseBundle.draw(rng, d, config.k)
    if config.method == "dais":
        return elbo_dais(model, data, q0, anneal, noise)
    if config.method == "ns-dais":
        return elbo_ns_dais(
            model, data, q0, anneal, batch_size, rng, noise, ns_prime=config.ns_prime
        )
    return elbo_sl_dais(model, data, q0, anneal, surr, batch_size, rng, noise)


# --- checkpointing ------------------------------------------------------------


def save_checkpoint(config: RunConfig, q0, anneal, surr, adam: AdamState,
                    step: int) -> dict:
    out = {
        "config": config.to_json(),
        "seed": config.seed,
        "step": step,
        "q0": q0.to_json(),
        "anneal": None,
        "surrogate": surr.to_json() if surr is not None else None,
        "adam": {"m": adam.m.tolist(), "v": adam.v.tolist(), "t": adam.t},
    }
    if anneal is not None:
        out["anneal"] = {
            "k": anneal.k,
            "raw_beta": anneal.raw_beta.tolist(),
            "raw_eta": anneal.raw_eta,
            "raw_kappa": anneal.raw_kappa,
            "eta_max": anneal.eta_max,
            "raw_gamma": anneal.raw_gamma,
            "raw_mass": anneal.raw_mass.tolist(),
        }
    return out


def load_checkpoint(payload: dict, data: Dataset):
    config = RunConfig.from_json(payload["config"])
    q0 = dist_from_json(payload["q0"])
    anneal = None
    if payload["anneal"] is not None:
        a = payload["anneal"]
        anneal = AnnealingState(
            k=a["k"], raw_beta=np.asarray(a["raw_beta"]), raw_eta=a["raw_eta"],
            raw_kappa=a["raw_kappa"], eta_max=a["eta_max"],
            raw_gamma=a["raw_gamma"], raw_mass=np.asarray(a["raw_mass"]),
        )
    surr = None
    if payload["surrogate"] is not None:
        surr = SurrogateLikelihood.from_json(payload["surrogate"], data)
    adam = AdamState(
        m=np.asarray(payload["adam"]["m"], dtype=np.float64),
        v=np.asarray(payload["adam"]["v"], dtype=np.float64),
        t=int(payload["adam"]["t"]),
    )
    return config, q0, anneal, surr, adam


# --- the run ------------------------------------------------------------------


@dataclass
class FinalReport:
    """Post-training summary plus everything needed to reproduce it."""

    method: str
    steps: int
    final_elbo_mean: float
    final_elbo_se: float
    log_evidence: float | None
    oracle_gap: float | None
    divergences: int
    checkpoint: dict
    metrics: list = field(repr=False, default_factory=list)


def run_fit(config: RunConfig, data: Dataset | None = None,
            metrics_stream=None, surrogate=None) -> FinalReport:
    """Train per the config and return the report.  `data` overrides the
    configured CSV path; metrics go to `metrics_stream` (and/or
    `config.out`) as JSONL and are always collected in the report.  A
    pre-built surrogate replaces the random subset draw."""
    if data is None:
        if config.dataset is None:
            raise ValueError("config has no dataset path and no dataset was supplied")
        data = load_csv(config.dataset)
    if config.standardize:
        data = _standardized(data)
    model, q0, anneal, surr = _init_state(config, data, surrogate=surrogate)
    batch_size = config.batch_size if config.batch_size is not None else data.n

    groups = _param_groups(q0, anneal, surr)
    flat = _flatten(groups)
    mask = _freeze_mask(groups, config)
    adam = AdamState.init(flat.size)
    rng = np.random.default_rng([config.seed, 0])

    out_stream = None
    if config.out is not None:
        out_stream = open(config.out, "w", encoding="utf-8")
    records = []
    window = deque(maxlen=1000)
    divergences = 0
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            lr = lr_at(config.lr, step, config.steps)
            grad_sum = None
            value_sum = 0.0
            diverged = False
            for _ in range(config.s_samples):
                try:
                    est = _estimate(config, model, data, q0, anneal, surr,
                                    batch_size, rng)
                except DivergenceError as exc:
                    logger.warning("step %d: %s", step, exc)
                    diverged = True
                    break
                g = _gather_grads(est, groups)
                grad_sum = g if grad_sum is None else grad_sum + g
                value_sum += est.value
            window.append(diverged)
            if diverged:
                divergences += 1
                if len(window) == window.maxlen and sum(window) > window.maxlen // 2:
                    raise RuntimeError(
                        "aborting: %d of the last %d steps diverged "
                        "(eta_tilde=%.3g, kappa=%.3g); the step size schedule "
                        "is unstable for this problem"
                        % (sum(window), window.maxlen,
                           anneal.raw_eta if anneal else float("nan"),
                           anneal.raw_kappa if anneal else float("nan"))
                    )
                elbo_sample = None
            else:
                grad = (grad_sum / config.s_samples) * mask
                adam, flat = adam_step(adam, flat, grad, lr, maximize=True)
                _apply_flat(flat, groups, q0, anneal, surr)
                elbo_sample = value_sum / config.s_samples
            record = {
                "step": step,
                "elbo_sample": elbo_sample,
                "lr": lr,
                "eta_tilde": anneal.raw_eta if anneal is not None else None,
                "kappa": anneal.raw_kappa if anneal is not None else None,
                "gamma": anneal.gamma() if anneal is not None else None,
                "divergences": divergences,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            records.append(record)
            if metrics_stream is not None:
                emit_metrics(metrics_stream, record)
            if out_stream is not None:
                emit_metrics(out_stream, record)
    finally:
        if out_stream is not None:
            out_stream.close()

    report_rng = np.random.default_rng([config.seed, 2])
    eval_method = "parametric" if config.method in ("mf", "mvn") else config.method
    try:
        result = batch_estimates(
            model, data, q0, anneal, eval_method, config.report_samples,
            report_rng, surr=surr, batch_size=batch_size,
            ns_prime=config.ns_prime,
        )
        mean = float(result.values.mean())
        se = float(result.values.std(ddof=1) / math.sqrt(result.values.size))
    except FloatingPointError as exc:
        # the trained state itself diverges; report that honestly
        logger.warning("final evaluation diverged: %s", exc)
        mean = float("nan")
        se = float("nan")
    evidence = None
    gap = None
    if model.kind == "linear":
        prior = GaussianMoments(model.mu0, model.lam0)
        evidence = log_evidence(prior, data, model.sigma_obs)
        gap = evidence - mean
    checkpoint = save_checkpoint(config, q0, anneal, surr, adam, config.steps)
    if config.checkpoint is not None:
        with open(config.checkpoint, "w", encoding="utf-8") as fh:
            json.dump(checkpoint, fh, indent=1)
    return FinalReport(
        method=config.method,
        steps=config.steps,
        final_elbo_mean=mean,
        final_elbo_se=se,
        log_evidence=evidence,
        oracle_gap=gap,
        divergences=divergences,
        checkpoint=checkpoint,
        metrics=records,
    )


# --- synthetic data -----------------------------------------------------------


def generate_synthetic(spec: dict) -> Dataset:
    """Draw a dataset from the generative model itself: z* from the
    standard-normal prior, covariates standard normal (optionally with
    equicorrelation rho), responses from the chosen likelihood."""
    kind = spec.get("kind", "linear")
    n = int(spec["n"])
    d = int(spec["d"])
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    rho = float(spec.get("x_corr", 0.0))
    X = rng.standard_normal((n, d))
    if rho != 0.0:
        shared = rng.standard_normal((n, 1))
        X = math.sqrt(1.0 - rho) * X + math.sqrt(rho) * shared
    z_star = rng.standard_normal(d) * float(spec.get("z_scale", 1.0))
    if kind == "linear":
        sigma = float(spec.get("sigma_obs", 1.0))
        y = X @ z_star + sigma * rng.standard_normal(n)
    elif kind == "logistic":
        y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-(X @ z_star)))).astype(float)
        flip = float(spec.get("flip", 0.0))
        if flip > 0.0:
            swap = rng.uniform(size=n) < flip
            y = np.where(swap, 1.0 - y, y)
    else:
        raise ValueError("unknown synthetic kind %r" % kind)
    return Dataset(X, y)


def write_csv(data: Dataset, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        cols = ["x%d" % (j + 1) for j in range(data.d)]
        fh.write(",".join(cols + ["y"]) + "\n")
        for i in range(data.n):
            row = [repr(float(v)) for v in data.X[i]] + [repr(float(data.y[i]))]
            fh.write(",".join(row) + "\n")
