"""Command-line entry points.

fit     train per a JSON config; metrics as JSONL to stdout or --out
oracle  closed-form conjugate quantities for a CSV + prior config
gen     draw a synthetic dataset and write it as CSV
check   run the built-in invariant suite (frozen numeric examples)
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .model import Dataset
from .oracle import (
    GaussianMoments,
    aggregate_pseudo_posterior,
    exact_posterior,
    likelihood_quadratic,
    log_evidence,
)
from .train import RunConfig, build_model, generate_synthetic, load_csv, run_fit, write_csv


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _cmd_fit(args) -> int:
    config = RunConfig.from_json(_read_json(args.config))
    if args.out is not None:
        config.out = args.out
    if args.checkpoint is not None:
        config.checkpoint = args.checkpoint
    # Metrics stream to stdout unless a file was requested; the final
    # report then goes wherever the metrics are not.
    stream = sys.stdout if config.out is None else None
    report = run_fit(config, metrics_stream=stream)
    summary = {
        "method": report.method,
        "steps": report.steps,
        "final_elbo_mean": report.final_elbo_mean,
        "final_elbo_se": report.final_elbo_se,
        "log_evidence": report.log_evidence,
        "oracle_gap": report.oracle_gap,
        "divergences": report.divergences,
    }
    target = sys.stderr if config.out is None else sys.stdout
    target.write(json.dumps(summary) + "\n")
    return 0


def _cmd_oracle(args) -> int:
    config = RunConfig.from_json(_read_json(args.config))
    if config.dataset is None:
        raise SystemExit("oracle requires a dataset path in the config")
    data = load_csv(config.dataset)
    model = build_model(config, data.d)
    if model.kind != "linear":
        raise SystemExit("closed-form quantities exist only for the linear kind")
    model.validate_data(data)
    prior = GaussianMoments(model.mu0, model.lam0)
    post = exact_posterior(prior, data, model.sigma_obs)
    quad = likelihood_quadratic(data, model.sigma_obs)
    out = {
        "n": data.n,
        "d": data.d,
        "log_evidence": log_evidence(prior, data, model.sigma_obs),
        "posterior_mean": post.mean.tolist(),
        "posterior_precision": post.precision.tolist(),
        "posterior_covariance": post.covariance().tolist(),
        "likelihood_a": quad.a.tolist(),
        "likelihood_b": quad.b.tolist(),
        "aggregate": None,
    }
    if config.batch_size is not None and config.batch_size < data.n:
        if math.comb(data.n, config.batch_size) <= 100_000:
            mix = aggregate_pseudo_posterior(
                prior, data, model.sigma_obs, config.batch_size
            )
            out["aggregate"] = {
                "batch_size": config.batch_size,
                "mean": mix.mean.tolist(),
                "covariance": mix.covariance.tolist(),
            }
    sys.stdout.write(json.dumps(out, indent=1) + "\n")
    return 0


def _cmd_gen(args) -> int:
    spec = _read_json(args.spec)
    data = generate_synthetic(spec)
    write_csv(data, args.out)
    sys.stderr.write(
        "wrote %d rows with %d covariates to %s\n" % (data.n, data.d, args.out)
    )
    return 0


def _check_cases():
    """Fast self-contained invariant checks, each a frozen example from
    the unit suite.  Returns (name, callable) pairs; a callable raises on
    failure."""
    from .anneal import AnnealingState
    from .autodiff import Tape, gradient
    from .dais import (
        NoiseBundle,
        elbo_dais,
        elbo_parametric,
        kinetic_diff,
        leapfrog,
        refresh_log_density,
        sample_minibatch,
    )
    from .model import ModelDensity
    from .train import AdamState, adam_step, lr_at
    from .vardist import MeanFieldNormal

    def betas_uniform():
        a = AnnealingState.init(k=4, d=1)
        np.testing.assert_allclose(a.betas(), [0.25, 0.5, 0.75, 1.0], rtol=0, atol=0)

    def step_size_clip():
        a = AnnealingState.init(k=1, d=1, eta_init=0.3)
        assert a.step_size(1.0) == 0.25
        a = AnnealingState.init(k=1, d=1, eta_init=0.2)
        assert a.step_size(1.0) == 0.2

    def leapfrog_quadratic():
        t = Tape()
        z, v = t.leaf(np.array([1.0])), t.leaf(np.array([0.0]))
        eta, mass = t.leaf(0.1), t.leaf(np.array([1.0]))
        grad = lambda zh: t.leaf(-np.array([zh.value[0]]))
        z2, v2 = leapfrog(z, v, eta, mass, grad)
        np.testing.assert_allclose(z2.value, [0.995], atol=1e-12)
        np.testing.assert_allclose(v2.value, [-0.1], atol=1e-12)

    def kinetic_zero():
        t = Tape()
        v = t.leaf(np.array([0.7, -0.2]))
        m = t.leaf(np.array([1.0, 1.0]))
        assert kinetic_diff(v, v, m).value == 0.0

    def refresh_density_identity():
        t = Tape()
        rng = np.random.default_rng(7)
        a = t.leaf(rng.standard_normal(3))
        b = t.leaf(rng.standard_normal(3))
        m = t.leaf(np.exp(rng.standard_normal(3)))
        g = t.leaf(0.4)
        fwd = refresh_log_density(a, b, g, m)
        bwd = refresh_log_density(b, a, g, m)
        want = kinetic_diff(a, b, m).value
        assert abs((fwd.value - bwd.value) - want) < 1e-10

    def minibatch_full_is_arange():
        rng = np.random.default_rng(3)
        before = rng.bit_generator.state
        idx = sample_minibatch(6, 6, rng)
        assert rng.bit_generator.state == before
        np.testing.assert_array_equal(idx, np.arange(6))

    def adam_first_step():
        st = AdamState.init(1)
        st, p = adam_step(st, np.zeros(1), np.array([2.0]), 1e-3)
        assert abs(p[0] + 1e-3) < 1e-9

    def lr_breakpoints():
        lrs = (1e-3, 1e-4, 1e-5)
        assert lr_at(lrs, 0, 300_000) == 1e-3
        assert lr_at(lrs, 150_000, 300_000) == 1e-4
        assert lr_at(lrs, 250, 300) == 1e-5

    def k0_matches_plain_bound():
        rng = np.random.default_rng(11)
        X = rng.standard_normal((8, 2))
        y = X @ np.array([0.3, -0.5]) + 0.5 * rng.standard_normal(8)
        data = Dataset(X, y)
        model = ModelDensity(np.zeros(2), 1.0, "linear", sigma_obs=0.5)
        q0 = MeanFieldNormal.init(2)
        anneal = AnnealingState.init(k=0, d=2)
        noise = NoiseBundle.draw(np.random.default_rng(5), 2, 0)
        a = elbo_dais(model, data, q0, anneal, noise)
        b = elbo_parametric(model, data, q0, 8, np.random.default_rng(5), noise.eps_z)
        assert a.value == b.value

    def gradient_scalar_chain():
        t = Tape()
        from .autodiff import exp as t_exp, mul
        x = t.leaf(0.3)
        y = mul(t_exp(x), x)
        (g,) = gradient(y, [x])
        assert abs(g - (math.exp(0.3) * (1 + 0.3))) < 1e-12

    return [
        ("uniform raw betas give an even grid", betas_uniform),
        ("step size clips at eta_max", step_size_clip),
        ("leapfrog on the quadratic potential", leapfrog_quadratic),
        ("kinetic difference of equal velocities is zero", kinetic_zero),
        ("refresh density forward-backward identity", refresh_density_identity),
        ("full-size minibatch is arange and draws nothing", minibatch_full_is_arange),
        ("adam first step has magnitude lr", adam_first_step),
        ("lr schedule breakpoints", lr_breakpoints),
        ("K=0 chain equals the plain bound", k0_matches_plain_bound),
        ("reverse-mode gradient of x*exp(x)", gradient_scalar_chain),
    ]


def _cmd_check(_args) -> int:
    failures = 0
    for name, fn in _check_cases():
        try:
            fn()
        except Exception as exc:  # report every failure, not just the first
            failures += 1
            print("FAIL %s: %s" % (name, exc))
        else:
            print("ok   %s" % name)
    print("%s: %d checks, %d failures" % ("FAILED" if failures else "PASSED",
                                          len(_check_cases()), failures))
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sldais",
        description="Annealed importance-sampling variational inference "
        "with surrogate-guided dynamics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="train a model per a JSON config")
    p_fit.add_argument("config", help="path to a run config JSON file")
    p_fit.add_argument("--out", default=None, help="write metrics JSONL here "
                       "instead of stdout")
    p_fit.add_argument("--checkpoint", default=None, help="write the final "
                       "checkpoint JSON here")
    p_fit.set_defaults(func=_cmd_fit)

    p_oracle = sub.add_parser(
        "oracle", help="print closed-form posterior/evidence as JSON"
    )
    p_oracle.add_argument("config", help="config JSON with dataset and prior")
    p_oracle.set_defaults(func=_cmd_oracle)

    p_gen = sub.add_parser("gen", help="write a synthetic CSV dataset")
    p_gen.add_argument("spec", help="generator spec JSON")
    p_gen.add_argument("out", help="output CSV path")
    p_gen.set_defaults(func=_cmd_gen)

    p_check = sub.add_parser("check", help="run the built-in invariant suite")
    p_check.set_defaults(func=_cmd_check)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
