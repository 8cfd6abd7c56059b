"""Command-line front end.

    corrdp {calibrate|verify|rmse-sweep|optimize|counterexample|train}
           --config <path> [--threads N] [--out <path>]

Configs are JSON; outputs are JSON or CSV per command.  Every command is
deterministic given its config (seeds included).  Exit code 0 on success,
2 on an Abort verdict or a failed assertion.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import accounting, batching, oracle, optimizer, strategies, training
from .gaussian import calibrate_sigma_unamplified

DEFAULT_DELTA = 1e-5
DEFAULT_TAU = 1.25


def _schema_from(config: dict) -> strategies.ParticipationSchema:
    raw = config["schema"]
    return strategies.ParticipationSchema(int(raw["batches_per_epoch"]),
                                          int(raw["epochs"]))


def _json_text(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _calibration_report(config: dict, threads: int) -> dict:
    epsilon = float(config["epsilon"])
    delta = float(config.get("delta", DEFAULT_DELTA))
    tau = float(config.get("tau", DEFAULT_TAU))
    adjacency = config.get("adjacency", "both")
    seed = int(config["seed"])
    schema = _schema_from(config)
    strategy = strategies.from_json_dict(config["matrix"])
    sample_count = int(config["sample_count"])
    verify_count = int(config.get("verify_sample_count", sample_count))
    chunk_size = int(config.get("chunk_size", accounting.DEFAULT_CHUNK_SIZE))
    delta_prime = delta / tau

    sigma_star = accounting.calibrate_sigma(
        epsilon, delta, strategy, schema, sample_count, seed,
        tau=tau, adjacency=adjacency, chunk_size=chunk_size, threads=threads)
    modes = strategies.mode_vectors(strategy, schema)
    verify = accounting.estimate_delta_streaming(
        epsilon, sigma_star, modes, verify_count, seed + 1,
        chunk_size=chunk_size, adjacency=adjacency, threads=threads)
    # The tail bound needs tau > 1; at tau = 1 it is vacuous.
    failure = (accounting.bernstein_failure_prob(verify_count, tau, delta_prime)
               if tau > 1.0 else 1.0)
    if adjacency == "both":
        failure = min(1.0, 2.0 * failure)  # union bound over the two adjacencies
    return {
        "epsilon": epsilon,
        "delta": delta,
        "delta_prime": delta_prime,
        "sigma_star": sigma_star,
        "sample_count": verify_count,
        "std_error": verify.std_error,
        "bernstein_failure_prob": failure,
        "adjacency": adjacency,
        "seed": seed,
        "matrix_fingerprint": strategies.fingerprint(strategy),
    }, verify


def cmd_calibrate(config: dict, out: str | None, threads: int) -> int:
    report, _ = _calibration_report(config, threads)
    _emit(_json_text(report), out)
    return 0


def cmd_verify(config: dict, out: str | None, threads: int) -> int:
    epsilon = float(config["epsilon"])
    delta = float(config.get("delta", DEFAULT_DELTA))
    tau = float(config.get("tau", DEFAULT_TAU))
    seed = int(config["seed"])
    sigma = float(config["sigma"])
    schema = _schema_from(config)
    strategy = strategies.from_json_dict(config["matrix"])
    verify_count = int(config["verify_sample_count"])
    chunk_size = int(config.get("chunk_size", accounting.DEFAULT_CHUNK_SIZE))
    delta_prime = delta / tau

    modes = strategies.mode_vectors(strategy, schema)
    target = accounting.PrivacyParams(epsilon, delta_prime)
    per_adjacency = {}
    worst = 0.0
    for adjacency in ("add", "remove"):
        est = accounting.estimate_delta_streaming(
            epsilon, sigma, modes, verify_count, seed,
            chunk_size=chunk_size, adjacency=adjacency, threads=threads)
        per_adjacency[adjacency] = {"delta_hat": est.delta_hat,
                                    "std_error": est.std_error}
        worst = max(worst, est.delta_hat)
    gate = accounting.evr_gate(target, worst, tau)
    failure = (min(1.0, 2.0 * accounting.bernstein_failure_prob(
        verify_count, tau, delta_prime)) if tau > 1.0 else 1.0)
    report = {
        "verdict": gate.verdict,
        "epsilon": epsilon,
        "delta": delta,
        "delta_prime": delta_prime,
        "sigma": sigma,
        "sample_count": verify_count,
        "per_adjacency": per_adjacency,
        "released": {"epsilon": gate.released.epsilon, "delta": gate.released.delta},
        "bernstein_failure_prob": failure,
        "seed": seed,
        "matrix_fingerprint": strategies.fingerprint(strategy),
    }
    _emit(_json_text(report), out)
    return 0 if gate.proceed else 2


def cmd_rmse_sweep(config: dict, out: str | None, threads: int) -> int:
    delta = float(config.get("delta", DEFAULT_DELTA))
    tau = float(config.get("tau", DEFAULT_TAU))
    adjacency = config.get("adjacency", "both")
    seed = int(config["seed"])
    schema = _schema_from(config)
    sample_count = int(config["sample_count"])
    delta_prime = delta / tau

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["eps", "family", "rmse_unamp", "rmse_amp", "pct_improvement"])
    for matrix_cfg in config["matrices"]:
        strategy = strategies.from_json_dict(matrix_cfg)
        for epsilon in config["epsilons"]:
            epsilon = float(epsilon)
            sigma_unamp = calibrate_sigma_unamplified(epsilon, delta_prime,
                                                      strategy, schema)
            sigma_amp = accounting.calibrate_sigma(
                epsilon, delta, strategy, schema, sample_count, seed,
                tau=tau, adjacency=adjacency, threads=threads)
            rmse_unamp = strategies.rmse(strategy, sigma_unamp)
            rmse_amp = strategies.rmse(strategy, sigma_amp)
            improvement = 100.0 * (1.0 - rmse_amp / rmse_unamp)
            writer.writerow([epsilon, strategy.family,
                             f"{rmse_unamp:.10g}", f"{rmse_amp:.10g}",
                             f"{improvement:.10g}"])
    _emit(buffer.getvalue(), out)
    return 0


def cmd_optimize(config: dict, out: str | None, threads: int) -> int:
    schema = _schema_from(config)
    opt_config = optimizer.OptimizerConfig(
        family=config["family"],
        epsilon=float(config["epsilon"]),
        delta=float(config.get("delta", DEFAULT_DELTA)),
        schema=schema,
        steps=int(config["steps"]),
        learning_rate=float(config["learning_rate"]),
        samples_per_step=int(config["samples_per_step"]),
        final_sample_count=int(config["final_sample_count"]),
        seed=int(config["seed"]),
        buffers=int(config.get("buffers", 3)),
        tau=float(config.get("tau", DEFAULT_TAU)),
        adjacency=config.get("adjacency", "both"),
        resample_each_step=bool(config.get("resample_each_step", True)),
        threads=threads,
    )
    result = optimizer.optimize(opt_config)
    report = {
        "matrix": strategies.to_json_dict(result.strategy),
        "sigma": result.sigma,
        "rmse": result.rmse,
        "trace": result.trace.to_json_dict(),
        "matrix_fingerprint": strategies.fingerprint(result.strategy),
    }
    _emit(_json_text(report), out)
    return 0


def cmd_counterexample(config: dict, out: str | None, threads: int) -> int:
    sigmas = [float(s) for s in config.get("sigmas", [0.5, 1.0, 2.0])]
    alpha = float(config.get("alpha", math.exp(0.5)))
    tol = float(config.get("tol", 1e-9))
    points = []
    all_strict = True
    for sigma in sigmas:
        opposed, aligned = oracle.adaptivity_counterexample_check(sigma, alpha, tol)
        strict = bool(opposed > aligned)
        if alpha > 0.0:
            all_strict &= strict
        points.append({"sigma": sigma, "opposed_signs": opposed,
                       "aligned_signs": aligned, "strict": strict})
    report = {"alpha": alpha, "points": points, "all_strict": all_strict}
    _emit(_json_text(report), out)
    return 0 if all_strict else 2


def cmd_train(config: dict, out: str | None, threads: int) -> int:
    if out is None:
        raise SystemExit("train requires --out (a directory for the CSV traces)")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    epsilon = float(config["epsilon"])
    delta = float(config.get("delta", DEFAULT_DELTA))
    tau = float(config.get("tau", DEFAULT_TAU))
    seed = int(config["seed"])
    schema = _schema_from(config)
    strategy = strategies.from_json_dict(config["matrix"])
    sample_count = int(config["sample_count"])
    seeds = config.get("seeds", {})

    sigma_amp = accounting.calibrate_sigma(
        epsilon, delta, strategy, schema, sample_count, seed,
        tau=tau, threads=threads)
    sigma_unamp = calibrate_sigma_unamplified(epsilon, delta / tau, strategy, schema)

    modes = config.get("modes", list(training.MODES))
    for mode in modes:
        run_config = training.TrainingConfig(
            model_dim=int(config["model_dim"]),
            dataset_size=int(config["dataset_size"]),
            schema=schema,
            batch_size=int(config["batch_size"]),
            strategy=strategy,
            learning_rate=float(config["learning_rate"]),
            clip_norm=float(config.get("clip_norm", 1.0)),
            momentum=float(config.get("momentum", 0.0)),
            mode=mode,
            data_seed=int(seeds.get("data", 0)),
            assignment_seed=int(seeds.get("assignment", 1)),
            noise_seed=int(seeds.get("noise", 2)),
        )
        sigma = sigma_unamp if mode == "unamplified_sigma" else sigma_amp
        result = training.train(run_config, sigma)
        with open(out_dir / f"{mode}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm", "noise_norm"])
            for record in result.steps:
                writer.writerow([record["step"], f"{record['loss']:.10g}",
                                 f"{record['grad_norm']:.10g}",
                                 f"{record['noise_norm']:.10g}"])
    metadata = {
        "epsilon": epsilon,
        "delta": delta,
        "sigma_amplified": sigma_amp,
        "sigma_unamplified": sigma_unamp,
        "modes": list(modes),
        "matrix_fingerprint": strategies.fingerprint(strategy),
        "seed": seed,
    }
    (out_dir / "metadata.json").write_text(_json_text(metadata))
    return 0


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "verify": cmd_verify,
    "rmse-sweep": cmd_rmse_sweep,
    "optimize": cmd_optimize,
    "counterexample": cmd_counterexample,
    "train": cmd_train,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="corrdp",
        description="Privacy accounting and strategy optimization for "
                    "correlated-noise DP training under balls-in-bins batching.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="path to the JSON config "
                        "(optional for counterexample)")
    parser.add_argument("--out", help="output path (train: output directory)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for sample chunks; does not change results")
    args = parser.parse_args(argv)
    config = _load_config(args.config) if args.config else {}
    if args.command != "counterexample" and not args.config:
        parser.error(f"{args.command} requires --config")
    return _COMMANDS[args.command](config, args.out, max(args.threads, 1))


if __name__ == "__main__":
    sys.exit(main())
