"""Batch command-line front end for reproducible experiment runs.

Subcommands: ``simulate``, ``fit``, ``eval``, ``recover``, ``sweep-k2``.
Every run that writes an output directory also writes exactly one
``manifest.json`` recording the resolved configuration, seed, duration,
artifact paths and library version, sufficient to re-run the command.
Progress and acceptance rates go to stderr; machine-readable output goes
to stdout or files only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import CorpusFormatError, load_triplets, read_labels, write_labels
from .metrics import Partition, adjusted_rand_index, matched_accuracy, recovery_distance
from .mou_em import em_fit, mou_assign, write_model_json
from .numerics import RngStream
from .sampler import (
    SamplerConfig,
    consensus_partition,
    posterior_mean_params,
    read_chain_jsonl,
    run_chain,
    write_chain_jsonl,
    write_log_posterior_csv,
)
from .simulate import (
    RECOVERY_GRID_CELLS,
    SimConfig,
    Study,
    generate,
    read_true_params,
    recovery_grid,
    write_sim_output,
)

__all__ = ["main"]


class CliError(Exception):
    """Fatal command error; message printed to stderr, nonzero exit."""


def _default_threads() -> int:
    env = os.environ.get("DEEP_MOU_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    """Merge a JSON config file under the flags: flags win, file fills gaps."""
    if getattr(args, "config", None) is None:
        return args
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config file {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise CliError("config file must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if attr not in parser_defaults:
            raise CliError(f"config file key {key!r} is not a flag of this command")
        if getattr(args, attr) == parser_defaults[attr]:
            setattr(args, attr, value)
    return args


def _write_manifest(out_dir: Path, command: str, config: dict, seed, duration: float,
                    artifacts: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "duration_seconds": duration,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "library_version": __version__,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _emit_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_simulate(args: argparse.Namespace) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    study = Study(args.study)
    config = {"study": study.value, "n": args.n, "T": args.T, "k1": args.k1, "k2": args.k2,
              "N": args.N, "beta_max": args.beta_max, "seed": args.seed}
    artifacts: dict = {}
    if study is Study.GRID:
        outputs = recovery_grid(RngStream(args.seed))
        for idx, (cell, sim) in enumerate(zip(RECOVERY_GRID_CELLS, outputs)):
            cell_dir = out_dir / f"cell_{idx:02d}_n{cell[0]}_T{cell[1]}_N{int(cell[2])}"
            files = write_sim_output(sim, cell_dir)
            artifacts.update({f"cell_{idx:02d}/{k}": v for k, v in files.items()})
        print(f"wrote {len(outputs)} grid cells to {out_dir}", file=sys.stderr)
    else:
        cfg = SimConfig(study=study, n=args.n, T=args.T, k1=args.k1, k2=args.k2,
                        poisson_N=args.N, beta_max=args.beta_max, seed=args.seed)
        cfg.validate()
        sim = generate(cfg, RngStream(args.seed))
        artifacts = write_sim_output(sim, out_dir)
        print(f"wrote {sim.X.n_docs}x{sim.X.n_terms} corpus "
              f"(sparsity {sim.X.sparsity():.4f}) to {out_dir}", file=sys.stderr)
    _write_manifest(out_dir, "simulate", config, args.seed, time.time() - started, artifacts)
    return 0


def _fit_deep(args, X, out_dir: Path) -> dict:
    cfg = SamplerConfig(iterations=args.iterations, burn_in=args.burn_in, delta=args.delta,
                        alpha_step=args.alpha_step, beta_step_rel=args.beta_step,
                        seed=args.seed, thin=args.thin, threads=args.threads)
    trace = run_chain(X, args.k1, args.k2, cfg)
    last = trace.states[-1]
    kept = len(trace)
    alpha_rate = last.accept_alpha / args.iterations if args.k2 > 1 else np.zeros(args.k2)
    beta_rate = last.accept_beta / args.iterations
    print(f"kept {kept} states; MH acceptance alpha={np.round(alpha_rate, 3).tolist()} "
          f"beta={np.round(beta_rate, 3).tolist()}", file=sys.stderr)
    artifacts = {"chain": out_dir / "chain.jsonl", "partition": out_dir / "partition.txt",
                 "trace": out_dir / "log_posterior.csv"}
    write_chain_jsonl(trace, artifacts["chain"])
    write_log_posterior_csv(trace, artifacts["trace"])
    part = consensus_partition(trace)
    write_labels(part.labels, artifacts["partition"])
    return artifacts


def _fit_mou(args, X, out_dir: Path) -> dict:
    params, _, trace = em_fit(X, args.k1, max_iters=args.max_iters, tol=args.tol,
                              restarts=args.restarts, seed=args.seed)
    print(f"EM converged after {trace.size} evaluations; final log-lik {trace[-1]:.4f}",
          file=sys.stderr)
    artifacts = {"model": out_dir / "model.json", "partition": out_dir / "partition.txt",
                 "trace": out_dir / "log_lik.csv"}
    write_model_json(params, artifacts["model"])
    with open(artifacts["trace"], "w", encoding="utf-8") as fh:
        fh.write("iteration,log_likelihood\n")
        for idx, value in enumerate(trace):
            fh.write(f"{idx},{value!r}\n")
    part = mou_assign(X, params)
    write_labels(part.labels, artifacts["partition"])
    return artifacts


def cmd_fit(args: argparse.Namespace) -> int:
    started = time.time()
    try:
        X = load_triplets(args.input)
    except OSError as exc:
        raise CliError(f"cannot read input matrix: {exc}") from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {"input": str(args.input), "model": args.model, "k1": args.k1, "k2": args.k2,
              "iterations": args.iterations, "burn_in": args.burn_in, "delta": args.delta,
              "alpha_step": args.alpha_step, "beta_step": args.beta_step, "thin": args.thin,
              "max_iters": args.max_iters, "tol": args.tol, "restarts": args.restarts,
              "threads": args.threads, "seed": args.seed}
    if args.model == "deep":
        artifacts = _fit_deep(args, X, out_dir)
    else:
        artifacts = _fit_mou(args, X, out_dir)
    _write_manifest(out_dir, "fit", config, args.seed, time.time() - started, artifacts)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred = read_labels(args.pred)
    truth = read_labels(args.truth)
    if pred.size != truth.size:
        raise CliError(f"label files have different lengths: {pred.size} vs {truth.size}")
    pred_p = Partition.from_labels(pred)
    truth_p = Partition.from_labels(truth)
    payload = {
        "ari": adjusted_rand_index(pred_p, truth_p),
        "accuracy": matched_accuracy(pred_p, truth_p),
        "n": int(pred.size),
        "k_pred": pred_p.k,
        "k_true": truth_p.k,
    }
    _emit_json(payload, args.out)
    return 0


def cmd_recover(args: argparse.Namespace) -> int:
    truth = read_true_params(args.true_params)
    trace = read_chain_jsonl(args.chain)
    if len(trace) == 0:
        raise CliError(f"chain dump {args.chain} holds no states")
    est = posterior_mean_params(trace)
    if est.beta.shape != truth["beta"].shape or est.alpha.shape != truth["alpha"].shape:
        raise CliError(
            f"shape mismatch: chain has beta {est.beta.shape} / alpha {est.alpha.shape}, "
            f"truth has {truth['beta'].shape} / {truth['alpha'].shape}")
    payload = {
        "beta_distances": recovery_distance(truth["beta"], est.beta).tolist(),
        "alpha_distances": recovery_distance(truth["alpha"], est.alpha).tolist(),
        "n_states": len(trace),
    }
    _emit_json(payload, args.out)
    return 0


def _parse_k2_range(text: str) -> list[int]:
    text = text.strip()
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            values = list(range(int(lo), int(hi) + 1))
        elif "," in text:
            values = [int(p) for p in text.split(",")]
        else:
            values = [int(text)]
    except ValueError:
        raise CliError(f"cannot parse --k2-range {text!r}; use LO:HI or a comma list") from None
    if not values or any(v < 1 for v in values):
        raise CliError("--k2-range values must be >= 1")
    return values


def cmd_sweep_k2(args: argparse.Namespace) -> int:
    started = time.time()
    X = load_triplets(args.input)
    truth = Partition.from_labels(read_labels(args.truth))
    if len(truth) != X.n_docs:
        raise CliError(f"truth labels ({len(truth)}) do not match corpus size ({X.n_docs})")
    k2_values = _parse_k2_range(args.k2_range)
    lines = ["k2,ari,accuracy"]
    for k2 in k2_values:
        cfg = SamplerConfig(iterations=args.iterations, burn_in=args.burn_in, delta=args.delta,
                            alpha_step=args.alpha_step, beta_step_rel=args.beta_step,
                            seed=args.seed, thin=args.thin, threads=args.threads)
        trace = run_chain(X, args.k1, k2, cfg)
        part = consensus_partition(trace)
        ari = adjusted_rand_index(part, truth)
        acc = matched_accuracy(part, truth)
        print(f"k2={k2}: ari={ari:.4f} accuracy={acc:.4f}", file=sys.stderr)
        lines.append(f"{k2},{ari!r},{acc!r}")
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "sweep_k2.csv"
        csv_path.write_text(csv_text, encoding="utf-8")
        config = {"input": str(args.input), "truth": str(args.truth), "k1": args.k1,
                  "k2_range": args.k2_range, "iterations": args.iterations,
                  "burn_in": args.burn_in, "delta": args.delta, "alpha_step": args.alpha_step,
                  "beta_step": args.beta_step, "thin": args.thin, "threads": args.threads,
                  "seed": args.seed}
        _write_manifest(out_dir, "sweep-k2", config, args.seed, time.time() - started,
                        {"csv": csv_path})
    else:
        sys.stdout.write(csv_text)
    return 0


def _add_sampler_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--iterations", type=int, default=5000)
    sub.add_argument("--burn-in", type=int, default=2000, dest="burn_in")
    sub.add_argument("--delta", type=float, default=1.0, help="Dirichlet weight-prior parameter")
    sub.add_argument("--alpha-step", type=float, default=0.05, dest="alpha_step")
    sub.add_argument("--beta-step", type=float, default=0.1, dest="beta_step",
                     help="relative log-scale step for the rate update")
    sub.add_argument("--thin", type=int, default=1)
    sub.add_argument("--threads", type=int, default=None,
                     help="document-level parallelism (default: DEEP_MOU_THREADS or 1)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deep-mou",
        description="Cluster short sparse documents with deep mixtures of unigrams.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    sub_map = {}

    sim = subs.add_parser("simulate", help="generate a synthetic corpus with ground truth")
    sim.add_argument("--study", choices=[s.value for s in Study], required=True)
    sim.add_argument("--n", type=int, default=200)
    sim.add_argument("--T", type=int, default=200)
    sim.add_argument("--k1", type=int, default=3)
    sim.add_argument("--k2", type=int, default=2)
    sim.add_argument("--N", type=float, default=20.0, help="mean Poisson document length")
    sim.add_argument("--beta-max", type=float, default=20.0, dest="beta_max")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--config", default=None, help="JSON file of flag defaults; flags win")
    sim.set_defaults(func=cmd_simulate)

    fit = subs.add_parser("fit", help="fit a model to a triplet matrix")
    fit.add_argument("input", help="triplet matrix file")
    fit.add_argument("--model", choices=["deep", "mou-em"], required=True)
    fit.add_argument("--k1", type=int, required=True)
    fit.add_argument("--k2", type=int, default=1)
    _add_sampler_flags(fit)
    fit.add_argument("--max-iters", type=int, default=500, dest="max_iters",
                     help="EM iteration cap (mou-em)")
    fit.add_argument("--tol", type=float, default=1e-8, help="EM relative tolerance (mou-em)")
    fit.add_argument("--restarts", type=int, default=10, help="EM random restarts (mou-em)")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--config", default=None)
    fit.set_defaults(func=cmd_fit)

    ev = subs.add_parser("eval", help="score a predicted partition against truth labels")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out", default=None, help="write JSON here instead of stdout")
    ev.set_defaults(func=cmd_eval)

    rec = subs.add_parser("recover", help="parameter-recovery distances from a chain dump")
    rec.add_argument("--true-params", required=True, dest="true_params")
    rec.add_argument("--chain", required=True)
    rec.add_argument("--out", default=None)
    rec.set_defaults(func=cmd_recover)

    sweep = subs.add_parser("sweep-k2", help="ARI/accuracy table over a range of k2")
    sweep.add_argument("input")
    sweep.add_argument("--truth", required=True)
    sweep.add_argument("--k1", type=int, required=True)
    sweep.add_argument("--k2-range", required=True, dest="k2_range", help="LO:HI or comma list")
    _add_sampler_flags(sweep)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", default=None, help="output directory for CSV + manifest")
    sweep.add_argument("--config", default=None)
    sweep.set_defaults(func=cmd_sweep_k2)

    sub_map.update({"simulate": sim, "fit": fit, "eval": ev, "recover": rec, "sweep-k2": sweep})
    return parser, sub_map


def main(argv=None) -> int:
    parser, sub_map = build_parser()
    args = parser.parse_args(argv)
    sub = sub_map[args.command]
    defaults = {k: sub.get_default(k) for k in vars(args) if k not in ("func", "command")}
    try:
        if getattr(args, "config", None) is not None:
            args = _apply_config_file(args, defaults)
        if getattr(args, "threads", "absent") is None:
            args.threads = _default_threads()
        return args.func(args)
    except (CliError, CorpusFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
