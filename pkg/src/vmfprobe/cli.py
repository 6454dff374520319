"""Command-line entry point.

Every subcommand writes into ``<runs-dir>/<run-id>/`` where the run id is a
hash of the command's inputs (file contents, not paths), so identical
invocations land in the same directory with byte-identical metrics files.
Exit codes: 0 success, 2 validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import data as Dt
from . import harness as H
from .diff import ShapeError
from .special import DomainError, bessel_ratio
from .vmf import InfiniteConcentration, SamplerError, VmfParams, estimate_kappa_mle, mean_resultant_length, sample

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
GRAD_TOLERANCE = 1e-4


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dataset_digest(directory) -> str:
    d = Path(directory)
    return hashlib.sha256((d / "meta.json").read_bytes() + (d / "data.bin").read_bytes()).hexdigest()


def _run_dir(args, payload: dict) -> Path:
    out = Path(args.runs_dir) / H.run_id(payload)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_flat_csv(path: Path, obj: dict) -> None:
    rows = []

    def walk(prefix, v):
        if isinstance(v, dict):
            for k in v:
                walk(f"{prefix}.{k}" if prefix else str(k), v[k])
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            rows.append((prefix, repr(v)))

    walk("", obj)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(sorted(rows))


def cmd_train(args) -> int:
    config = H.TrainConfig.from_json(args.config)
    out = _run_dir(args, config.to_dict())  # directory name equals the run id
    _write_json(out / "config.json", config.to_dict())
    try:
        record = H.train(config, out, log=print if args.verbose else None)
    except H.NumericalAbort as exc:
        print(f"numerical abort: {exc}; last good checkpoint: {exc.last_good}", file=sys.stderr)
        return EXIT_NUMERICAL
    last = record.losses[-1]
    metrics = {
        "run_id": record.run_id,
        "epochs": len(record.losses),
        "first_epoch": {"align": record.losses[0].align, "reg": record.losses[0].reg,
                        "contrastive": record.losses[0].contrastive, "total": record.losses[0].total},
        "final_epoch": {"align": last.align, "reg": last.reg, "contrastive": last.contrastive, "total": last.total},
    }
    _write_json(out / "metrics.json", metrics)
    _write_flat_csv(out / "metrics.csv", metrics)
    _write_json(out / "run.json", {"wall_time_seconds": record.wall_time, "checkpoint": str(record.checkpoint)})
    print(out)
    return EXIT_OK


def _default_test_set(seed: int) -> Dt.Dataset:
    return Dt.generate_dataset(50, 10, seed, difficulty=0.5)


def cmd_eval_corruption(args) -> int:
    encoder = checkpoint.load(args.ckpt)
    manifest = Dt.load_manifest(args.manifest)
    test = Dt.load_dataset(args.data) if args.data else _default_test_set(args.data_seed)
    payload = {
        "command": "eval-corruption",
        "ckpt": _digest(args.ckpt),
        "manifest": _digest(args.manifest),
        "data": _dataset_digest(args.data) if args.data else {"generated_seed": args.data_seed},
        "seed": args.seed,
    }
    out = _run_dir(args, payload)
    report = H.evaluate_corruption_correlation(encoder, test, manifest, args.seed)
    report.write(out)
    print(out)
    return EXIT_OK


def cmd_eval_ood(args) -> int:
    encoder = checkpoint.load(args.ckpt)
    ins, outs = Dt.load_dataset(args.in_set), Dt.load_dataset(args.out_set)
    payload = {
        "command": "eval-ood",
        "ckpt": _digest(args.ckpt),
        "in": _dataset_digest(args.in_set),
        "out": _dataset_digest(args.out_set),
        "k": args.k,
    }
    out = _run_dir(args, payload)
    H.evaluate_ood(encoder, ins, outs, args.k).write(out)
    print(out)
    return EXIT_OK


def cmd_eval_failure(args) -> int:
    encoder = checkpoint.load(args.ckpt)
    labeled = Dt.load_dataset(args.data)
    payload = {
        "command": "eval-failure",
        "ckpt": _digest(args.ckpt),
        "data": _dataset_digest(args.data),
        "k": args.k,
        "iterations": args.iterations,
        "draw": args.draw,
        "seed": args.seed,
    }
    out = _run_dir(args, payload)
    report = H.evaluate_failure_analysis(encoder, labeled, args.k, args.iterations, args.draw, args.seed)
    report.write(out)
    print(report.meta.get("status", "ok"))
    print(out)
    return EXIT_OK


def cmd_sample_vmf(args) -> int:
    mu = np.zeros(args.dim)
    mu[0] = 1.0
    if args.mu:
        mu = np.array([float(v) for v in args.mu.split(",")])
        if mu.size != args.dim:
            raise ValueError(f"--mu has {mu.size} entries, --dim is {args.dim}")
        mu = mu / np.linalg.norm(mu)
    params = VmfParams(mu, args.kappa)
    payload = {"command": "sample-vmf", "dim": args.dim, "kappa": args.kappa, "n": args.n, "seed": args.seed,
               "mu": [float(v) for v in mu]}
    out = _run_dir(args, payload)
    xs = sample(params, args.n, args.seed)
    with (out / "samples.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(args.dim)])
        w.writerows([[f"{v:.17g}" for v in row] for row in xs])
    metrics = {"n": args.n, "dim": args.dim, "kappa": args.kappa, "mean_resultant_length": mean_resultant_length(xs),
               "bessel_ratio": bessel_ratio(args.dim, args.kappa) if args.kappa > 0 else 0.0}
    try:
        metrics["kappa_mle"] = estimate_kappa_mle(xs)
    except InfiniteConcentration:
        metrics["kappa_mle"] = None
    _write_json(out / "metrics.json", metrics)
    _write_flat_csv(out / "metrics.csv", metrics)
    print(out)
    return EXIT_OK


def cmd_check_grads(args) -> int:
    if args.trials < 1:
        raise ValueError("--trials must be >= 1")
    report = H.gradient_report(args.trials, args.seed)
    worst = max(report["finite_difference_max_rel_error"].values())
    report["tolerance"] = GRAD_TOLERANCE
    report["passed"] = bool(worst <= GRAD_TOLERANCE and max(report["closed_form_max_rel_error"].values()) <= 1e-9)
    out = _run_dir(args, {"command": "check-grads", "trials": args.trials, "seed": args.seed})
    _write_json(out / "metrics.json", report)
    _write_flat_csv(out / "metrics.csv", report)
    print(json.dumps(report, sort_keys=True, indent=2))
    print(out)
    return EXIT_OK if report["passed"] else EXIT_NUMERICAL


GEN_KEYS = {"version", "classes", "n_per_class", "seed", "domain", "difficulty"}


def cmd_gen_data(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    if cfg.get("version") != Dt.DATA_VERSION:
        raise H.ConfigError(f'gen-data config needs "version": {Dt.DATA_VERSION}')
    unknown = sorted(set(cfg) - GEN_KEYS)
    if unknown:
        raise H.ConfigError(f"unknown gen-data keys: {unknown}")
    ds = Dt.generate_dataset(
        int(cfg.get("n_per_class", 200)),
        int(cfg.get("classes", 10)),
        int(cfg.get("seed", 0)),
        cfg.get("domain", "in"),
        float(cfg.get("difficulty", 0.0)),
    )
    out = _run_dir(args, {"command": "gen-data", "config": cfg})
    Dt.save_dataset(ds, out / "data")
    Dt.save_manifest(Dt.full_manifest(), out / "manifest.json")
    metrics = {"images": len(ds), "classes": ds.meta["K"], "nearest_centroid_train_accuracy": Dt.nearest_centroid_accuracy(ds)}
    _write_json(out / "metrics.json", metrics)
    _write_flat_csv(out / "metrics.csv", metrics)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmfprobe", description="Probabilistic contrastive embeddings with vMF concentration.")
    p.add_argument("--runs-dir", default="runs", help="output root (default: runs)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train an encoder from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-corruption", help="kappa vs corruption severity")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--data", help="test dataset directory (default: generated split)")
    s.add_argument("--data-seed", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_corruption)

    s = sub.add_parser("eval-ood", help="out-of-domain AUROC")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="in_set", required=True)
    s.add_argument("--out", dest="out_set", required=True)
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(func=cmd_eval_ood)

    s = sub.add_parser("eval-failure", help="kappa of probe-correct vs probe-wrong points")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--draw", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_failure)

    s = sub.add_parser("sample-vmf", help="draw vMF samples to CSV")
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--kappa", type=float, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--mu", help="comma-separated mean direction (default: first basis vector)")
    s.set_defaults(func=cmd_sample_vmf)

    s = sub.add_parser("check-grads", help="finite-difference and closed-form gradient checks")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check_grads)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset and corruption manifest")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (H.NumericalAbort, SamplerError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError, ShapeError, DomainError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
