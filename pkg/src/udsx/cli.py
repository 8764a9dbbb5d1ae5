"""Command-line entry point.

Subcommands:
  gen-data     generate a synthetic multi-domain dataset file
  train        train one configuration, writing a run directory
  eval         evaluate a checkpoint on a dataset's held-out split
  sweep-lambda train/eval across expansion strengths, one summary CSV
  check-grads  run the finite-difference gradient suite
  check-bounds run the Monte-Carlo expectation-bound suite

Exit codes: 0 success, 2 configuration/usage error, 3 training aborted on a
non-finite loss, 4 I/O or data-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from . import checks, config, evaluation, synthdata
from .backbone import BackboneModel
from .train import TrainingAborted, run_training
from .synthdata import DataFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_IO = 4

_RUN_LOG_HELP = (
    "run-log.csv columns: epoch; lr; l_ce, l_dex, l_csp, l_csc, l_cst, l_se, "
    "l_csr, l_udsx (per-epoch mean loss components, blank when the mode "
    "disables them); max_weight_distance (largest pairwise distance between "
    "classifier weight rows); rank1, mAP (held-out retrieval metrics on "
    "evaluation epochs, blank otherwise). Recognized config keys mirror the "
    "training/expansion/reunification configs; see configs/benchmark-train.cfg "
    "for the full key set."
)

_SWEEP_HELP = (
    "sweep.csv columns: lambda; best_epoch (argmax of rank1 over epochs); "
    "rank1, mAP (at the best epoch); final_max_weight_distance (last epoch)."
)


def _load_entries(args) -> dict[str, str]:
    entries = config.load_config(args.config) if args.config else {}
    entries = config.apply_overrides(entries, args.set or [])
    if getattr(args, "seed", None) is not None:
        entries["seed"] = str(args.seed)
    return entries


def cmd_gen_data(args) -> int:
    entries = _load_entries(args)
    spec = config.build_synth_spec(entries)
    seed = int(entries.get("seed", args.seed))
    dataset = synthdata.generate(spec, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthdata.save(dataset, out)
    config.write_manifest(out.parent, "gen-data", entries, seed)
    print(f"wrote {len(dataset.records)} records to {out}")
    return EXIT_OK


def _prepare_training(args):
    entries = _load_entries(args)
    cfg, dataset_path = config.build_train_config(entries)
    dataset_path = args.dataset or dataset_path
    if dataset_path is None:
        raise config.ConfigError("no dataset given (key 'dataset' or --dataset)")
    dataset = synthdata.load(dataset_path)
    return entries, cfg, dataset


def cmd_train(args) -> int:
    entries, cfg, dataset = _prepare_training(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = config.write_manifest(out, "train", entries, cfg.seed)
    try:
        result = run_training(cfg, dataset, log_path=out / "run-log.csv")
    except TrainingAborted as exc:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest["aborted"] = str(exc)
        manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    result.model.save(out / "model.ckpt")
    summary = {
        "best_epoch": result.best_epoch,
        "best_rank1": result.best_rank1,
        "best_mAP": result.best_map,
        "final_max_weight_distance": result.final_weight_distance,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"mode={cfg.mode} lambda={cfg.lambda_} best_epoch={result.best_epoch} "
        f"rank1={result.best_rank1} mAP={result.best_map}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model = BackboneModel.load(args.checkpoint)
    dataset = synthdata.load(args.dataset)
    result = evaluation.evaluate_held_out(model, dataset, ks=tuple(args.k))
    payload = json.dumps(result.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    entries = _load_entries(args)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in lambdas:
        sub_entries = dict(entries)
        sub_entries["lambda"] = repr(lam)
        cfg, dataset_path = config.build_train_config(sub_entries)
        dataset_path = args.dataset or dataset_path
        if dataset_path is None:
            raise config.ConfigError("no dataset given (key 'dataset' or --dataset)")
        dataset = synthdata.load(dataset_path)
        run_dir = out / f"lambda_{lam:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        config.write_manifest(run_dir, "sweep-lambda", sub_entries, cfg.seed)
        result = run_training(cfg, dataset, log_path=run_dir / "run-log.csv")
        result.model.save(run_dir / "model.ckpt")
        rows.append(
            (
                lam,
                result.best_epoch,
                result.best_rank1,
                result.best_map,
                result.final_weight_distance,
            )
        )
        print(
            f"lambda={lam:g} best_epoch={result.best_epoch} "
            f"rank1={result.best_rank1} final_weight_distance="
            f"{result.final_weight_distance:.6g}"
        )
    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w", encoding="ascii") as fh:
        fh.write("lambda,best_epoch,rank1,mAP,final_max_weight_distance\n")
        for lam, epoch, rank1, mean_ap, dist in rows:
            fh.write(
                f"{repr(lam)},{epoch},{repr(float(rank1))},"
                f"{repr(float(mean_ap))},{repr(float(dist))}\n"
            )
    print(f"wrote {sweep_path}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    results = checks.run_gradient_checks(seed=args.seed, instances=args.instances)
    ok = True
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(
            f"{status} {res.name}: max relative error {res.max_rel_err:.3e} "
            f"over {res.instances} instances (tolerance {res.tolerance:g})"
        )
        ok &= res.passed
    return EXIT_OK if ok else 1


def cmd_check_bounds(args) -> int:
    res = checks.run_bound_checks(
        seed=args.seed, instances=args.instances, n_samples=args.samples
    )
    status = "PASS" if res.passed else "FAIL"
    print(
        f"{status} expectation bound: {res.violations} violations over "
        f"{res.instances} instances (worst margin {res.worst_margin:.4g})"
    )
    return EXIT_OK if res.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="udsx",
        description="Dual-stream semantic expansion training at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--config", help="flat key=value spec file (data.* keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration", epilog=_RUN_LOG_HELP)
    p.add_argument("--config", required=True, help="flat key=value training config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dataset", help="dataset path (overrides config key)")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--out", help="write metrics JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "sweep-lambda",
        help="train/eval across expansion strengths",
        epilog=_SWEEP_HELP,
    )
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dataset", help="dataset path (overrides config key)")
    p.add_argument("--lambdas", default="0,5,15,25,50")
    p.add_argument("--out", required=True, help="sweep directory")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("check-grads", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_check_grads)

    p = sub.add_parser("check-bounds", help="Monte-Carlo expectation-bound suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--samples", type=int, default=20000)
    p.set_defaults(func=cmd_check_bounds)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
