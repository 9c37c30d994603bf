"""Command-line entry point: ``scan-embed <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, desk_config, load_config, to_ini
from .dataset import DatasetError, collate, save_dataset, synthetic_generate
from .evaluation import format_distance_table
from .experiments import (ABLATION_VARIANTS, LAMBDA_GRID, TRIPLET_ROWS, ablate, ablation_table,
                          evaluate_checkpoint, full_loss_gradcheck, lambda_sweep, params_from, prepare_splits, run_training, sweep_table)
from .encoders import encode_recipe_batch
from .numerics import no_grad

log = logging.getLogger("scan_embed")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_run_config(args) -> RunConfig:
    base = desk_config(0)
    try:
        cfg = load_config(args.config, base) if args.config else base
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth_data(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    ds = synthetic_generate(cfg.data.synthetic)
    rec, man = save_dataset(ds, out / "synthetic")
    print(f"wrote {len(ds)} records to {rec} (manifest {man})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    (out / "config.ini").write_text(to_ini(cfg))
    result = run_training(cfg, report_path=out / "run_report.jsonl")
    save_checkpoint(result.fit.best, out / "best.ckpt")
    save_checkpoint(result.fit.final, out / "final.ckpt")
    _write_json(out / "test_eval.json", result.test.to_dict())
    _write_json(out / "intra_class.json", result.intra_class)
    _write_json(out / "loss_trace.json", result.loss_trace)
    table = result.test.table()
    (out / "test_eval.txt").write_text(table + "\n")
    print(f"best epoch {result.fit.best_epoch}")
    print(table)
    return EXIT_OK


def _dump_attention(params, ds, path: Path, limit: int) -> None:
    """Per-token attention received (column mean of the weight matrix), per sample."""
    rows = []
    with no_grad():
        for rec in ds.records[:limit]:
            cap: dict = {}
            encode_recipe_batch(collate([rec]), params, cap)
            entry = {"pair_id": rec.pair_id, "label": rec.label, "tokens": rec.tokens.tolist()}
            for key in ("ingredients", "instructions"):
                A = cap.get(key)
                entry[f"{key}_weights"] = None if A is None else A[0].mean(axis=0).tolist()
            rows.append(entry)
    _write_json(path, rows)


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    ckpt = load_checkpoint(args.checkpoint)
    splits = prepare_splits(cfg)
    params = params_from(ckpt, ckpt.model_config)
    ds = splits[args.split]
    report, icd = evaluate_checkpoint(params, ds, cfg)
    _write_json(out / f"{args.split}_eval.json", report.to_dict())
    _write_json(out / "intra_class.json", icd)
    (out / f"{args.split}_eval.txt").write_text(report.table() + "\n")
    print(report.table())
    if args.dump_attention:
        _dump_attention(params, ds, out / "attention.json", args.dump_limit)
        print(f"attention weights written to {out / 'attention.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = full_loss_gradcheck(batch_size=args.batch, joint_dim=args.joint_dim, num_classes=args.classes,
                              lam=args.lam, h=args.h, seed=args.seed or 0, cell=args.cell)
    for name, err in rep.max_rel_error.items():
        print(f"{name:<16} {err:.3e}")
    status = "PASS" if rep.passed else "FAIL"
    print(f"max relative error {rep.overall_max:.3e} (tolerance {rep.tolerance:g}, h={rep.h:g}, seed {rep.seed}): {status}")
    return EXIT_OK if rep.passed else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    variants = args.variants or list(TRIPLET_ROWS)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; choose from {list(ABLATION_VARIANTS)}")
    results = ablate(cfg, variants)
    table = ablation_table(results)
    (out / "ablation.txt").write_text(table + "\n")
    _write_json(out / "ablation.json", {
        v: {"test": r.test.mean, "intra_class_overall": r.intra_class["overall_mean"],
            "best_epoch": r.fit.best_epoch} for v, r in results.items()})
    print(table)
    return EXIT_OK


def cmd_lambda_sweep(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    lambdas = args.lambdas or list(LAMBDA_GRID)
    results = lambda_sweep(cfg, lambdas)
    table = sweep_table(results)
    (out / "lambda_sweep.txt").write_text(table + "\n")
    _write_json(out / "lambda_sweep.json", [
        {"lambda": lam, "test": r.test.mean, "best_epoch": r.fit.best_epoch} for lam, r in results.items()])
    print(table)
    return EXIT_OK


CURVE_COLUMNS = ["epoch", "lr", "retrieval", "cls_img", "cls_rec", "kl_rec_img", "kl_img_rec", "sc", "total"]


def cmd_report(args) -> int:
    run = Path(args.run)
    report = run / "run_report.jsonl"
    if not report.is_file():
        print(f"error: no run_report.jsonl in {run}", file=sys.stderr)
        return EXIT_RUNTIME
    records = [json.loads(line) for line in report.read_text().splitlines() if line.strip()]
    if not records:
        print(f"error: {report} is empty", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    metric_cols = [f"{d}_{m}" for d in ("i2r", "r2i") for m in ("medR", "R@1", "R@5", "R@10")]
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS + metric_cols)
        for r in records:
            row = [r["epoch"], r["lr"]] + [r["losses"].get(k, "") for k in CURVE_COLUMNS[2:]]
            val = r.get("val")
            for d in ("image_to_recipe", "recipe_to_image"):
                for m in ("medR", "R@1", "R@5", "R@10"):
                    row.append(val[d][m] if val else "")
            w.writerow(row)
    print(f"wrote {len(records)} epochs to {out / 'curves.csv'}")
    icd_path = run / "intra_class.json"
    if icd_path.is_file():
        table = format_distance_table(json.loads(icd_path.read_text(), object_hook=_int_keys))
        (out / "distance_table.txt").write_text(table + "\n")
        print(table)
    return EXIT_OK


def _int_keys(d: dict) -> dict:
    return {int(k) if isinstance(k, str) and k.lstrip("-").isdigit() else k: v for k, v in d.items()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scan-embed",
        description="Cross-modal image/recipe embedding: data generation, training, evaluation, harnesses.",
        epilog="Defaults (desk-scale reference config; override with --config FILE):\n\n" + to_ini(desk_config(0)),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI config with [data] [model] [train] [eval] sections")
        sp.add_argument("--seed", type=int, help="override every seed (data, split, init, shuffling)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth-data", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train and evaluate one model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--dump-attention", action="store_true", help="write per-sample attention weights to JSON")
    sp.add_argument("--dump-limit", type=int, default=20)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--joint-dim", type=int, default=16)
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--lam", type=float, default=0.05)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--cell", default="lstm", choices=["lstm", "tanh"])
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train the ablation variants on one dataset")
    common(sp)
    sp.add_argument("--variants", nargs="+", help=f"subset of {list(ABLATION_VARIANTS)}")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("lambda-sweep", help="train once per trade-off weight")
    common(sp)
    sp.add_argument("--lambdas", nargs="+", type=float, help=f"default {list(LAMBDA_GRID)}")
    sp.set_defaults(func=cmd_lambda_sweep)

    sp = sub.add_parser("report", help="emit CSV curves and the distance table from a run directory")
    sp.add_argument("--run", required=True, help="directory written by `train`")
    sp.add_argument("--out", help="output directory (default: the run directory)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
