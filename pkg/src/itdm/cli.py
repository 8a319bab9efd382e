"""Command-line entry point: ``itdm run`` for one experiment, ``itdm grid`` for a lambda sweep."""

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from itdm.nn import save_model
from itdm.trainer import (
    LAMBDA_GRID,
    TrainConfig,
    TrainingDiverged,
    load_datasets,
    summarize,
    train,
    write_metrics_csv,
)

log = logging.getLogger("itdm")

COMPARISON_COLUMNS = (
    "lambda", "runs", "test_acc", "d_acc", "test_ce", "d_ce", "train_ce", "d_train_ce", "tag",
)

# flag dest -> TrainConfig field
_FLAG_FIELDS = {
    "dataset": "dataset", "train_images": "train_images", "train_labels": "train_labels",
    "test_images": "test_images", "test_labels": "test_labels", "arch": "arch",
    "match": "match_mode", "lam": "lam", "use_sqrt": "use_sqrt", "kernels": "kernels",
    "batch_size": "batch_size", "epochs": "epochs", "lr": "lr", "momentum": "momentum",
    "lr_decay": "lr_schedule", "feature_dim": "feature_dim", "subset_n": "subset_n",
    "seed": "seed", "blob_classes": "blob_classes", "blob_per_class": "blob_per_class",
    "blob_dim": "blob_dim", "blob_separation": "blob_separation",
}


def _non_negative_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not np.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"must be a finite value >= 0, got {text}")
    return value


def _positive_float(text):
    value = _non_negative_float(text)
    if value == 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _bool(text):
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _lambda_list(text):
    return [_non_negative_float(t) for t in text.split(",") if t.strip()]


def _lr_decay(text):
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            epoch, mult = item.split(":")
            pairs.append((int(epoch), _positive_float(mult)))
        except (ValueError, argparse.ArgumentTypeError):
            raise argparse.ArgumentTypeError(f"expected epoch:multiplier, got {item!r}")
    return pairs


def _add_common(p):
    s = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with TrainConfig fields (or a summary.json to replay)")
    p.add_argument("--dataset", choices=["fmnist", "kmnist", "blobs"], default=s)
    p.add_argument("--train-images", default=s)
    p.add_argument("--train-labels", default=s)
    p.add_argument("--test-images", default=s)
    p.add_argument("--test-labels", default=s)
    p.add_argument("--data-dir", help="directory holding the IDX files (default: $ITDM_DATA_DIR)")
    p.add_argument("--arch", choices=["mlp", "smallcnn"], default=s)
    p.add_argument("--match", choices=["none", "joint", "class"], default=s)
    p.add_argument("--use-sqrt", type=_bool, default=s, metavar="{true,false}")
    p.add_argument("--kernels", type=_positive_int, default=s, help="number of Gaussian kernels g")
    p.add_argument("--batch-size", type=_positive_int, default=s)
    p.add_argument("--epochs", type=_non_negative_int, default=s)
    p.add_argument("--lr", type=_positive_float, default=s)
    p.add_argument("--momentum", type=_non_negative_float, default=s)
    p.add_argument("--lr-decay", type=_lr_decay, default=s, metavar="EPOCH:MULT,...")
    p.add_argument("--feature-dim", type=_positive_int, default=s)
    p.add_argument("--subset-n", type=_positive_int, default=s)
    p.add_argument("--seed", type=_non_negative_int, default=s)
    p.add_argument("--blob-classes", type=_positive_int, default=s)
    p.add_argument("--blob-per-class", type=_positive_int, default=s)
    p.add_argument("--blob-dim", type=_positive_int, default=s)
    p.add_argument("--blob-separation", type=_non_negative_float, default=s)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--timing", action="store_true", help="write wall_ms to metrics.csv (breaks byte-identical reruns)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="itdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train once and write metrics.csv + summary.json")
    _add_common(run)
    run.add_argument("--lambda", dest="lam", type=_non_negative_float, default=argparse.SUPPRESS)

    grid = sub.add_parser("grid", help="sweep lambda (always including 0) and compare")
    _add_common(grid)
    grid.add_argument("--lambdas", type=_lambda_list, default=list(LAMBDA_GRID),
                      help="comma-separated lambda values; 0 is always added")
    grid.add_argument("--seeds", type=_positive_int, default=1,
                      help="runs per lambda, with seeds seed, seed+1, ...")
    grid.add_argument("--jobs", type=_positive_int, default=1, help="parallel worker processes")
    return parser


def config_from_args(args):
    values = {}
    if args.config:
        with open(args.config) as f:
            loaded = json.load(f)
        values.update(loaded.get("config", loaded))
    for dest, name in _FLAG_FIELDS.items():
        if hasattr(args, dest):
            values[name] = getattr(args, dest)
    return TrainConfig.from_dict(values)


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def execute(cfg, out_dir, data_dir=None, timing=False):
    """Train with ``cfg`` and write ``metrics.csv``, ``summary.json`` and ``model.npz`` to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = load_datasets(cfg, data_dir)
    log.info("training %s on %s (%d train / %d test)", cfg.arch, cfg.dataset, len(train_ds), len(test_ds))
    try:
        result = train(cfg, train_ds, test_ds)
    except TrainingDiverged as exc:
        write_metrics_csv(exc.records, out_dir / "metrics.csv", timing)
        _write_json({"config": cfg.to_dict(), "diverged": True, "error": str(exc)}, out_dir / "summary.json")
        raise
    write_metrics_csv(result.records, out_dir / "metrics.csv", timing)
    summary = summarize(cfg, result)
    summary["diverged"] = False
    summary["train_size"] = len(train_ds)
    summary["test_size"] = len(test_ds)
    if timing:
        summary["wall_ms"] = result.wall_ms
    _write_json(summary, out_dir / "summary.json")
    save_model(result.model, out_dir / "model.npz")
    return summary


def run_single(args):
    cfg = config_from_args(args)
    summary = execute(cfg, args.out, args.data_dir, args.timing)
    print(f"test_acc={summary['final_test_acc']:.4f} test_ce={summary['final_test_ce']:.4f} "
          f"train_ce={summary['final_train_ce']:.4f} -> {args.out}")
    return 0


def _lambda_dir(lam):
    return f"lambda_{lam:g}"


def _grid_job(job):
    cfg_dict, out_dir, data_dir, timing = job
    return execute(TrainConfig.from_dict(cfg_dict), out_dir, data_dir, timing)


def compare(per_lambda):
    """Comparison rows sorted by lambda, with differences against the lambda = 0 row.

    ``per_lambda`` maps lambda to a dict of mean ``test_acc``, ``test_ce``,
    ``train_ce`` and ``runs``. The rows with the highest / lowest accuracy and
    the lowest / highest test CE among lambda > 0 are tagged ``B-acc``/``W-acc``
    and ``B-ce``/``W-ce``.
    """
    base = per_lambda[0.0]
    rows = []
    for lam in sorted(per_lambda):
        v = per_lambda[lam]
        rows.append({
            "lambda": lam, "runs": v["runs"],
            "test_acc": v["test_acc"], "d_acc": v["test_acc"] - base["test_acc"],
            "test_ce": v["test_ce"], "d_ce": v["test_ce"] - base["test_ce"],
            "train_ce": v["train_ce"], "d_train_ce": v["train_ce"] - base["train_ce"],
            "tag": "",
        })
    others = [r for r in rows if r["lambda"] > 0]
    if others:
        tags = {
            "B-acc": max(others, key=lambda r: r["test_acc"]),
            "W-acc": min(others, key=lambda r: r["test_acc"]),
            "B-ce": min(others, key=lambda r: r["test_ce"]),
            "W-ce": max(others, key=lambda r: r["test_ce"]),
        }
        for tag, row in tags.items():
            row["tag"] = f"{row['tag']} {tag}".strip()
    return rows


def write_comparison_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([r["tag"] if c == "tag" else (r[c] if c == "runs" else repr(float(r[c])))
                        for c in COMPARISON_COLUMNS])


def read_comparison_csv(path):
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            row = {c: float(raw[c]) for c in COMPARISON_COLUMNS if c not in ("runs", "tag")}
            row["runs"] = int(raw["runs"])
            row["tag"] = raw["tag"]
            rows.append(row)
    return rows


def format_table(rows):
    lines = [f"{'lambda':>7} {'acc %':>7} {'d acc':>7} {'CE':>7} {'d CE':>7} {'train CE':>9}  tag"]
    for r in rows:
        lines.append(
            f"{r['lambda']:>7g} {100 * r['test_acc']:>7.2f} {100 * r['d_acc']:>+7.2f} "
            f"{r['test_ce']:>7.4f} {r['d_ce']:>+7.4f} {r['train_ce']:>9.4f}  {r['tag']}"
        )
    return "\n".join(lines)


def run_grid(args):
    base = config_from_args(args)
    lambdas = sorted({0.0, *args.lambdas})
    out = Path(args.out)
    jobs = []
    for lam in lambdas:
        for r in range(args.seeds):
            cfg = TrainConfig.from_dict({**base.to_dict(), "lam": lam, "seed": base.seed + r})
            jobs.append((cfg.to_dict(), out / _lambda_dir(lam) / f"seed_{cfg.seed}", args.data_dir, args.timing))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            summaries = list(pool.map(_grid_job, jobs))
    else:
        summaries = [_grid_job(j) for j in jobs]

    per_lambda = {}
    for lam in lambdas:
        mine = [s for s, j in zip(summaries, jobs) if j[0]["lam"] == lam]
        agg = {
            "lambda": lam,
            "runs": len(mine),
            "seeds": [s["config"]["seed"] for s in mine],
            "test_acc": float(np.mean([s["avg_test_acc"] for s in mine])),
            "test_ce": float(np.mean([s["avg_test_ce"] for s in mine])),
            "train_ce": float(np.mean([s["final_train_ce"] for s in mine])),
        }
        _write_json(agg, out / _lambda_dir(lam) / "summary.json")
        per_lambda[lam] = agg
    rows = compare(per_lambda)
    write_comparison_csv(rows, out / "comparison.csv")
    _write_json({"config": base.to_dict(), "lambdas": lambdas, "seeds": args.seeds, "rows": rows},
                out / "comparison.json")
    print(format_table(rows))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config_from_args(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        parser.error(str(exc))
    try:
        return run_single(args) if args.command == "run" else run_grid(args)
    except TrainingDiverged as exc:
        print(f"itdm: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"itdm: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
