"""Command-line interface.

Five subcommands cover the whole workflow: ``synth`` builds a misaligned
dataset, ``train`` fits the pipeline, ``register`` aligns one pair,
``eval`` scores a checkpoint over a dataset, and ``report`` turns result
files into tables, plots, and significance tests.  Every command resolves
one RunConfig up front and writes it back into the output directory, so
re-runs are byte-identical and every artifact carries its provenance.

Exit codes: 0 success, 2 configuration, 3 schema, 4 data, 5 internal.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import KIND_ALIASES, load_run_config, parse_size, parse_thresholds
from .decompose import Image
from .encoders import EncoderConfig
from .errors import ConfigError, ContractError, DataError, NumericError, SchemaError
from .fileio import read_png, write_flo, write_png
from .metrics import MetricsReport, aggregate_reports, endpoint_errors, image_similarity, paired_ttest
from .model import ABLATABLE, load_pipeline, save_pipeline
from .synth import build_dataset, load_dataset, load_manifest, make_jobs, read_triplet, warp_image
from .train import apply_ablation, train

EXIT_OK, EXIT_CONFIG, EXIT_SCHEMA, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4, 5
CHECKER_TILE = 32
TTEST_METRICS = ("aepe", "cc", "ncc", "mi", "psnr", "scd", "ssim")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_pair(visible_path, thermal_path) -> tuple[Image, Image]:
    visible = Image(read_png(visible_path), modality="visible")
    thermal = Image(read_png(thermal_path), modality="thermal")
    if visible.shape != thermal.shape:
        raise DataError(f"image shapes differ: {visible.shape} vs {thermal.shape}")
    return visible, thermal


def checkerboard(a: np.ndarray, b: np.ndarray, tile: int = CHECKER_TILE) -> np.ndarray:
    """Alternate square tiles from two equal-shape images."""
    out = a.copy()
    for i, y in enumerate(range(0, a.shape[1], tile)):
        for j, x in enumerate(range(0, a.shape[2], tile)):
            if (i + j) % 2:
                out[:, y : y + tile, x : x + tile] = b[:, y : y + tile, x : x + tile]
    return out


def evaluate_pair(model, triplet, thresholds) -> tuple[MetricsReport, np.ndarray]:
    """Score one triplet: flow accuracy plus warped-image similarity.

    Image metrics compare the visible image warped by the predicted flow
    against the same image warped by the ground truth, with the misaligned
    thermal image as the reference for the difference-correlation score.
    """
    pred = model.register(triplet.visible, triplet.warped_thermal)
    err = endpoint_errors(pred.data, triplet.gt_flow.data)
    pred_warp = warp_image(triplet.visible, pred)
    gt_warp = warp_image(triplet.visible, triplet.gt_flow)
    sim = image_similarity(pred_warp.data, gt_warp.data, triplet.warped_thermal.data)
    report = MetricsReport(
        aepe=float(err.mean()),
        pck={float(t): float(100.0 * (err <= t).mean()) for t in thresholds},
        cc=sim.cc,
        ncc=sim.ncc,
        mi=sim.mi,
        psnr=sim.psnr,
        scd=sim.scd,
        ssim=sim.ssim,
        n_samples=1,
        flags=sim.flags,
    )
    return report, err


# ---------------------------------------------------------------------------
# synth


def _scan_source(source_dir) -> list:
    """Pair up *visible*/*thermal* PNGs; unusable files are listed, not fatal."""
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise DataError(f"source directory not found: {source_dir}")
    pairs = []
    for vis in sorted(source_dir.glob("*visible*.png")):
        thr = vis.with_name(vis.name.replace("visible", "thermal"))
        if thr.exists():
            pairs.append((vis, thr))
        else:
            print(f"skipping {vis.name}: no thermal partner", file=sys.stderr)
    if not pairs:
        raise DataError(f"no usable visible/thermal pairs in {source_dir}")
    return pairs


def cmd_synth(args) -> int:
    overrides = {
        "seed": args.seed,
        "pairs": args.pairs,
        "kind": args.kind,
        "magnitude": args.magnitude,
        "test_fraction": args.test_fraction,
        "scenes": args.scenes,
        "workers": args.workers,
    }
    if args.size is not None:
        overrides["height"], overrides["width"] = parse_size(args.size)
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out)
    source_pairs = _scan_source(args.source) if args.source else None
    jobs = make_jobs(
        out,
        cfg.pairs,
        (cfg.height, cfg.width),
        kind=cfg.kind,
        magnitude=cfg.magnitude,
        seed=cfg.seed,
        test_fraction=cfg.test_fraction,
        n_scenes=cfg.scenes,
        source_pairs=source_pairs,
    )
    manifest = build_dataset(out, jobs, workers=cfg.workers)
    cfg.write_resolved(out)
    print(f"wrote {len(manifest['pairs'])} pairs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "lr_decay": args.lr_decay,
        "momentum": args.momentum,
        "alpha": args.alpha,
        "max_steps": args.max_steps,
        "divisor": args.divisor,
        "optimizer": args.optimizer,
        "ablate": tuple(args.ablate) if args.ablate is not None else None,
    }
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    triplets = load_dataset(args.data, split="train")
    if not triplets:
        raise DataError(f"no training pairs in {args.data}")
    train_cfg = cfg.train_config()
    _, h, w = triplets[0].visible.shape
    base = EncoderConfig() if train_cfg.divisor == 1 else EncoderConfig.scaled(train_cfg.divisor)
    model = apply_ablation(train_cfg, encoder=base.fitted(h, w))
    records = train(model, triplets, train_cfg, log_path=out / "train_log.jsonl")
    save_pipeline(out / "checkpoint.npz", model)
    _write_json(
        out / "summary.json",
        {
            "steps": len(records),
            "final_loss": records[-1].loss,
            "seconds": sum(r.seconds for r in records),
            "pairs": len(triplets),
            "fingerprint": cfg.fingerprint(),
        },
    )
    cfg.write_resolved(out)
    print(f"trained {len(records)} steps on {len(triplets)} pairs, final loss {records[-1].loss:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register


def cmd_register(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    model = load_pipeline(args.checkpoint)
    visible, thermal = _load_pair(args.visible, args.thermal)
    started = time.perf_counter()
    flow = model.register(visible, thermal)
    seconds = time.perf_counter() - started
    out = Path(args.out)
    write_flo(out / "flow.flo", flow.data)
    warped = warp_image(visible, flow)
    write_png(out / "warped.png", warped.data)
    write_png(out / "side_by_side.png", np.concatenate([visible.data, thermal.data, warped.data], axis=2))
    write_png(out / "checkerboard.png", checkerboard(warped.data, thermal.data))
    _write_json(
        out / "latency.json",
        {
            "seconds": seconds,
            "fps": 1.0 / seconds if seconds > 0 else 0.0,
            "height": visible.shape[1],
            "width": visible.shape[2],
        },
    )
    cfg.write_resolved(out)
    print(f"registered {visible.shape[2]}x{visible.shape[1]} pair in {seconds:.2f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

_WORKER_MODEL = None


def _init_eval_worker(checkpoint_path) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = load_pipeline(checkpoint_path)


def _eval_one(task: tuple) -> dict:
    pair_dir, thresholds, want_map = task
    pair_id = Path(pair_dir).name
    try:
        triplet = read_triplet(pair_dir)
    except (DataError, SchemaError) as exc:
        return {"id": pair_id, "error": str(exc)}
    report, err = evaluate_pair(_WORKER_MODEL, triplet, thresholds)
    row = {"id": pair_id, **report.to_json()}
    if want_map:
        row["_errmap"] = err
    return row


def cmd_eval(args) -> int:
    overrides = {
        "seed": args.seed,
        "split": args.split,
        "limit": args.limit,
        "workers": args.workers,
        "error_maps": args.error_maps,
        "thresholds": parse_thresholds(args.thresholds) if args.thresholds else None,
    }
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out)
    manifest = load_manifest(args.data)
    rows = [r for r in manifest["pairs"] if cfg.split is None or r["split"] == cfg.split]
    if cfg.limit is not None:
        rows = rows[: cfg.limit]
    if not rows:
        raise DataError(f"no pairs selected from {args.data}")
    tasks = [
        (str(Path(args.data) / "pairs" / row["id"]), cfg.thresholds, cfg.error_maps)
        for row in rows
    ]
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=cfg.workers, initializer=_init_eval_worker, initargs=(args.checkpoint,)
        ) as pool:
            results = list(pool.map(_eval_one, tasks))
    else:
        _init_eval_worker(args.checkpoint)
        results = [_eval_one(task) for task in tasks]
    skipped = [r["id"] for r in results if "error" in r]
    for row in results:
        if "error" in row:
            print(f"skipping {row['id']}: {row['error']}", file=sys.stderr)
    pair_rows, reports = [], []
    for row in results:
        if "error" in row:
            continue
        errmap = row.pop("_errmap", None)
        if errmap is not None:
            write_png(out / "error_maps" / f"{row['id']}.png", errmap / max(errmap.max(), 1e-9))
        pair_rows.append(row)
        reports.append(MetricsReport.from_json(row))
    if not reports:
        raise DataError(f"all {len(rows)} selected pairs failed: {skipped}")
    aggregate = aggregate_reports(reports, fingerprint=cfg.fingerprint())
    _write_json(
        out / "report.json",
        {
            "aggregate": aggregate.to_json(),
            "pairs": pair_rows,
            "skipped": skipped,
            "dataset": str(args.data),
            "checkpoint": str(args.checkpoint),
            "fingerprint": cfg.fingerprint(),
        },
    )
    cfg.write_resolved(out)
    pck_last = aggregate.pck[max(aggregate.pck)]
    print(
        f"evaluated {len(reports)} pairs ({len(skipped)} skipped): "
        f"aepe {aggregate.aepe:.3f}, pck@{max(aggregate.pck):g} {pck_last:.1f}%"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _load_report(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"report file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"report is not valid JSON: {exc}") from None
    if "aggregate" not in payload or "pairs" not in payload:
        raise SchemaError(f"not an evaluation report: {path}")
    return payload


def _report_label(path) -> str:
    path = Path(path)
    return path.parent.name if path.parent.name not in ("", ".") else path.stem


def _summary_table(labels: list, aggregates: list) -> str:
    rows = [("metric", *labels)]
    thresholds = sorted(t for t, _ in aggregates[0]["pck"])
    for t in thresholds:
        values = [f"{dict(map(tuple, a['pck']))[t]:.2f}" for a in aggregates]
        rows.append((f"pck@{t:g}", *values))
    for name in ("aepe", "cc", "ncc", "mi", "psnr", "scd", "ssim"):
        rows.append((name, *[f"{a[name]:.4f}" for a in aggregates]))
    rows.append(("pairs", *[str(a["n_samples"]) for a in aggregates]))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _pck_plot(path: Path, labels: list, aggregates: list) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, agg in zip(labels, aggregates):
        points = sorted(map(tuple, agg["pck"]))
        ax.plot([t for t, _ in points], [v for _, v in points], marker="o", label=label)
    ax.set_xlabel("threshold (px)")
    ax.set_ylabel("correct pixels (%)")
    ax.set_ylim(0.0, 102.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _paired_tests(first: dict, second: dict) -> dict | None:
    by_id = lambda payload: {row["id"]: row for row in payload["pairs"]}
    a_rows, b_rows = by_id(first), by_id(second)
    shared = sorted(set(a_rows) & set(b_rows))
    if len(shared) < 2:
        print(
            f"skipping paired tests: only {len(shared)} shared pair ids", file=sys.stderr
        )
        return None
    tests = {}
    for metric in TTEST_METRICS:
        result = paired_ttest(
            [a_rows[i][metric] for i in shared], [b_rows[i][metric] for i in shared]
        )
        tests[metric] = {
            "t": result.t,
            "p": result.p,
            "dof": result.dof,
            "degenerate": result.degenerate,
        }
    return {"n_shared": len(shared), "tests": tests}


def cmd_report(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = [_load_report(p) for p in args.inputs]
    labels = [_report_label(p) for p in args.inputs]
    aggregates = [p["aggregate"] for p in payloads]
    table = _summary_table(labels, aggregates)
    (out / "summary.txt").write_text(table)
    _pck_plot(out / "pck_curve.png", labels, aggregates)
    if len(payloads) == 2:
        tests = _paired_tests(payloads[0], payloads[1])
        if tests is not None:
            _write_json(out / "ttest.json", tests)
    cfg.write_resolved(out)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbtreg",
        description="Dense visible-thermal registration: synthesize, train, register, evaluate.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file merged under any flags")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--out", required=True, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a misaligned dataset")
    p.add_argument("--pairs", type=int, help="number of pairs")
    p.add_argument("--size", help="image size as HxW, multiples of 32")
    p.add_argument("--kind", choices=sorted(KIND_ALIASES), help="transform family")
    p.add_argument("--magnitude", type=float, help="misalignment strength in [0, 1]")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--scenes", type=int, help="distinct procedural scenes")
    p.add_argument("--workers", type=int, help="parallel pair jobs")
    p.add_argument("--source", help="directory of aligned *visible*/*thermal* PNGs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="fit the pipeline on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float, dest="lr_decay")
    p.add_argument("--momentum", type=float)
    p.add_argument("--optimizer", choices=["momentum", "adam"], help="update rule")
    p.add_argument("--alpha", type=float, help="pyramid loss weight base")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--divisor", type=int, help="channel-width divisor for toy models")
    p.add_argument("--ablate", nargs="*", choices=ABLATABLE, help="modules to disable")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", parents=[common], help="align one visible/thermal pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--visible", required=True, help="visible PNG")
    p.add_argument("--thermal", required=True, help="thermal PNG")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--limit", type=int, help="evaluate only the first N pairs")
    p.add_argument("--thresholds", help="comma-separated pixel thresholds, e.g. 1,3,5")
    p.add_argument("--error-maps", dest="error_maps", action="store_const", const=True, default=None)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="tables, plots, and t-tests from reports")
    p.add_argument("inputs", nargs="+", help="report.json files from eval")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, NumericError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
