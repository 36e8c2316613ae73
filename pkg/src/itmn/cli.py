"""Command-line entry point: ``itmn {gen-data,train,eval,quantize,bench,boxes}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .anchors import BoxConfig, generate_default_boxes
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, sub_seed
from .evaluation import detect, evaluate_detections, write_report
from .quant import load_any, payload_ratio, quantize_model
from .synthdata import DatasetError, ScenarioFilter, filter_scenario, generate_dataset, read_dataset, write_dataset
from .tensor import no_grad
from .trainer import NonFiniteLossError, fit

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("itmn")


class UsageError(ConfigError):
    pass


def _dataset_for(cfg: RunConfig):
    d = cfg.raw["data"]
    if d["path"]:
        return read_dataset(d["path"])
    return generate_dataset(d["count"], sub_seed(cfg.seed, "data"), d["resolution"], d["day_fraction"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.count < 0 or not 0 <= args.day_fraction <= 1:
        raise UsageError("--count must be >= 0 and --day-fraction in [0, 1]")
    ds = generate_dataset(args.count, args.seed, args.resolution, args.day_fraction)
    try:
        write_dataset(ds, args.out)
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {args.out}: {e.strerror}") from e
    n_day = sum(p.tag == "day" for p in ds)
    print(f"wrote {len(ds)} pairs ({n_day} day, {len(ds) - n_day} night) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out)
    dataset = _dataset_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    tcfg = cfg.train_config()
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is None:
        from .fusion import Detector

        model = Detector(cfg.model_config(), seed=cfg.model_seed)
        trainer, rows = fit(tcfg, dataset, model=model, stop_after=args.stop_after, log_path=out / "train_log.csv")
    else:
        trainer, rows = fit(tcfg, dataset, resume=resume, stop_after=args.stop_after, log_path=out / "train_log.csv")
    path = save_checkpoint(trainer.checkpoint(), out / "model.ckpt")
    print(f"trained {trainer.model.config.name} for {trainer.state.epoch} epoch(s); checkpoint {path}")
    return EXIT_OK


def _eval_dataset(args):
    ds = read_dataset(args.data)
    if args.filter_temp:
        ds = filter_scenario(ds, ScenarioFilter.from_dataset(ds))
        print(f"temperature filter kept {len(ds)} pairs")
    if len(ds) == 0:
        raise DatasetError("no pairs to evaluate")
    return ds


def cmd_eval(args) -> int:
    model = load_any(load_checkpoint(args.checkpoint))
    ds = _eval_dataset(args)
    splits = args.split or ["all", "day", "night"]
    report = evaluate_detections(detect(model, ds), ds, splits, args.mode)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "report.txt")
        for split, curve in report.curves.items():
            curve.to_csv(out / f"curve_{split}.csv")
    return EXIT_OK


def cmd_quantize(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    calib = read_dataset(args.calib)
    if len(calib) == 0:
        raise DatasetError(f"calibration set {args.calib} is empty")
    rounding = "floor" if args.floor_mode else "half-even"
    qm = quantize_model(ckpt, calib, rounding=rounding, finetune_epochs=args.finetune_epochs)
    qckpt = qm.to_checkpoint()
    save_checkpoint(qckpt, args.out)
    print(f"weight payload ratio: {payload_ratio(ckpt, qckpt):.4f}")
    print(f"rounding: {rounding}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeat < 3:
        raise UsageError("--repeat must be at least 3")
    ckpt = load_checkpoint(args.checkpoint)
    model = load_any(ckpt)
    ds = read_dataset(args.data)
    if len(ds) == 0:
        raise DatasetError("benchmark set is empty")
    model.eval()
    samples = []
    with no_grad():
        for r in range(args.repeat):
            pair = ds[r % len(ds)]
            start = time.perf_counter()
            detect(model, [pair])
            samples.append(time.perf_counter() - start)
    inner = model.model if hasattr(model, "model") else model
    macs = inner.macs()
    n_params = sum(int(np.prod(p.shape)) for p in inner.parameters())
    weight_bytes = ckpt.payload_bytes("q/") if ckpt.meta["kind"] == "int8" else ckpt.payload_bytes("params/")
    for i, s in enumerate(samples):
        print(f"sample {i}: {s:.6f} s")
    print(f"mean: {statistics.fmean(samples):.6f} s")
    print(f"median: {statistics.median(samples):.6f} s")
    print(f"macs: {macs['total']}")
    print(f"parameters: {n_params}")
    print(f"weight bytes: {weight_bytes}")
    return EXIT_OK


def cmd_boxes(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    mc = cfg.model_config()
    box = BoxConfig(extents=mc.box.extents, variant=args.variant or mc.box.variant)
    boxes = generate_default_boxes(box)
    if args.out:
        boxes.to_csv(args.out)
    print(f"{len(boxes)} default boxes")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itmn", description="Multispectral pedestrian detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--day-fraction", type=float, default=0.5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint written by a previous train run")
    t.add_argument("--stop-after", type=int, help="stop once this many epochs are complete")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a float or quantized checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", action="append", choices=["all", "day", "night"])
    e.add_argument("--filter-temp", action="store_true", help="keep only dark, warm scenes")
    e.add_argument("--mode", choices=["log", "arith"], default="log")
    e.add_argument("--out", help="directory for report.txt and curve CSVs")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", help="int8 post-training quantization")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--finetune-epochs", type=int, default=5)
    q.add_argument("--floor-mode", action="store_true", help="floor instead of round-half-even")
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bench", help="time inference and report model size")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--repeat", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("boxes", help="dump the default-box set as CSV")
    x.add_argument("--config")
    x.add_argument("--variant", choices=["improved", "original-ssd"])
    x.add_argument("--out")
    x.set_defaults(func=cmd_boxes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
