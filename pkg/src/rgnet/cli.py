"""Command-line entry point.

Commands: gen-data, stats, train, eval, ablate, quantize, export,
grad-check. Outputs land under --out only; every numeric report is written
both as an aligned text table and as a key=value file.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import data as dataio
from . import pipeline as pl
from . import quantize as qz
from .errors import ConfigError, DataError, NumericError, RgnetError
from .gradcheck import run_suite
from .report import format_table, kv_lines, write_report, write_text

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _load_config(args) -> pl.ModelConfig:
    cfg = pl.parse_config_file(args.config) if args.config else pl.ModelConfig()
    if getattr(args, "seed", None) is not None:
        cfg = pl.replace(cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = pl.replace(cfg, epochs=args.epochs)
    return cfg


def _fit_config_to_data(cfg: pl.ModelConfig, dataset) -> pl.ModelConfig:
    stats = dataio.compute_stats(dataset, num_classes=None)
    if stats.num_classes > cfg.num_classes:
        raise ConfigError(
            f"dataset has {stats.num_classes} classes but config allows {cfg.num_classes}")
    if stats.max_persons > cfg.max_persons:
        cfg = pl.replace(cfg, max_persons=stats.max_persons)
    return cfg


def _parse_profile(text, num_classes):
    if not text:
        return None
    vals = [float(v) for v in text.split(",")]
    if len(vals) != num_classes:
        raise ConfigError(f"profile has {len(vals)} entries for {num_classes} classes")
    return vals


def cmd_gen_data(args) -> int:
    profile = _parse_profile(args.profile, args.classes)
    dataset = dataio.generate_synthetic(
        num_images=args.images, num_classes=args.classes,
        p_range=(args.p_min, args.p_max), profile=profile,
        seed=args.seed if args.seed is not None else 0,
        image_size=args.image_size, num_colors=args.colors,
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "annotations.json")
    dataio.save_annotations(dataset, path)
    print(f"wrote {len(dataset)} images -> {path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    dataset = dataio.load_annotations(args.data)
    stats = dataio.compute_stats(dataset)
    write_report(args.out, "stats", dataio.stats_table(stats), dataio.stats_mapping(stats))
    print(dataio.stats_table(stats))
    return EXIT_OK


def _train_log_writer(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    f = open(path, "w", encoding="utf-8")

    def log(entry):
        f.write(json.dumps(entry, sort_keys=True) + "\n")
        f.flush()

    return log, f


def cmd_train(args) -> int:
    dataset = dataio.load_annotations(args.data)
    eval_dataset = dataio.load_annotations(args.eval_data) if args.eval_data else None
    if args.resume:
        state = pl.load_train_state(args.resume)
        cfg = state.config
    else:
        cfg = _fit_config_to_data(_load_config(args), dataset)
        state = pl.init_train_state(cfg)
    os.makedirs(args.out, exist_ok=True)
    log, fh = _train_log_writer(os.path.join(args.out, "train_log.jsonl"))
    try:
        pl.train(dataset, cfg, state=state, eval_dataset=eval_dataset, log=log)
    finally:
        fh.close()
    ckpt = os.path.join(args.out, "checkpoint.rgnet")
    pl.save_train_state(state, ckpt)
    write_text(os.path.join(args.out, "config.kv"), pl.config_kv_lines(cfg))
    best = f"best mAP {state.best_map:.2f} @ epoch {state.best_epoch}" if state.best_epoch >= 0 else "no eval"
    print(f"trained {state.epoch} epochs; {best}; checkpoint -> {ckpt}")
    return EXIT_OK


def _metrics_report(out_dir, name, label, metrics, num_classes):
    headers = ["model"] + [f"c{c}" for c in range(num_classes)] + ["mAP"]
    row = [label] + [metrics["recalls"][c] for c in range(num_classes)] + [metrics["mAP"]]
    table = format_table(headers, [row])
    mapping = {
        "label": label,
        "mAP": metrics["mAP"],
        "pairs": metrics["pairs"],
        "pair_accuracy": metrics["pair_accuracy"],
        "recalls": metrics["recalls"],
    }
    write_report(out_dir, name, table, mapping)
    return table


def cmd_eval(args) -> int:
    dataset = dataio.load_annotations(args.data)
    state = pl.load_train_state(args.checkpoint)
    metrics = pl.evaluate(state.model, dataset, args.masking)
    table = _metrics_report(args.out, "eval", f"{args.masking}", metrics, state.config.num_classes)
    print(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    dataset = dataio.load_annotations(args.data)
    base = _fit_config_to_data(_load_config(args), dataset)
    rows = pl.run_ablation(dataset, base, epochs=args.epochs)
    table = format_table(["configuration", "mAP"], [[label, m] for label, m in rows])
    mapping = {label: m for label, m in rows}
    write_report(args.out, "ablation", table, mapping)
    print(table)
    return EXIT_OK


def cmd_quantize(args) -> int:
    dataset = dataio.load_annotations(args.data)
    state = pl.load_train_state(args.checkpoint)
    state, qctx, fp32_metrics, int8_metrics = pl.fake_quant_train(
        dataset, state, qat_epochs=args.qat_epochs)
    os.makedirs(args.out, exist_ok=True)
    fp32_path = os.path.join(args.out, "model_fp32.rgnet")
    int8_path = os.path.join(args.out, "model_int8.rgnet")
    cfg_map = state.config.to_mapping()
    fp32_payload = qz.export_fp32(state.model, cfg_map, fp32_path)
    int8_payload = qz.export_quantized(state.model, qctx.activation_schemes(), cfg_map, int8_path)
    sizes = qz.SizeReport(
        fp32_file_bytes=os.path.getsize(fp32_path),
        int8_file_bytes=os.path.getsize(int8_path),
        fp32_payload_bytes=fp32_payload,
        int8_payload_bytes=int8_payload,
    )
    nc = state.config.num_classes
    headers = ["model"] + [f"c{c}" for c in range(nc)] + ["mAP"]
    rows = [
        ["fp32"] + [fp32_metrics["recalls"][c] for c in range(nc)] + [fp32_metrics["mAP"]],
        ["int8"] + [int8_metrics["recalls"][c] for c in range(nc)] + [int8_metrics["mAP"]],
    ]
    table = format_table(headers, rows)
    table += (f"\nfp32 file {sizes.fp32_file_bytes} B, int8 file {sizes.int8_file_bytes} B, "
              f"file ratio {sizes.file_ratio:.4f}, payload ratio {sizes.payload_ratio:.4f}\n")
    mapping = {
        "fp32_mAP": fp32_metrics["mAP"],
        "int8_mAP": int8_metrics["mAP"],
        "map_drop": fp32_metrics["mAP"] - int8_metrics["mAP"],
        **sizes.as_mapping(),
    }
    write_report(args.out, "quantize", table, mapping)
    print(table)
    return EXIT_OK


def cmd_export(args) -> int:
    state = pl.load_train_state(args.checkpoint)
    model = state.model
    if args.data:
        dataset = dataio.load_annotations(args.data)
        qctx = pl.calibrate(model, dataset)
        act_schemes = qctx.activation_schemes()
    else:
        raise ConfigError("export needs --data to calibrate activation ranges")
    os.makedirs(args.out, exist_ok=True)
    int8_path = os.path.join(args.out, "model_int8.rgnet")
    fp32_path = os.path.join(args.out, "model_fp32.rgnet")
    cfg_map = state.config.to_mapping()
    fp32_payload = qz.export_fp32(model, cfg_map, fp32_path)
    int8_payload = qz.export_quantized(model, act_schemes, cfg_map, int8_path)
    sizes = qz.SizeReport(os.path.getsize(fp32_path), os.path.getsize(int8_path),
                          fp32_payload, int8_payload)
    write_report(args.out, "export",
                 format_table(["field", "value"], [[k, v] for k, v in sizes.as_mapping().items()]),
                 sizes.as_mapping())
    print(f"exported int8 container -> {int8_path} (file ratio {sizes.file_ratio:.4f})")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(seeds=range(args.seeds))
    elapsed = time.perf_counter() - t0
    rows = [[r.name, r.seed, f"{r.max_err:.3e}", r.checked, "pass" if r.ok else "FAIL"] for r in results]
    table = format_table(["check", "seed", "scaled_err", "elements", "status"], rows)
    table += f"\n{len(results)} checks in {elapsed:.1f}s\n"
    print(table)
    if args.out:
        mapping = {f"{r.name}.seed{r.seed}": ("pass" if r.ok else "fail") for r in results}
        mapping["elapsed_seconds"] = elapsed
        write_report(args.out, "gradcheck", table, mapping)
    if not all(r.ok for r in results):
        raise NumericError("gradient check failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True, out=True):
        if config:
            p.add_argument("--config", help="key=value model/training config file")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, config=False)
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--p-min", type=int, default=2)
    p.add_argument("--p-max", type=int, default=4)
    p.add_argument("--profile", help="comma-separated class marginals")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--colors", type=int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", help="dataset statistics report")
    common(p, config=False, seed=False)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masking", choices=["unilateral", "bilateral"], default="unilateral")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="cumulative toggle ablation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("quantize", help="calibrate, QAT, export, report")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--qat-epochs", type=int, default=3)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("export", help="export a quantized container")
    common(p, config=False, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset for activation calibration")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RgnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
