"""``kquant`` command line.

Verbs: train, quantize, infer, export-thresholds, analyze.
Exit codes: 0 ok, 2 config error, 3 model-state error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, build_model, load_config, load_dataset
from .datasets import encode_levels
from .errors import ConfigError, KQuantError, NumericError
from .infer import IntegerAudit, analyze_ranges, estimate_hw_cost, execute_graph
from .manifest import dumps, export_thresholds, load_model, save_model
from .model import ModelGraph
from .train import calibrate, train_model

log = logging.getLogger("kquant")

METRICS = "metrics.jsonl"


def _run_config(config, seed=None, stage=None) -> RunConfig:
    cfg = load_config(config) if config else RunConfig()
    if seed is not None:
        cfg.train.seed = seed
    if stage is not None:
        if stage < 0:
            raise ConfigError("--stage: must be >= 0")
        cfg.train.max_stage = stage
    cfg.train_config()
    return cfg


# -- train / quantize ----------------------------------------------------------------

def cmd_train(config, out, seed: int | None = None, stage: int | None = None, stream=None) -> Path:
    """Train per the config and write manifest, weight blobs and the metrics log to ``out``."""
    stream = stream or sys.stdout
    cfg = _run_config(config, seed, stage)
    data = load_dataset(cfg)
    model = build_model(cfg, input_shape=data[0].shape[1:])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / METRICS
    metrics.write_text("", encoding="utf-8")

    def on_record(rec):
        with metrics.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")
        acc = f" test {rec['test_accuracy']:.4f}" if "test_accuracy" in rec else ""
        print(f"stage {rec['stage']} epoch {rec['epoch']} loss {rec['loss']:.4f} "
              f"acc {rec['accuracy']:.4f}{acc}", file=stream)

    model, records = train_model(model, data, cfg.train_config(), on_record)
    save_model(model, out)
    if records:
        plotting.plot_training(records, out / "training.png")
    print(f"wrote {out / 'manifest.json'} (stage {model.stage()}/{len(model.units())}, "
          f"b_a={model.quant.b_a}, b_w={model.quant.b_w})", file=stream)
    return out


def cmd_quantize(model_path, out, config=None, seed: int | None = None, stage: int | None = None,
                 stream=None) -> Path:
    """Post-hoc quantization of a float manifest: weights are quantized and
    activation statistics re-collected on the training split, stage by stage."""
    stream = stream or sys.stdout
    cfg = _run_config(config, seed, stage)
    model = load_model(model_path)
    if config:
        model.quant = cfg.quant_config()
        model.input_bits = cfg.quant.b_a
    # calibration inputs are encoded at the model's input width
    cfg.quant.b_a = model.input_bits
    data = load_dataset(cfg)
    if tuple(data[0].shape[1:]) != model.input_shape:
        raise ConfigError(f"dataset: input shape {data[0].shape[1:]} does not match model {model.input_shape}")
    tcfg = replace(cfg.train_config(), quant=model.quant)
    calibrate(model, data[0], tcfg)
    save_model(model, out)
    print(f"wrote {Path(out) / 'manifest.json'} (stage {model.stage()}/{len(model.units())})", file=stream)
    return Path(out)


# -- infer ----------------------------------------------------------------------------

def _load_input(path, model: ModelGraph) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"--input: file not found: {path}")
    try:
        x = np.load(p, allow_pickle=False)
    except ValueError as exc:
        raise ConfigError(f"--input: cannot read {path}: {exc}") from exc
    if x.dtype.kind == "f":
        x = encode_levels(x, model.input_bits)
    if x.ndim == len(model.input_shape):
        x = x[None]
    return x.astype(np.int64)


def cmd_infer(model_path, input_path, checked: bool = False, stream=None) -> list[dict]:
    """Integer-only inference; prints one JSON line per sample (class and logits)."""
    stream = stream or sys.stdout
    model = load_model(model_path)
    x = _load_input(input_path, model)
    audit = IntegerAudit() if checked else None
    logits = execute_graph(model, x, audit).data
    results = []
    for i, row in enumerate(logits):
        rec = {"index": i, "class": int(np.argmax(row)), "logits": [int(v) for v in row]}
        results.append(rec)
        print(json.dumps(rec), file=stream)
    if audit is not None:
        summary = {"checked": True, "ops": audit.ops, "fractional_ops": len(audit.fractional_events),
                   "scale_events": len(audit.scale_events)}
        print(json.dumps(summary), file=stream)
        if not audit.clean:
            raise NumericError(f"integer-only check failed: {audit.fractional_events + audit.scale_events}")
    return results


# -- export / analyze -----------------------------------------------------------------

def cmd_export_thresholds(model_path, out=None, stream=None) -> str:
    stream = stream or sys.stdout
    text = export_thresholds(load_model(model_path))
    if out is None:
        stream.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    return text


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _blank(v):
    return "-" if v is None else v


def analyze_model(model: ModelGraph, parallel: bool = False) -> dict:
    ranges = analyze_ranges(model)
    cost = estimate_hw_cost(model, parallel)
    return {"arch": model.arch, "b_a": model.quant.b_a, "b_w": model.quant.b_w,
            "stage": model.stage(), "units": len(model.units()),
            "ranges": [asdict(r) for r in ranges.rows],
            "max_acc_bits": ranges.max_acc_bits,
            "hw_cost": {"parallel": parallel, "rows": [asdict(r) for r in cost.rows],
                        "totals": cost.totals}}


def render_report(report: dict) -> str:
    lines = [f"model {report['arch']}  b_a={report['b_a']} b_w={report['b_w']}  "
             f"stage {report['stage']}/{report['units']}", "", "[ranges]"]
    head = f"{'layer':<20} {'kind':<13} {'fan_in':>7} {'M_a':>5} {'M_m':>12} {'acc_bits':>8}"
    lines += [head, "-" * len(head)]
    for r in report["ranges"]:
        lines.append(f"{r['name']:<20} {r['kind']:<13} {_blank(r['fan_in']):>7} {r['m_a']:>5} "
                     f"{_blank(r['m_m']):>12} {_blank(r['acc_bits']):>8}")
    lines.append(f"max accumulator width: {report['max_acc_bits']} bits")
    hw = report["hw_cost"]
    mode = "fully parallel" if hw["parallel"] else "one unit per layer"
    lines += ["", f"[hardware] ({mode})"]
    head = f"{'layer':<20} {'kind':<15} {'units':>8} {'comparators':>12} {'muxes':>10} {'cmp_bits':>10} {'adder_bits':>10}"
    lines += [head, "-" * len(head)]
    for r in hw["rows"]:
        lines.append(f"{r['name']:<20} {r['kind']:<15} {r['units']:>8} {r['comparators']:>12} "
                     f"{r['mux_count']:>10} {r['comparator_bits']:>10} {r['adder_bits']:>10}")
    t = hw["totals"]
    lines.append(f"{'total':<20} {'':<15} {t['units']:>8} {t['comparators']:>12} "
                 f"{t['mux_count']:>10} {t['comparator_bits']:>10} {t['adder_bits']:>10}")
    lines += ["", "[csv ranges]", _csv(report["ranges"]).rstrip("\n"),
              "", "[csv hardware]", _csv(hw["rows"]).rstrip("\n"), "[end]"]
    return "\n".join(lines) + "\n"


def cmd_analyze(model_path=None, config=None, out=None, parallel: bool = False, stream=None) -> dict:
    """Range and hardware report for a saved model, or for a fresh model built from a config."""
    stream = stream or sys.stdout
    if model_path is not None:
        model = load_model(model_path)
    elif config is not None:
        model = build_model(load_config(config))
    else:
        raise ConfigError("--model or --config is required")
    report = analyze_model(model, parallel)
    stream.write(render_report(report))
    if out is not None:
        root = Path(out)
        root.mkdir(parents=True, exist_ok=True)
        (root / "report.json").write_text(dumps(report), encoding="utf-8")
        (root / "ranges.csv").write_text(_csv(report["ranges"]), encoding="utf-8")
        (root / "hw_cost.csv").write_text(_csv(report["hw_cost"]["rows"]), encoding="utf-8")
        plotting.plot_ranges(analyze_ranges(model), root / "ranges.png")
        plotting.plot_hw_cost(estimate_hw_cost(model, parallel), root / "hw_cost.png")
        for a in model.activations():
            if a.table is not None:
                plotting.plot_threshold_table(a.table, root / f"thresholds_{a.name}.png", a.name)
    return report


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kquant", description="k-quantile quantization toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="gradual quantization-aware training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", type=int, help="stop the schedule after this many units")

    p = sub.add_parser("quantize", help="post-hoc quantization of a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", type=int)

    p = sub.add_parser("infer", help="integer-only inference")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--checked", action="store_true", help="assert integer-only arithmetic")

    p = sub.add_parser("export-thresholds", help="write per-layer threshold tables")
    p.add_argument("--model", required=True)
    p.add_argument("--out")

    p = sub.add_parser("analyze", help="range and hardware cost report")
    p.add_argument("--model")
    p.add_argument("--config")
    p.add_argument("--out", help="directory for csv, json and figures")
    p.add_argument("--parallel", action="store_true", help="count fully parallel units")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "train":
            cmd_train(args.config, args.out, args.seed, args.stage)
        elif args.verb == "quantize":
            cmd_quantize(args.model, args.out, args.config, args.seed, args.stage)
        elif args.verb == "infer":
            cmd_infer(args.model, args.input, args.checked)
        elif args.verb == "export-thresholds":
            cmd_export_thresholds(args.model, args.out)
        else:
            cmd_analyze(args.model, args.config, args.out, args.parallel)
    except KQuantError as exc:
        print(f"kquant {args.verb}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
