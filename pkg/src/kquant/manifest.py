"""On-disk formats.

A model directory holds ``manifest.json`` (human-readable graph, statistics
and threshold tables) next to raw little-endian weight blobs: float64 master
weights and one signed byte per quantized weight.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, ModelStateError
from .gaussmath import GaussParams
from .model import Activation, LayerSpec, LayerStats, ModelGraph
from .quantize import QuantConfig, QuantizedWeights, ThresholdTable
from .tensorcore import ConvSpec, weights as int_weights

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
FLOAT_DTYPE = "<f8"
INT_DTYPE = "<i1"


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


# -- tables ---------------------------------------------------------------------

def table_record(layer_name: str, t: ThresholdTable) -> dict:
    return {"layer_name": layer_name, "b_a": t.b_a, "mu": t.source.mu, "sigma": t.source.sigma,
            "z": t.z, "thresholds": list(t.thresholds)}


def table_from_record(rec: dict) -> ThresholdTable:
    return ThresholdTable(int(rec["b_a"]), tuple(int(v) for v in rec["thresholds"]),
                          float(rec["z"]), GaussParams(float(rec["mu"]), float(rec["sigma"])))


def export_thresholds(model: ModelGraph) -> str:
    """One record per activation that carries an integer table, in graph order."""
    records = [table_record(a.name, a.table) for a in model.activations() if a.table is not None]
    return dumps({"format_version": FORMAT_VERSION, "layers": records})


def import_thresholds(text: str) -> dict[str, ThresholdTable]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelStateError(f"unsupported threshold format {doc.get('format_version')!r}")
    return {r["layer_name"]: table_from_record(r) for r in doc["layers"]}


# -- blobs ----------------------------------------------------------------------

def _write_blob(root: Path, fname: str, arr: np.ndarray, dtype: str) -> dict:
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
    (root / fname).write_bytes(data)
    return {"file": fname, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(data)}


def _read_blob(root: Path, ref: dict) -> np.ndarray:
    path = root / ref["file"]
    if not path.exists():
        raise ModelStateError(f"missing weight blob {ref['file']}")
    raw = path.read_bytes()
    dt = np.dtype(ref["dtype"])
    expect = int(np.prod(ref["shape"])) * dt.itemsize
    if len(raw) != ref["nbytes"] or len(raw) != expect:
        raise ModelStateError(
            f"blob {ref['file']} has {len(raw)} bytes, manifest declares {ref['nbytes']} (shape needs {expect})")
    return np.frombuffer(raw, dtype=dt).reshape(ref["shape"]).copy()


# -- graph ----------------------------------------------------------------------

def _act_to_dict(a: Activation | None):
    if a is None:
        return None
    s = a.stats
    return {"name": a.name,
            "stats": {"mu": s.mu, "sigma": s.sigma, "momentum_ema": s.momentum_ema, "count": s.count},
            "table": table_record(a.name, a.table) if a.table is not None else None}


def _act_from_dict(d):
    if d is None:
        return None
    s = d["stats"]
    stats = LayerStats(float(s["mu"]), float(s["sigma"]), float(s["momentum_ema"]), int(s["count"]))
    table = table_from_record(d["table"]) if d["table"] is not None else None
    return Activation(d["name"], stats, table)


def _layer_to_dict(l: LayerSpec, root: Path) -> dict:
    d = {"name": l.name, "kind": l.kind, "quantized": l.quantized}
    if l.conv is not None:
        c = l.conv
        d["conv"] = {"out_ch": c.out_ch, "in_ch": c.in_ch, "kernel": c.kernel,
                     "stride": c.stride, "padding": c.padding}
    if l.kind == "maxpool":
        d["window"] = l.window
    if l.weight is not None:
        w = {"float": _write_blob(root, f"{l.name}.f64", l.weight, FLOAT_DTYPE)}
        if l.qweights is not None:
            q = l.qweights
            w["int"] = _write_blob(root, f"{l.name}.i8", q.values.data, INT_DTYPE)
            w["int"].update({"b_w": q.b_w, "mu": q.params.mu, "sigma": q.params.sigma})
        d["weights"] = w
    d["activation"] = _act_to_dict(l.act)
    if l.kind == "residual_block":
        for part in ("conv1", "conv2", "shortcut"):
            sub = getattr(l, part)
            d[part] = _layer_to_dict(sub, root) if sub is not None else None
    return d


def _layer_from_dict(d: dict, root: Path) -> LayerSpec:
    conv = ConvSpec(**d["conv"]) if "conv" in d else None
    l = LayerSpec(d["name"], d["kind"], conv=conv, window=int(d.get("window", 0)),
                  quantized=bool(d["quantized"]), act=_act_from_dict(d.get("activation")))
    w = d.get("weights")
    if w is not None:
        l.weight = _read_blob(root, w["float"]).astype(np.float64)
        if "int" in w:
            ref = w["int"]
            vals = _read_blob(root, ref).astype(np.int64)
            l.qweights = QuantizedWeights(int_weights(vals, int(ref["b_w"])),
                                          GaussParams(float(ref["mu"]), float(ref["sigma"])), int(ref["b_w"]))
    if l.kind == "residual_block":
        for part in ("conv1", "conv2", "shortcut"):
            sub = d.get(part)
            setattr(l, part, _layer_from_dict(sub, root) if sub is not None else None)
    return l


def model_to_dict(model: ModelGraph, root: Path) -> dict:
    q = model.quant
    return {"format_version": FORMAT_VERSION,
            "arch": model.arch,
            "num_classes": model.num_classes,
            "input": {"shape": list(model.input_shape), "bits": model.input_bits},
            "quant": {"b_a": q.b_a, "b_w": q.b_w, "rounding": q.rounding.value},
            "layers": [_layer_to_dict(l, root) for l in model.layers]}


def save_model(model: ModelGraph, out_dir) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST
    path.write_text(dumps(model_to_dict(model, root)), encoding="utf-8")
    return path


def resolve_manifest(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    if not p.exists():
        raise ConfigError(f"model manifest not found: {path}")
    return p


def load_model(path) -> ModelGraph:
    p = resolve_manifest(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelStateError(f"{p} is not valid JSON: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelStateError(f"unsupported manifest format_version {doc.get('format_version')!r}")
    q = doc["quant"]
    quant = QuantConfig(int(q["b_a"]), int(q["b_w"]), q["rounding"])
    layers = [_layer_from_dict(d, p.parent) for d in doc["layers"]]
    return ModelGraph(layers, tuple(doc["input"]["shape"]), quant, int(doc["input"]["bits"]),
                      doc.get("arch", "custom"), int(doc.get("num_classes", 10)))
