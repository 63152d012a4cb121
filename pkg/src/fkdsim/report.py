"""Report serialization (JSON + per-round CSV) and model checkpoints."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .comms import CommLedger
from .errors import FormatError, SchemaError
from .fkd import ExperimentReport, RoundMetrics
from .nn.model import ModelState
from .nn.spec import parse_spec

SCHEMA_VERSION = 1

ROUND_COLUMNS = [
    "round", "test_accuracy", "test_loss", "student_total_loss", "student_loss",
    "distill_loss", "upload_bytes", "download_bytes", "local_losses",
]


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, list):
        return [_clean(v) for v in value]
    return value


def report_to_dict(report: ExperimentReport) -> dict:
    total, trainable, frozen = report.final_model.counts()
    return {
        "schema_version": SCHEMA_VERSION,
        "protocol": report.protocol,
        "config": report.config,
        "rounds": [{k: _clean(v) for k, v in asdict(r).items()} for r in report.rounds],
        "ledger": report.ledger.to_rows(),
        "final_model": {"total_params": total, "trainable_params": trainable, "non_trainable_params": frozen},
    }


def dumps_report(report: ExperimentReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def load_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    version = doc.get("schema_version") if isinstance(doc, dict) else None
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: report schema_version {version!r}, expected {SCHEMA_VERSION}")
    for key in ("protocol", "rounds", "ledger"):
        if key not in doc:
            raise SchemaError(f"{path}: report lacks {key!r}")
    return doc


def rounds_from_dict(doc: dict) -> list[RoundMetrics]:
    return [RoundMetrics(**r) for r in doc["rounds"]]


def ledger_from_dict(doc: dict) -> CommLedger:
    return CommLedger.from_rows(doc["ledger"])


def write_rounds_csv(report: ExperimentReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_COLUMNS)
        for r in report.rounds:
            row = asdict(r)
            losses = ";".join("" if not math.isfinite(v) else repr(v) for v in row.pop("local_losses"))
            writer.writerow([("" if row[c] is None else repr(row[c])) for c in ROUND_COLUMNS[:-1]] + [losses])


def write_checkpoint(model: ModelState, directory, name: str = "model", dtype: str = "float64") -> Path:
    """``<name>.spec`` + flat little-endian ``<name>.bin`` + ``<name>.json`` offsets."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if dtype not in ("float64", "float32"):
        raise FormatError("checkpoint dtype must be float64 or float32")
    np_dtype = np.dtype(dtype).newbyteorder("<")
    (directory / f"{name}.spec").write_text(model.spec.to_text())
    entries, offset, blobs = [], 0, []
    for key, arr in model.state_dict().items():
        data = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(data),
                        "trainable": key in model.params})
        blobs.append(data)
        offset += len(data)
    (directory / f"{name}.bin").write_bytes(b"".join(blobs))
    manifest = {"dtype": dtype, "byteorder": "little", "tensors": entries}
    (directory / f"{name}.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory / f"{name}.json"


def read_checkpoint(directory, name: str = "model") -> ModelState:
    directory = Path(directory)
    spec = parse_spec((directory / f"{name}.spec").read_text())
    manifest = json.loads((directory / f"{name}.json").read_text())
    blob = (directory / f"{name}.bin").read_bytes()
    np_dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    params, buffers = {}, {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).astype(np.float64).reshape(e["shape"])
        (params if e["trainable"] else buffers)[e["name"]] = arr
    return ModelState(spec, params, buffers, mode="eval")
