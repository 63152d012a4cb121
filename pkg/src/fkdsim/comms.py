"""Per-round traffic accounting for soft-label and parameter exchange."""
from __future__ import annotations

import csv
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DomainError, MissingRoundError
from .nn.spec import ModelSpec, count_parameters

UNITS = ("B", "MB", "Mb")
PAYLOAD_KINDS = {"fkd": "soft_labels", "fedavg": "parameters"}


@dataclass(frozen=True)
class EncodingModel:
    bytes_per_value: int = 4
    unit: str = "Mb"
    overhead_bytes_per_message: int = 0
    param_scope: str = "all"  # or "trainable_only"
    download_per_recipient: bool = False

    def __post_init__(self):
        if self.bytes_per_value not in (2, 4, 8):
            raise DomainError(f"bytes_per_value must be 2, 4 or 8, got {self.bytes_per_value}")
        if self.unit not in UNITS:
            raise DomainError(f"unit must be one of {UNITS}, got {self.unit!r}")
        if self.overhead_bytes_per_message < 0:
            raise DomainError("overhead_bytes_per_message must be >= 0")
        if self.param_scope not in ("all", "trainable_only"):
            raise DomainError(f"param_scope must be 'all' or 'trainable_only', got {self.param_scope!r}")


def convert(n_bytes: float, unit: str) -> float:
    """Bytes to ``B``, ``MB`` (1e6 bytes) or ``Mb`` (1e6 bits)."""
    if unit == "B":
        return float(n_bytes)
    if unit == "MB":
        return n_bytes / 1e6
    if unit == "Mb":
        return n_bytes * 8 / 1e6
    raise DomainError(f"unknown unit {unit!r}")


def to_bytes(value: float, unit: str) -> float:
    return value / convert(1, unit)


def soft_label_payload(n_rows: int, n_classes: int, enc: EncodingModel = EncodingModel()) -> int:
    if n_rows < 1 or n_classes < 1:
        raise DomainError("soft-label payload needs positive dimensions")
    return n_rows * n_classes * enc.bytes_per_value + enc.overhead_bytes_per_message


def parameter_payload(spec_or_count, enc: EncodingModel = EncodingModel()) -> int:
    """Bytes for one copy of a model's parameters.

    Accepts a ModelSpec or a bare parameter count (architectures the layer
    set cannot express, e.g. a 138M-parameter teacher); a bare count is
    always treated as fully communicated.
    """
    if isinstance(spec_or_count, ModelSpec):
        total, trainable, _ = count_parameters(spec_or_count)
        n = trainable if enc.param_scope == "trainable_only" else total
    else:
        n = int(spec_or_count)
        if n < 0:
            raise DomainError("parameter count must be non-negative")
    return n * enc.bytes_per_value + enc.overhead_bytes_per_message


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    direction: str
    actor: str
    kind: str
    bytes: int


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, round_: int, direction: str, actor: str, kind: str, n_bytes: int) -> None:
        if direction not in ("upload", "download"):
            raise DomainError(f"direction must be upload or download, got {direction!r}")
        if kind not in ("soft_labels", "parameters"):
            raise DomainError(f"unknown payload kind {kind!r}")
        if n_bytes < 0:
            raise DomainError("byte counts must be non-negative")
        with self._lock:
            self.entries.append(LedgerEntry(int(round_), direction, actor, kind, int(n_bytes)))

    def rounds(self) -> list[int]:
        return sorted({e.round for e in self.entries})

    def to_rows(self) -> list[dict]:
        return [asdict(e) for e in self.entries]

    @classmethod
    def from_rows(cls, rows) -> "CommLedger":
        ledger = cls()
        for r in rows:
            ledger.record(int(r["round"]), r["direction"], r["actor"], r["kind"], int(r["bytes"]))
        return ledger

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "direction", "actor", "kind", "bytes"])
            for e in self.entries:
                writer.writerow([e.round, e.direction, e.actor, e.kind, e.bytes])


def round_totals(ledger: CommLedger, protocol: str, round_: int) -> tuple[int, int]:
    """``(upload_bytes, download_bytes)`` for one round of one protocol."""
    if protocol not in PAYLOAD_KINDS:
        raise DomainError(f"protocol must be one of {sorted(PAYLOAD_KINDS)}, got {protocol!r}")
    kind = PAYLOAD_KINDS[protocol]
    hits = [e for e in ledger.entries if e.round == round_ and e.kind == kind]
    if not hits:
        raise MissingRoundError(f"no {protocol} ledger entries for round {round_}")
    up = sum(e.bytes for e in hits if e.direction == "upload")
    down = sum(e.bytes for e in hits if e.direction == "download")
    return up, down


def record_fkd_round(ledger: CommLedger, round_: int, num_teachers: int, n_public: int,
                     n_classes: int, enc: EncodingModel) -> None:
    """Each teacher uploads its soft labels; the aggregate goes back down."""
    payload = soft_label_payload(n_public, n_classes, enc)
    for t in range(num_teachers):
        ledger.record(round_, "upload", f"teacher{t}", "soft_labels", payload)
    if enc.download_per_recipient:
        for t in range(num_teachers):
            ledger.record(round_, "download", f"teacher{t}", "soft_labels", payload)
    else:
        ledger.record(round_, "download", "server", "soft_labels", payload)


def record_fedavg_round(ledger: CommLedger, round_: int, num_clients: int, params, enc: EncodingModel) -> None:
    """Each client uploads its model; the global model is broadcast."""
    payload = parameter_payload(params, enc)
    for c in range(num_clients):
        ledger.record(round_, "upload", f"client{c}", "parameters", payload)
    if enc.download_per_recipient:
        for c in range(num_clients):
            ledger.record(round_, "download", f"client{c}", "parameters", payload)
    else:
        ledger.record(round_, "download", "server", "parameters", payload)
