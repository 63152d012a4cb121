"""Experiment configuration: a sectioned key-value document (INI) or the same
schema as JSON. Every key has a default; unknown keys are rejected."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .comms import UNITS, EncodingModel
from .datasets import ExperimentData, LabeledDataset, SplitSpec, generate_synthetic, load_manifest, split_dataset
from .errors import ConfigError, FkdError
from .fedavg import FedAvgConfig
from .fkd import DistillConfig
from .nn.spec import ModelSpec, load_spec
from .nn.train import OptimizerConfig
from .partition import Partition, PartitionConfig, dirichlet_partition
from .preprocess import ClaheConfig, PipelineConfig


def _positive(v):
    return None if v > 0 else "must be positive"


def _non_negative(v):
    return None if v >= 0 else "must be >= 0"


def _unit_interval(v):
    return None if 0.0 <= v <= 1.0 else "must lie in [0, 1]"


def _fraction(v):
    return None if 0.0 < v <= 1.0 else "must lie in (0, 1]"


def _one_of(*options):
    def check(v):
        return None if v in options else f"must be one of {list(options)}"
    return check


def _at_least(lo):
    def check(v):
        return None if v >= lo else f"must be >= {lo}"
    return check


def _momentum(v):
    return None if 0.0 <= v < 1.0 else "must lie in [0, 1)"


# section -> key -> (type, default, check)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "protocol": (str, "fkd", _one_of("fkd", "fedavg")),
        "seed": (int, 0, _non_negative),
        "rounds": (int, 10, _at_least(1)),
        "local_epochs": (int, 5, _non_negative),
        "student_epochs": (int, None, _non_negative),
    },
    "data": {
        "source": (str, "synthetic", _one_of("synthetic", "manifest")),
        "manifest": (str, None, None),
        "classes": (int, 3, _at_least(2)),
        "per_class": (int, 300, _at_least(1)),
        "height": (int, 32, _at_least(4)),
        "width": (int, 32, _at_least(4)),
        "channels": (int, 3, _at_least(1)),
        "noise": (float, 0.05, _non_negative),
        "image_size": (int, 224, _at_least(2)),
        "clahe": (bool, True, None),
        "clip_limit": (float, 2.0, _at_least(1.0)),
        "tile_rows": (int, 8, _at_least(1)),
        "tile_cols": (int, 8, _at_least(1)),
        "bins": (int, 256, _at_least(2)),
        "clahe_before_resize": (bool, True, None),
    },
    "split": {
        "private_fraction": (float, 0.8, _fraction),
        "public_fraction": (float, 0.5, _fraction),
        "test_fraction": (float, 0.5, _fraction),
        "disjoint": (bool, False, None),
    },
    "partition": {
        "num_clients": (int, 2, _at_least(1)),
        "dirichlet_alpha": (float, 10000.0, _positive),
        "min_per_client": (int, 1, _at_least(1)),
    },
    "distill": {
        "temperature": (float, 10.0, _positive),
        "alpha": (float, 0.1, _unit_interval),
        "t_squared": (bool, False, None),
        "double_softmax": (bool, False, None),
        "reset_teachers": (bool, False, None),
        "teacher_spec": (str, "builtin:toy_teacher", None),
        "student_spec": (str, "builtin:toy_student", None),
        "head_units": (int, None, _at_least(1)),
    },
    "fedavg": {
        "model_spec": (str, None, None),
        "weighting": (str, "uniform", _one_of("uniform", "by_sample_count")),
    },
    "optimizer": {
        "learning_rate": (float, 0.01, _non_negative),
        "momentum": (float, 0.0, _momentum),
        "batch_size": (int, 32, _at_least(1)),
    },
    "student_optimizer": {
        "learning_rate": (float, 0.01, _non_negative),
        "momentum": (float, 0.0, _momentum),
        "batch_size": (int, 32, _at_least(1)),
    },
    "comms": {
        "bytes_per_value": (int, 4, _one_of(2, 4, 8)),
        "unit": (str, "Mb", _one_of(*UNITS)),
        "overhead_bytes_per_message": (int, 0, _non_negative),
        "param_scope": (str, "all", _one_of("all", "trainable_only")),
        "download_per_recipient": (bool, False, None),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(kind, raw, path):
    if isinstance(raw, str):
        text = raw.strip()
        if kind is str:
            return text
        if text == "" or text.lower() in ("none", "null"):
            return None
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ConfigError(f"{path}: expected a boolean, got {raw!r}")
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}") from None
    if raw is None:
        return None
    if kind is bool and isinstance(raw, bool):
        return raw
    if kind is int and isinstance(raw, int) and not isinstance(raw, bool):
        return raw
    if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    if kind is str and isinstance(raw, str):
        return raw
    raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}")


@dataclass
class ExperimentConfig:
    values: dict
    base_dir: Path = Path(".")

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def from_mapping(cls, doc: dict, base_dir=Path(".")) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping of sections")
        values = {}
        for section in doc:
            if section not in SCHEMA:
                raise ConfigError(f"{section}: unknown section")
        for section, keys in SCHEMA.items():
            given = doc.get(section) or {}
            if not isinstance(given, dict):
                raise ConfigError(f"{section}: expected a table of keys")
            for key in given:
                if key not in keys:
                    raise ConfigError(f"{section}.{key}: unknown key")
            resolved = {}
            for key, (kind, default, check) in keys.items():
                path = f"{section}.{key}"
                value = _coerce(kind, given[key], path) if key in given else default
                if value is not None and check is not None:
                    problem = check(value)
                    if problem:
                        raise ConfigError(f"{path}: {problem}, got {value!r}")
                resolved[key] = value
            values[section] = resolved
        cfg = cls(values, Path(base_dir))
        cfg._cross_check()
        return cfg

    def _cross_check(self):
        split = self["split"]
        if split["disjoint"]:
            total = split["private_fraction"] + split["public_fraction"] + split["test_fraction"]
            if total > 1.0 + 1e-12:
                raise ConfigError(f"split: disjoint fractions sum to {total} > 1")
        if self["data"]["source"] == "manifest" and not self["data"]["manifest"]:
            raise ConfigError("data.manifest: required when data.source = manifest")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        values = json.loads(json.dumps(self.values))
        values["experiment"]["seed"] = int(seed)
        return ExperimentConfig.from_mapping(values, self.base_dir)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        values = json.loads(json.dumps(self.values))
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1)
            values.setdefault(section, {})[key] = value
        return ExperimentConfig.from_mapping(values, self.base_dir)

    def canonical_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    @property
    def seed(self) -> int:
        return self["experiment"]["seed"]

    # --- builders -----------------------------------------------------------

    def _resolve(self, ref: str) -> str:
        if ref.startswith("builtin:") or Path(ref).is_absolute():
            return ref
        return str(self.base_dir / ref)

    def _spec(self, ref: str, num_classes: int, image_shape) -> ModelSpec:
        try:
            spec = load_spec(self._resolve(ref))
        except OSError as exc:
            raise ConfigError(f"cannot read model spec {ref!r}: {exc.strerror or exc}") from None
        head = self["distill"]["head_units"]
        if head is not None:
            spec = spec.with_head(head)
        if spec.input_shape != tuple(image_shape):
            spec = spec.with_input_shape(image_shape)
        return spec

    def pipeline(self) -> PipelineConfig:
        d = self["data"]
        clahe = ClaheConfig(d["clip_limit"], (d["tile_rows"], d["tile_cols"]), d["bins"]) if d["clahe"] else None
        return PipelineConfig((d["image_size"], d["image_size"]), d["channels"], clahe, d["clahe_before_resize"])

    def dataset(self) -> LabeledDataset:
        d = self["data"]
        if d["source"] == "synthetic":
            return generate_synthetic(d["classes"], d["per_class"], (d["height"], d["width"]), self.seed,
                                      d["channels"], d["noise"])
        return load_manifest(self._resolve(d["manifest"]), self.pipeline())

    def split_spec(self) -> SplitSpec:
        s = self["split"]
        return SplitSpec(s["private_fraction"], s["public_fraction"], s["test_fraction"], s["disjoint"], self.seed)

    def partition_config(self) -> PartitionConfig:
        p = self["partition"]
        return PartitionConfig(p["num_clients"], p["dirichlet_alpha"], self.seed, p["min_per_client"])

    def encoding(self) -> EncodingModel:
        c = self["comms"]
        return EncodingModel(c["bytes_per_value"], c["unit"], c["overhead_bytes_per_message"],
                             c["param_scope"], c["download_per_recipient"])

    def _optimizer(self, section) -> OptimizerConfig:
        o = self[section]
        return OptimizerConfig(o["learning_rate"], o["momentum"], o["batch_size"])

    def distill_config(self, ds: LabeledDataset) -> DistillConfig:
        e, d = self["experiment"], self["distill"]
        k = ds.num_classes
        return DistillConfig(
            teacher_spec=self._spec(d["teacher_spec"], k, ds.image_shape),
            student_spec=self._spec(d["student_spec"], k, ds.image_shape),
            num_teachers=self["partition"]["num_clients"],
            rounds=e["rounds"],
            local_epochs=e["local_epochs"],
            student_epochs=e["student_epochs"],
            temperature=d["temperature"],
            alpha=d["alpha"],
            num_classes=k,
            teacher_optimizer=self._optimizer("optimizer"),
            student_optimizer=self._optimizer("student_optimizer"),
            seed=self.seed,
            t_squared=d["t_squared"],
            double_softmax=d["double_softmax"],
            reset_teachers=d["reset_teachers"],
            encoding=self.encoding(),
        )

    def fedavg_config(self, ds: LabeledDataset) -> FedAvgConfig:
        e, f = self["experiment"], self["fedavg"]
        ref = f["model_spec"] or self["distill"]["teacher_spec"]
        return FedAvgConfig(
            model_spec=self._spec(ref, ds.num_classes, ds.image_shape),
            num_clients=self["partition"]["num_clients"],
            rounds=e["rounds"],
            local_epochs=e["local_epochs"],
            num_classes=ds.num_classes,
            optimizer=self._optimizer("optimizer"),
            seed=self.seed,
            weighting=f["weighting"],
            encoding=self.encoding(),
        )

    def prepare(self) -> tuple[LabeledDataset, ExperimentData, Partition]:
        """Dataset, splits and partition, all derived from the config seed."""
        ds = self.dataset()
        data = split_dataset(ds, self.split_spec())
        part = dirichlet_partition(data.private_pool.labels, self.partition_config(), ds.num_classes)
        return ds, data, part


def parse_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def load_config(path) -> ExperimentConfig:
    """Load ``.ini``/``.cfg`` or ``.json``; ``builtin:<name>`` picks a bundled config."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        try:
            text = resources.files("fkdsim").joinpath("configs").joinpath(f"{name}.ini").read_text()
        except FileNotFoundError:
            raise ConfigError(f"no bundled config named {name!r}") from None
        return ExperimentConfig.from_mapping(parse_ini(text))
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror or exc}") from None
    if p.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    else:
        doc = parse_ini(text)
    return ExperimentConfig.from_mapping(doc, p.parent)


def build(cfg: ExperimentConfig):
    """Everything a run needs: ``(dataset, data, partition, protocol config)``."""
    try:
        ds, data, part = cfg.prepare()
    except FkdError:
        raise
    if cfg["experiment"]["protocol"] == "fkd":
        return ds, data, part, cfg.distill_config(ds)
    return ds, data, part, cfg.fedavg_config(ds)
