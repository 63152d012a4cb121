import json

import pytest

from fkdsim.config import ExperimentConfig, build, load_config, parse_ini
from fkdsim.errors import ConfigError
from fkdsim.fedavg import FedAvgConfig
from fkdsim.fkd import DistillConfig


def test_bundled_configs_load():
    iid = load_config("builtin:toy-iid")
    non = load_config("builtin:toy-noniid")
    fed = load_config("builtin:toy-fedavg")
    assert iid["distill"]["temperature"] == 10 and iid["partition"]["dirichlet_alpha"] == 10000
    assert non["distill"]["temperature"] == 20 and non["partition"]["dirichlet_alpha"] == 0.5
    assert iid["distill"]["alpha"] == 0.1
    assert fed["experiment"]["protocol"] == "fedavg"


def test_defaults_fill_everything():
    cfg = ExperimentConfig.from_mapping({})
    assert cfg["distill"]["alpha"] == 0.1 and cfg["experiment"]["rounds"] == 10


@pytest.mark.parametrize("doc, path", [
    ({"distill": {"alpha": "1.5"}}, "distill.alpha"),
    ({"distill": {"temperature": "-1"}}, "distill.temperature"),
    ({"experiment": {"rounds": "ten"}}, "experiment.rounds"),
    ({"experiment": {"colour": "red"}}, "experiment.colour"),
    ({"bogus": {}}, "bogus"),
    ({"split": {"disjoint": "maybe"}}, "split.disjoint"),
    ({"data": {"source": "manifest"}}, "data.manifest"),
])
def test_errors_cite_field_path(doc, path):
    with pytest.raises(ConfigError, match=path):
        ExperimentConfig.from_mapping(doc)


def test_ini_and_json_agree(tmp_path):
    (tmp_path / "a.ini").write_text("[distill]\nalpha = 0.3\n[partition]\nnum_clients = 4\n")
    (tmp_path / "a.json").write_text(json.dumps({"distill": {"alpha": 0.3}, "partition": {"num_clients": 4}}))
    a, b = load_config(tmp_path / "a.ini"), load_config(tmp_path / "a.json")
    assert a.values == b.values and a.digest() == b.digest()


def test_seed_override_changes_digest():
    cfg = load_config("builtin:toy-iid")
    other = cfg.with_seed(5)
    assert other.seed == 5 and other.digest() != cfg.digest()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
    with pytest.raises(ConfigError):
        load_config("builtin:nope")


def test_malformed_ini():
    with pytest.raises(ConfigError):
        parse_ini("no section header\n")


def test_build_small():
    cfg = ExperimentConfig.from_mapping({"data": {"per_class": "10", "height": "8", "width": "8"},
                                         "partition": {"num_clients": "2"}})
    ds, data, part, proto = build(cfg)
    assert isinstance(proto, DistillConfig) and proto.student_spec.input_shape == (8, 8, 3)
    assert part.num_clients == 2 and len(ds) == 30
    fed = build(cfg.with_overrides({"experiment.protocol": "fedavg"}))[3]
    assert isinstance(fed, FedAvgConfig)


def test_head_units_override():
    cfg = ExperimentConfig.from_mapping({"data": {"per_class": "5", "height": "8", "width": "8"},
                                         "distill": {"head_units": "3"}})
    ds, data, part, proto = build(cfg)
    assert proto.student_spec.layers[-1].hp["out_units"] == 3
