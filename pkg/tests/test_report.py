import json

import numpy as np
import pytest

from fkdsim.comms import CommLedger, EncodingModel, record_fkd_round
from fkdsim.errors import SchemaError
from fkdsim.fkd import ExperimentReport, RoundMetrics
from fkdsim.nn.model import init_model
from fkdsim.report import (dumps_report, ledger_from_dict, load_report, read_checkpoint, rounds_from_dict,
                           write_checkpoint, write_rounds_csv)

from test_fkd import TINY


def _report():
    ledger = CommLedger()
    record_fkd_round(ledger, 1, 2, 10, 3, EncodingModel())
    rounds = [RoundMetrics(1, [0.5, float("nan")], 0.9, 0.3, 240, 120, 1.0, 2.0, 0.9)]
    return ExperimentReport("fkd", rounds, ledger, init_model(TINY, 0), {"x": 1})


def test_report_round_trip(tmp_path):
    text = dumps_report(_report())
    (tmp_path / "r.json").write_text(text)
    doc = load_report(tmp_path / "r.json")
    assert doc["rounds"][0]["local_losses"] == [0.5, None]
    assert rounds_from_dict(doc)[0].test_accuracy == 0.9
    assert ledger_from_dict(doc).entries == _report().ledger.entries
    assert text == dumps_report(_report())


def test_schema_mismatch(tmp_path):
    doc = json.loads(dumps_report(_report()))
    doc["schema_version"] = 99
    (tmp_path / "r.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_report(tmp_path / "r.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(SchemaError):
        load_report(tmp_path / "bad.json")


def test_rounds_csv(tmp_path):
    write_rounds_csv(_report(), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("round,test_accuracy") and lines[1].endswith("0.5;")


@pytest.mark.parametrize("dtype, tol", [("float64", 0.0), ("float32", 1e-6)])
def test_checkpoint_round_trip(tmp_path, dtype, tol):
    model = init_model(TINY, 3)
    write_checkpoint(model, tmp_path, "m", dtype)
    back = read_checkpoint(tmp_path, "m")
    assert back.spec == model.spec
    for k, v in model.state_dict().items():
        np.testing.assert_allclose(back.state_dict()[k], v, rtol=tol, atol=tol)
