import numpy as np
import pytest

from fkdsim.comms import (CommLedger, EncodingModel, convert, parameter_payload, record_fedavg_round,
                          record_fkd_round, round_totals, soft_label_payload, to_bytes)
from fkdsim.errors import DomainError, MissingRoundError
from fkdsim.nn.spec import parse_spec, student_spec


def test_soft_label_payloads():
    assert soft_label_payload(100, 3) == 1200
    assert soft_label_payload(1532, 3) == 18384
    assert convert(18384, "Mb") == pytest.approx(0.147072)
    assert soft_label_payload(1, 1) == 4


def test_overhead_added_per_message():
    assert soft_label_payload(10, 3, EncodingModel(overhead_bytes_per_message=64)) == 184


def test_parameter_payloads():
    assert parameter_payload(student_spec()) == 381736
    assert parameter_payload(student_spec(), EncodingModel(param_scope="trainable_only")) == 379944
    assert convert(parameter_payload(138_000_000), "MB") == pytest.approx(552.0)


def test_units_round_trip():
    for unit in ("B", "MB", "Mb"):
        assert to_bytes(convert(12345, unit), unit) == pytest.approx(12345)
    with pytest.raises(DomainError):
        convert(1, "KiB")


def test_encoding_validation():
    with pytest.raises(DomainError):
        EncodingModel(bytes_per_value=3)
    with pytest.raises(DomainError):
        EncodingModel(unit="GB")


def _fkd_up(teachers, enc=EncodingModel()):
    ledger = CommLedger()
    record_fkd_round(ledger, 1, teachers, 1532, 3, enc)
    return round_totals(ledger, "fkd", 1)


def test_fkd_upload_linear_in_teachers():
    up5, down5 = _fkd_up(5)
    up2, down2 = _fkd_up(2)
    assert up5 / up2 == 2.5
    assert down5 == down2 == 18384


def test_fedavg_download_constant():
    spec = student_spec()
    totals = []
    for k in (2, 5):
        ledger = CommLedger()
        record_fedavg_round(ledger, 1, k, spec, EncodingModel())
        totals.append(round_totals(ledger, "fedavg", 1))
    assert totals[0][1] == totals[1][1]
    assert totals[1][0] / totals[0][0] == 2.5


def test_download_per_recipient():
    up, down = _fkd_up(4, EncodingModel(download_per_recipient=True))
    assert up == down


def test_missing_round():
    ledger = CommLedger()
    record_fkd_round(ledger, 1, 2, 10, 3, EncodingModel())
    with pytest.raises(MissingRoundError):
        round_totals(ledger, "fkd", 2)
    with pytest.raises(MissingRoundError):
        round_totals(ledger, "fedavg", 1)


def test_ledger_rows_round_trip(tmp_path):
    ledger = CommLedger()
    record_fkd_round(ledger, 1, 2, 10, 3, EncodingModel())
    again = CommLedger.from_rows(ledger.to_rows())
    assert again.entries == ledger.entries
    ledger.to_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "round,direction,actor,kind,bytes"


def test_ledger_rejects_bad_entries():
    with pytest.raises(DomainError):
        CommLedger().record(1, "sideways", "x", "parameters", 1)
