import csv
import io
import json

import pytest

from primal_sim.config import HardwareSpec, WorkloadSpec, preset, with_lora
from primal_sim.metrics import (CSV_COLUMNS, TABLE_ROWS, ReportError, SimReport, check_tables, efficiency,
                                emit_report, load_reports, report_from_run)
from primal_sim.srpg import run_system


def sample(**kw):
    base = dict(model="toy", lora_targets=("Q", "V"), rank=2, input_len=4, output_len=2, ttft_s=0.5,
                itl_ms=2.0, throughput_tps=10.0, avg_power_w=2.0, efficiency_tpj=5.0, n_cts=1,
                energy_j={"rram": 1.0, "sram": 1.0, "spm": 1.0, "router": 1.0},
                area_mm2={"rram": 1.0, "sram": 0.5, "spm": 0.25, "router": 0.25})
    base.update(kw)
    return SimReport(**base)


def test_efficiency_examples():
    assert efficiency(145.40, 14.76) == pytest.approx(9.85, abs=0.005)
    assert efficiency(966.32, 2.23) == pytest.approx(433.33, rel=5e-3)
    with pytest.raises(ReportError):
        efficiency(10.0, 0.0)


def test_json_round_trip():
    r = sample()
    back = load_reports(emit_report(r, "json"))
    assert back == [r]
    many = [r, sample(model="other")]
    assert load_reports(emit_report(many, "json")) == many


def test_csv_header_golden():
    text = emit_report([sample()], "csv")
    header = text.splitlines()[0]
    assert header == ("model,lora_targets,rank,input_len,output_len,ttft_s,itl_ms,throughput_tps,avg_power_w,"
                      "efficiency_tpj,n_cts,energy_rram_j,energy_sram_j,energy_spm_j,energy_router_j,area_mm2")
    row = next(csv.DictReader(io.StringIO(text)))
    assert row["lora_targets"] == "Q+V" and float(row["area_mm2"]) == 2.0
    assert tuple(row) == CSV_COLUMNS


def test_table_format():
    text = emit_report([sample(), sample(lora_targets=(), rank=0)], "table")
    lines = text.splitlines()
    assert lines[0].startswith("Model") and set(lines[1]) == {"-"}
    assert len(lines) == 4 and "Q,V" in lines[2]


def test_unknown_format():
    with pytest.raises(ReportError):
        emit_report(sample(), "xml")


def test_violations():
    assert sample().violations() == []
    assert sample(efficiency_tpj=4.0).violations()
    assert sample(ttft_s=-1.0).violations()
    assert sample(energy_j={"rram": -1.0, "sram": 2.0}).violations()


def test_energy_percentages_sum_to_100():
    assert sum(sample().energy_pct.values()) == pytest.approx(100.0)


def test_report_from_system_run():
    hw = HardwareSpec()
    model = with_lora(preset("llama3.2-1b"), 8, ("Q",))
    wl = WorkloadSpec(1024, 1024)
    r = report_from_run(model, hw, wl, run_system(model, hw, wl))
    assert r.violations() == []
    assert r.efficiency_tpj == pytest.approx(r.throughput_tps / r.avg_power_w)
    assert r.n_cts > 1 and r.lora_targets == ("Q",)
    json.loads(emit_report(r, "json"))


def test_table_fixtures_shape():
    assert len(TABLE_ROWS) == 12
    keys = {(r.model, r.lora_targets, r.input_len) for r in TABLE_ROWS}
    assert len(keys) == 12
    assert all(r.input_len == r.output_len for r in TABLE_ROWS)


def test_check_tables_all_pass():
    checks = check_tables()
    assert len(checks) == 24
    assert all(c.ok for c in checks), [(c.row, c.check, c.rel_err) for c in checks if not c.ok]
