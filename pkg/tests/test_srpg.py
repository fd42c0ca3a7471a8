import csv
import io

import pytest
from hypothesis import given, settings, strategies as st

from primal_sim.config import HardwareSpec, WorkloadSpec, toy_hardware
from primal_sim.mapper import DataflowSummary, layer_spec, map_layer
from primal_sim.srpg import (CtWork, Mode, build_schedule, closed_form_savings, measure_attention,
                             metrics_from_schedule, piece_latency, power_profile, run_system, serial_makespan,
                             throughput)

from oracles import longest_path, stepped_oracle

ONE = WorkloadSpec(4, 1)


def test_single_ct_ttft():
    w = CtWork(reprogram=120, prefill=900, decode_base=50)
    s = build_schedule([w], ONE)
    assert s.first_token == 120 + 900


def test_two_ct_full_overlap():
    works = [CtWork(100, 500, 10), CtWork(400, 500, 10)]
    s = build_schedule(works, ONE)
    assert s.first_token == 100 + 500 + 500
    assert not s.stalls


def test_three_ct_stalls_match_oracles():
    works = [CtWork(50, 100, 10), CtWork(300, 100, 10), CtWork(400, 80, 10)]
    s = build_schedule(works, ONE)
    ft, stall = stepped_oracle(works)
    assert s.first_token == ft == longest_path(works)
    assert s.stalls
    assert sum(e - b for _, b, e in s.stalls) == stall


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(1, 60)), min_size=1, max_size=4),
       st.integers(0, 5))
def test_first_token_matches_stepped_oracle(raw, handoff):
    works = [CtWork(r, p, 1) for r, p in raw]
    s = build_schedule(works, ONE, handoff_prefill=handoff)
    ft, stall = stepped_oracle(works, handoff)
    assert s.first_token == ft == longest_path(works, handoff)
    assert sum(e - b for _, b, e in s.stalls) == stall


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10_000), st.integers(0, 10_000), st.integers(1, 10_000), st.integers(1, 10_000),
       st.integers(0, 100))
def test_two_ct_beats_serial(r2, r1, p1, p2, h):
    works = [CtWork(r1, p1, 5, 0.1), CtWork(r2, p2, 5, 0.1)]
    wl = WorkloadSpec(8, 3)
    assert build_schedule(works, wl, h, h).makespan < serial_makespan(works, wl, h, h)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=2, max_size=4), st.data())
def test_ttft_insensitive_to_hidden_reprogramming(prefills, data):
    base = [CtWork(37 if k == 0 else 0, p, 1) for k, p in enumerate(prefills)]
    varied = [base[0]] + [CtWork(data.draw(st.integers(0, prefills[k - 1])), prefills[k], 1)
                          for k in range(1, len(prefills))]
    assert build_schedule(varied, ONE).first_token == build_schedule(base, ONE).first_token


def test_intervals_do_not_overlap_per_ct():
    works = [CtWork(30, 100, 20, 0.5), CtWork(200, 90, 25, 0.5), CtWork(10, 110, 15, 0.5)]
    s = build_schedule(works, WorkloadSpec(16, 4), 7, 3)
    for ct in range(3):
        ivs = sorted((iv for iv in s.intervals if iv.ct == ct), key=lambda iv: iv.start)
        for a, b in zip(ivs, ivs[1:]):
            assert a.end <= b.start
        # no CT computes while it is still reprogramming
        rp = [iv for iv in ivs if iv.mode == Mode.REPROGRAMMING]
        comp = [iv for iv in ivs if iv.mode == Mode.COMPUTING]
        assert all(c.start >= r.end for r in rp for c in comp)


def test_single_ct_always_computing_saves_nothing():
    hw = HardwareSpec()
    s = build_schedule([CtWork(0, 1000, 100)], WorkloadSpec(4, 5))
    assert power_profile(s, hw).savings == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_savings_closed_form(n):
    hw = HardwareSpec()
    works = [CtWork(0, 100 + 10 * k, 40 + k) for k in range(n)]
    s = build_schedule(works, WorkloadSpec(4, 6))
    p = hw.macro_power
    active = sum(p.active(k) for k in ("rram", "sram", "spm", "router"))
    idle = p.retention("sram") + p.retention("spm")
    assert power_profile(s, hw).savings == pytest.approx((n - 1) / n * (1 - idle / active), rel=1e-9)
    assert closed_form_savings(n, hw) == pytest.approx((n - 1) / n * (1 - idle / active), rel=1e-12)


def test_gated_interval_energy_is_retention_only():
    hw = HardwareSpec()
    s = build_schedule([CtWork(0, 1000, 1000), CtWork(0, 1000, 1000)], WorkloadSpec(1, 1))
    prof = power_profile(s, hw)
    gated_cycles = sum(s.mode_cycles(ct)[Mode.IDLE_GATED] for ct in range(2))
    p = hw.macro_power
    expected = gated_cycles / hw.freq_hz * hw.pe_count * (p.retention("sram") + p.retention("spm"))
    assert prof.energy_by_mode["IDLE_GATED"] == pytest.approx(expected, rel=1e-12)


def test_power_monotone_in_ct_count():
    hw = HardwareSpec()
    s = build_schedule([CtWork(5, 100, 10), CtWork(5, 100, 10)], WorkloadSpec(4, 2))
    powers = [power_profile(s, hw, n).average_power_w for n in range(2, 9)]
    assert all(a <= b for a, b in zip(powers, powers[1:]))


def test_throughput_examples():
    assert throughput(2048, 2048, 2.533, 0.012518) == pytest.approx(145.40, rel=1e-3)
    assert throughput(1024, 1024, 0.370, 0.001708) == pytest.approx(966.32, rel=1e-3)
    assert throughput(100, 1, 0.5, 0.25) == pytest.approx(101 / 0.75)
    with pytest.raises(ValueError):
        throughput(1, 1, 0.0, 0.0)


def test_metrics_from_schedule():
    works = [CtWork(0, 1000, 100), CtWork(0, 500, 100)]
    s = build_schedule(works, WorkloadSpec(10, 3))
    m = metrics_from_schedule(s, WorkloadSpec(10, 3), 1e3)
    assert m.ttft_s == pytest.approx(1.5)
    assert m.itl_s == pytest.approx(0.2)
    assert m.throughput == pytest.approx(13 / (1.5 + 3 * 0.2))


def test_gantt_csv_covers_makespan():
    works = [CtWork(10, 100, 20), CtWork(50, 100, 20)]
    s = build_schedule(works, WorkloadSpec(4, 2))
    rows = list(csv.DictReader(io.StringIO(s.to_csv())))
    for ct in ("0", "1"):
        mine = [r for r in rows if r["ct"] == ct]
        assert int(mine[0]["start"]) == 0 and int(mine[-1]["end"]) == s.makespan
        for a, b in zip(mine, mine[1:]):
            assert a["end"] == b["start"]
    assert {r["mode"] for r in rows} == {"REPROGRAMMING", "COMPUTING", "IDLE_GATED"}


def test_invalid_work_rejected():
    with pytest.raises(ValueError):
        build_schedule([CtWork(0, 0, 1)], ONE)
    with pytest.raises(ValueError):
        build_schedule([], ONE)


def test_analytical_model_tracks_netsim(toy_hw, toy_model):
    wl = WorkloadSpec(4, 3)
    plan = map_layer(layer_spec(toy_model, part="attention"), toy_hw, DataflowSummary(1, "decode", 4))
    measured, problems = measure_attention(plan, toy_model, toy_hw, wl)
    assert problems == []
    est = piece_latency(plan, toy_hw, wl.input_len)
    assert 0.5 <= est.prefill / measured.prefill <= 2.0
    assert 0.5 <= (est.decode_base + 5 * est.decode_per_key) / (measured.decode_base + 5 * measured.decode_per_key) <= 2.0


def test_run_system_toy(toy_model):
    hw = toy_hardware()
    run = run_system(toy_model, hw, WorkloadSpec(4, 2))
    assert run.assignment.n_cts >= 1
    assert run.metrics.ttft_s > 0 and run.metrics.itl_s > 0
    assert 0 < run.power.average_power_w <= run.power.baseline_power_w
