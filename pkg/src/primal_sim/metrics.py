"""Report rows, serialization and the published-table fixtures.

CSV columns (fixed order)::

    model,lora_targets,rank,input_len,output_len,ttft_s,itl_ms,throughput_tps,
    avg_power_w,efficiency_tpj,n_cts,energy_rram_j,energy_sram_j,energy_spm_j,
    energy_router_j,area_mm2

``lora_targets`` is joined with ``+`` (e.g. ``Q+V``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .config import MACRO_KINDS, HardwareSpec, ModelSpec, WorkloadSpec
from .srpg import SystemRun, throughput

CSV_COLUMNS = (
    "model", "lora_targets", "rank", "input_len", "output_len", "ttft_s", "itl_ms", "throughput_tps",
    "avg_power_w", "efficiency_tpj", "n_cts", "energy_rram_j", "energy_sram_j", "energy_spm_j",
    "energy_router_j", "area_mm2",
)
FORMATS = ("json", "csv", "table")


class ReportError(ValueError):
    pass


def efficiency(throughput_tps: float, power_w: float) -> float:
    """Tokens per joule."""
    if power_w <= 0:
        raise ReportError(f"power must be positive, got {power_w}")
    return throughput_tps / power_w


@dataclass
class SimReport:
    model: str
    lora_targets: tuple
    rank: int
    input_len: int
    output_len: int
    ttft_s: float
    itl_ms: float
    throughput_tps: float
    avg_power_w: float
    efficiency_tpj: float
    n_cts: int
    energy_j: dict = field(default_factory=dict)   # per macro kind
    area_mm2: dict = field(default_factory=dict)   # per macro kind, whole system

    @property
    def energy_pct(self) -> dict:
        total = sum(self.energy_j.values())
        return {k: 100.0 * v / total if total else 0.0 for k, v in self.energy_j.items()}

    def violations(self) -> list[str]:
        out = []
        for name in ("ttft_s", "itl_ms", "throughput_tps", "avg_power_w", "efficiency_tpj"):
            if getattr(self, name) < 0:
                out.append(f"{name} negative")
        if any(v < 0 for v in self.energy_j.values()):
            out.append("negative energy")
        if self.avg_power_w > 0 and abs(self.efficiency_tpj - self.throughput_tps / self.avg_power_w) \
                > 1e-9 * abs(self.efficiency_tpj):
            out.append("efficiency != throughput / power")
        if self.energy_j and abs(sum(self.energy_pct.values()) - 100.0) > 0.1:
            out.append("energy breakdown does not sum to 100%")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        d = dict(d)
        d["lora_targets"] = tuple(d["lora_targets"])
        return cls(**d)

    def csv_row(self) -> list:
        return [self.model, "+".join(self.lora_targets), self.rank, self.input_len, self.output_len,
                self.ttft_s, self.itl_ms, self.throughput_tps, self.avg_power_w, self.efficiency_tpj,
                self.n_cts] + [self.energy_j.get(k, 0.0) for k in MACRO_KINDS] \
            + [sum(self.area_mm2.values())]


def report_from_run(model: ModelSpec, hw: HardwareSpec, workload: WorkloadSpec, run: SystemRun) -> SimReport:
    m = run.metrics
    p = run.power.average_power_w
    n = run.assignment.n_cts
    area = {k: hw.macro_area.of(k) * hw.pe_count * n for k in MACRO_KINDS}
    return SimReport(model.name, tuple(model.lora.targets) if model.lora.rank else (), model.lora.rank,
                     workload.input_len, workload.output_len, m.ttft_s, m.itl_s * 1e3, m.throughput, p,
                     efficiency(m.throughput, p), n, dict(run.power.energy_by_kind), area)


def emit_report(reports, fmt: str = "json") -> str:
    """Serialize one report or a list of them."""
    rows = [reports] if isinstance(reports, SimReport) else list(reports)
    if fmt == "json":
        doc = [r.to_dict() for r in rows]
        return json.dumps(doc[0] if isinstance(reports, SimReport) else doc, indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())
        return buf.getvalue()
    if fmt == "table":
        head = (f"{'Model':<14} {'LoRA':<6} {'Context':>10} {'Thru(tok/s)':>12} {'Power(W)':>9} "
                f"{'Eff(tok/J)':>11} {'TTFT(s)':>8} {'ITL(ms)':>8} {'CTs':>5}")
        lines = [head, "-" * len(head)]
        for r in rows:
            ctx = f"{r.input_len}/{r.output_len}"
            lines.append(f"{r.model:<14} {','.join(r.lora_targets) or '-':<6} {ctx:>10} {r.throughput_tps:>12.2f} "
                         f"{r.avg_power_w:>9.2f} {r.efficiency_tpj:>11.2f} {r.ttft_s:>8.3f} {r.itl_ms:>8.3f} "
                         f"{r.n_cts:>5}")
        return "\n".join(lines) + "\n"
    raise ReportError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def load_reports(text: str) -> list[SimReport]:
    doc = json.loads(text)
    return [SimReport.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]


# --- published tables ---------------------------------------------------------------

@dataclass(frozen=True)
class TableRow:
    model: str
    lora_targets: tuple
    input_len: int
    output_len: int
    throughput_tps: float
    power_w: float
    efficiency_tpj: float
    ttft_s: float
    itl_ms: float


def _rows() -> tuple:
    data = [
        # model, targets, ctx, throughput, power, efficiency, ttft, itl(ms)
        ("llama3.2-1b", ("Q",), 1024, 966.32, 2.23, 433.33, 0.370, 1.708),
        ("llama3.2-1b", ("Q",), 2048, 565.46, 2.23, 253.57, 1.192, 2.955),
        ("llama3.2-1b", ("Q", "V"), 1024, 963.47, 2.23, 432.04, 0.373, 1.711),
        ("llama3.2-1b", ("Q", "V"), 2048, 564.48, 2.23, 253.13, 1.199, 2.958),
        ("llama3-8b", ("Q",), 1024, 308.76, 9.58, 32.23, 0.710, 5.726),
        ("llama3-8b", ("Q",), 2048, 221.37, 9.58, 23.11, 2.012, 8.052),
        ("llama3-8b", ("Q", "V"), 1024, 307.89, 9.58, 32.12, 0.782, 5.738),
        ("llama3-8b", ("Q", "V"), 2048, 220.77, 9.58, 23.04, 2.037, 8.065),
        ("llama2-13b", ("Q",), 1024, 191.68, 14.76, 12.99, 0.962, 9.494),
        ("llama2-13b", ("Q",), 2048, 145.81, 14.76, 9.88, 2.494, 12.499),
        ("llama2-13b", ("Q", "V"), 1024, 190.98, 14.76, 12.94, 0.982, 9.513),
        ("llama2-13b", ("Q", "V"), 2048, 145.40, 14.76, 9.85, 2.533, 12.518),
    ]
    return tuple(TableRow(m, t, c, c, tp, pw, ef, tt, itl) for m, t, c, tp, pw, ef, tt, itl in data)


TABLE_ROWS = _rows()


@dataclass(frozen=True)
class TableCheck:
    row: TableRow
    check: str
    value: float
    expected: float
    tolerance: float

    @property
    def rel_err(self) -> float:
        return abs(self.value - self.expected) / abs(self.expected)

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tolerance


def check_tables(rows=TABLE_ROWS, eff_tol: float = 0.005, tp_tol: float = 0.01) -> list[TableCheck]:
    """Efficiency from throughput/power, and throughput from TTFT/ITL, against the tables."""
    out = []
    for r in rows:
        out.append(TableCheck(r, "efficiency", efficiency(r.throughput_tps, r.power_w), r.efficiency_tpj, eff_tol))
        tp = throughput(r.input_len, r.output_len, r.ttft_s, r.itl_ms / 1e3)
        out.append(TableCheck(r, "throughput", tp, r.throughput_tps, tp_tol))
    return out
