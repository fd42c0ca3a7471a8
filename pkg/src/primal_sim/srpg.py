"""Layer-wise CT pipeline with overlapped SRAM reprogramming and power gating.

CT ``k`` starts reprogramming its LoRA shards when CT ``k-1`` starts
computing, so only the first CT's reprogramming sits on the critical path.
Prefill then walks the CTs in layer order; each decode token makes one more
pass over all CTs.  A CT that is neither computing nor reprogramming is
gated: router and RRAM macros draw nothing, SRAM and scratchpad keep their
retention power.

Latencies are in cycles; :func:`metrics_from_schedule` converts to seconds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

from .config import MACRO_KINDS, HardwareSpec, ModelSpec, WorkloadSpec
from .mapper import CtAssignment, DataflowSummary, MappingPlan, split_across_cts


class Mode(str, Enum):
    REPROGRAMMING = "REPROGRAMMING"
    COMPUTING = "COMPUTING"
    IDLE_GATED = "IDLE_GATED"


# Macro kinds drawing full active power, and those kept at retention, per mode.
ACTIVE_KINDS = {
    Mode.COMPUTING: ("rram", "sram", "spm", "router"),
    Mode.REPROGRAMMING: ("sram", "router"),
    Mode.IDLE_GATED: (),
}
RETAINED_KINDS = {
    Mode.COMPUTING: (),
    Mode.REPROGRAMMING: ("spm",),
    Mode.IDLE_GATED: ("sram", "spm"),
}


@dataclass(frozen=True)
class CtWork:
    """Cycles one CT spends per phase.

    A decode pass at context length ``n`` (keys visible to the new token)
    costs ``decode_base + decode_per_key * n`` cycles.
    """

    reprogram: int
    prefill: int
    decode_base: float
    decode_per_key: float = 0.0

    def decode(self, n_keys: int) -> int:
        return int(math.ceil(self.decode_base + self.decode_per_key * n_keys))


@dataclass(frozen=True)
class Interval:
    ct: int
    start: int
    end: int
    mode: Mode
    label: str = ""


@dataclass
class Schedule:
    n_cts: int
    intervals: list = field(default_factory=list)     # reprogram + prefill (+ decode if detailed)
    first_token: int = 0
    decode_markers: list = field(default_factory=list)
    stalls: list = field(default_factory=list)        # (ct, start, end): ready to compute but not reprogrammed
    totals: dict = field(default_factory=dict)        # (ct, mode) -> busy cycles
    detailed: bool = True
    last_end: int = 0

    @property
    def makespan(self) -> int:
        return max([self.first_token, self.last_end] + self.decode_markers[-1:])

    def add(self, iv: Interval, keep: bool = True) -> None:
        self.totals[(iv.ct, iv.mode)] = self.totals.get((iv.ct, iv.mode), 0) + iv.end - iv.start
        self.last_end = max(self.last_end, iv.end)
        if keep:
            self.intervals.append(iv)

    def busy(self, ct: int, mode: Mode) -> int:
        return self.totals.get((ct, mode), 0)

    def mode_cycles(self, ct: int) -> dict:
        out = {m: self.busy(ct, m) for m in (Mode.REPROGRAMMING, Mode.COMPUTING)}
        out[Mode.IDLE_GATED] = self.makespan - sum(out.values())
        return out

    def states(self, ct: int) -> list[tuple[int, Mode]]:
        """Mode transitions of one CT (timestamp, new mode); requires a detailed schedule."""
        marks, t = [], 0
        for iv in sorted((iv for iv in self.intervals if iv.ct == ct), key=lambda iv: iv.start):
            if iv.start > t:
                marks.append((t, Mode.IDLE_GATED))
            marks.append((iv.start, iv.mode))
            t = iv.end
        if t < self.makespan:
            marks.append((t, Mode.IDLE_GATED))
        return marks

    def to_csv(self) -> str:
        """Gantt rows: ct, mode, start, end, label (idle gaps filled in)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ct", "mode", "start", "end", "label"])
        for ct in range(self.n_cts):
            t = 0
            for iv in sorted((iv for iv in self.intervals if iv.ct == ct), key=lambda iv: iv.start):
                if iv.start > t:
                    w.writerow([ct, Mode.IDLE_GATED.value, t, iv.start, ""])
                w.writerow([ct, iv.mode.value, iv.start, iv.end, iv.label])
                t = iv.end
            if t < self.makespan:
                w.writerow([ct, Mode.IDLE_GATED.value, t, self.makespan, ""])
        return buf.getvalue()


def build_schedule(works: list[CtWork], workload: WorkloadSpec, handoff_prefill: int = 0,
                   handoff_decode: int = 0, detail_limit: int = 200_000) -> Schedule:
    """Pipeline the CTs in order over prefill and ``output_len`` decode passes.

    ``handoff_*`` is the transfer time between consecutive CTs (and from the
    last CT back to the first between decode tokens when there are several).
    Decode intervals are kept individually only if there are at most
    ``detail_limit`` of them.
    """
    n = len(works)
    if n == 0:
        raise ValueError("no CTs to schedule")
    for w in works:
        if w.reprogram < 0 or w.prefill <= 0 or w.decode_base <= 0 or w.decode_per_key < 0:
            raise ValueError(f"invalid CT work {w}")
    detailed = n * workload.output_len <= detail_limit
    s = Schedule(n, detailed=detailed)
    prev_start = 0
    prev_end = None
    for k, w in enumerate(works):
        rp_start = 0 if k == 0 else prev_start
        rp_end = rp_start + w.reprogram
        if w.reprogram:
            s.add(Interval(k, rp_start, rp_end, Mode.REPROGRAMMING, "reprogram"))
        ready = 0 if prev_end is None else prev_end + handoff_prefill
        start = max(ready, rp_end)
        if k > 0 and rp_end > ready:
            s.stalls.append((k, ready, rp_end))
        end = start + w.prefill
        s.add(Interval(k, start, end, Mode.COMPUTING, "prefill"))
        prev_start, prev_end = start, end
    s.first_token = prev_end
    t = prev_end
    back = handoff_decode if n > 1 else 0
    for j in range(workload.output_len):
        n_keys = workload.input_len + j + 1
        t += back
        for k, w in enumerate(works):
            if k:
                t += handoff_decode
            d = w.decode(n_keys)
            s.add(Interval(k, t, t + d, Mode.COMPUTING, f"decode{j}"), detailed)
            t += d
        s.decode_markers.append(t)
    return s


def serial_makespan(works: list[CtWork], workload: WorkloadSpec, handoff_prefill: int = 0,
                    handoff_decode: int = 0) -> int:
    """Every CT reprograms up front, one after another, then the pipeline runs without overlap."""
    rp = sum(w.reprogram for w in works)
    flat = [CtWork(0, w.prefill, w.decode_base, w.decode_per_key) for w in works]
    return rp + build_schedule(flat, workload, handoff_prefill, handoff_decode).makespan


# --- power -----------------------------------------------------------------------

@dataclass(frozen=True)
class PowerProfile:
    seconds: float
    energy_j: float
    average_power_w: float
    energy_by_mode: dict
    energy_by_kind: dict
    baseline_energy_j: float

    @property
    def baseline_power_w(self) -> float:
        return self.baseline_energy_j / self.seconds if self.seconds else 0.0

    @property
    def savings(self) -> float:
        return 1.0 - self.energy_j / self.baseline_energy_j if self.baseline_energy_j else 0.0


def mode_power(hw: HardwareSpec, mode: Mode) -> dict:
    """Per-kind power (W) of one whole CT in ``mode``."""
    p = hw.macro_power
    out = {}
    for kind in MACRO_KINDS:
        if kind in ACTIVE_KINDS[mode]:
            out[kind] = p.active(kind) * hw.pe_count
        elif kind in RETAINED_KINDS[mode]:
            out[kind] = p.retention(kind) * hw.pe_count
        else:
            out[kind] = 0.0
    return out


def power_profile(schedule: Schedule, hw: HardwareSpec, ct_count: int | None = None) -> PowerProfile:
    """Integrate per-CT power over modes.  Extra CTs beyond the schedule sit gated throughout."""
    n = max(ct_count or schedule.n_cts, schedule.n_cts)
    T = schedule.makespan
    by_mode = {m: 0.0 for m in Mode}
    by_kind = {k: 0.0 for k in MACRO_KINDS}
    for ct in range(n):
        cycles = schedule.mode_cycles(ct) if ct < schedule.n_cts else {Mode.IDLE_GATED: T}
        for mode, cyc in cycles.items():
            for kind, w in mode_power(hw, mode).items():
                e = w * cyc / hw.freq_hz
                by_mode[mode] += e
                by_kind[kind] += e
    seconds = T / hw.freq_hz
    energy = sum(by_kind.values())
    baseline = n * sum(mode_power(hw, Mode.COMPUTING).values()) * seconds
    return PowerProfile(seconds, energy, energy / seconds if seconds else 0.0,
                        {m.value: e for m, e in by_mode.items()}, by_kind, baseline)


def closed_form_savings(n_cts: int, hw: HardwareSpec) -> float:
    """Savings when exactly one of ``n_cts`` CTs computes at any time and the rest are gated."""
    active = sum(mode_power(hw, Mode.COMPUTING).values())
    idle = sum(mode_power(hw, Mode.IDLE_GATED).values())
    return (n_cts - 1) / n_cts * (1.0 - idle / active)


# --- latency metrics -------------------------------------------------------------

def throughput(input_len: int, output_len: int, ttft_s: float, itl_s: float) -> float:
    """Tokens per second counting prompt and generated tokens over end-to-end latency."""
    total = ttft_s + output_len * itl_s
    if total <= 0:
        raise ValueError("latency must be positive")
    return (input_len + output_len) / total


@dataclass(frozen=True)
class LatencyMetrics:
    ttft_s: float
    itl_s: float
    throughput: float


def metrics_from_schedule(schedule: Schedule, workload: WorkloadSpec, freq_hz: float) -> LatencyMetrics:
    ttft = schedule.first_token / freq_hz
    marks = [schedule.first_token] + schedule.decode_markers
    gaps = [b - a for a, b in zip(marks, marks[1:])]
    itl = (sum(gaps) / len(gaps)) / freq_hz if gaps else 0.0
    return LatencyMetrics(ttft, itl, throughput(workload.input_len, workload.output_len, ttft, itl))


# --- analytical per-layer latency --------------------------------------------------

@dataclass(frozen=True)
class PieceLatency:
    prefill: int
    decode_base: float
    decode_per_key: float


def piece_latency(plan: MappingPlan, hw: HardwareSpec, n_prefill: int) -> PieceLatency:
    """Stage-sum latency estimate for one mapped piece (attention or FFN).

    Stages run back to back; within a stage the tokens are pipelined, so a
    stage costs its fill time plus per-token serialization at its busiest
    port or unit.  Attention work scales with the number of visible keys
    spread over the KV sites.
    """
    t = hw.macro_timing
    hc = t.hop_cycles
    fa = lambda n: hw.flits(n, hw.act_bits)  # noqa: E731
    fp = lambda n: hw.flits(n, hw.psum_bits)  # noqa: E731
    geo = plan.geometry
    targets = plan.layer.lora_targets

    def proj(name: str, T: int) -> float:
        g = geo[name]
        p = g.placement
        smac = max(t.rram_smac_cycles, t.sram_smac_cycles if name in targets else 0)
        fill = hc * (g.bcast_tree.depth + max(grp.tree.depth for grp in g.groups)) + smac
        per_tok = max(fa(p.d_in), smac,
                      max(max(len(grp.tree.children(grp.root)), 1) * fp(grp.rows) for grp in g.groups))
        return fill + per_tok * T

    def attention(T: int) -> tuple[float, float]:
        """(key-independent cycles, cycles per visible key) for T queries."""
        if not all(plan.has(n) for n in ("Q", "K", "V")):
            return 0.0, 0.0
        heads = max(1, -(-plan.placement("Q").d_out // plan.layer.head_dim))
        hd = plan.layer.head_dim
        S_k, S_v = len(plan.kv_sites("K")), len(plan.kv_sites("V"))
        lanes = math.ceil(hd / hw.dmac_per_router) * t.dmac_cycles
        fixed = max(proj(n, T) for n in ("Q", "K", "V"))
        fixed += T * (fa(plan.placement("Q").d_out) + fp(plan.placement("V").d_out) * min(S_v, 4))
        per_key = T * heads * (lanes / S_k + lanes / S_v + t.softmax_cycles_per_elem / S_k)
        if plan.has("O"):
            fixed += proj("O", T)
        return fixed, per_key

    def ffn(T: int) -> float:
        if not any(plan.has(n) for n in ("FFN_GATE", "FFN_UP", "FFN_DOWN")):
            return 0.0
        first = max(proj(n, T) for n in ("FFN_GATE", "FFN_UP") if plan.has(n)) \
            if plan.has("FFN_GATE") or plan.has("FFN_UP") else 0.0
        combine = T * fa(plan.placement("FFN_UP").d_out) if plan.has("FFN_GATE") and plan.has("FFN_UP") else 0
        down = proj("FFN_DOWN", T) if plan.has("FFN_DOWN") else 0.0
        return first + combine + down

    fixed_p, per_key_p = attention(n_prefill)
    # Prefill: query t sees t+1 keys; on average (n+1)/2 of n.
    prefill = fixed_p + per_key_p * (n_prefill + 1) / 2 + ffn(n_prefill)
    fixed_d, per_key_d = attention(1)
    return PieceLatency(int(math.ceil(prefill)), fixed_d + ffn(1), per_key_d)


def reprogram_cycles(plans: list[MappingPlan], hw: HardwareSpec) -> int:
    """All PEs of a CT load their LoRA shards in parallel; the largest shard sets the time."""
    most = 0
    for plan in plans:
        for lp in plan.lora.values():
            most = max(most, lp.max_bytes)
    return math.ceil(most / hw.macro_timing.sram_prog_bytes_per_cycle)


def ct_works(assignment: CtAssignment, hw: HardwareSpec, workload: WorkloadSpec,
             overrides: dict | None = None) -> list[CtWork]:
    """Per-CT work from the pieces each CT holds, executed one after another.

    ``overrides`` maps ``id(plan)`` to a measured :class:`PieceLatency`
    (cycle mode); other pieces use :func:`piece_latency`.
    """
    overrides = overrides or {}
    cache: dict = {}
    works = []
    for pieces in assignment.cts:
        pre = base = per_key = 0.0
        for _, plan in pieces:
            key = id(plan)
            if key not in cache:
                cache[key] = overrides.get(key) or piece_latency(plan, hw, workload.input_len)
            lat = cache[key]
            pre += lat.prefill
            base += lat.decode_base
            per_key += lat.decode_per_key
        works.append(CtWork(reprogram_cycles([p for _, p in pieces], hw), int(pre), base, per_key))
    return works


def handoff_cycles(model: ModelSpec, hw: HardwareSpec, n_tokens: int) -> int:
    """Inter-CT transfer of ``n_tokens`` activation rows."""
    return hw.inter_ct_hop_cycles * hw.flits(model.hidden_dim, hw.act_bits) * n_tokens


@dataclass
class SystemRun:
    assignment: CtAssignment
    works: list
    schedule: Schedule
    power: PowerProfile
    metrics: LatencyMetrics


def run_system(model: ModelSpec, hw: HardwareSpec, workload: WorkloadSpec,
               assignment: CtAssignment | None = None, overrides: dict | None = None) -> SystemRun:
    """Split, schedule and integrate power for one full inference (analytical latencies)."""
    if assignment is None:
        assignment = split_across_cts(model, hw, DataflowSummary(1, "decode", workload.input_len))
    works = ct_works(assignment, hw, workload, overrides)
    sched = build_schedule(works, workload, handoff_cycles(model, hw, workload.input_len),
                           handoff_cycles(model, hw, 1))
    power = power_profile(sched, hw)
    return SystemRun(assignment, works, sched, power, metrics_from_schedule(sched, workload, hw.freq_hz))


# --- cycle mode --------------------------------------------------------------------

class CycleModeError(ValueError):
    pass


def measure_attention(plan: MappingPlan, model: ModelSpec, hw: HardwareSpec, workload: WorkloadSpec,
                      seed: int = 0) -> tuple[PieceLatency, list]:
    """Run one attention piece through the network simulator.

    Prefill is simulated over the whole prompt; decode at the first and last
    context lengths, with a straight line between them.  Also returns any
    invariant violations (audit findings, golden-model mismatches).
    """
    from .golden import KVCache, attention_forward, random_layer, random_tokens
    from .netsim import build_images, collect_outputs, run_program
    from .isa import compile_layer
    from .numerics import Arith

    arith = Arith("fixed", hw.frac_bits)
    problems: list = []
    w = random_layer(model, arith, seed)
    X = random_tokens(workload.input_len, model.hidden_dim, arith, seed)
    prog = compile_layer(plan, model, hw, "prefill", workload.input_len, 0, arith)
    res = run_program(prog, hw, build_images(plan, w, X, arith), arith, mesh=plan.mesh)
    problems += res.audit.violations
    out = collect_outputs(plan, res.spm, range(workload.input_len))
    if not (out == attention_forward(w, model.lora, X, model, arith)).all():
        problems.append("prefill outputs differ from the golden model")
    points = []
    for pos in sorted({workload.input_len, workload.input_len + workload.output_len - 1}):
        rows = random_tokens(pos + 1, model.hidden_dim, arith, seed + 1)
        cache = KVCache(list(rows[:pos]), list(rows[:pos]))
        prog = compile_layer(plan, model, hw, "decode", 1, pos, arith)
        r = run_program(prog, hw, build_images(plan, w, rows[pos:], arith, pos, cache), arith, mesh=plan.mesh)
        problems += r.audit.violations
        points.append((pos + 1, r.cycles))
    (n0, c0), (n1, c1) = points[0], points[-1]
    slope = (c1 - c0) / (n1 - n0) if n1 > n0 else 0.0
    return PieceLatency(res.cycles, max(c0 - slope * n0, 1.0), max(slope, 0.0)), problems


def cycle_overrides(assignment: CtAssignment, model: ModelSpec, hw: HardwareSpec,
                    workload: WorkloadSpec, max_routers: int = 64) -> tuple[dict, list]:
    """Measured latencies for every whole attention piece; FFN pieces stay analytical."""
    if hw.mesh_rows * hw.mesh_cols > max_routers:
        raise CycleModeError(f"cycle mode simulates at most {max_routers} routers per CT; "
                             f"this mesh has {hw.mesh_rows * hw.mesh_cols}")
    out, problems, seen = {}, [], {}
    for pieces in assignment.cts:
        for piece, plan in pieces:
            if piece.part != "attention" or piece.count != 1 or id(plan) in out:
                continue
            key = plan.dumps()
            if key not in seen:
                seen[key], found = measure_attention(plan, model, hw, workload)
                problems += found
            out[id(plan)] = seen[key]
    return out, problems
