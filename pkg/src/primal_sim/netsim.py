"""Cycle-level execution of IPCN programs on the router mesh.

The network is flit-level: every router has one input FIFO per neighbour plus
a local injection FIFO, each ``fifo_depth`` flits deep, and a flit only moves
onto a link when the downstream FIFO has a free slot (credit flow control).
Each output (four links plus local ejection) grants one flit per cycle,
oldest message first.  A link is occupied for ``hop_cycles`` per flit.

Instructions wait for their dependencies, then compete for a per-router
resource (injection port, RRAM macro, SRAM macro, DMAC unit, softmax unit,
scratchpad port or control) in program order; each repetition re-arbitrates.
With an idle network a unicast of ``L`` flits over ``H`` hops completes
``2 + hop_cycles * (H + L - 1)`` cycles after issue.

Data is carried functionally: payloads are read from the source scratchpad at
issue and written (or accumulated, for REDUCE_ADD) at the destination when the
last flit is ejected, so a program's outputs can be compared with the golden
model.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .collectives import unicast_route
from .config import HardwareSpec, MACRO_KINDS, ModelSpec
from .golden import KVCache, LayerWeights
from .isa import Instruction, Op, Program, compile_layer
from .mapper import DataflowSummary, MappingPlan, layer_spec, map_layer
from .numerics import Arith

Coord = tuple[int, int]


class SimError(RuntimeError):
    pass


class DeadlockError(SimError):
    def __init__(self, cycle: int, report: str):
        super().__init__(f"no progress at cycle {cycle}: {report}")
        self.cycle = cycle
        self.report = report


_RESOURCE = {
    Op.SEND: "inject", Op.BCAST_FWD: "inject", Op.REDUCE_ADD: "inject",
    Op.PE_SMAC_RRAM: "rram", Op.PE_SMAC_SRAM: "sram", Op.SRAM_PROG: "sram",
    Op.DMAC: "dmac", Op.SOFTMAX: "softmax", Op.SPM_RD: "spm", Op.SPM_WR: "spm",
    Op.GATE: "ctrl", Op.BARRIER: "ctrl",
}

# Macro instances kept busy by each compute opcode (energy accounting).
_BUSY_KINDS = {
    Op.PE_SMAC_RRAM: ("rram",), Op.PE_SMAC_SRAM: ("sram",), Op.SRAM_PROG: ("sram",),
    Op.DMAC: ("router", "spm"), Op.SOFTMAX: ("router", "spm"),
    Op.SPM_RD: ("spm",), Op.SPM_WR: ("spm",), Op.GATE: (), Op.BARRIER: (),
}


@dataclass
class SimImages:
    """Memory contents before execution.

    ``rram`` / ``sram`` map router -> {(matrix, i, j): tile}; SRAM tiles are
    ``(B_i, A_j)`` pairs.  ``host_sram`` is what SRAM_PROG loads from.
    """

    rram: dict = field(default_factory=dict)
    sram: dict = field(default_factory=dict)
    host_sram: dict = field(default_factory=dict)
    spm: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FaultSpec:
    """Drop one flit at injection: ``(tag, rep, flit index)``."""

    tag: int
    rep: int = 0
    flit: int = 0


@dataclass
class EnergyLedger:
    """Per macro instance cycle counts; retention is whatever is left."""

    cycles: int
    freq_hz: float
    routers: tuple
    active: Counter = field(default_factory=Counter)
    gated: Counter = field(default_factory=Counter)

    def retention(self, router: Coord, kind: str) -> int:
        return self.cycles - self.active[(router, kind)] - self.gated[(router, kind)]

    def energy_by_kind(self, power) -> dict[str, float]:
        out = {}
        for kind in MACRO_KINDS:
            cyc_a = sum(self.active[(r, kind)] for r in self.routers)
            cyc_r = sum(self.retention(r, kind) for r in self.routers)
            out[kind] = (cyc_a * power.active(kind) + cyc_r * power.retention(kind)) / self.freq_hz
        return out

    def energy_j(self, power) -> float:
        return sum(self.energy_by_kind(power).values())

    def average_power_w(self, power) -> float:
        return self.energy_j(power) / (self.cycles / self.freq_hz) if self.cycles else 0.0


@dataclass
class AuditReport:
    violations: list
    injected_by_phase: dict
    delivered_by_phase: dict
    max_fifo: int
    reduce_expected: dict
    reduce_seen: dict
    dmac_qk_ops: int
    dmac_pv_ops: int

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class SimResult:
    cycles: int
    completed: bool
    spm: dict
    ledger: EnergyLedger
    audit: AuditReport
    finish: dict  # tag -> completion cycle
    trace: list

    def dump_trace(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")


@dataclass
class _Msg:
    mid: int
    idx: int       # instruction index
    rep: int
    payload: object
    nflits: int
    accumulate: bool
    out: str
    routes: dict   # node -> outputs (neighbour coords; the node itself = eject)
    dests: tuple
    phase: str
    src: Coord
    injected: int = 0
    ejected: Counter = field(default_factory=Counter)


def op_duration(ins: Instruction, hw: HardwareSpec) -> int:
    """Cycles a compute/control instruction occupies its unit (one repetition)."""
    a = ins.params
    if ins.op == Op.PE_SMAC_RRAM:
        return hw.macro_timing.rram_smac_cycles
    if ins.op == Op.PE_SMAC_SRAM:
        return hw.macro_timing.sram_smac_cycles
    if ins.op == Op.DMAC:
        return max(1, len(a["keys"]) * a["heads"] * math.ceil(a["head_dim"] / hw.dmac_per_router)
                   * hw.macro_timing.dmac_cycles)
    if ins.op == Op.SOFTMAX:
        n = sum(1 for _, keys in a["sources"] for k in keys if k <= a["query"])
        return max(1, n * a["heads"] * hw.macro_timing.softmax_cycles_per_elem)
    if ins.op in (Op.SPM_RD, Op.SPM_WR):
        return max(1, ins.flits)
    if ins.op == Op.SRAM_PROG:
        return max(1, math.ceil(a["bytes"] / hw.macro_timing.sram_prog_bytes_per_cycle))
    return 1


class Simulator:
    def __init__(self, program: Program, hw: HardwareSpec, images: SimImages,
                 arith: Arith | None = None, mesh: tuple | None = None, trace: bool = False,
                 fault: FaultSpec | None = None, stall_limit: int = 2000):
        self.prog = program
        self.hw = hw
        self.arith = arith or Arith("fixed", hw.frac_bits)
        self.mesh = mesh or (hw.mesh_cols, hw.mesh_rows)
        self.images = images
        self.spm = {r: dict(bufs) for r, bufs in images.spm.items()}
        self.sram = {r: dict(t) for r, t in images.sram.items()}
        self.tracing = trace
        self.trace: list = []
        self.fault = fault
        self.stall_limit = stall_limit
        self.routers = tuple((x, y) for y in range(self.mesh[1]) for x in range(self.mesh[0]))

    # -- scratchpad helpers ---------------------------------------------
    def _read(self, router: Coord, name: str):
        try:
            return self.spm[router][name]
        except KeyError:
            raise SimError(f"buffer {name!r} missing at router {router}") from None

    def _write(self, router: Coord, name: str, value, accumulate: bool) -> None:
        bufs = self.spm.setdefault(router, {})
        if accumulate and name in bufs:
            bufs[name] = bufs[name] + value
        else:
            bufs[name] = np.array(value, copy=True)

    def _concat(self, router: Coord, names) -> np.ndarray:
        return np.concatenate([np.asarray(self._read(router, n)) for n in names])

    # -- functional effects of compute ops -------------------------------
    def _execute(self, ins: Instruction, rep: int) -> None:
        ar = self.arith
        a = ins.params
        r = ins.router
        if ins.op == Op.PE_SMAC_RRAM:
            W = self.images.rram[r][(a["matrix"], *a["tile"])]
            x = np.asarray(self._read(r, ins.buf(ins.src, rep)))[a["lo"]:a["hi"]]
            self._write(r, ins.buf(ins.out, rep), ar.lshift(W.dot(x), a["shl"]), True)
        elif ins.op == Op.PE_SMAC_SRAM:
            key = (a["matrix"], *a["tile"])
            if key not in self.sram.get(r, {}):
                raise SimError(f"SRAM at {r} holds no LoRA shard {key}")
            B, A = self.sram[r][key]
            x = np.asarray(self._read(r, ins.buf(ins.src, rep)))[a["lo"]:a["hi"]]
            self._write(r, ins.buf(ins.out, rep), B.dot(A.dot(x)) * ar.scale_int(a["scale"]), True)
        elif ins.op == Op.SRAM_PROG:
            key = (a["matrix"], *a["tile"])
            self.sram.setdefault(r, {})[key] = self.images.host_sram[r][key]
        elif ins.op == Op.SPM_WR:
            val = self._read(r, ins.buf(ins.src, rep))
            self._write(r, ins.buf(ins.out, rep), ar.shift(val, a.get("shift", 0)), False)
        elif ins.op == Op.SPM_RD:
            self._write(r, ins.buf(ins.out, rep), self._read(r, ins.buf(ins.src, rep)), False)
        elif ins.op == Op.DMAC:
            self._dmac(ins, a, r)
        elif ins.op == Op.SOFTMAX:
            self._softmax(ins, a, r)
        elif ins.op == Op.GATE:
            for kind in a.get("kinds", []):
                key = (r, kind)
                if a.get("on", True):
                    if key in self._gated_since:
                        self.ledger.gated[key] += self.now - self._gated_since.pop(key)
                elif key not in self._gated_since:
                    self._gated_since[key] = self.now + 1

    def _dmac(self, ins, a, r) -> None:
        heads, hd = a["heads"], a["head_dim"]
        dtype = object if self.arith.fixed else float
        if a["mode"] == "qk":
            q = self._concat(r, a["q"])
            out = []
            for key in a["keys"]:
                k = self._concat(r, [n.replace("{key}", str(key)) for n in a["k"]])
                out += [k[h * hd:(h + 1) * hd].dot(q[h * hd:(h + 1) * hd]) for h in range(heads)]
            self.dmac_qk += len(a["keys"]) * heads
            self._write(r, ins.out, np.array(out, dtype=dtype), False)
        else:
            p = np.asarray(self._read(r, a["p"]))
            acc = self.arith.zeros(heads * hd)
            for kk, key in enumerate(a["keys"]):
                v = self._concat(r, [n.replace("{key}", str(key)) for n in a["v"]])
                for h in range(heads):
                    sl = slice(h * hd, (h + 1) * hd)
                    acc[sl] = acc[sl] + p[kk * heads + h] * v[sl]
            self.dmac_pv += len(a["keys"]) * heads
            self._write(r, ins.out, acc, False)

    def _softmax(self, ins, a, r) -> None:
        heads, hd, t = a["heads"], a["head_dim"], a["query"]
        raw = {}
        for buf, keys in a["sources"]:
            vals = np.asarray(self._read(r, buf))
            for kk, key in enumerate(keys):
                if key <= t:
                    raw[key] = vals[kk * heads:(kk + 1) * heads]
        order = sorted(raw)
        dtype = object if self.arith.fixed else float
        probs = {}
        for h in range(heads):
            logits = self.arith.scaled_scores(np.array([raw[k][h] for k in order], dtype=dtype), hd)
            for k, pv in zip(order, self.arith.softmax(logits)):
                probs[(k, h)] = pv
        for buf, keys in a["outputs"]:
            vals = [probs[(k, h)] for k in keys for h in range(heads)]
            self._write(r, buf, np.array(vals, dtype=dtype), False)

    # -- messages ---------------------------------------------------------
    def _message(self, idx: int, ins: Instruction, rep: int) -> _Msg:
        payload = np.array(self._read(ins.router, ins.buf(ins.src, rep)), copy=True)
        if ins.op == Op.BCAST_FWD:
            routes: dict = {}
            for parent, child in ins.tree:
                routes.setdefault(parent, []).append(child)
                routes.setdefault(child, []).append(child)
            dests = tuple(c for _, c in ins.tree)
        else:
            path = [ins.router] + unicast_route(ins.router, ins.dst)
            routes = {path[k]: [path[k + 1]] for k in range(len(path) - 1)}
            routes[ins.dst] = [ins.dst]
            dests = (ins.dst,)
        self._mid += 1
        return _Msg(self._mid, idx, rep, payload, ins.flits, ins.op == Op.REDUCE_ADD,
                    ins.buf(ins.out, rep), routes, dests, ins.phase, ins.router)

    # -- main loop ----------------------------------------------------------
    def run(self) -> SimResult:
        hw = self.hw
        instrs = self.prog.instructions
        n = len(instrs)
        pos = {ins.tag: k for k, ins in enumerate(instrs)}
        dependents: dict = {k: [] for k in range(n)}
        waiting = [0] * n
        for k, ins in enumerate(instrs):
            for d in ins.deps:
                if d not in pos:
                    raise SimError(f"instruction {ins.tag} depends on unknown tag {d}")
                dependents[pos[d]].append(k)
                waiting[k] += 1
        next_rep = [0] * n
        done_reps = [0] * n
        self.finish: dict = {}
        self.ledger = EnergyLedger(0, hw.freq_hz, self.routers)
        self._gated_since: dict = {}
        self._mid = 0
        self.dmac_qk = self.dmac_pv = 0
        active: dict = {(r, k): set() for r in self.routers for k in MACRO_KINDS}

        pending: dict = {}  # resource -> heap of instruction indices
        res_free: dict = {}  # resource -> first free cycle

        def make_ready(k: int) -> None:
            ins = instrs[k]
            heapq.heappush(pending.setdefault((ins.router, _RESOURCE[ins.op]), []), k)

        for k in range(n):
            if waiting[k] == 0:
                make_ready(k)

        events: list = []  # (time, seq, kind, payload)
        seq = 0
        depth = hw.fifo_depth
        hop = hw.macro_timing.hop_cycles
        fifos: dict = {}          # (router, from) -> deque of (mid, flit)
        reserved: Counter = Counter()
        head_todo: dict = {}      # fifo key -> remaining outputs of its head flit
        nonempty: set = set()
        arrivals: list = []       # heap of (time, seq, router, from, flit)
        link_free: dict = {}
        injecting: dict = {}      # router -> _Msg
        msgs: dict = {}
        max_fifo = 0
        injected_by_phase: Counter = Counter()
        delivered_by_phase: Counter = Counter()
        reduce_seen: Counter = Counter()
        violations: list = []
        remaining = sum(ins.repeat for ins in instrs)
        now = 0
        last_progress = 0

        def complete_rep(k: int, t: int) -> None:
            nonlocal remaining
            done_reps[k] += 1
            remaining -= 1
            ins = instrs[k]
            if self.tracing:
                self.trace.append({"cycle": t, "event": "done", "tag": ins.tag, "op": ins.op.value,
                                   "rep": done_reps[k] - 1, "router": list(ins.router)})
            if done_reps[k] == ins.repeat:
                self.finish[ins.tag] = t
                for j in dependents[k]:
                    waiting[j] -= 1
                    if waiting[j] == 0:
                        make_ready(j)

        while remaining:
            self.now = now
            progressed = False
            # 1. completions due now
            while events and events[0][0] <= now:
                _, _, kind, data = heapq.heappop(events)
                if kind == "op":
                    k, rep = data
                    self._execute(instrs[k], rep)
                    complete_rep(k, now)
                else:
                    m = data
                    for d in m.dests:
                        self._write(d, m.out, m.payload, m.accumulate)
                        if m.accumulate:
                            reduce_seen[(d, m.out)] += 1
                    del msgs[m.mid]
                    complete_rep(m.idx, now)
                progressed = True
            # 2. dispatch, oldest instruction first on every free resource
            for res, heap in pending.items():
                if not heap or res_free.get(res, 0) > now:
                    continue
                k = heap[0]
                ins = instrs[k]
                rep = next_rep[k]
                next_rep[k] += 1
                if next_rep[k] == ins.repeat:
                    heapq.heappop(heap)
                progressed = True
                if self.tracing:
                    self.trace.append({"cycle": now, "event": "issue", "tag": ins.tag, "op": ins.op.value,
                                       "rep": rep, "router": list(ins.router)})
                if res[1] == "inject":
                    m = self._message(k, ins, rep)
                    msgs[m.mid] = m
                    injecting[ins.router] = m
                    res_free[res] = math.inf
                    injected_by_phase[m.phase] += m.nflits * len(m.dests)
                else:
                    dur = op_duration(ins, hw)
                    res_free[res] = now + dur
                    for kind in _BUSY_KINDS[ins.op]:
                        active[(ins.router, kind)].update(range(now, now + dur))
                    heapq.heappush(events, (now + dur, seq, "op", (k, rep)))
                    seq += 1
            # 3. link traversal and ejection
            while arrivals and arrivals[0][0] <= now:
                _, _, r, frm, flit = heapq.heappop(arrivals)
                key = (r, frm)
                reserved[key] -= 1
                fifos.setdefault(key, deque()).append(flit)
                nonempty.add(key)
                max_fifo = max(max_fifo, len(fifos[key]) + reserved[key])
            requests: dict = {}
            for key in nonempty:
                mid, fi = fifos[key][0]
                todo = head_todo.get(key)
                if todo is None:
                    todo = head_todo[key] = set(msgs[mid].routes[key[0]]) if mid in msgs else set()
                for out in todo:
                    requests.setdefault((key[0], out), []).append((mid, fi, key))
            for (r, out), reqs in requests.items():
                mid, fi, key = min(reqs)
                m = msgs[mid]
                if out == r:
                    m.ejected[r] += 1
                    delivered_by_phase[m.phase] += 1
                    active[(r, "router")].add(now)
                    active[(r, "spm")].add(now)
                    if self.tracing:
                        self.trace.append({"cycle": now, "event": "eject", "msg": mid, "flit": fi,
                                           "router": list(r)})
                    if all(m.ejected[d] == m.nflits for d in m.dests):
                        heapq.heappush(events, (now + 1, seq, "msg", m))
                        seq += 1
                else:
                    down = (out, r)
                    if link_free.get((r, out), 0) > now:
                        continue
                    if len(fifos.get(down, ())) + reserved[down] >= depth:
                        continue
                    reserved[down] += 1
                    link_free[(r, out)] = now + hop
                    heapq.heappush(arrivals, (now + hop, seq, out, r, (mid, fi)))
                    seq += 1
                    active[(r, "router")].add(now)
                head_todo[key].discard(out)
                progressed = True
            for key in list(nonempty):
                if not head_todo.get(key, True):
                    fifos[key].popleft()
                    del head_todo[key]
                    if not fifos[key]:
                        nonempty.discard(key)
            # 4. injection of the next flit of each active message
            for r, m in list(injecting.items()):
                key = (r, r)
                q = fifos.setdefault(key, deque())
                if len(q) + reserved[key] >= depth:
                    continue
                fi = m.injected
                m.injected += 1
                progressed = True
                active[(r, "spm")].add(now)
                active[(r, "router")].add(now)
                dropped = (self.fault is not None and instrs[m.idx].tag == self.fault.tag
                           and m.rep == self.fault.rep and fi == self.fault.flit)
                if not dropped:
                    q.append((m.mid, fi))
                    nonempty.add(key)
                    max_fifo = max(max_fifo, len(q))
                elif self.tracing:
                    self.trace.append({"cycle": now, "event": "drop", "msg": m.mid, "flit": fi})
                if m.injected == m.nflits:
                    del injecting[r]
                    res_free[(r, "inject")] = now + 1
            if progressed:
                last_progress = now
            if not remaining:
                break
            # 5. advance time
            network_busy = bool(nonempty or arrivals or injecting)
            if network_busy:
                if now - last_progress > self.stall_limit:
                    raise DeadlockError(now, self._blocked_report(fifos, nonempty, msgs))
                now += 1
                continue
            dispatchable = [res_free.get(res, 0) for res, heap in pending.items() if heap]
            cands = [t for t in dispatchable if t > now] + ([events[0][0]] if events else [])
            if any(t <= now for t in dispatchable):
                now += 1
            elif cands:
                now = max(now + 1, min(cands))
            else:
                lost = [m for m in msgs.values() if m.injected == m.nflits]
                if self.fault is not None and lost:
                    violations.append(f"{len(lost)} message(s) never delivered")
                    break
                raise DeadlockError(now, f"{remaining} repetitions can never issue")

        end = max(self.finish.values(), default=now) if remaining == 0 else now
        self.ledger.cycles = end
        for key, since in self._gated_since.items():
            self.ledger.gated[key] += max(0, end - since)
        for key, cycles in active.items():
            self.ledger.active[key] = len(cycles)
        for (r, kind), since in self._gated_since.items():
            if any(c >= since for c in active[(r, kind)]):
                violations.append(f"{kind} at {r} active while gated")

        reduce_expected: Counter = Counter()
        for ins in instrs:
            if ins.op == Op.REDUCE_ADD:
                for rep in range(ins.repeat):
                    reduce_expected[(ins.dst, ins.buf(ins.out, rep))] += 1
        for ph in set(injected_by_phase) | set(delivered_by_phase):
            if injected_by_phase[ph] != delivered_by_phase[ph]:
                violations.append(f"phase {ph}: {injected_by_phase[ph]} flits injected, "
                                  f"{delivered_by_phase[ph]} delivered")
        for key, cnt in reduce_expected.items():
            if reduce_seen[key] != cnt:
                violations.append(f"REDUCE_ADD into {key}: {reduce_seen[key]} of {cnt} operands")
        if max_fifo > depth:
            violations.append(f"FIFO occupancy {max_fifo} exceeds depth {depth}")
        audit = AuditReport(violations, dict(injected_by_phase), dict(delivered_by_phase), max_fifo,
                            {str(k): v for k, v in reduce_expected.items()},
                            {str(k): v for k, v in reduce_seen.items()}, self.dmac_qk, self.dmac_pv)
        return SimResult(end, remaining == 0, self.spm, self.ledger, audit, dict(self.finish), self.trace)

    def _blocked_report(self, fifos, nonempty, msgs) -> str:
        parts = []
        for key in sorted(nonempty)[:8]:
            mid, fi = fifos[key][0]
            parts.append(f"fifo {key[0]}<-{key[1]} holds {len(fifos[key])}, head msg {mid} flit {fi}")
        return "; ".join(parts) or "empty network"


def run_program(program: Program, hw: HardwareSpec, images: SimImages, arith: Arith | None = None,
                **kw) -> SimResult:
    return Simulator(program, hw, images, arith, **kw).run()


# --- attention-layer convenience ----------------------------------------------

def build_images(plan: MappingPlan, weights: LayerWeights, X, arith: Arith, position: int = 0,
                 cache: KVCache | None = None, sram_loaded: bool = True) -> SimImages:
    """Weight tiles, LoRA shards, input tokens and (decode) earlier KV rows."""
    hw = plan.hw
    R, C = hw.rram_rows, hw.rram_cols
    img = SimImages()
    for p in plan.placements:
        W = weights.matrix(p.name)
        lora = weights.lora.get(p.name)
        for (i, j), site in p.tile_sites:
            rows = slice(i * R, min((i + 1) * R, p.d_out))
            cols = slice(j * C, min((j + 1) * C, p.d_in))
            img.rram.setdefault(site, {})[(p.name, i, j)] = W[rows, cols]
            if lora is not None and p.name in plan.lora:
                B, A = lora
                shard = (B[rows, :], A[:, cols])
                img.host_sram.setdefault(site, {})[(p.name, i, j)] = shard
                if sram_loaded:
                    img.sram.setdefault(site, {})[(p.name, i, j)] = shard
    X = np.asarray(X)
    for k in range(X.shape[0]):
        img.spm.setdefault(plan.input_site, {})[f"x{position + k}"] = X[k]
    if cache is not None:
        geo = plan.geometry
        for name, rows in (("K", cache.K), ("V", cache.V)):
            sites = plan.kv_sites(name)
            for key in range(position):
                site = sites[key % len(sites)]
                for grp in geo[name].groups:
                    blk = np.asarray(rows[key])[grp.index * R: grp.index * R + grp.rows]
                    img.spm.setdefault(site, {})[f"{name.lower()}{key}.{grp.index}"] = blk
    return img


def collect_outputs(plan: MappingPlan, spm: dict, tokens) -> np.ndarray:
    geo = plan.geometry["O"]
    rows = []
    for t in tokens:
        rows.append(np.concatenate([np.asarray(spm[g.root][f"o{t}.{g.index}"]) for g in geo.groups]))
    return np.stack(rows)


@dataclass
class LayerRun:
    plan: MappingPlan
    program: Program
    result: SimResult
    outputs: np.ndarray


def simulate_attention(model: ModelSpec, hw: HardwareSpec, weights: LayerWeights, X,
                       arith: Arith | None = None, phase: str = "prefill", position: int = 0,
                       cache: KVCache | None = None, plan: MappingPlan | None = None,
                       **kw) -> LayerRun:
    """Map, compile and run one attention layer; returns outputs token-major."""
    arith = arith or Arith("fixed", hw.frac_bits)
    X = np.atleast_2d(np.asarray(X))
    T = X.shape[0]
    if plan is None:
        plan = map_layer(layer_spec(model, part="attention"), hw, DataflowSummary(T, phase, position))
    prog = compile_layer(plan, model, hw, phase, T, position, arith)
    images = build_images(plan, weights, X, arith, position, cache)
    res = run_program(prog, hw, images, arith, mesh=plan.mesh, **kw)
    out = collect_outputs(plan, res.spm, range(position, position + T)) if res.completed else None
    return LayerRun(plan, prog, res, out)
