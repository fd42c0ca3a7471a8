"""IPCN instruction set and the layer compiler.

An instruction runs on one router (the source for transfers).  Buffer names
may contain ``{t}``; repetition ``k`` of an instruction substitutes
``t = base + k``, which is how one repeatable command covers every token of
a prefill.

Text format, one instruction per line::

    <tag> <OP> @x,y [>x,y] [src=<buf>] [out=<buf>] flits=<n> rep=<k> base=<b>
        phase=<phase> deps=<t1,t2|-> [tree=px,py:cx,cy;...] [args=<json>]

(all on a single line).  :func:`parse_program` reads it back.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum

from .collectives import unicast_route
from .config import HardwareSpec, ModelSpec
from .mapper import MappingPlan
from .numerics import Arith

Coord = tuple[int, int]

PHASES = ("broadcast", "smac", "reduce", "attention", "output")
MAX_PROGRAM_SIZE = 65536


class Op(str, Enum):
    SEND = "SEND"
    BCAST_FWD = "BCAST_FWD"
    REDUCE_ADD = "REDUCE_ADD"
    DMAC = "DMAC"
    SOFTMAX = "SOFTMAX"
    SPM_RD = "SPM_RD"
    SPM_WR = "SPM_WR"
    PE_SMAC_RRAM = "PE_SMAC_RRAM"
    PE_SMAC_SRAM = "PE_SMAC_SRAM"
    SRAM_PROG = "SRAM_PROG"
    GATE = "GATE"
    BARRIER = "BARRIER"


TRANSFER_OPS = (Op.SEND, Op.BCAST_FWD, Op.REDUCE_ADD)


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    tag: int
    op: Op
    router: Coord
    phase: str
    dst: Coord | None = None
    src: str = ""
    out: str = ""
    flits: int = 0
    repeat: int = 1
    base: int = 0
    deps: tuple = ()
    tree: tuple = ()  # ((parent, child), ...) for BCAST_FWD
    args: str = ""    # JSON object, op-specific

    def __post_init__(self) -> None:
        if self.repeat < 1:
            raise CompileError(f"instruction {self.tag}: repeat must be >= 1")
        if self.op in TRANSFER_OPS and self.flits < 1:
            raise CompileError(f"instruction {self.tag}: {self.op.value} needs a payload")

    @property
    def params(self) -> dict:
        return json.loads(self.args) if self.args else {}

    def buf(self, name: str, rep: int) -> str:
        return name.replace("{t}", str(self.base + rep))

    @property
    def hops(self) -> int:
        if self.op == Op.BCAST_FWD:
            return len(self.tree)
        if self.op in (Op.SEND, Op.REDUCE_ADD):
            return len(unicast_route(self.router, self.dst))
        return 0

    def dump(self) -> str:
        parts = [str(self.tag), self.op.value, f"@{self.router[0]},{self.router[1]}"]
        if self.dst is not None:
            parts.append(f">{self.dst[0]},{self.dst[1]}")
        if self.src:
            parts.append(f"src={self.src}")
        if self.out:
            parts.append(f"out={self.out}")
        parts += [f"flits={self.flits}", f"rep={self.repeat}", f"base={self.base}",
                  f"phase={self.phase}", "deps=" + (",".join(map(str, self.deps)) or "-")]
        if self.tree:
            parts.append("tree=" + ";".join(f"{p[0]},{p[1]}:{c[0]},{c[1]}" for p, c in self.tree))
        if self.args:
            parts.append("args=" + self.args)
        return " ".join(parts)


@dataclass(frozen=True)
class Program:
    instructions: tuple
    ct: int = 0
    label: str = ""

    def __len__(self) -> int:
        return len(self.instructions)

    @property
    def phase_markers(self) -> list[tuple[str, int]]:
        marks, last = [], None
        for k, ins in enumerate(self.instructions):
            if ins.phase != last:
                marks.append((ins.phase, k))
                last = ins.phase
        return marks

    @property
    def oversized(self) -> bool:
        return len(self.instructions) > MAX_PROGRAM_SIZE

    def dump(self) -> str:
        return "".join(ins.dump() + "\n" for ins in self.instructions)

    def validate(self) -> None:
        """Dependencies must point at earlier instructions (so they form a DAG)."""
        seen = set()
        for ins in self.instructions:
            if ins.tag in seen:
                raise CompileError(f"duplicate tag {ins.tag}")
            for d in ins.deps:
                if d not in seen:
                    raise CompileError(f"instruction {ins.tag} depends on {d}, not produced earlier")
            seen.add(ins.tag)


def _coord(text: str) -> Coord:
    x, y = text.split(",")
    return int(x), int(y)


def parse_program(text: str, ct: int = 0, label: str = "") -> Program:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        head, _, rest = line.partition(" args=")
        tokens = head.split()
        kw: dict = {"tag": int(tokens[0]), "op": Op(tokens[1]), "router": _coord(tokens[2][1:])}
        for tok in tokens[3:]:
            if tok.startswith(">"):
                kw["dst"] = _coord(tok[1:])
                continue
            key, _, val = tok.partition("=")
            if key in ("src", "out", "phase"):
                kw[key] = val
            elif key == "flits":
                kw["flits"] = int(val)
            elif key == "rep":
                kw["repeat"] = int(val)
            elif key == "base":
                kw["base"] = int(val)
            elif key == "deps":
                kw["deps"] = () if val == "-" else tuple(int(v) for v in val.split(","))
            elif key == "tree":
                kw["tree"] = tuple((_coord(e.split(":")[0]), _coord(e.split(":")[1]))
                                   for e in val.split(";"))
            else:
                raise CompileError(f"unknown field {key!r} in line {line!r}")
        if rest:
            kw["args"] = rest
        out.append(Instruction(**kw))
    return Program(tuple(out), ct, label)


def _args(**kw) -> str:
    return json.dumps(kw, sort_keys=True, separators=(",", ":"))


@dataclass
class _Builder:
    instructions: list = field(default_factory=list)

    def emit(self, op: Op, router: Coord, phase: str, deps=(), **kw) -> int:
        tag = len(self.instructions)
        deps = tuple(sorted({d for d in deps if d is not None}))
        self.instructions.append(Instruction(tag, op, router, phase, deps=deps, **kw))
        return tag


def compile_layer(plan: MappingPlan, model: ModelSpec, hw: HardwareSpec | None = None,
                  phase: str = "prefill", n_tokens: int = 1, position: int = 0,
                  arith: Arith | None = None, trees=None) -> Program:
    """NMC program for one attention layer over ``n_tokens`` tokens at ``position``.

    Prefill scores every cached key (positions ``< position + n_tokens``) and
    masks in the softmax; decode takes one token and sees keys up to itself.
    Input token ``t`` must sit in buffer ``x{t}`` at ``plan.input_site``; for
    decode, earlier keys must already sit at their KV sites as
    ``k{key}.{i}`` / ``v{key}.{i}``.  Outputs land as ``o{t}.{i}`` at the O
    block roots.  ``trees`` may override ``plan.geometry``.
    """
    hw = hw or plan.hw
    arith = arith or Arith("fixed", hw.frac_bits)
    if phase not in ("prefill", "decode"):
        raise CompileError(f"unknown phase {phase!r}")
    if phase == "decode" and n_tokens != 1:
        raise CompileError("decode compiles exactly one token")
    for name in ("Q", "K", "V", "O"):
        if not plan.has(name):
            raise CompileError(f"plan has no placement for {name}")
    geo = trees or plan.geometry
    for name, g in geo.items():
        if set(g.placement.routers) != set(plan.placement(name).routers):
            raise CompileError(f"tree/plan mismatch for {name}")

    fa = lambda n: hw.flits(n, hw.act_bits)  # noqa: E731
    fp = lambda n: hw.flits(n, hw.psum_bits)  # noqa: E731
    b = _Builder()
    T = n_tokens
    tokens = range(position, position + T)
    n_keys = position + T
    heads, hd = model.num_heads, model.head_dim
    lora = model.lora
    C = hw.rram_cols

    used = set().union(*(p.routers for p in plan.placements))
    idle = sorted({(x, y) for x in range(plan.mesh[0]) for y in range(plan.mesh[1])} - used,
                  key=lambda c: (c[1], c[0]))
    for c in idle:
        b.emit(Op.GATE, c, "broadcast", args=_args(on=False, kinds=["rram", "sram"]))

    def projection(name: str, src_buf: str, in_deps: dict, dst_prefix: str, phase_in: str,
                   phase_red: str, fold_deps) -> dict:
        """Broadcast input, SMAC every tile, reduce each output block; returns {i: tag}."""
        g = geo[name]
        p = g.placement
        targeted = lora.applies_to(name)
        smac: dict = {}
        deliver = in_deps
        if g.bcast_tree.edges:
            tag = b.emit(Op.BCAST_FWD, g.entry, phase_in, deps=fold_deps, src=src_buf, out=src_buf,
                         flits=fa(p.d_in), repeat=T, base=position, tree=tuple(g.bcast_tree.edges))
            deliver = {c: tag for c in p.routers}
        for (i, j), site in p.tile_sites:
            lo, hi = j * C, min((j + 1) * C, p.d_in)
            acc = f"a{name}{{t}}.{i}"
            common = dict(src=src_buf, out=acc, repeat=T, base=position)
            dep = deliver.get(site, fold_deps)
            smac.setdefault(site, []).append(b.emit(
                Op.PE_SMAC_RRAM, site, "smac", deps=_as_deps(dep),
                args=_args(matrix=name, tile=[i, j], lo=lo, hi=hi, shl=arith.base_shift(targeted)),
                **common))
            if targeted:
                smac[site].append(b.emit(
                    Op.PE_SMAC_SRAM, site, "smac", deps=_as_deps(dep),
                    args=_args(matrix=name, tile=[i, j], lo=lo, hi=hi, scale=lora.scale), **common))
        done = {}
        for grp in g.groups:
            acc = f"a{name}{{t}}.{grp.index}"
            incoming: dict = {}
            for parent, child in reversed(grp.tree.edges):
                deps = list(smac.get(child, [])) if child in grp.members else []
                deps += incoming.get(child, [])
                tag = b.emit(Op.REDUCE_ADD, child, phase_red, deps=deps, dst=parent, src=acc, out=acc,
                             flits=fp(grp.rows), repeat=T, base=position)
                incoming.setdefault(parent, []).append(tag)
            deps = list(smac.get(grp.root, [])) + incoming.get(grp.root, [])
            done[grp.index] = b.emit(
                Op.SPM_WR, grp.root, phase_red, deps=deps, src=acc, out=f"{dst_prefix}{{t}}.{grp.index}",
                flits=fa(grp.rows), repeat=T, base=position,
                args=_args(shift=arith.output_shift(targeted)))
        return done

    # Q, K, V projections fed from the input site.
    proj = {}
    for name in ("Q", "K", "V"):
        g = geo[name]
        send = None
        if plan.input_site != g.entry:
            send = b.emit(Op.SEND, plan.input_site, "broadcast", dst=g.entry, src="x{t}", out="x{t}",
                          flits=fa(plan.placement(name).d_in), repeat=T, base=position)
        proj[name] = projection(name, "x{t}", {g.entry: send} if send is not None else {},
                                name.lower(), "broadcast", "reduce", _as_deps(send))

    # KV cache stores (cyclic sites).
    K_sites, V_sites = plan.kv_sites("K"), plan.kv_sites("V")
    stored: dict = {}  # (site, buffer) -> tag of the producing instruction
    for t in tokens:
        for name, sites in (("K", K_sites), ("V", V_sites)):
            site = sites[t % len(sites)]
            for grp in geo[name].groups:
                buf = f"{name.lower()}{t}.{grp.index}"
                if grp.root == site:
                    stored[(site, buf)] = proj[name][grp.index]
                else:
                    stored[(site, buf)] = b.emit(Op.SEND, grp.root, "attention", deps=[proj[name][grp.index]],
                                                 dst=site, src=buf, out=buf, flits=fa(grp.rows))

    def keys_at(sites, limit):
        held: dict = {}
        for key in range(limit):
            held.setdefault(sites[key % len(sites)], []).append(key)
        return held

    ctx_ready = {}
    gQ = geo["Q"]
    home_ctx = plan.ctx_home
    for t in tokens:
        home = plan.softmax_home(t)
        k_held = keys_at(K_sites, n_keys)
        score_srcs, score_tags = [], []
        for site, keys in sorted(k_held.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            q_tags = []
            for grp in gQ.groups:
                qbuf = f"q{t}.{grp.index}"
                if grp.root == site:
                    q_tags.append(proj["Q"][grp.index])
                else:
                    q_tags.append(b.emit(Op.SEND, grp.root, "attention", deps=[proj["Q"][grp.index]], dst=site,
                                         src=qbuf, out=qbuf, flits=fa(grp.rows)))
            k_deps = [stored[(site, f"k{key}.{grp.index}")] for key in keys for grp in geo["K"].groups
                      if (site, f"k{key}.{grp.index}") in stored]
            sc = f"sc{t}@{site[0]}.{site[1]}"
            tag = b.emit(Op.DMAC, site, "attention", deps=q_tags + k_deps, out=sc,
                         args=_args(mode="qk", query=t, keys=keys, heads=heads, head_dim=hd,
                                    q=[f"q{t}.{grp.index}" for grp in gQ.groups],
                                    k=[f"k{{key}}.{grp.index}" for grp in geo["K"].groups]))
            if site != home:
                tag = b.emit(Op.SEND, site, "attention", deps=[tag], dst=home, src=sc, out=sc,
                             flits=fp(len(keys) * heads))
            score_srcs.append([sc, keys])
            score_tags.append(tag)
        v_held = keys_at(V_sites, t + 1)
        v_order = sorted(v_held.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        prob_outs = [[f"p{t}@{s[0]}.{s[1]}", keys] for s, keys in v_order]
        smax = b.emit(Op.SOFTMAX, home, "attention", deps=score_tags, out=f"p{t}",
                      args=_args(query=t, heads=heads, head_dim=hd, sources=score_srcs, outputs=prob_outs))
        ctx_tags = []
        reducer = Op.REDUCE_ADD if len(v_order) > 1 else Op.SEND
        for (site, keys), (pbuf, _) in zip(v_order, prob_outs):
            ptag = smax
            if site != home:
                ptag = b.emit(Op.SEND, home, "attention", deps=[smax], dst=site, src=pbuf, out=pbuf,
                              flits=fa(len(keys) * heads))
            v_deps = [stored[(site, f"v{key}.{grp.index}")] for key in keys for grp in geo["V"].groups
                      if (site, f"v{key}.{grp.index}") in stored]
            cx = f"cx{t}@{site[0]}.{site[1]}"
            tag = b.emit(Op.DMAC, site, "attention", deps=[ptag] + v_deps, out=cx,
                         args=_args(mode="pv", query=t, keys=keys, heads=heads, head_dim=hd, p=pbuf,
                                    v=[f"v{{key}}.{grp.index}" for grp in geo["V"].groups]))
            ctx_tags.append(b.emit(reducer, site, "attention", deps=[tag], dst=home_ctx, src=cx,
                                   out=f"cx{t}", flits=fp(plan.placement("V").d_out)))
        ctx_ready[t] = b.emit(Op.SPM_WR, home_ctx, "output", deps=ctx_tags, src=f"cx{t}", out=f"c{t}",
                              flits=fa(plan.placement("V").d_out), args=_args(shift=arith.frac_bits))

    out_done = projection("O", "c{t}", {}, "o", "output", "output", list(ctx_ready.values()))
    b.emit(Op.BARRIER, home_ctx, "output", deps=list(out_done.values()))
    prog = Program(tuple(b.instructions), label=f"{phase}:{position}+{T}")
    prog.validate()
    return prog


def _as_deps(dep) -> list:
    if dep is None:
        return []
    if isinstance(dep, (list, tuple)):
        return list(dep)
    return [dep]


def compile_reprogram(plan: MappingPlan, hw: HardwareSpec | None = None) -> Program:
    """SRAM_PROG commands loading every LoRA shard of ``plan`` (one per PE, in parallel)."""
    hw = hw or plan.hw
    b = _Builder()
    for name, lp in plan.lora.items():
        sites = plan.placement(name).sites
        for (i, j), nbytes in lp.bytes_per_pe:
            b.emit(Op.SRAM_PROG, sites[(i, j)], "smac", args=_args(matrix=name, tile=[i, j], bytes=nbytes))
    return Program(tuple(b.instructions), label="reprogram")


def unfold(program: Program) -> Program:
    """Replace every repeat=k instruction by k explicit copies (same behaviour)."""
    new_tags: dict = {}
    out = []
    for ins in program.instructions:
        deps = tuple(sorted(t for d in ins.deps for t in new_tags[d]))
        tags = []
        for k in range(ins.repeat):
            tag = len(out)
            out.append(replace(ins, tag=tag, repeat=1, base=ins.base + k, deps=deps))
            tags.append(tag)
        new_tags[ins.tag] = tags
    return Program(tuple(out), program.ct, program.label)


@dataclass(frozen=True)
class ProgramStats:
    op_counts: dict
    flits: int
    flit_hops: int
    critical_path: int
    flits_by_phase: dict
    flit_hops_by_phase: dict


def program_stats(p: Program) -> ProgramStats:
    """Opcode counts (repeats expanded), flit volume and longest dependency chain."""
    counts: Counter = Counter()
    flits = flit_hops = 0
    by_phase: Counter = Counter()
    hops_by_phase: Counter = Counter()
    depth: dict = {}
    for ins in p.instructions:
        counts[ins.op.value] += ins.repeat
        if ins.op in TRANSFER_OPS:
            f = ins.flits * ins.repeat
            flits += f
            flit_hops += f * ins.hops
            by_phase[ins.phase] += f
            hops_by_phase[ins.phase] += f * ins.hops
        depth[ins.tag] = 1 + max((depth[d] for d in ins.deps), default=0)
    return ProgramStats(dict(counts), flits, flit_hops, max(depth.values(), default=0),
                        dict(by_phase), dict(hops_by_phase))
