"""Command-line entry point: ``primal-sim sim | sweep | check-tables``.

Exit status is 0 on success, 1 when any invariant check fails, 2 on bad
arguments or configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (ConfigError, HardwareSpec, WorkloadSpec, config_from_dict, hardware_from_dict,
                     model_from_dict, preset, toy_hardware, with_lora)
from .mapper import DataflowSummary, check_plan, split_across_cts
from .metrics import FORMATS, check_tables, emit_report, report_from_run
from .srpg import CycleModeError, cycle_overrides, run_system

SWEEP_MODELS = ("llama3.2-1b", "llama3-8b", "llama2-13b")


def load_hardware(spec: str | None) -> HardwareSpec:
    if spec is None:
        return HardwareSpec()
    if spec == "toy":
        return toy_hardware()
    doc = json.loads(Path(spec).read_text())
    if "schema_version" in doc:
        return config_from_dict(doc)[0]
    return hardware_from_dict(doc)


def load_model(spec: str, targets: str | None, rank: int | None, scale: float):
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        doc = json.loads(path.read_text())
        model = config_from_dict(doc)[1] if "schema_version" in doc else model_from_dict(doc)
    else:
        model = preset(spec)
    if targets is not None or rank is not None:
        tg = tuple(t.strip().upper() for t in (targets or "q").split(",") if t.strip())
        model = with_lora(model, model.lora.rank if rank is None else rank, tg, scale)
    return model


def simulate(model, hw, workload, mode: str):
    """Run one configuration; returns (report, schedule, list of invariant violations)."""
    assignment = split_across_cts(model, hw, DataflowSummary(1, "decode", workload.input_len))
    problems = []
    for ct, pieces in enumerate(assignment.cts):
        for piece, plan in pieces:
            problems += [f"CT {ct} layer {piece.layer} {piece.part}: {p}" for p in check_plan(plan)]
    overrides = None
    if mode == "cycle":
        overrides, found = cycle_overrides(assignment, model, hw, workload)
        problems += found
    run = run_system(model, hw, workload, assignment, overrides)
    report = report_from_run(model, hw, workload, run)
    problems += report.violations()
    return report, run.schedule, problems


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hw", help="hardware JSON (or full config), or 'toy'; default: 32x32 CT")
    p.add_argument("--lora-targets", help="comma list of q,k,v,o")
    p.add_argument("--rank", type=int, help="LoRA rank")
    p.add_argument("--scale", type=float, default=1.0, help="LoRA scale (default 1.0)")
    p.add_argument("--mode", choices=("cycle", "analytical"), default="analytical")
    p.add_argument("--report", help="write the report here instead of stdout")
    p.add_argument("--format", choices=FORMATS, default="table")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="primal-sim", description="PIM LLM inference simulator with LoRA")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="simulate one configuration")
    sim.add_argument("--model", default="llama3.2-1b", help="preset name or model JSON path")
    sim.add_argument("--in-len", type=int, default=1024)
    sim.add_argument("--out-len", type=int, default=1024)
    sim.add_argument("--gantt", help="write the CT schedule as CSV here")
    _add_common(sim)

    sw = sub.add_parser("sweep", help="grid over models, LoRA target sets and context lengths")
    sw.add_argument("--models", default=",".join(SWEEP_MODELS))
    sw.add_argument("--target-sets", default="q;q,v", help="semicolon-separated target lists")
    sw.add_argument("--contexts", default="1024,2048", help="input=output lengths")
    _add_common(sw)

    ct = sub.add_parser("check-tables", help="self-consistency of the published table fixtures")
    ct.add_argument("--format", choices=("table", "json"), default="table")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check-tables":
            return _check_tables(args)
        hw = load_hardware(args.hw)
        if args.command == "sim":
            model = load_model(args.model, args.lora_targets, args.rank, args.scale)
            wl = WorkloadSpec(args.in_len, args.out_len)
            report, schedule, problems = simulate(model, hw, wl, args.mode)
            _write(emit_report(report, args.format), args.report)
            if args.gantt:
                Path(args.gantt).write_text(schedule.to_csv())
        else:
            reports, problems = [], []
            rank = 8 if args.rank is None else args.rank
            for name in args.models.split(","):
                for tset in args.target_sets.split(";"):
                    for ctx in (int(c) for c in args.contexts.split(",")):
                        model = load_model(name.strip(), tset, rank, args.scale)
                        r, _, found = simulate(model, hw, WorkloadSpec(ctx, ctx), args.mode)
                        reports.append(r)
                        problems += found
            _write(emit_report(reports, args.format), args.report)
    except (ConfigError, CycleModeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for p in problems:
        print(f"violation: {p}", file=sys.stderr)
    return 1 if problems else 0


def _check_tables(args) -> int:
    results = check_tables()
    if args.format == "json":
        print(json.dumps([{"model": c.row.model, "lora": list(c.row.lora_targets),
                           "context": c.row.input_len, "check": c.check, "value": c.value,
                           "expected": c.expected, "ok": c.ok} for c in results], indent=2))
    else:
        for c in results:
            tag = "PASS" if c.ok else "FAIL"
            print(f"{tag} {c.check:<10} {c.row.model:<12} {'+'.join(c.row.lora_targets):<4} "
                  f"{c.row.input_len:>5}: {c.value:9.2f} vs {c.expected:9.2f} ({100 * c.rel_err:.3f}%)")
    return 0 if all(c.ok for c in results) else 1


if __name__ == "__main__":
    sys.exit(main())
