"""Hardware, model and workload configuration.

Defaults reproduce the published system parameters of the accelerator:
a 32x32 mesh of router-PE pairs per compute tile (CT), 256x256 RRAM-ACIM
and 256x64 SRAM-DCIM arrays, 32 KB scratchpad and 128 B port FIFOs.

A run is described by a single JSON document::

    {
      "schema_version": 1,
      "hardware": {...},          # any HardwareSpec field, nested timing/power/area
      "model": {"preset": "llama2-13b", "lora": {"rank": 8, "targets": ["Q", "V"]}},
      "workload": {"input_len": 2048, "output_len": 2048}
    }

Missing fields take their defaults.  A model section either names a preset
(optionally overriding fields) or spells out every shape field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

MACRO_KINDS = ("rram", "sram", "spm", "router")
LORA_TARGETS = ("Q", "K", "V", "O")


class ConfigError(ValueError):
    """Raised for unparsable or invalid configuration; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _positive(path: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(path, f"must be a positive number, got {value!r}")


def _positive_int(path: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ConfigError(path, f"must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class MacroTiming:
    """Per-operation latencies in clock cycles (not published; all overridable)."""

    rram_smac_cycles: int = 32
    sram_smac_cycles: int = 16
    dmac_cycles: int = 1
    softmax_cycles_per_elem: int = 4
    sram_prog_bytes_per_cycle: int = 8
    hop_cycles: int = 1

    def validate(self, prefix: str = "hardware.macro_timing") -> None:
        for f in fields(self):
            _positive_int(f"{prefix}.{f.name}", getattr(self, f.name))


@dataclass(frozen=True)
class MacroPower:
    """Active power per macro instance in watts plus retention fractions.

    Retention power is ``retention_* x active``; gated power is zero.
    """

    rram_acim: float = 120e-6
    sram_dcim: float = 950e-6
    scratchpad: float = 42e-6
    router: float = 103e-6
    retention_rram: float = 0.05
    retention_sram: float = 0.10
    retention_spm: float = 0.25
    retention_router: float = 0.10

    def active(self, kind: str) -> float:
        return {
            "rram": self.rram_acim,
            "sram": self.sram_dcim,
            "spm": self.scratchpad,
            "router": self.router,
        }[kind]

    def retention(self, kind: str) -> float:
        return self.active(kind) * getattr(self, f"retention_{kind}")

    @property
    def pair_total(self) -> float:
        return sum(self.active(k) for k in MACRO_KINDS)

    def validate(self, prefix: str = "hardware.macro_power") -> None:
        for name in ("rram_acim", "sram_dcim", "scratchpad", "router"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(f"{prefix}.{name}", f"must be >= 0, got {value!r}")
        for kind in MACRO_KINDS:
            value = getattr(self, f"retention_{kind}")
            if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise ConfigError(f"{prefix}.retention_{kind}", f"must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class MacroArea:
    """Area per macro instance in mm^2."""

    rram_acim: float = 0.1442
    sram_dcim: float = 0.035
    scratchpad: float = 0.013
    router: float = 0.029

    def of(self, kind: str) -> float:
        return {
            "rram": self.rram_acim,
            "sram": self.sram_dcim,
            "spm": self.scratchpad,
            "router": self.router,
        }[kind]

    def validate(self, prefix: str = "hardware.macro_area") -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(f"{prefix}.{f.name}", f"must be >= 0, got {value!r}")


@dataclass(frozen=True)
class HardwareSpec:
    mesh_rows: int = 32
    mesh_cols: int = 32
    pe_count: int = 1024
    rram_rows: int = 256
    rram_cols: int = 256
    sram_rows: int = 256
    sram_cols: int = 64
    scratchpad_bytes: int = 32768
    fifo_bytes: int = 128
    dmac_per_router: int = 16
    io_pairs: int = 6
    bus_bits: int = 64
    freq_hz: float = 1e9
    weight_bits: int = 8
    act_bits: int = 8
    psum_bits: int = 32
    frac_bits: int = 8
    kv_reserve_fraction: float = 0.5
    inter_ct_hop_factor: int = 4
    max_cts: int = 4096
    macro_timing: MacroTiming = field(default_factory=MacroTiming)
    macro_power: MacroPower = field(default_factory=MacroPower)
    macro_area: MacroArea = field(default_factory=MacroArea)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in (
            "mesh_rows", "mesh_cols", "pe_count", "rram_rows", "rram_cols",
            "sram_rows", "sram_cols", "scratchpad_bytes", "fifo_bytes",
            "dmac_per_router", "io_pairs", "bus_bits", "weight_bits",
            "act_bits", "psum_bits", "frac_bits", "inter_ct_hop_factor", "max_cts",
        ):
            _positive_int(f"hardware.{name}", getattr(self, name))
        _positive("hardware.freq_hz", self.freq_hz)
        if self.pe_count != self.mesh_rows * self.mesh_cols:
            raise ConfigError(
                "hardware.pe_count",
                f"{self.pe_count} != mesh_rows*mesh_cols = {self.mesh_rows * self.mesh_cols}",
            )
        if self.bus_bits % 8:
            raise ConfigError("hardware.bus_bits", "must be a whole number of bytes")
        if self.fifo_bytes % (self.bus_bits // 8):
            raise ConfigError("hardware.fifo_bytes", f"must be a multiple of {self.bus_bits // 8}")
        if not 0.0 <= self.kv_reserve_fraction < 1.0:
            raise ConfigError("hardware.kv_reserve_fraction", "must lie in [0, 1)")
        self.macro_timing.validate()
        self.macro_power.validate()
        self.macro_area.validate()

    @property
    def fifo_depth(self) -> int:
        """FIFO depth in flits."""
        return self.fifo_bytes * 8 // self.bus_bits

    @property
    def cells_per_ct(self) -> int:
        return self.pe_count * self.rram_rows * self.rram_cols

    @property
    def inter_ct_hop_cycles(self) -> int:
        return self.inter_ct_hop_factor * self.macro_timing.hop_cycles

    def flits(self, n_elems: int, bits: int) -> int:
        return -(-n_elems * bits // self.bus_bits)


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 8
    targets: tuple[str, ...] = ("Q", "V")
    scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(t.upper() for t in self.targets))
        self.validate()

    def validate(self, prefix: str = "model.lora") -> None:
        if isinstance(self.rank, bool) or not isinstance(self.rank, int) or self.rank < 0:
            raise ConfigError(f"{prefix}.rank", f"must be a non-negative integer, got {self.rank!r}")
        bad = [t for t in self.targets if t not in LORA_TARGETS]
        if bad:
            raise ConfigError(f"{prefix}.targets", f"unknown targets {bad}; allowed {LORA_TARGETS}")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError(f"{prefix}.targets", "duplicate targets")
        if self.rank > 0 and not self.targets:
            raise ConfigError(f"{prefix}.targets", "must be nonempty when rank > 0")
        if not isinstance(self.scale, (int, float)) or isinstance(self.scale, bool):
            raise ConfigError(f"{prefix}.scale", "must be a number")

    def applies_to(self, matrix: str) -> bool:
        return self.rank > 0 and matrix in self.targets


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    head_dim: int
    ffn_dim: int
    gated_ffn: bool = True
    lora: LoraSpec = field(default_factory=LoraSpec)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "head_dim", "ffn_dim"):
            _positive_int(f"model.{name}", getattr(self, name))
        if self.head_dim * self.num_heads != self.hidden_dim:
            raise ConfigError(
                "model.head_dim",
                f"head_dim*num_heads = {self.head_dim * self.num_heads} != hidden_dim = {self.hidden_dim}",
            )
        self.lora.validate()

    def layer_matrix_shapes(self) -> list[tuple[str, int, int]]:
        """(name, d_out, d_in) for every weight matrix of one transformer block."""
        d, f = self.hidden_dim, self.ffn_dim
        shapes = [("Q", d, d), ("K", d, d), ("V", d, d), ("O", d, d)]
        if self.gated_ffn:
            shapes += [("FFN_GATE", f, d), ("FFN_UP", f, d), ("FFN_DOWN", d, f)]
        else:
            shapes += [("FFN_UP", f, d), ("FFN_DOWN", d, f)]
        return shapes

    @property
    def params_per_layer(self) -> int:
        return sum(r * c for _, r, c in self.layer_matrix_shapes())

    @property
    def total_params(self) -> int:
        """Base weights mapped to RRAM (embeddings and LM head excluded)."""
        return self.num_layers * self.params_per_layer

    @property
    def lora_params_per_layer(self) -> int:
        r = self.lora.rank
        return sum(r * (dout + din) for name, dout, din in self.layer_matrix_shapes()
                   if self.lora.applies_to(name))


@dataclass(frozen=True)
class WorkloadSpec:
    input_len: int = 1024
    output_len: int = 1024
    batch: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("input_len", "output_len", "batch"):
            _positive_int(f"workload.{name}", getattr(self, name))


PRESETS: dict[str, dict[str, Any]] = {
    "llama3.2-1b": dict(name="llama3.2-1b", num_layers=16, hidden_dim=2048, num_heads=32,
                        head_dim=64, ffn_dim=8192),
    "llama3-8b": dict(name="llama3-8b", num_layers=32, hidden_dim=4096, num_heads=32,
                      head_dim=128, ffn_dim=14336),
    "llama2-13b": dict(name="llama2-13b", num_layers=40, hidden_dim=5120, num_heads=40,
                       head_dim=128, ffn_dim=13824),
    "toy": dict(name="toy", num_layers=1, hidden_dim=16, num_heads=2, head_dim=8, ffn_dim=32),
}


def preset(name: str, lora: LoraSpec | None = None, **overrides: Any) -> ModelSpec:
    try:
        base = dict(PRESETS[name.lower()])
    except KeyError:
        raise ConfigError("model.preset", f"unknown preset {name!r}; known {sorted(PRESETS)}") from None
    base.update(overrides)
    if lora is not None:
        base["lora"] = lora
    return ModelSpec(**base)


def toy_hardware(**overrides: Any) -> HardwareSpec:
    """4x4 mesh with 8x8 crossbars: a 16-wide attention layer fills it exactly."""
    base = dict(mesh_rows=4, mesh_cols=4, pe_count=16, rram_rows=8, rram_cols=8,
                sram_rows=8, sram_cols=8)
    base.update(overrides)
    return HardwareSpec(**base)


def ct_count(hw: HardwareSpec, model: ModelSpec) -> int:
    """Compute tiles needed to hold every base weight, one weight per RRAM cell."""
    return -(-model.total_params // hw.cells_per_ct)


# --- serialization ---------------------------------------------------------

def _build(cls, data: Any, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown field")
    return data


def hardware_from_dict(data: dict | None) -> HardwareSpec:
    data = dict(_build(HardwareSpec, data, "hardware"))
    nested = {"macro_timing": MacroTiming, "macro_power": MacroPower, "macro_area": MacroArea}
    for key, cls in nested.items():
        if key in data:
            sub = _build(cls, data[key], f"hardware.{key}")
            try:
                data[key] = cls(**sub)
            except TypeError as exc:
                raise ConfigError(f"hardware.{key}", str(exc)) from None
    if "pe_count" not in data and ("mesh_rows" in data or "mesh_cols" in data):
        rows = data.get("mesh_rows", 32)
        cols = data.get("mesh_cols", 32)
        if isinstance(rows, int) and isinstance(cols, int):
            data["pe_count"] = rows * cols
    return HardwareSpec(**data)


def lora_from_dict(data: dict | None) -> LoraSpec:
    data = dict(_build(LoraSpec, data, "model.lora"))
    if "targets" in data:
        if not isinstance(data["targets"], (list, tuple)):
            raise ConfigError("model.lora.targets", "must be a list")
        data["targets"] = tuple(data["targets"])
    return LoraSpec(**data)


def model_from_dict(data: dict | None) -> ModelSpec:
    data = dict(data or {})
    preset_name = data.pop("preset", None)
    lora = lora_from_dict(data.pop("lora", None))
    if preset_name is None and not data:
        preset_name = "toy"
    if preset_name is not None:
        _build(ModelSpec, data, "model")
        return preset(preset_name, lora=lora, **data)
    _build(ModelSpec, data, "model")
    missing = [f.name for f in fields(ModelSpec)
               if f.name not in data and f.name not in ("lora", "gated_ffn")]
    if missing:
        raise ConfigError(f"model.{missing[0]}", "required when no preset is given")
    return ModelSpec(lora=lora, **data)


def workload_from_dict(data: dict | None) -> WorkloadSpec:
    return WorkloadSpec(**_build(WorkloadSpec, data, "workload"))


def config_to_dict(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec) -> dict:
    m = asdict(model)
    m["lora"]["targets"] = list(model.lora.targets)
    return {
        "schema_version": SCHEMA_VERSION,
        "hardware": asdict(hw),
        "model": m,
        "workload": asdict(workload),
    }


def config_from_dict(doc: Any) -> tuple[HardwareSpec, ModelSpec, WorkloadSpec]:
    if not isinstance(doc, dict):
        raise ConfigError("$", "top level must be an object")
    if "schema_version" not in doc:
        raise ConfigError("schema_version", "required")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {doc['schema_version']!r}")
    extra = sorted(set(doc) - {"schema_version", "hardware", "model", "workload"})
    if extra:
        raise ConfigError(extra[0], "unknown top-level section")
    try:
        return (hardware_from_dict(doc.get("hardware")),
                model_from_dict(doc.get("model")),
                workload_from_dict(doc.get("workload")))
    except TypeError as exc:
        raise ConfigError("$", str(exc)) from None


def load_config(path: str | Path) -> tuple[HardwareSpec, ModelSpec, WorkloadSpec]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    return config_from_dict(doc)


def dump_config(path: str | Path, hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec) -> None:
    Path(path).write_text(json.dumps(config_to_dict(hw, model, workload), indent=2) + "\n")


def with_lora(model: ModelSpec, rank: int, targets: tuple[str, ...], scale: float = 1.0) -> ModelSpec:
    return replace(model, lora=LoraSpec(rank=rank, targets=targets, scale=scale))
