"""Arithmetic shared by the golden model and the simulated router units.

Two modes exist.  ``float`` uses float64 throughout.  ``fixed`` stores every
activation and weight as a Python integer with ``frac_bits`` fractional bits
and accumulates at full precision; rounding only happens at the explicit
requantization points (floor right-shift), so partial sums can be added in
any order without changing the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Arith:
    mode: str = "fixed"
    frac_bits: int = 8

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "float"):
            raise ValueError(f"unknown arithmetic mode {self.mode!r}")

    @property
    def fixed(self) -> bool:
        return self.mode == "fixed"

    def quantize(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if not self.fixed:
            return arr.copy()
        scale = 1 << self.frac_bits
        out = np.empty(arr.shape, dtype=object)
        flat = out.reshape(-1)
        for k, v in enumerate(arr.reshape(-1)):
            flat[k] = int(round(v * scale))
        return out

    def to_float(self, values) -> np.ndarray:
        arr = np.asarray(values)
        if not self.fixed:
            return arr.astype(float)
        return np.vectorize(lambda v: v / (1 << self.frac_bits), otypes=[float])(arr) \
            if arr.size else arr.astype(float)

    def zeros(self, n: int) -> np.ndarray:
        if self.fixed:
            return np.array([0] * n, dtype=object)
        return np.zeros(n)

    def shift(self, values, bits: int) -> np.ndarray:
        """Requantize by dropping ``bits`` fractional bits (floor); no-op in float mode."""
        arr = np.asarray(values)
        if not self.fixed or bits == 0:
            return arr.copy()
        return np.array([int(v) >> bits for v in arr.reshape(-1)], dtype=object).reshape(arr.shape)

    def lshift(self, values, bits: int) -> np.ndarray:
        arr = np.asarray(values)
        if not self.fixed or bits == 0:
            return arr.copy()
        return np.array([int(v) << bits for v in arr.reshape(-1)], dtype=object).reshape(arr.shape)

    def scale_int(self, s: float):
        """LoRA scale as a multiplier (fixed: frac_bits fractional bits)."""
        return int(round(s * (1 << self.frac_bits))) if self.fixed else float(s)

    # LoRA-targeted products carry 4F fractional bits before requantization,
    # plain products 2F; the shift amounts below bring both back to F.
    def base_shift(self, with_lora: bool) -> int:
        return 2 * self.frac_bits if with_lora else 0

    def output_shift(self, with_lora: bool) -> int:
        return 3 * self.frac_bits if with_lora else self.frac_bits

    def score_scale(self, head_dim: int):
        """1/sqrt(head_dim); fixed: F fractional bits."""
        if self.fixed:
            return int(round((1 << self.frac_bits) / math.sqrt(head_dim)))
        return 1.0 / math.sqrt(head_dim)

    def scaled_scores(self, raw, head_dim: int) -> np.ndarray:
        """Raw Q.K dot products (2F) -> scaled logits (F)."""
        c = self.score_scale(head_dim)
        arr = np.asarray(raw)
        if self.fixed:
            return self.shift(arr * c, 2 * self.frac_bits)
        return arr * c

    def softmax(self, logits) -> np.ndarray:
        """Softmax of one row of scaled logits."""
        z = np.asarray(logits)
        if not self.fixed:
            e = np.exp(z - z.max())
            return e / e.sum()
        f = self.frac_bits
        m = max(int(v) for v in z)
        e = [int(round(math.exp((int(v) - m) / (1 << f)) * (1 << f))) for v in z]
        total = sum(e)
        return np.array([(v << f) // total for v in e], dtype=object)
