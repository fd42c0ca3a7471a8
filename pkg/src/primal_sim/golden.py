"""Functional reference for one attention layer with LoRA.

Matrices follow the ``y = W @ x`` convention: ``W`` is ``d_out x d_in`` and
token activations are row vectors of a token-major ``seq x hidden`` array.
All functions accept either float arrays (``Arith("float")``) or integer
object arrays (``Arith("fixed")``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LoraSpec, ModelSpec
from .numerics import Arith


class ShapeError(ValueError):
    pass


@dataclass
class LayerWeights:
    """Base weights plus LoRA factors ``(B, A)`` keyed by target name."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    O: np.ndarray
    lora: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    ffn: dict[str, np.ndarray] = field(default_factory=dict)

    def matrix(self, name: str) -> np.ndarray:
        return getattr(self, name) if name in ("Q", "K", "V", "O") else self.ffn[name]


def random_layer(model: ModelSpec, arith: Arith, seed: int, amplitude: float = 0.5,
                 with_ffn: bool = False) -> LayerWeights:
    """Seeded synthetic weights on the fixed-point grid (exactly representable)."""
    rng = np.random.default_rng(seed)
    d = model.hidden_dim

    def draw(rows, cols):
        grid = 1 << arith.frac_bits
        vals = np.round(rng.uniform(-amplitude, amplitude, size=(rows, cols)) * grid) / grid
        return arith.quantize(vals)

    w = {name: draw(d, d) for name in ("Q", "K", "V", "O")}
    lora = {}
    r = model.lora.rank
    for t in model.lora.targets if r > 0 else ():
        lora[t] = (draw(d, r), draw(r, d))
    ffn = {}
    if with_ffn:
        for name, dout, din in model.layer_matrix_shapes()[4:]:
            ffn[name] = draw(dout, din)
    return LayerWeights(lora=lora, ffn=ffn, **w)


def random_tokens(n: int, dim: int, arith: Arith, seed: int, amplitude: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    grid = 1 << arith.frac_bits
    vals = np.round(rng.uniform(-amplitude, amplitude, size=(n, dim)) * grid) / grid
    return arith.quantize(vals)


def lora_smac(W, B, A, s: float, x, arith: Arith = Arith("float")) -> np.ndarray:
    """``W x + s B (A x)`` with the two paths evaluated separately, then summed."""
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"W {W.shape} incompatible with x {x.shape}")
    has_lora = B is not None and A is not None and np.asarray(B).size > 0 and np.asarray(A).size > 0
    base = W.dot(x)
    if not has_lora:
        return arith.shift(base, arith.output_shift(False))
    B = np.asarray(B)
    A = np.asarray(A)
    if B.shape[0] != W.shape[0] or A.shape[1] != W.shape[1] or B.shape[1] != A.shape[0]:
        raise ShapeError(f"LoRA factors B {B.shape}, A {A.shape} do not match W {W.shape}")
    low_rank = B.dot(A.dot(x)) * arith.scale_int(s)
    merged = arith.lshift(base, arith.base_shift(True)) + low_rank
    return arith.shift(merged, arith.output_shift(True))


def project(weights: LayerWeights, name: str, scale: float, X, arith: Arith) -> np.ndarray:
    """Apply matrix ``name`` (with its LoRA factors, if any) to every token row."""
    W = weights.matrix(name)
    B, A = weights.lora.get(name, (None, None))
    return np.stack([lora_smac(W, B, A, scale, x, arith) for x in np.asarray(X)])


def _check_tokens(X, model: ModelSpec) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.hidden_dim:
        raise ShapeError(f"expected tokens x {model.hidden_dim}, got {X.shape}")
    return X


def attend(q_row, K, V, query_pos: int, model: ModelSpec, arith: Arith) -> np.ndarray:
    """Context row for one query against cached keys ``K[: query_pos + 1]``.

    Only keys at positions <= ``query_pos`` are visible (causal mask).
    """
    hd = model.head_dim
    out = []
    for h in range(model.num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        raw = np.array([np.asarray(K[j])[sl].dot(np.asarray(q_row)[sl]) for j in range(query_pos + 1)],
                       dtype=object if arith.fixed else float)
        p = arith.softmax(arith.scaled_scores(raw, hd))
        ctx = sum(p[j] * np.asarray(V[j])[sl] for j in range(query_pos + 1))
        out.append(arith.shift(ctx, arith.frac_bits))
    return np.concatenate(out)


def attention_forward(weights: LayerWeights, lora: LoraSpec, X, model: ModelSpec,
                      arith: Arith = Arith("float")) -> np.ndarray:
    X = _check_tokens(X, model)
    Q = project(weights, "Q", lora.scale, X, arith)
    K = project(weights, "K", lora.scale, X, arith)
    V = project(weights, "V", lora.scale, X, arith)
    ctx = np.stack([attend(Q[t], K, V, t, model, arith) for t in range(X.shape[0])])
    return project(weights, "O", lora.scale, ctx, arith)


@dataclass
class KVCache:
    K: list = field(default_factory=list)
    V: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.K)


def prefill_cache(weights: LayerWeights, lora: LoraSpec, X, model: ModelSpec,
                  arith: Arith = Arith("float")) -> KVCache:
    X = _check_tokens(X, model)
    K = project(weights, "K", lora.scale, X, arith)
    V = project(weights, "V", lora.scale, X, arith)
    return KVCache(K=list(K), V=list(V))


def decode_step(weights: LayerWeights, lora: LoraSpec, cache: KVCache, x, model: ModelSpec,
                arith: Arith = Arith("float")) -> tuple[np.ndarray, KVCache]:
    """One decode token: attends over the cache plus itself; returns a new, longer cache."""
    x = np.asarray(x)
    q, k, v = (lora_smac(weights.matrix(n), *weights.lora.get(n, (None, None)), lora.scale, x, arith)
               for n in ("Q", "K", "V"))
    new = KVCache(K=list(cache.K) + [k], V=list(cache.V) + [v])
    ctx = attend(q, new.K, new.V, len(cache), model, arith)
    B, A = weights.lora.get("O", (None, None))
    return lora_smac(weights.O, B, A, lora.scale, ctx, arith), new


def ffn_forward(weights: LayerWeights, X, model: ModelSpec) -> np.ndarray:
    """Float FFN: SiLU-gated when the model has a gate matrix, ReLU otherwise."""
    X = np.asarray(X, dtype=float)
    up = X @ np.asarray(weights.ffn["FFN_UP"], dtype=float).T
    if "FFN_GATE" in weights.ffn:
        g = X @ np.asarray(weights.ffn["FFN_GATE"], dtype=float).T
        h = g / (1.0 + np.exp(-g)) * up
    else:
        h = np.maximum(up, 0.0)
    return h @ np.asarray(weights.ffn["FFN_DOWN"], dtype=float).T
