"""Spatial mapping of partitioned weight matrices onto the PE mesh.

Each matrix is cut into ``rram_rows x rram_cols`` tiles, one tile per PE,
and the tile grid is reshaped into a rectangular region.  Candidate plans
vary three things:

* intra-matrix shape: the region's ``(height, width)``; every factor pair of
  the tile count that fits the mesh window.  Only when no exact pair fits are
  ragged shapes ``(ceil(n / w), w)`` used.
* inter-matrix shape: column-wise shelf packing in the fixed matrix order
  (Q, K, V, O, then FFN).  Regions stack downward in a shelf; each later
  matrix may force a new shelf to the right.
* row/column ordering: tile ``(i, j)`` is laid out along the region either
  row-major (``k = i*tc + j`` filled across rows) or column-major
  (``k = j*tr + i`` filled down columns).

The objective is hop-weighted flit volume of one layer's dataflow (see
:func:`traffic`).  Ties break on the lexicographic list of
``(origin x, origin y, ordering)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator

import numpy as np

from .collectives import KvLayout, SpanningTree, build_tree, kv_capacity_entries, manhattan
from .config import HardwareSpec, ModelSpec

Coord = tuple[int, int]
ORDERS = ("row", "col")
ATTENTION = ("Q", "K", "V", "O")
EXHAUSTIVE_LIMIT = 60_000


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    col_start: int
    col_end: int
    row_start: int
    row_end: int

    def __post_init__(self) -> None:
        if self.col_end <= self.col_start or self.row_end <= self.row_start:
            raise ValueError(f"empty region {self}")

    @property
    def width(self) -> int:
        return self.col_end - self.col_start

    @property
    def height(self) -> int:
        return self.row_end - self.row_start

    @property
    def origin(self) -> Coord:
        return (self.col_start, self.row_start)

    def cells(self) -> list[Coord]:
        return [(x, y) for y in range(self.row_start, self.row_end)
                for x in range(self.col_start, self.col_end)]

    def overlaps(self, other: "Region") -> bool:
        return not (self.col_end <= other.col_start or other.col_end <= self.col_start
                    or self.row_end <= other.row_start or other.row_end <= self.row_start)

    def within(self, cols: int, rows: int) -> bool:
        return self.col_start >= 0 and self.row_start >= 0 and self.col_end <= cols and self.row_end <= rows


@dataclass(frozen=True)
class MatrixSpec:
    name: str
    d_out: int
    d_in: int


@dataclass(frozen=True)
class LayerSpec:
    matrices: tuple
    num_heads: int
    head_dim: int
    lora_rank: int = 0
    lora_targets: tuple = ()

    @property
    def names(self) -> tuple:
        return tuple(m.name for m in self.matrices)


def layer_spec(model: ModelSpec, include_ffn: bool = True, part: str | None = None) -> LayerSpec:
    """``part`` selects ``"attention"`` or ``"ffn"`` matrices; default all."""
    shapes = model.layer_matrix_shapes()
    if part == "attention" or not include_ffn:
        shapes = shapes[:4]
    elif part == "ffn":
        shapes = shapes[4:]
    return LayerSpec(tuple(MatrixSpec(*s) for s in shapes), model.num_heads, model.head_dim,
                     model.lora.rank, tuple(model.lora.targets) if model.lora.rank else ())


def tile_matrix(d_out: int, d_in: int, rram_rows: int, rram_cols: int) -> tuple[int, int]:
    if min(d_out, d_in, rram_rows, rram_cols) <= 0:
        raise ValueError("dimensions must be positive")
    return -(-d_out // rram_rows), -(-d_in // rram_cols)


def candidate_shapes(n_tiles: int, max_rows: int, max_cols: int) -> list[tuple[int, int]]:
    """(height, width) choices for a region holding ``n_tiles`` tiles."""
    exact = [(h, n_tiles // h) for h in range(1, n_tiles + 1)
             if n_tiles % h == 0 and h <= max_rows and n_tiles // h <= max_cols]
    if exact:
        return exact
    ragged = []
    for w in range(1, max_cols + 1):
        h = -(-n_tiles // w)
        if h <= max_rows and (h, w) not in ragged and (h - 1) * w < n_tiles:
            ragged.append((h, w))
    return ragged


def layout_tiles(grid: tuple[int, int], region: Region, order: str) -> dict:
    """Map tile (i, j) -> PE coordinate within ``region``."""
    tr, tc = grid
    h, w = region.height, region.width
    sites = {}
    for i in range(tr):
        for j in range(tc):
            if order == "row":
                k = i * tc + j
                dy, dx = divmod(k, w)
            else:
                k = j * tr + i
                dx, dy = divmod(k, h)
            sites[(i, j)] = (region.col_start + dx, region.row_start + dy)
    return sites


@dataclass(frozen=True)
class MatrixPlacement:
    name: str
    d_out: int
    d_in: int
    grid: tuple
    region: Region
    order: str
    tile_sites: tuple  # ((i, j), (x, y)) pairs, tile order

    @property
    def sites(self) -> dict:
        return dict(self.tile_sites)

    @property
    def routers(self) -> frozenset:
        return frozenset(c for _, c in self.tile_sites)


@dataclass(frozen=True)
class LoraPlacement:
    """LoRA factors ride on the base matrix's region.

    PE (i, j) stores ``A[:, cols_j]`` and ``B[rows_i, :]`` so it can form
    ``B_i (A_j x_j)`` locally; A shards are replicated down each tile column.
    """

    target: str
    region: Region
    rank: int
    bytes_per_pe: tuple  # ((i, j), bytes)

    @property
    def max_bytes(self) -> int:
        return max((b for _, b in self.bytes_per_pe), default=0)

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.bytes_per_pe)


@dataclass(frozen=True)
class DataflowSummary:
    """Traffic pattern the cost is evaluated against.

    ``n_tokens`` rows are processed starting at sequence ``position``.
    Prefill computes Q.K for every cached key (the mask is applied in the
    softmax); decode processes a single token.
    """

    n_tokens: int = 4
    phase: str = "prefill"
    position: int = 0

    @property
    def n_keys(self) -> int:
        return self.position + self.n_tokens

    @property
    def tokens(self) -> range:
        return range(self.position, self.position + self.n_tokens)


@dataclass(frozen=True)
class BlockGroup:
    """Tiles sharing output block ``i``; their partial sums meet at ``root``."""

    index: int
    rows: int
    members: tuple
    root: Coord
    tree: SpanningTree


@dataclass(frozen=True)
class MatrixGeometry:
    placement: MatrixPlacement
    entry: Coord
    bcast_tree: SpanningTree
    groups: tuple

    @property
    def roots(self) -> list[Coord]:
        return [g.root for g in self.groups]


def _centroid(points) -> tuple[float, float]:
    pts = list(points)
    return (sum(p[0] for p in pts) / len(pts), sum(p[1] for p in pts) / len(pts))


def _nearest(cands, target) -> Coord:
    return min(cands, key=lambda c: (abs(c[0] - target[0]) + abs(c[1] - target[1]), c[1], c[0]))


def _group_root(members) -> Coord:
    """Member with the smallest eccentricity, then smallest total distance, then (y, x)."""
    pts = np.array(members)
    dist = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
    ecc = dist.max(axis=1).tolist()
    tot = dist.sum(axis=1).tolist()
    k = min(range(len(members)), key=lambda i: (ecc[i], tot[i], members[i][1], members[i][0]))
    return tuple(members[k])


def _bbox_cells(points) -> list[Coord]:
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return [(x, y) for y in range(min(ys), max(ys) + 1) for x in range(min(xs), max(xs) + 1)]


@dataclass
class MappingPlan:
    mesh: tuple  # (cols, rows)
    hw: HardwareSpec
    layer: LayerSpec
    placements: tuple
    input_site: Coord = (0, 0)
    cost: float = 0.0
    summary: DataflowSummary = field(default_factory=DataflowSummary)

    def placement(self, name: str) -> MatrixPlacement:
        for p in self.placements:
            if p.name == name:
                return p
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(p.name == name for p in self.placements)

    @property
    def names(self) -> tuple:
        return tuple(p.name for p in self.placements)

    @cached_property
    def geometry(self) -> dict[str, MatrixGeometry]:
        geo: dict[str, MatrixGeometry] = {}
        for p in self.placements:
            feeder = self._feeder(p.name, geo)
            geo[p.name] = self._matrix_geometry(p, feeder)
        return geo

    def _feeder(self, name: str, geo: dict) -> tuple[float, float]:
        if name == "O" and "V" in geo:
            return _centroid(self.kv_sites("V"))
        if name in ("FFN_GATE", "FFN_UP") and "O" in geo:
            return _centroid(geo["O"].roots)
        if name == "FFN_DOWN":
            src = "FFN_GATE" if "FFN_GATE" in geo else "FFN_UP"
            if src in geo:
                return _centroid(geo[src].roots)
        return self.input_site

    def _matrix_geometry(self, p: MatrixPlacement, feeder) -> MatrixGeometry:
        sites = p.sites
        within = p.region.cells()
        entry = _nearest(sorted(p.routers, key=lambda c: (c[1], c[0])), feeder)
        bcast = build_tree(p.routers, entry, self.mesh, "broadcast", within=within)
        tr, tc = p.grid
        R = self.hw.rram_rows
        groups = []
        for i in range(tr):
            members = tuple(sites[(i, j)] for j in range(tc))
            root = _group_root(members)
            # Group members sit in a rectangle, so BFS inside their bounding box
            # yields the same pruned tree as BFS over the whole region.
            tree = build_tree(members, root, self.mesh, "reduction", within=_bbox_cells(members))
            rows = min(R, p.d_out - i * R)
            groups.append(BlockGroup(i, rows, members, root, tree))
        return MatrixGeometry(p, entry, bcast, tuple(groups))

    def kv_sites(self, name: str) -> list[Coord]:
        return sorted(self.placement(name).routers, key=lambda c: (c[1], c[0]))

    def kv_layout(self, name: str) -> KvLayout:
        cap = kv_capacity_entries(self.hw.scratchpad_bytes, self.hw.kv_reserve_fraction,
                                  self.layer.head_dim, self.hw.act_bits)
        return KvLayout(tuple(self.kv_sites(name)), cap, self.layer.num_heads)

    @property
    def ctx_home(self) -> Coord:
        return self.geometry["O"].entry

    def softmax_home(self, token: int) -> Coord:
        sites = self.kv_sites("K")
        return sites[token % len(sites)]

    @cached_property
    def intermediates(self) -> dict[str, frozenset]:
        """Scratchpad footprint of each projection output: its weight region's routers."""
        out = {p.name: frozenset(p.region.cells()) for p in self.placements}
        if self.has("K") and self.has("V"):
            out["KV"] = frozenset(self.kv_sites("K")) | frozenset(self.kv_sites("V"))
        return out

    @cached_property
    def lora(self) -> dict[str, LoraPlacement]:
        out = {}
        r = self.layer.lora_rank
        if r <= 0:
            return out
        R, C = self.hw.rram_rows, self.hw.rram_cols
        bpw = self.hw.weight_bits / 8
        for p in self.placements:
            if p.name not in self.layer.lora_targets:
                continue
            per = []
            for (i, j), _ in p.tile_sites:
                rows = min(R, p.d_out - i * R)
                cols = min(C, p.d_in - j * C)
                per.append(((i, j), int(math.ceil(r * (rows + cols) * bpw))))
            out[p.name] = LoraPlacement(p.name, p.region, r, tuple(per))
        return out

    def to_dict(self) -> dict:
        return {
            "mesh": list(self.mesh),
            "input_site": list(self.input_site),
            "cost": self.cost,
            "matrices": [
                {"name": p.name, "d_out": p.d_out, "d_in": p.d_in, "grid": list(p.grid),
                 "region": [p.region.col_start, p.region.col_end, p.region.row_start, p.region.row_end],
                 "order": p.order,
                 "tiles": [[i, j, x, y] for (i, j), (x, y) in p.tile_sites]}
                for p in self.placements
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


# --- cost model ------------------------------------------------------------

def _add(acc: dict, phase: str, flits: int, hops: int) -> None:
    f, fh = acc.get(phase, (0, 0))
    acc[phase] = (f + flits, fh + flits * hops)


def traffic(plan: MappingPlan, summary: DataflowSummary | None = None) -> dict[str, tuple[int, int]]:
    """Per-phase ``(flits injected, flit-hops)`` for one layer's dataflow.

    Local moves (same router) carry no flits.  Broadcasts inject a payload
    once and traverse every tree edge; reductions send each partial sum one
    tree edge toward the group root.
    """
    s = summary or plan.summary
    hw = plan.hw
    fa = lambda n: hw.flits(n, hw.act_bits)  # noqa: E731
    fp = lambda n: hw.flits(n, hw.psum_bits)  # noqa: E731
    geo = plan.geometry
    acc: dict = {}
    T = s.n_tokens
    heads = plan.layer.num_heads
    attention = all(n in geo for n in ("Q", "K", "V"))

    def reduce_flows(g: MatrixGeometry, phase: str, times: int):
        for grp in g.groups:
            for _ in grp.tree.edges:
                _add(acc, phase, fp(grp.rows) * times, 1)

    def bcast(g: MatrixGeometry, n_elems: int, phase: str, times: int):
        edges = len(g.bcast_tree.edges)
        f = fa(n_elems) * times
        if edges:
            _add(acc, phase, f, edges)

    def send(src, dst, flits, phase):
        if src != dst:
            _add(acc, phase, flits, manhattan(src, dst))

    for m in plan.layer.matrices:
        g = geo.get(m.name)
        if g is None:
            continue
        if m.name == "O" and attention:
            continue  # fed by the context reduction below
        if m.name in ("FFN_GATE", "FFN_UP") and "O" in geo:
            src_groups = geo["O"].groups
        elif m.name == "FFN_DOWN" and ("FFN_GATE" in geo or "FFN_UP" in geo):
            src_groups = geo["FFN_GATE" if "FFN_GATE" in geo else "FFN_UP"].groups
        else:
            src_groups = None
        phase_in = "ffn_in" if m.name.startswith("FFN") else "bcast_in"
        if src_groups is None:
            send(plan.input_site, g.entry, fa(m.d_in) * T, phase_in)
        else:
            for grp in src_groups:
                send(grp.root, g.entry, fa(grp.rows) * T, phase_in)
        bcast(g, m.d_in, phase_in, T)
        reduce_flows(g, "ffn_reduce" if m.name.startswith("FFN") else "reduce", T)

    if "FFN_GATE" in geo and "FFN_UP" in geo:
        for gu, gg in zip(geo["FFN_UP"].groups, geo["FFN_GATE"].groups):
            send(gu.root, gg.root, fa(gu.rows) * T, "ffn_combine")

    if attention:
        K_sites = plan.kv_sites("K")
        V_sites = plan.kv_sites("V")
        gQ, gK, gV = geo["Q"], geo["K"], geo["V"]
        for t in s.tokens:
            for g, sites in ((gK, K_sites), (gV, V_sites)):
                site = sites[t % len(sites)]
                for grp in g.groups:
                    send(grp.root, site, fa(grp.rows), "kv_store")
        n_keys = s.n_keys
        for t in s.tokens:
            home = plan.softmax_home(t)
            k_count: dict = {}
            for key in range(n_keys):
                site = K_sites[key % len(K_sites)]
                k_count[site] = k_count.get(site, 0) + 1
            for site, n in k_count.items():
                for grp in gQ.groups:
                    send(grp.root, site, fa(grp.rows), "qk")
                send(site, home, fp(n * heads), "scores")
            v_count: dict = {}
            for key in range(t + 1):
                site = V_sites[key % len(V_sites)]
                v_count[site] = v_count.get(site, 0) + 1
            for site, n in v_count.items():
                send(home, site, fa(n * heads), "probs")
                if "O" in geo:
                    send(site, plan.ctx_home, fp(plan.placement("V").d_out), "ctx")
        if "O" in geo:
            gO = geo["O"]
            bcast(gO, plan.placement("O").d_in, "bcast_out", T)
            reduce_flows(gO, "reduce_out", T)
    return acc


PHASE_GROUPS = {
    "bcast_in": "broadcast", "reduce": "reduce", "kv_store": "attention", "qk": "attention",
    "scores": "attention", "probs": "attention", "ctx": "attention", "bcast_out": "output",
    "reduce_out": "output", "ffn_in": "ffn", "ffn_reduce": "ffn", "ffn_combine": "ffn",
}


def cost(plan: MappingPlan, summary: DataflowSummary | None = None) -> float:
    """Hop-weighted flit volume (sum of flits x Manhattan hops over every flow)."""
    return float(sum(fh for _, fh in traffic(plan, summary).values()))


# --- search ----------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    col_start: int
    col_end: int
    rows: int


def _pack(shapes, breaks, window: Window) -> list[Region] | None:
    x0, y, shelf_w = window.col_start, 0, 0
    regions = []
    for k, (h, w) in enumerate(shapes):
        if k > 0 and (breaks[k - 1] or y + h > window.rows):
            x0 += shelf_w
            y, shelf_w = 0, 0
        if h > window.rows or x0 + w > window.col_end:
            return None
        regions.append(Region(x0, x0 + w, y, y + h))
        y += h
        shelf_w = max(shelf_w, w)
    return regions


def _make_plan(layer: LayerSpec, hw: HardwareSpec, regions, orders, summary, input_site) -> MappingPlan:
    placements = []
    for m, reg, order in zip(layer.matrices, regions, orders):
        grid = tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols)
        sites = layout_tiles(grid, reg, order)
        placements.append(MatrixPlacement(m.name, m.d_out, m.d_in, grid, reg, order,
                                          tuple(sorted(sites.items()))))
    return MappingPlan((hw.mesh_cols, hw.mesh_rows), hw, layer, tuple(placements), input_site,
                       summary=summary)


def _tie_key(plan: MappingPlan) -> tuple:
    return tuple((p.region.col_start, p.region.row_start, ORDERS.index(p.order)) for p in plan.placements)


def enumerate_candidates(layer: LayerSpec, hw: HardwareSpec, window: Window | None = None
                         ) -> Iterator[tuple[list[Region], tuple[str, ...]]]:
    """Every distinct (regions, orderings) in the documented candidate space."""
    window = window or Window(0, hw.mesh_cols, hw.mesh_rows)
    per_shapes = []
    for m in layer.matrices:
        tr, tc = tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols)
        per_shapes.append(candidate_shapes(tr * tc, window.rows, window.col_end - window.col_start))
    n = len(layer.matrices)
    seen = set()
    for shapes in itertools.product(*per_shapes):
        for breaks in itertools.product((False, True), repeat=max(n - 1, 0)):
            regions = _pack(shapes, breaks, window)
            if regions is None:
                continue
            key = tuple(regions)
            if key in seen:
                continue
            seen.add(key)
            for orders in itertools.product(ORDERS, repeat=n):
                yield regions, orders


def _space_size(layer: LayerSpec, hw: HardwareSpec, window: Window) -> int:
    size = 2 ** max(len(layer.matrices) - 1, 0) * 2 ** len(layer.matrices)
    for m in layer.matrices:
        tr, tc = tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols)
        size *= max(1, len(candidate_shapes(tr * tc, window.rows, window.col_end - window.col_start)))
    return size


def _feasible_packings(per_shapes, window: Window, limit: int) -> list[list[Region]]:
    """Depth-first search for shelf packings that fit; at most ``limit`` results."""
    found: list = []

    def dfs(k, x0, y, shelf_w, regions):
        if len(found) >= limit:
            return
        if k == len(per_shapes):
            found.append(list(regions))
            return
        for h, w in per_shapes[k]:
            if k == 0:
                moves = [(x0, 0, 0)]
            else:
                moves = [(x0, y, shelf_w)] if y + h <= window.rows else []
                moves.append((x0 + shelf_w, 0, 0))
            for nx, ny, nw in moves:
                if ny + h > window.rows or nx + w > window.col_end:
                    continue
                regions.append(Region(nx, nx + w, ny, ny + h))
                dfs(k + 1, nx, ny + h, max(nw, w), regions)
                regions.pop()

    dfs(0, window.col_start, 0, 0, [])
    return found


def map_layer(layer: LayerSpec, hw: HardwareSpec, summary: DataflowSummary | None = None,
              window: Window | None = None, input_site: Coord | None = None) -> MappingPlan:
    """Lowest-cost plan in the candidate space (exhaustive when the space is small).

    Raises :class:`CapacityError` when the layer's tiles cannot be placed.
    """
    summary = summary or DataflowSummary()
    window = window or Window(0, hw.mesh_cols, hw.mesh_rows)
    input_site = input_site if input_site is not None else (window.col_start, 0)
    width = window.col_end - window.col_start
    total = sum(math.prod(tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols))
                for m in layer.matrices)
    if total > width * window.rows:
        raise CapacityError(f"layer needs {total} PEs, window has {width * window.rows}")

    best = None

    def consider(regions, orders):
        nonlocal best
        plan = _make_plan(layer, hw, regions, orders, summary, input_site)
        plan.cost = cost(plan, summary)
        key = (round(plan.cost, 6), _tie_key(plan))
        if best is None or key < best[0]:
            best = (key, plan)

    if _space_size(layer, hw, window) <= EXHAUSTIVE_LIMIT:
        for regions, orders in enumerate_candidates(layer, hw, window):
            consider(regions, orders)
    else:
        best = _heuristic_search(layer, hw, summary, window, input_site)
    if best is None:
        raise CapacityError(f"no shelf packing of {layer.names} fits a {width}x{window.rows} window")
    return best[1]


def _heuristic_search(layer, hw, summary, window, input_site):
    """Best of a bounded set of feasible packings, then coordinate descent on orderings."""
    per_shapes = []
    for m in layer.matrices:
        tr, tc = tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols)
        per_shapes.append(candidate_shapes(tr * tc, window.rows, window.col_end - window.col_start))
    packings = _feasible_packings(per_shapes, window, limit=64)
    if not packings:
        return None
    n = len(layer.matrices)
    best = None

    def evaluate(regions, orders):
        plan = _make_plan(layer, hw, regions, orders, summary, input_site)
        plan.cost = cost(plan, summary)
        return (round(plan.cost, 6), _tie_key(plan)), plan

    for regions in packings:
        cand = evaluate(regions, ("row",) * n)
        if best is None or cand[0] < best[0]:
            best = cand
    improved = True
    while improved:
        improved = False
        regions = [p.region for p in best[1].placements]
        orders = [p.order for p in best[1].placements]
        for k in range(n):
            flipped = list(orders)
            flipped[k] = "col" if orders[k] == "row" else "row"
            cand = evaluate(regions, tuple(flipped))
            if cand[0] < best[0]:
                best = cand
                improved = True
                break
    return best


def naive_plan(layer: LayerSpec, hw: HardwareSpec, summary: DataflowSummary | None = None,
               input_site: Coord = (0, 0)) -> MappingPlan:
    """Baseline: tiles of every matrix laid consecutively in row-major PE order."""
    summary = summary or DataflowSummary()
    cols = hw.mesh_cols
    k = 0
    placements = []
    for m in layer.matrices:
        grid = tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols)
        sites = {}
        for i in range(grid[0]):
            for j in range(grid[1]):
                y, x = divmod(k, cols)
                if y >= hw.mesh_rows:
                    raise CapacityError("layer does not fit the mesh")
                sites[(i, j)] = (x, y)
                k += 1
        xs = [c[0] for c in sites.values()]
        ys = [c[1] for c in sites.values()]
        region = Region(min(xs), max(xs) + 1, min(ys), max(ys) + 1)
        placements.append(MatrixPlacement(m.name, m.d_out, m.d_in, grid, region, "row",
                                          tuple(sorted(sites.items()))))
    plan = MappingPlan((hw.mesh_cols, hw.mesh_rows), hw, layer, tuple(placements), input_site,
                       summary=summary)
    plan.cost = cost(plan, summary)
    return plan


def check_plan(plan: MappingPlan) -> list[str]:
    """Invariant violations of a plan (empty list when valid)."""
    problems = []
    hw = plan.hw
    cols, rows = plan.mesh
    seen: dict = {}
    for p in plan.placements:
        if not p.region.within(cols, rows):
            problems.append(f"{p.name}: region {p.region} outside mesh")
        if p.region.height * p.region.width * hw.rram_rows * hw.rram_cols < p.d_out * p.d_in:
            problems.append(f"{p.name}: region too small")
        for (i, j), c in p.tile_sites:
            if c in seen and seen[c] != p.name:
                problems.append(f"PE {c} hosts {seen[c]} and {p.name}")
            seen[c] = p.name
            rows_i = min(hw.rram_rows, p.d_out - i * hw.rram_rows)
            cols_j = min(hw.rram_cols, p.d_in - j * hw.rram_cols)
            if rows_i * cols_j > hw.rram_rows * hw.rram_cols:
                problems.append(f"{p.name}: tile {(i, j)} exceeds crossbar")
    for a, b in itertools.combinations(plan.placements, 2):
        if a.region.overlaps(b.region):
            problems.append(f"regions of {a.name} and {b.name} overlap")
    for name, routers in plan.intermediates.items():
        if name in plan.names and routers != frozenset(plan.placement(name).region.cells()):
            problems.append(f"intermediate {name} not co-located")
    sram_bytes = hw.sram_rows * hw.sram_cols * hw.weight_bits // 8
    for name, lp in plan.lora.items():
        if lp.max_bytes > sram_bytes:
            problems.append(f"LoRA {name}: {lp.max_bytes} B per PE exceeds SRAM {sram_bytes} B")
        need = lp.rank * (plan.placement(name).d_in + plan.placement(name).d_out) * hw.weight_bits / 8
        if len(lp.bytes_per_pe) * sram_bytes < need:
            problems.append(f"LoRA {name}: region SRAM too small")
    return problems


# --- multi-CT allocation ---------------------------------------------------

@dataclass(frozen=True)
class Piece:
    """One CT-resident slice of a layer part (attention or FFN)."""

    layer: int
    part: str
    index: int
    count: int
    spec: LayerSpec


@dataclass
class CtAssignment:
    cts: list = field(default_factory=list)  # list of lists of (Piece, MappingPlan)

    @property
    def n_cts(self) -> int:
        return len(self.cts)

    def layers_of(self, ct: int) -> list[int]:
        return sorted({piece.layer for piece, _ in self.cts[ct]})

    def tiles_of(self, ct: int) -> int:
        return sum(len(p.tile_sites) for _, plan in self.cts[ct] for p in plan.placements)


def _split_rows(spec: LayerSpec, parts: int, index: int) -> LayerSpec:
    mats = []
    for m in spec.matrices:
        lo = m.d_out * index // parts
        hi = m.d_out * (index + 1) // parts
        mats.append(MatrixSpec(m.name, hi - lo, m.d_in))
    return LayerSpec(tuple(mats), spec.num_heads, spec.head_dim, spec.lora_rank, spec.lora_targets)


def _fits_ct(spec: LayerSpec, hw: HardwareSpec) -> bool:
    tiles = sum(math.prod(tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols))
                for m in spec.matrices)
    return tiles <= hw.pe_count


_PLAN_CACHE: dict = {}


def _shared_plan(spec: LayerSpec, hw: HardwareSpec, summary: DataflowSummary, window: Window):
    """Mapping is independent of the LoRA targets, so search once per bare shape."""
    bare = replace(spec, lora_rank=0, lora_targets=())
    key = (bare, hw, summary, window)
    if key not in _PLAN_CACHE:
        if len(_PLAN_CACHE) > 256:
            _PLAN_CACHE.clear()
        try:
            _PLAN_CACHE[key] = map_layer(bare, hw, summary, window)
        except CapacityError:
            _PLAN_CACHE[key] = None
    plan = _PLAN_CACHE[key]
    return None if plan is None else replace(plan, layer=spec)


def split_across_cts(model: ModelSpec, hw: HardwareSpec, summary: DataflowSummary | None = None,
                     parts: tuple[str, ...] = ("attention", "ffn")) -> CtAssignment:
    """Assign layers, in order, to consecutive CTs.

    Each layer contributes an attention part and an FFN part.  A part that
    cannot fit one CT is split into output-dimension halves (repeatedly);
    pieces are placed greedily into the remaining columns of the current CT.
    """
    summary = summary or DataflowSummary()
    cache: dict = {}

    def plan_for(spec: LayerSpec, window: Window):
        key = (spec, window)
        if key not in cache:
            cache[key] = _shared_plan(spec, hw, summary, window)
        return cache[key]

    pieces: list[Piece] = []
    for layer in range(model.num_layers):
        for part in parts:
            spec = layer_spec(model, part=part)
            n = 1
            while not (_fits_ct(_split_rows(spec, n, 0), hw)
                       and plan_for(_split_rows(spec, n, 0), Window(0, hw.mesh_cols, hw.mesh_rows))):
                n *= 2
                if n > 1 << 12:
                    raise CapacityError(f"layer {layer} {part} cannot be split to fit a CT")
            pieces.extend(Piece(layer, part, k, n, _split_rows(spec, n, k)) for k in range(n))

    out = CtAssignment()
    current: list = []
    x0 = 0
    for piece in pieces:
        plan = plan_for(piece.spec, Window(x0, hw.mesh_cols, hw.mesh_rows)) if x0 < hw.mesh_cols else None
        if plan is None:
            out.cts.append(current)
            current, x0 = [], 0
            plan = plan_for(piece.spec, Window(0, hw.mesh_cols, hw.mesh_rows))
        current.append((piece, plan))
        x0 = max(p.region.col_end for p in plan.placements)
        if len(out.cts) + 1 > hw.max_cts:
            raise CapacityError(f"model needs more than {hw.max_cts} CTs")
    if current:
        out.cts.append(current)
    return out
