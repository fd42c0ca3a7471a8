"""Independent oracles shared by the unit tests and the acceptance suite.

Nothing here calls the search or scheduling code under test; the mapper
oracle only borrows the placement types and the traffic model so that
costs are compared on the same scale.
"""

import itertools
import math
import random

from primal_sim.config import HardwareSpec
from primal_sim.mapper import LayerSpec, MappingPlan, MatrixPlacement, MatrixSpec, Region, tile_matrix, traffic

# --- mapper: exhaustive search over the candidate space ---------------------------


def oracle_shapes(n, rows, cols):
    exact = [(h, n // h) for h in range(1, n + 1) if n % h == 0 and h <= rows and n // h <= cols]
    if exact:
        return exact
    return [(-(-n // w), w) for w in range(1, cols + 1)
            if -(-n // w) <= rows and (-(-n // w) - 1) * w < n]


def oracle_pack(shapes, breaks, rows, cols):
    out, x, y, shelf = [], 0, 0, 0
    for k, (h, w) in enumerate(shapes):
        if k and (breaks[k - 1] or y + h > rows):
            x, y, shelf = x + shelf, 0, 0
        if h > rows or x + w > cols:
            return None
        out.append((x, y, w, h))
        y += h
        shelf = max(shelf, w)
    return out


def oracle_sites(grid, box, order):
    x0, y0, w, h = box
    tr, tc = grid
    sites = {}
    for i in range(tr):
        for j in range(tc):
            if order == "row":
                dy, dx = divmod(i * tc + j, w)
            else:
                dx, dy = divmod(j * tr + i, h)
            sites[(i, j)] = (x0 + dx, y0 + dy)
    return sites


def oracle_min_cost(layer, hw, summary):
    rows, cols = hw.mesh_rows, hw.mesh_cols
    grids = [tile_matrix(m.d_out, m.d_in, hw.rram_rows, hw.rram_cols) for m in layer.matrices]
    per = [oracle_shapes(g[0] * g[1], rows, cols) for g in grids]
    best = math.inf
    n = len(layer.matrices)
    for shapes in itertools.product(*per):
        for breaks in itertools.product((False, True), repeat=n - 1):
            boxes = oracle_pack(shapes, breaks, rows, cols)
            if boxes is None:
                continue
            for orders in itertools.product(("row", "col"), repeat=n):
                placements = []
                for m, g, box, order in zip(layer.matrices, grids, boxes, orders):
                    x0, y0, w, h = box
                    placements.append(MatrixPlacement(m.name, m.d_out, m.d_in, g, Region(x0, x0 + w, y0, y0 + h),
                                                      order, tuple(sorted(oracle_sites(g, box, order).items()))))
                plan = MappingPlan((cols, rows), hw, layer, tuple(placements), (0, 0), summary=summary)
                best = min(best, sum(fh for _, fh in traffic(plan, summary).values()))
    return best


def small_cases(seed=11):
    rng = random.Random(seed)
    for rows in range(1, 5):
        for cols in range(1, 5):
            hw = HardwareSpec(mesh_rows=rows, mesh_cols=cols, pe_count=rows * cols, rram_rows=8, rram_cols=8,
                              sram_rows=8, sram_cols=8)
            for n_mats in (1, 2, 3):
                for _ in range(2):
                    cap = rows * cols
                    tiles = []
                    for _ in range(n_mats):
                        left = cap - sum(tiles) - (n_mats - len(tiles) - 1)
                        if left < 1:
                            break
                        tiles.append(rng.randint(1, max(1, min(left, 6))))
                    if len(tiles) < n_mats:
                        continue
                    mats = []
                    for k, t in enumerate(tiles):
                        h = rng.choice([d for d in range(1, t + 1) if t % d == 0])
                        mats.append(MatrixSpec(f"M{k}", 8 * h, 8 * (t // h)))
                    yield hw, LayerSpec(tuple(mats), 1, 8)



# --- SRPG pipeline --------------------------------------------------------------

def stepped_oracle(works, handoff=0):
    """Advance one cycle at a time applying the pipeline rules literally.

    CT 0 starts reprogramming at 0.  CT k may start reprogramming once CT k-1
    has started computing.  CT k computes once its own reprogram is finished
    and CT k-1's result has arrived.  Returns (first-token time, stall cycles).
    """
    n = len(works)
    rp_start = [None] * n
    rp_done = [None] * n
    c_start = [None] * n
    c_done = [None] * n
    stall = 0
    t = 0
    while c_done[-1] is None:
        for k in range(n):
            if rp_start[k] is None and (k == 0 or c_start[k - 1] is not None):
                rp_start[k] = t
            if rp_start[k] is not None and rp_done[k] is None and t - rp_start[k] >= works[k].reprogram:
                rp_done[k] = t
            arrived = k == 0 or (c_done[k - 1] is not None and t >= c_done[k - 1] + handoff)
            if c_start[k] is None and arrived:
                if rp_done[k] is not None:
                    c_start[k] = t
                elif k > 0:
                    stall += 1
            if c_start[k] is not None and c_done[k] is None and t - c_start[k] >= works[k].prefill:
                c_done[k] = t
        t += 1
    return c_done[-1], stall


def longest_path(works, handoff=0):
    """First-token time as the longest path through the precedence graph, by enumeration."""
    n = len(works)
    best = 0
    # A path picks, for each CT, whether its compute start is set by its own
    # reprogram end (R) or by its predecessor's output (P).
    for choice in itertools.product("RP", repeat=n):
        if choice[0] == "P":
            continue
        length = 0
        for k in range(n):
            if choice[k] == "R":
                length = (length if k else 0) + works[k].reprogram
            else:
                length = length + works[k - 1].prefill + handoff
        best = max(best, length + works[-1].prefill)
    return best
