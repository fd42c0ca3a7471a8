"""Spanning trees, dimension-ordered routes and cyclic KV placement on the mesh.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

Coord = tuple[int, int]

# +x, -x, +y, -y: X neighbours are explored first.
_NEIGHBOUR_ORDER = ((1, 0), (-1, 0), (0, 1), (0, -1))


class TreeError(ValueError):
    pass


class KvCapacityError(RuntimeError):
    pass


def manhattan(a: Coord, b: Coord) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


@dataclass(frozen=True)
class SpanningTree:
    root: Coord
    parent: dict  # node -> parent, root absent
    phase: str
    members: frozenset
    order: tuple  # nodes in BFS discovery order, root first

    @property
    def nodes(self) -> tuple:
        return self.order

    @property
    def edges(self) -> list[tuple[Coord, Coord]]:
        """(parent, child) pairs in BFS order."""
        return [(self.parent[n], n) for n in self.order[1:]]

    def children(self, node: Coord) -> list[Coord]:
        return [n for n in self.order[1:] if self.parent[n] == node]

    def node_depth(self, node: Coord) -> int:
        d = 0
        while node != self.root:
            node = self.parent[node]
            d += 1
        return d

    @property
    def depth(self) -> int:
        return max((self.node_depth(n) for n in self.order), default=0)

    def reversed(self) -> "SpanningTree":
        phase = "reduction" if self.phase == "broadcast" else "broadcast"
        return SpanningTree(self.root, self.parent, phase, self.members, self.order)


def build_tree(members: Iterable[Coord], root: Coord, mesh_dims: tuple[int, int],
               phase: str = "broadcast", within: Iterable[Coord] | None = None) -> SpanningTree:
    """Breadth-first tree from ``root`` over the links among ``within`` (default: the members).

    The root may sit outside the member set if it is adjacent to it (an
    injection point on the boundary).  Branches that lead to no member are
    pruned, so relay nodes only appear when ``within`` is wider than the
    member set.  ``mesh_dims`` is ``(cols, rows)``.
    """
    if phase not in ("broadcast", "reduction"):
        raise ValueError(f"unknown phase {phase!r}")
    members = frozenset(members)
    if not members:
        raise TreeError("empty member set")
    cols, rows = mesh_dims
    allowed = set(members if within is None else within) | members | {root}
    for x, y in allowed:
        if not (0 <= x < cols and 0 <= y < rows):
            raise TreeError(f"node {(x, y)} outside {cols}x{rows} mesh")
    if root not in members and not any(manhattan(root, m) == 1 for m in members) \
            and within is None:
        raise TreeError(f"root {root} is neither a member nor adjacent to one")

    parent: dict = {}
    seen = {root}
    order = [root]
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for dx, dy in _NEIGHBOUR_ORDER:
            nxt = (node[0] + dx, node[1] + dy)
            if nxt in allowed and nxt not in seen:
                seen.add(nxt)
                parent[nxt] = node
                order.append(nxt)
                queue.append(nxt)
    missing = members - seen
    if missing:
        raise TreeError(f"members not connected to root: {sorted(missing)[:4]}")

    keep = {root}
    for m in members:
        n = m
        while n not in keep:
            keep.add(n)
            n = parent[n]
    order = tuple(n for n in order if n in keep)
    parent = {n: parent[n] for n in order[1:]}
    return SpanningTree(root, parent, phase, members, order)


def unicast_route(src: Coord, dst: Coord, mesh_dims: tuple[int, int] | None = None) -> list[Coord]:
    """Dimension-ordered route (X first, then Y); the hop list excludes ``src``."""
    if mesh_dims is not None:
        cols, rows = mesh_dims
        for c in (src, dst):
            if not (0 <= c[0] < cols and 0 <= c[1] < rows):
                raise ValueError(f"{c} outside {cols}x{rows} mesh")
    x, y = src
    hops = []
    step = 1 if dst[0] > x else -1
    while x != dst[0]:
        x += step
        hops.append((x, y))
    step = 1 if dst[1] > y else -1
    while y != dst[1]:
        y += step
        hops.append((x, y))
    return hops


def broadcast_deliveries(tree: SpanningTree) -> dict[Coord, int]:
    """Push one payload down the tree; count receptions per node (root holds it already)."""
    counts = {n: 0 for n in tree.order}
    counts[tree.root] = 1
    for parent, child in tree.edges:
        counts[child] += counts[parent] > 0
    return counts


def tree_reduce(tree: SpanningTree, contributions: dict[Coord, int]):
    """Sum member contributions up the reversed tree; returns the root's total."""
    acc = {n: contributions.get(n, 0) for n in tree.order}
    for parent, child in reversed(tree.edges):
        acc[parent] = acc[parent] + acc[child]
    return acc[tree.root]


@dataclass
class KvLayout:
    """Cyclic placement of per-token K (or V) rows over scratchpad sites.

    Each token occupies ``entries_per_token`` entries (one per head) at a
    single site; ``capacity`` is per site, in entries.
    """

    sites: tuple
    capacity: int
    entries_per_token: int = 1
    used: list = field(default_factory=list)
    next_token: int = 0

    def __post_init__(self) -> None:
        if not self.sites:
            raise ValueError("KvLayout needs at least one site")
        if not self.used:
            self.used = [0] * len(self.sites)

    @property
    def total_capacity(self) -> int:
        return self.capacity * len(self.sites)

    @property
    def tokens_per_site(self) -> int:
        return self.capacity // self.entries_per_token

    def site_of(self, token_index: int) -> Coord:
        return self.sites[token_index % len(self.sites)]

    def append(self, token_index: int) -> Coord:
        if token_index < 0:
            raise ValueError("token index must be >= 0")
        k = token_index % len(self.sites)
        if self.used[k] + self.entries_per_token > self.capacity:
            raise KvCapacityError(
                f"token {token_index}: site {self.sites[k]} full ({self.used[k]}/{self.capacity} entries)")
        self.used[k] += self.entries_per_token
        self.next_token = max(self.next_token, token_index + 1)
        return self.sites[k]


def kv_append_site(layout: KvLayout, token_index: int) -> Coord:
    return layout.append(token_index)


def kv_capacity_entries(scratchpad_bytes: int, reserve_fraction: float, head_dim: int, elem_bits: int) -> int:
    """Entries per site: the unreserved scratchpad divided by one head's K (or V) slice."""
    entry_bytes = -(-head_dim * elem_bits // 8)
    return int(scratchpad_bytes * (1.0 - reserve_fraction)) // entry_bytes
