"""Exact planar geometry for the synthetic tasks.

Coordinates are continuous pixels with the origin at the top-left corner,
x to the right and y downwards.  Orientation signs use a floating-point
filter and fall back to exact rational arithmetic when the filter cannot
decide, so crossing counts never depend on rounding.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

Point = tuple[float, float]

# Shewchuk's error bound for the naive 2x2 orientation determinant.
_ORIENT_ERRBOUND = (3.0 + 16.0 * 2.0**-53) * 2.0**-53
MERGE_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Collinear overlapping segments: the crossing count is undefined."""


class GenerationError(RuntimeError):
    """A rejection sampler ran out of attempts."""


def orient(a: Point, b: Point, c: Point) -> int:
    """Sign of the turn a -> b -> c: +1 counter-clockwise (in y-up terms), -1 clockwise, 0 collinear."""
    detleft = (a[0] - c[0]) * (b[1] - c[1])
    detright = (a[1] - c[1]) * (b[0] - c[0])
    det = detleft - detright
    bound = _ORIENT_ERRBOUND * (abs(detleft) + abs(detright))
    if det > bound:
        return 1
    if -det > bound:
        return -1
    ax, ay, bx, by, cx, cy = (Fraction(v) for v in (*a, *b, *c))
    exact = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    return (exact > 0) - (exact < 0)


def _on_segment(p: Point, q: Point, r: Point) -> bool:
    """r collinear with pq: does it lie within the closed segment?"""
    return min(p[0], q[0]) <= r[0] <= max(p[0], q[0]) and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])


def segment_relation(p1: Point, p2: Point, q1: Point, q2: Point) -> str:
    """Classify two closed segments: 'cross', 'touch', 'overlap' or 'none'.

    'cross' is a proper crossing at a single interior point of both.
    'touch' means they meet without crossing (an endpoint on the other).
    'overlap' is a collinear overlap of positive length.
    """
    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return "cross"
    if d1 == d2 == d3 == d4 == 0:
        # collinear: overlap if projections share more than a point
        lo_p, hi_p = sorted([p1, p2])
        lo_q, hi_q = sorted([q1, q2])
        lo, hi = max(lo_p, lo_q), min(hi_p, hi_q)
        if lo < hi:
            return "overlap"
        return "touch" if lo == hi else "none"
    if (d1 == 0 and _on_segment(q1, q2, p1)) or (d2 == 0 and _on_segment(q1, q2, p2)):
        return "touch"
    if (d3 == 0 and _on_segment(p1, p2, q1)) or (d4 == 0 and _on_segment(p1, p2, q2)):
        return "touch"
    return "none"


def crossing_point(p1: Point, p2: Point, q1: Point, q2: Point) -> Point:
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    sx, sy = q2[0] - q1[0], q2[1] - q1[1]
    denom = rx * sy - ry * sx
    t = ((q1[0] - p1[0]) * sy - (q1[1] - p1[1]) * sx) / denom
    return (p1[0] + t * rx, p1[1] + t * ry)


@dataclass(frozen=True)
class Polyline:
    vertices: tuple[Point, ...]
    color: str = "black"

    def __post_init__(self):
        if len(self.vertices) < 2:
            raise ValueError("a polyline needs at least two vertices")
        for a, b in zip(self.vertices, self.vertices[1:]):
            if a == b:
                raise ValueError(f"repeated consecutive vertex {a}")

    def segments(self) -> list[tuple[Point, Point]]:
        return list(zip(self.vertices, self.vertices[1:]))

    def within(self, width: float, height: float, margin: float = 0.0) -> bool:
        return all(margin <= x <= width - margin and margin <= y <= height - margin for x, y in self.vertices)


@dataclass(frozen=True)
class Intersections:
    count: int
    points: tuple[Point, ...]
    touches: int = 0


def _merge(points: Iterable[Point], tol: float = MERGE_TOL) -> list[Point]:
    merged: list[Point] = []
    for p in points:
        if not any(math.hypot(p[0] - q[0], p[1] - q[1]) <= tol for q in merged):
            merged.append(p)
    return merged


def count_intersections(a: Polyline, b: Polyline) -> Intersections:
    """Distinct proper crossings between two polylines.

    Touching contacts are reported in ``touches`` but not counted; collinear
    overlaps raise :class:`DegenerateGeometryError`.
    """
    points = []
    touches = 0
    for p1, p2 in a.segments():
        for q1, q2 in b.segments():
            rel = segment_relation(p1, p2, q1, q2)
            if rel == "cross":
                points.append(crossing_point(p1, p2, q1, q2))
            elif rel == "touch":
                touches += 1
            elif rel == "overlap":
                raise DegenerateGeometryError(f"overlapping segments {p1}-{p2} and {q1}-{q2}")
    merged = _merge(points)
    return Intersections(len(merged), tuple(merged), touches)


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    ax, ay = b[0] - a[0], b[1] - a[1]
    length2 = ax * ax + ay * ay
    t = 0.0 if length2 == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * ax + (p[1] - a[1]) * ay) / length2))
    return math.hypot(p[0] - a[0] - t * ax, p[1] - a[1] - t * ay)


def point_polyline_distance(p: Point, line: Polyline) -> float:
    return min(point_segment_distance(p, a, b) for a, b in line.segments())


def _crossing_angles(a: Polyline, b: Polyline) -> list[float]:
    angles = []
    for p1, p2 in a.segments():
        for q1, q2 in b.segments():
            if segment_relation(p1, p2, q1, q2) == "cross":
                u = np.subtract(p2, p1)
                v = np.subtract(q2, q1)
                cosang = abs(float(u @ v)) / (np.linalg.norm(u) * np.linalg.norm(v))
                angles.append(math.degrees(math.acos(min(1.0, cosang))))
    return angles


# -- Line Intersection generator ---------------------------------------------------
@dataclass(frozen=True)
class PolylineConfig:
    width: int = 64
    height: int = 64
    margin: float = 3.0
    min_segments: int = 3
    max_segments: int = 5
    max_count: int = 5
    clearance: float = 2.5  # every vertex this far from the other curve
    min_point_separation: float = 4.0  # between distinct crossing points
    min_crossing_angle: float = 20.0  # degrees
    max_attempts: int = 10_000


def _random_polyline(rng: np.random.Generator, cfg: PolylineConfig, color: str) -> Polyline:
    n = int(rng.integers(cfg.min_segments, cfg.max_segments + 1)) + 1
    lo, hi_x, hi_y = cfg.margin, cfg.width - cfg.margin, cfg.height - cfg.margin
    xs = rng.uniform(lo, hi_x, size=n)
    ys = rng.uniform(lo, hi_y, size=n)
    return Polyline(tuple((float(x), float(y)) for x, y in zip(xs, ys)), color)


def pair_is_clean(red: Polyline, blue: Polyline, cfg: PolylineConfig) -> Intersections | None:
    """Count crossings if the pair is visually unambiguous, else None."""
    try:
        hits = count_intersections(red, blue)
    except DegenerateGeometryError:
        return None
    if hits.touches:
        return None
    for v in red.vertices:
        if point_polyline_distance(v, blue) < cfg.clearance:
            return None
    for v in blue.vertices:
        if point_polyline_distance(v, red) < cfg.clearance:
            return None
    pts = hits.points
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if math.dist(pts[i], pts[j]) < cfg.min_point_separation:
                return None
    if any(ang < cfg.min_crossing_angle for ang in _crossing_angles(red, blue)):
        return None
    return hits


def gen_polyline_pair(seed: int, target_count: int, cfg: PolylineConfig = PolylineConfig()) -> tuple[Polyline, Polyline]:
    """Red and blue polylines crossing exactly ``target_count`` times."""
    if not 0 <= target_count <= cfg.max_count:
        raise ValueError(f"target_count {target_count} outside 0..{cfg.max_count}")
    rng = np.random.default_rng([seed, target_count])
    for _ in range(cfg.max_attempts):
        red = _random_polyline(rng, cfg, "red")
        blue = _random_polyline(rng, cfg, "blue")
        hits = pair_is_clean(red, blue, cfg)
        if hits is not None and hits.count == target_count:
            return red, blue
    raise GenerationError(f"no pair with {target_count} crossings after {cfg.max_attempts} attempts (seed {seed})")


# -- Line Tracing generator --------------------------------------------------------
@dataclass(frozen=True)
class Node:
    label: str
    center: Point
    central: bool = False


@dataclass(frozen=True)
class GraphScene:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int], ...]  # node index pairs
    paths: tuple[Polyline, ...]  # one polyline per edge, node center to node center
    ring_order: tuple[int, ...]  # peripheral node indices in angular order
    width: int = 64
    height: int = 64

    def node_index(self, label: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.label == label:
                return i
        raise KeyError(label)

    def degree(self, i: int) -> int:
        return sum(i in e for e in self.edges)

    def edge_between(self, i: int, j: int) -> int | None:
        for k, (u, v) in enumerate(self.edges):
            if {u, v} == {i, j}:
                return k
        return None


def connected(scene: GraphScene, i: int, j: int) -> bool:
    """Breadth-first search over the declared edges."""
    adj: dict[int, list[int]] = {k: [] for k in range(len(scene.nodes))}
    for u, v in scene.edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = {i}
    queue = deque([i])
    while queue:
        u = queue.popleft()
        if u == j:
            return True
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return False


@dataclass(frozen=True)
class GraphConfig:
    width: int = 64
    height: int = 64
    min_nodes: int = 4
    max_nodes: int = 7
    ring_radius: float = 22.0
    angle_jitter: float = 0.25  # fraction of the angular step
    node_clearance: float = 6.0  # paths keep this far from foreign nodes
    edge_clearance: float = 3.0  # between vertices of one path and other paths
    margin: float = 4.0
    max_bends: int = 2
    max_attempts: int = 10_000
    labels: str = "ABCDEFG"


def _ring_adjacent(ring: Sequence[int], u: int, v: int) -> bool:
    if u not in ring or v not in ring:
        return True  # central node counts as adjacent to everything
    k = len(ring)
    du = ring.index(u)
    dv = ring.index(v)
    return (du - dv) % k in (1, k - 1)


def gen_graph(seed: int, cfg: GraphConfig = GraphConfig()) -> GraphScene:
    """A central node plus 3-6 ring nodes, joined by 2 or 3 disjoint polygonal edges."""
    rng = np.random.default_rng([seed, 7919])
    cx, cy = cfg.width / 2, cfg.height / 2
    for _ in range(cfg.max_attempts):
        n = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
        k = n - 1
        labels = list(rng.permutation(list(cfg.labels))[:n])
        base = rng.uniform(0, 2 * math.pi)
        step = 2 * math.pi / k
        nodes = [Node(str(labels[0]), (cx, cy), central=True)]
        for i in range(k):
            ang = base + i * step + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter) * step
            nodes.append(Node(str(labels[i + 1]), (cx + cfg.ring_radius * math.cos(ang), cy + cfg.ring_radius * math.sin(ang))))
        ring = tuple(range(1, n))
        n_edges = 3 if n >= 6 and rng.random() < 0.5 else 2
        order = [int(i) for i in rng.permutation(n)]
        pairs = [(order[2 * e], order[2 * e + 1]) for e in range(n_edges)]
        if n_edges == 3 and all(_ring_adjacent(ring, u, v) for u, v in pairs):
            continue
        paths = []
        for u, v in pairs:
            bends = int(rng.integers(1, cfg.max_bends + 1))
            pts = [nodes[u].center]
            pts += [
                (float(rng.uniform(cfg.margin, cfg.width - cfg.margin)), float(rng.uniform(cfg.margin, cfg.height - cfg.margin)))
                for _ in range(bends)
            ]
            pts.append(nodes[v].center)
            try:
                paths.append(Polyline(tuple(pts), "blue"))
            except ValueError:
                break
        if len(paths) != n_edges:
            continue
        if _graph_is_clean(nodes, pairs, paths, cfg):
            return GraphScene(tuple(nodes), tuple(pairs), tuple(paths), ring, cfg.width, cfg.height)
    raise GenerationError(f"no clean graph after {cfg.max_attempts} attempts (seed {seed})")


def _graph_is_clean(nodes, pairs, paths, cfg: GraphConfig) -> bool:
    for (u, v), path in zip(pairs, paths):
        for w, node in enumerate(nodes):
            if w not in (u, v) and point_polyline_distance(node.center, path) < cfg.node_clearance:
                return False
        # the path must not fold back over itself
        segs = path.segments()
        for i in range(len(segs)):
            for j in range(i + 2, len(segs)):
                if segment_relation(*segs[i], *segs[j]) != "none":
                    return False
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            try:
                hits = count_intersections(paths[i], paths[j])
            except DegenerateGeometryError:
                return False
            if hits.count or hits.touches:
                return False
            if any(point_polyline_distance(v, paths[j]) < cfg.edge_clearance for v in paths[i].vertices):
                return False
            if any(point_polyline_distance(v, paths[i]) < cfg.edge_clearance for v in paths[j].vertices):
                return False
    return True


# -- patch grid -------------------------------------------------------------------
@dataclass(frozen=True)
class PatchGrid:
    width: int = 64
    height: int = 64
    patch: int = 8

    def __post_init__(self):
        if self.width % self.patch or self.height % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image {self.width}x{self.height}")

    @property
    def rows(self) -> int:
        return self.height // self.patch

    @property
    def cols(self) -> int:
        return self.width // self.patch

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def cell(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.size:
            raise IndexError(f"patch index {index} outside [0, {self.size})")
        return divmod(index, self.cols)


def point_to_patch(pt: Point, grid: PatchGrid) -> int:
    """Patch containing ``pt``; points on a boundary go to the floor patch."""
    x, y = pt
    if not (0 <= x < grid.width and 0 <= y < grid.height):
        raise ValueError(f"point {pt} outside {grid.width}x{grid.height} image")
    return grid.index(int(y // grid.patch), int(x // grid.patch))


def _clamped_patch(pt: Point, grid: PatchGrid) -> int:
    x = min(max(pt[0], 0.0), math.nextafter(grid.width, 0))
    y = min(max(pt[1], 0.0), math.nextafter(grid.height, 0))
    return point_to_patch((x, y), grid)


def trace_segment_patches(a: Point, b: Point, grid: PatchGrid) -> list[int]:
    """Patches met by the closed segment ab, in order from a to b."""
    ts = {0.0, 1.0}
    dx, dy = b[0] - a[0], b[1] - a[1]
    for start, delta, limit in ((a[0], dx, grid.width), (a[1], dy, grid.height)):
        if delta == 0:
            continue
        lo, hi = sorted((start, start + delta))
        first = math.ceil(lo / grid.patch) * grid.patch
        for line in np.arange(first, hi + 1e-12, grid.patch):
            t = (line - start) / delta
            if 0.0 <= t <= 1.0:
                ts.add(float(t))
    ordered = sorted(ts)
    probes = []
    for t0, t1 in zip(ordered, ordered[1:]):
        probes.append(t0)
        probes.append(0.5 * (t0 + t1))
    probes.append(1.0)
    out: list[int] = []
    for t in probes:
        idx = _clamped_patch((a[0] + t * dx, a[1] + t * dy), grid)
        if idx not in out:
            out.append(idx)
    return out


def trace_polyline_patches(line: Polyline, grid: PatchGrid) -> list[int]:
    """Ordered, de-duplicated patches that the polyline passes through."""
    out: list[int] = []
    for a, b in line.segments():
        for idx in trace_segment_patches(a, b, grid):
            if idx not in out:
                out.append(idx)
    return out
