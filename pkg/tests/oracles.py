"""Independent reference implementations used as test oracles.

Everything here is written from first principles (exact rationals, union
find, interval clipping) and shares no code with the package.
"""

from fractions import Fraction as F


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def exact_relation(p1, p2, q1, q2):
    """'cross' / 'touch' / 'overlap' / 'none' by solving the parametric system exactly."""
    p1, p2, q1, q2 = [(F(x), F(y)) for x, y in (p1, p2, q1, q2)]
    r = (p2[0] - p1[0], p2[1] - p1[1])
    s = (q2[0] - q1[0], q2[1] - q1[1])
    qp = (q1[0] - p1[0], q1[1] - p1[1])
    denom = _cross(*r, *s)
    if denom == 0:
        if _cross(*qp, *r) != 0:
            return "none"  # parallel, distinct lines
        rr = r[0] * r[0] + r[1] * r[1]
        t0 = (qp[0] * r[0] + qp[1] * r[1]) / rr
        t1 = t0 + (s[0] * r[0] + s[1] * r[1]) / rr
        lo, hi = max(min(t0, t1), F(0)), min(max(t0, t1), F(1))
        if lo < hi:
            return "overlap"
        return "touch" if lo == hi else "none"
    t = _cross(*qp, *s) / denom
    u = _cross(*qp, *r) / denom
    if 0 < t < 1 and 0 < u < 1:
        return "cross"
    if 0 <= t <= 1 and 0 <= u <= 1:
        return "touch"
    return "none"


def exact_crossing_points(red_vertices, blue_vertices):
    """Set of exact proper crossing points between two polylines."""
    pts = set()
    for a, b in zip(red_vertices, red_vertices[1:]):
        for c, d in zip(blue_vertices, blue_vertices[1:]):
            if exact_relation(a, b, c, d) == "cross":
                a_, b_, c_, d_ = [(F(x), F(y)) for x, y in (a, b, c, d)]
                r = (b_[0] - a_[0], b_[1] - a_[1])
                s = (d_[0] - c_[0], d_[1] - c_[1])
                t = _cross(c_[0] - a_[0], c_[1] - a_[1], *s) / _cross(*r, *s)
                pts.add((a_[0] + t * r[0], a_[1] + t * r[1]))
    return pts


def union_find_connected(n, edges, i, j):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        parent[find(u)] = find(v)
    return find(i) == find(j)


def _axis_interval(start, delta, lo, hi):
    """t-interval where lo <= start + t*delta < hi, as (a, a_closed, b, b_closed)."""
    if delta == 0:
        return (F(-1), True, F(2), True) if lo <= start < hi else None
    ta, tb = (lo - start) / delta, (hi - start) / delta
    if delta > 0:
        return (ta, True, tb, False)
    return (tb, False, ta, True)


def exact_segment_patches(a, b, patch, rows, cols):
    """Patches (row-major index) whose half-open square meets the closed segment ab,
    ordered by the first parameter at which the segment enters them."""
    ax, ay, bx, by = F(a[0]), F(a[1]), F(b[0]), F(b[1])
    hits = []
    for r in range(rows):
        for c in range(cols):
            lo, lo_c, hi, hi_c = F(0), True, F(1), True
            ok = True
            for iv in (_axis_interval(ax, bx - ax, c * patch, (c + 1) * patch), _axis_interval(ay, by - ay, r * patch, (r + 1) * patch)):
                if iv is None:
                    ok = False
                    break
                a_, ac, b_, bc = iv
                if a_ > lo or (a_ == lo and not ac):
                    lo, lo_c = a_, ac
                if b_ < hi or (b_ == hi and not bc):
                    hi, hi_c = b_, bc
            if ok and (lo < hi or (lo == hi and lo_c and hi_c)):
                hits.append((lo, not lo_c, r * cols + c))
    return [idx for *_, idx in sorted(hits)]


def supersampled_patches(a, b, patch, cols, samples=20001):
    """Patches hit by evenly spaced points along ab (a subset of the exact answer)."""
    out = set()
    for k in range(samples):
        t = k / (samples - 1)
        x = a[0] + t * (b[0] - a[0])
        y = a[1] + t * (b[1] - a[1])
        out.add(int(y // patch) * cols + int(x // patch))
    return out


# -- per-sample label oracles ---------------------------------------------------------
def intersection_oracle(sample, cfg):
    """(count, target patches) from exact crossings of the regenerated curves."""
    from klal.geometry import gen_polyline_pair

    red, blue = gen_polyline_pair(sample.seed, int(sample.label), cfg.polyline)
    pts = exact_crossing_points(red.vertices, blue.vertices)
    p = cfg.patch
    cols = cfg.image // p
    return len(pts), {int(y // p) * cols + int(x // p) for x, y in pts}


def tracing_oracle(sample, cfg):
    """'yes'/'no' by union-find over the regenerated graph's edges."""
    from klal import vocab
    from klal.geometry import gen_graph

    words = vocab.decode(sample.layout.instruction)
    a, b = [w for w in words if w in vocab.LETTERS]
    g = gen_graph(sample.seed, cfg.graph)
    labels = [n.label for n in g.nodes]
    return "yes" if union_find_connected(len(labels), g.edges, labels.index(a), labels.index(b)) else "no"


def gridpatch_oracle(sample, patch):
    """(row, col) of the red pixels in the rendered image, by cell arithmetic."""
    import numpy as np

    arr = sample.image.array()
    ys, xs = np.nonzero((arr[..., 0] == 220) & (arr[..., 1] == 0) & (arr[..., 2] == 0))
    rows, cols = set((ys // patch).tolist()), set((xs // patch).tolist())
    if len(rows) != 1 or len(cols) != 1:
        return None
    return rows.pop(), cols.pop()
