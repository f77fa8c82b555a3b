"""Independent brute-force oracles used by the unit and acceptance tests.

Everything here is written as explicit per-pixel loops, deliberately separate
from the vectorized implementations it checks.
"""

import numpy as np

N8 = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


def oracle_boundaries(labels, connectivity=8):
    h, w = labels.shape
    offs = N4 if connectivity == 4 else N8
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            if labels[y, x] == 0:
                continue
            for dy, dx in offs:
                qy, qx = y + dy, x + dx
                if 0 <= qy < h and 0 <= qx < w and labels[qy, qx] != labels[y, x]:
                    out[y, x] = True
                    break
    return out


def oracle_occluding_sides(labels, z, window_radius=2, connectivity=8):
    h, w = labels.shape
    b = oracle_boundaries(labels, connectivity)
    out = np.zeros((h, w), dtype=bool)
    r = window_radius
    for y in range(h):
        for x in range(w):
            if not b[y, x]:
                continue
            window = [(qy, qx)
                      for qy in range(max(0, y - r), min(h, y + r + 1))
                      for qx in range(max(0, x - r), min(w, x + r + 1))]
            labs = sorted({int(labels[qy, qx]) for qy, qx in window})
            if len(labs) != 2:
                continue
            means = {}
            for lab in labs:
                if lab == 0:
                    means[lab] = -np.inf
                else:
                    vals = [z[qy, qx] for qy, qx in window
                            if labels[qy, qx] == lab]
                    means[lab] = np.sum(vals) / len(vals)
            if means[labs[0]] == means[labs[1]]:
                continue
            winner = labs[0] if means[labs[0]] > means[labs[1]] else labs[1]
            loser = labs[0] if winner == labs[1] else labs[1]
            for qy, qx in window:
                if labels[qy, qx] != winner:
                    continue
                for dy, dx in N8:
                    py, px = qy + dy, qx + dx
                    if 0 <= py < h and 0 <= px < w and labels[py, px] == loser:
                        out[qy, qx] = True
                        break
    return out


def oracle_distance_transform(mask):
    """O(P^2) nearest-positive Euclidean distance."""
    h, w = mask.shape
    pts = np.argwhere(mask)
    out = np.full((h, w), np.inf)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                out[y, x] = 0.0
                continue
            if pts.size:
                d2 = (pts[:, 0] - y) ** 2 + (pts[:, 1] - x) ** 2
                out[y, x] = np.sqrt(d2.min())
    return out


def oracle_ap(recalls, precisions, substeps=4000):
    """Dense midpoint-Riemann area under the piecewise-linear P(R) curve.

    Matches the integration convention of the implementation (flat extension
    to recall 0, nothing past the max attained recall) without using the
    trapezoid formula.
    """
    pts = sorted(zip(recalls, precisions))
    dedup = {}
    for r, p in pts:
        dedup[r] = max(dedup.get(r, 0.0), p)
    rs = sorted(dedup)
    ps = [dedup[r] for r in rs]
    rs = [0.0] + rs
    ps = [ps[0]] + ps
    area = 0.0
    for i in range(len(rs) - 1):
        r0, r1, p0, p1 = rs[i], rs[i + 1], ps[i], ps[i + 1]
        if r1 == r0:
            continue
        h = (r1 - r0) / substeps
        for k in range(substeps):
            rm = r0 + (k + 0.5) * h
            pm = p0 + (p1 - p0) * (rm - r0) / (r1 - r0)
            area += pm * h
    return area


def random_label_scene(rng, size=32, n_cells=6, bg_prob=0.35,
                       distinct_depths=False):
    """Voronoi-style label map with random per-instance depths."""
    ys, xs = np.mgrid[0:size, 0:size]
    seeds = rng.uniform(0, size, size=(n_cells, 2))
    d2 = (ys[None] - seeds[:, 0, None, None]) ** 2 + \
        (xs[None] - seeds[:, 1, None, None]) ** 2
    cells = d2.argmin(axis=0)
    labels = np.zeros((size, size), dtype=np.int32)
    depth = np.zeros((size, size))
    depths = (rng.permutation(n_cells) + 1 if distinct_depths
              else rng.integers(1, 10, size=n_cells))
    next_id = 1
    for c in range(n_cells):
        m = cells == c
        if rng.random() < bg_prob or not m.any():
            continue
        labels[m] = next_id
        depth[m] = float(depths[c])
        next_id += 1
    # compact ids
    from mcseg.scenegen import relabel_compact
    return relabel_compact(labels), depth
