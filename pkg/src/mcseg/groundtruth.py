"""Ground-truth maps from an instance-label image plus (pseudo-)depth.

Three binary maps are derived per scene:

* ``B`` instance boundaries: non-background pixels with a differently
  labeled in-bounds neighbor (background counts as a different label).
* ``O`` occluding boundary sides: around each boundary pixel, the centered
  window is split by label; if exactly two labels are present, the pixels of
  the nearer side (higher mean depth; background never wins) that touch the
  other label are marked. Windows holding more than two labels contribute
  nothing.
* ``Y`` unoccluded-instance segmentation: instances whose occluding-side
  pixel count is very close to their full perimeter.

Depth can be metric or a per-instance rank ("pseudo-depth"); both give the
same ``O`` whenever each window's two labels have strictly ordered means.
"""

from dataclasses import dataclass

import numpy as np

NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
NEIGHBORS_8 = NEIGHBORS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))

DEFAULT_WINDOW_RADIUS = 2
DEFAULT_THRESHOLD = 0.95


@dataclass
class GroundTruth:
    b: np.ndarray   # bool H x W, instance boundaries
    o: np.ndarray   # bool H x W, occluding boundary sides
    y: np.ndarray   # bool H x W, unoccluded-instance segmentation


def validate_instance_map(labels):
    """Check ids are contiguous 1..K (0 = background); returns K."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("instance map must be 2-d")
    if labels.min() < 0:
        raise ValueError("instance ids must be non-negative")
    k = int(labels.max())
    present = np.unique(labels)
    expect = np.arange(0, k + 1)
    nonzero = present[present > 0]
    if k and not np.array_equal(nonzero, np.arange(1, k + 1)):
        raise ValueError("instance ids must be contiguous 1..K, got %s"
                         % nonzero.tolist())
    return k


def _neighbor_offsets(connectivity):
    if connectivity == 4:
        return NEIGHBORS_4
    if connectivity == 8:
        return NEIGHBORS_8
    raise ValueError("connectivity must be 4 or 8, got %r" % (connectivity,))


def boundaries(labels, connectivity=8):
    """Binary map of non-background pixels with a differently labeled neighbor."""
    labels = np.asarray(labels)
    h, w = labels.shape
    out = np.zeros((h, w), dtype=bool)
    for dy, dx in _neighbor_offsets(connectivity):
        ys0, ys1 = max(0, dy), min(h, h + dy)
        xs0, xs1 = max(0, dx), min(w, w + dx)
        a = labels[ys0:ys1, xs0:xs1]
        b = labels[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
        out[ys0:ys1, xs0:xs1] |= (a != b)
    out &= labels > 0
    return out


def pseudo_depth(labels, z):
    """Per-instance rank map (1..K by ascending mean metric depth); bg = 0."""
    labels = np.asarray(labels)
    z = np.asarray(z, dtype=np.float64)
    k = int(labels.max())
    means = np.full(k + 1, np.inf)
    for i in range(1, k + 1):
        m = labels == i
        if m.any():
            means[i] = z[m].mean()
    order = np.argsort(means[1:], kind="stable")  # instance ids by depth
    rank = np.empty(k + 1)
    rank[0] = 0.0
    for r, idx in enumerate(order, start=1):
        rank[idx + 1] = r
    return rank[labels]


def occluding_sides(labels, z, window_radius=DEFAULT_WINDOW_RADIUS,
                    connectivity=8, boundary_map=None):
    """Occluding-boundary-side map; see the module docstring for the rule.

    The marked pixels belong to the window's higher-mean-depth label and have
    an 8-neighbor carrying the window's other label; background (label 0) is
    treated as infinitely far, so it never occludes.
    """
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    labels = np.asarray(labels)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != labels.shape:
        raise ValueError("depth shape %s does not match labels %s"
                         % (z.shape, labels.shape))
    h, w = labels.shape
    b = boundaries(labels, connectivity) if boundary_map is None else boundary_map
    out = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(b)
    if ys.size == 0:
        return out

    r = window_radius
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    nb = ys.size
    lab_stack = np.full((len(offsets), nb), -1, dtype=np.int64)
    z_stack = np.zeros((len(offsets), nb))
    valid = np.zeros((len(offsets), nb), dtype=bool)
    qys = np.empty((len(offsets), nb), dtype=np.int64)
    qxs = np.empty((len(offsets), nb), dtype=np.int64)
    for i, (dy, dx) in enumerate(offsets):
        qy, qx = ys + dy, xs + dx
        ok = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        qyc, qxc = qy.clip(0, h - 1), qx.clip(0, w - 1)
        lab_stack[i] = np.where(ok, labels[qyc, qxc], -1)
        z_stack[i] = np.where(ok, z[qyc, qxc], 0.0)
        valid[i] = ok
        qys[i], qxs[i] = qy, qx

    # count distinct labels per window (-1 marks out-of-bounds slots)
    slab = np.sort(lab_stack, axis=0)
    marks = np.empty_like(slab, dtype=bool)
    marks[0] = slab[0] >= 0
    marks[1:] = (slab[1:] >= 0) & (slab[1:] != slab[:-1])
    distinct = marks.sum(axis=0)
    two = distinct == 2
    if not two.any():
        return out

    first_valid = len(offsets) - (slab >= 0).sum(axis=0)
    lab_a = np.take_along_axis(slab, first_valid[None].clip(max=len(offsets) - 1),
                               axis=0)[0]
    lab_b = slab[-1]

    def label_mean(target):
        sel = lab_stack == target[None, :]
        cnt = sel.sum(axis=0)
        s = np.where(sel, z_stack, 0.0).sum(axis=0)
        mean = np.divide(s, cnt, out=np.zeros_like(s), where=cnt > 0)
        return np.where(target == 0, -np.inf, mean)

    mean_a = label_mean(lab_a)
    mean_b = label_mean(lab_b)
    decidable = two & (mean_a != mean_b)
    winner = np.where(mean_a > mean_b, lab_a, lab_b)
    loser = np.where(mean_a > mean_b, lab_b, lab_a)

    # mark winner-side window pixels that touch the loser label
    padded = np.full((h + 2, w + 2), -1, dtype=np.int64)
    padded[1:-1, 1:-1] = labels
    for i in range(len(offsets)):
        cand = decidable & valid[i] & (lab_stack[i] == winner)
        if not cand.any():
            continue
        qy, qx = qys[i][cand], qxs[i][cand]
        lose = loser[cand]
        touch = np.zeros(qy.shape, dtype=bool)
        for dy, dx in NEIGHBORS_8:
            touch |= padded[qy + dy + 1, qx + dx + 1] == lose
        out[qy[touch], qx[touch]] = True
    return out


def unoccluded_mask(labels, b, o, threshold=DEFAULT_THRESHOLD):
    """Union of instances whose occluding-side/perimeter ratio >= threshold.

    An instance with no visible perimeter (it fills the whole view) counts as
    unoccluded.
    """
    labels = np.asarray(labels)
    k = int(labels.max())
    out = np.zeros(labels.shape, dtype=bool)
    for i in range(1, k + 1):
        inst = labels == i
        bc = int((b & inst).sum())
        oc = int((o & inst).sum())
        ratio = 1.0 if bc == 0 else oc / bc
        if ratio >= threshold:
            out |= inst
    return out


def instance_ratios(labels, b, o):
    """Per-instance occluding-side/perimeter ratios, keyed by instance id."""
    labels = np.asarray(labels)
    out = {}
    for i in range(1, int(labels.max()) + 1):
        inst = labels == i
        bc = int((b & inst).sum())
        out[i] = 1.0 if bc == 0 else int((o & inst).sum()) / bc
    return out


def junction_fraction(labels, window_radius=DEFAULT_WINDOW_RADIUS,
                      connectivity=8):
    """Fraction of boundary pixels whose window holds at most two labels."""
    labels = np.asarray(labels)
    h, w = labels.shape
    b = boundaries(labels, connectivity)
    ys, xs = np.nonzero(b)
    if ys.size == 0:
        return 1.0
    r = window_radius
    stacks = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            qy, qx = ys + dy, xs + dx
            ok = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
            stacks.append(np.where(ok, labels[qy.clip(0, h - 1),
                                              qx.clip(0, w - 1)], -1))
    slab = np.sort(np.stack(stacks), axis=0)
    marks = np.empty_like(slab, dtype=bool)
    marks[0] = slab[0] >= 0
    marks[1:] = (slab[1:] >= 0) & (slab[1:] != slab[:-1])
    distinct = marks.sum(axis=0)
    return float((distinct <= 2).mean())


def generate_ground_truth(labels, z, window_radius=DEFAULT_WINDOW_RADIUS,
                          threshold=DEFAULT_THRESHOLD, connectivity=8,
                          pseudo=False):
    """Full B/O/Y bundle for one scene."""
    validate_instance_map(labels)
    if pseudo:
        z = pseudo_depth(labels, z)
    b = boundaries(labels, connectivity)
    o = occluding_sides(labels, z, window_radius, connectivity, boundary_map=b)
    y = unoccluded_mask(labels, b, o, threshold)
    return GroundTruth(b=b, o=o, y=y)
