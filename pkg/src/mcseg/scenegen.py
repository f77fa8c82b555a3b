"""Procedural generation of dense homogeneous piles with per-pixel labels.

Scenes are composited in 2.5-D: deformed, rotated superellipse "sachets" are
dropped one after another onto a textured background by painter's algorithm.
The drop index gives each instance its base depth, topped with a smooth
per-pixel height bump, so a later-dropped pixel is always strictly nearer to
the camera than anything it covers. In homogeneous mode every instance of a
scene shares one procedural texture, evaluated in instance-local coordinates.

Also hosts the photometric (online) and geometric (offline) augmentations
used at training time.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

DEPTH_BUMP = 0.45    # < 0.5 keeps drop-order depth strictly separated


@dataclass
class SceneConfig:
    width: int = 640
    height: int = 512
    instance_count: tuple = (15, 25)
    long_axis: tuple = (0.14, 0.24)    # fraction of min(h, w)
    short_axis: tuple = (0.07, 0.13)
    squareness: tuple = (2.0, 5.0)
    homogeneous: bool = True           # one instance texture per scene
    plus_mode: bool = False
    rng_seed: int = 0

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("scene size must be at least 8x8")
        lo, hi = self.instance_count
        if lo < 0 or hi < lo:
            raise ValueError("bad instance_count range %r" % (self.instance_count,))
        if self.long_axis[1] > 0.5:
            raise ValueError("instances larger than the image are not allowed "
                             "(long_axis fraction must be <= 0.5)")


@dataclass
class Sample:
    rgb: np.ndarray          # H x W x 3 uint8
    instances: np.ndarray    # H x W int32, 0 = background
    depth: np.ndarray        # H x W float32, larger = nearer


# ---------------------------------------------------------------------------
# procedural textures
# ---------------------------------------------------------------------------

@dataclass
class TextureParams:
    family: str
    colors: np.ndarray
    freq: float
    angle: float
    phase: float
    waves: np.ndarray = field(default=None)


def sample_texture_params(rng):
    family = ("stripes", "noise", "gradient")[rng.integers(0, 3)]
    colors = rng.integers(25, 231, size=(2, 3)).astype(np.float64)
    # push the two colors apart so instance boundaries stay learnable
    while np.abs(colors[0] - colors[1]).sum() < 120:
        colors[1] = rng.integers(25, 231, size=3)
    freq = float(rng.uniform(0.05, 0.25))          # cycles per pixel
    angle = float(rng.uniform(0, np.pi))
    phase = float(rng.uniform(0, 2 * np.pi))
    waves = rng.uniform(0.03, 0.2, size=(4, 4))     # noise-family frequencies
    return TextureParams(family, colors, freq, angle, phase, waves)


def texture_rgb(params, u, v):
    """Evaluate a texture at (local) pixel coordinates; returns float 0..255."""
    c, s = np.cos(params.angle), np.sin(params.angle)
    if params.family == "stripes":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * params.freq * (u * c + v * s)
                               + params.phase)
    elif params.family == "noise":
        acc = np.zeros_like(u, dtype=np.float64)
        for fu, fv, pu, pv in params.waves:
            acc += np.sin(u * fu * 2 * np.pi + pu * 40) * \
                np.cos(v * fv * 2 * np.pi + pv * 40)
        t = 0.5 + acc / (2 * len(params.waves))
    elif params.family == "gradient":
        span = 1.0 / max(params.freq, 1e-3)
        t = np.clip((u * c + v * s) / span + 0.5, 0.0, 1.0)
    else:
        raise ValueError("unknown texture family %r" % (params.family,))
    t = np.clip(t, 0.0, 1.0)[..., None]
    return params.colors[0] * (1.0 - t) + params.colors[1] * t


# ---------------------------------------------------------------------------
# scene synthesis
# ---------------------------------------------------------------------------

def _superellipse(cfg, rng, xx, yy):
    """Sample one instance footprint; returns (mask, local u, local v, radial)."""
    h, w = cfg.height, cfg.width
    base = min(h, w)
    for _ in range(10):
        cx = rng.uniform(0.08, 0.92) * w
        cy = rng.uniform(0.08, 0.92) * h
        a = rng.uniform(*cfg.long_axis) * base
        b = rng.uniform(*cfg.short_axis) * base
        n = rng.uniform(*cfg.squareness)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        radial = np.abs(u / a) ** n + np.abs(v / b) ** n
        mask = radial <= 1.0
        if mask.any():
            return mask, u, v, radial
    raise ValueError("failed to rasterize a non-empty instance after 10 tries")


def relabel_compact(labels):
    """Renumber visible ids to contiguous 1..K, preserving relative order."""
    labels = np.asarray(labels)
    present = np.unique(labels)
    present = present[present > 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=labels.dtype)
    for new, old in enumerate(present, start=1):
        lut[old] = new
    return lut[labels]


def generate_scene(cfg):
    """Deterministically composite one scene from cfg.rng_seed."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed))
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    bg_params = sample_texture_params(rng)
    inst_params = sample_texture_params(rng)
    rgb = texture_rgb(bg_params, xx - w / 2.0, yy - h / 2.0)

    labels = np.zeros((h, w), dtype=np.int32)
    depth = np.zeros((h, w), dtype=np.float64)
    k = int(rng.integers(cfg.instance_count[0], cfg.instance_count[1] + 1))
    for i in range(1, k + 1):
        mask, u, v, radial = _superellipse(cfg, rng, xx, yy)
        if not cfg.homogeneous:
            inst_params = sample_texture_params(rng)
        labels[mask] = i
        depth[mask] = i + DEPTH_BUMP * (1.0 - radial[mask])
        tex = texture_rgb(inst_params, u, v)
        rgb[mask] = tex[mask]

    labels = relabel_compact(labels)
    depth[labels == 0] = 0.0
    return Sample(rgb=np.clip(np.rint(rgb), 0, 255).astype(np.uint8),
                  instances=labels,
                  depth=depth.astype(np.float32))


def scene_stats(sample):
    """Instance count and number of distinct touching instance pairs."""
    labels = sample.instances
    k = int(labels.max())
    pairs = set()
    h, w = labels.shape
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        ys0, ys1 = max(0, dy), min(h, h + dy)
        xs0, xs1 = max(0, dx), min(w, w + dx)
        a = labels[ys0:ys1, xs0:xs1]
        b = labels[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
        touch = (a > 0) & (b > 0) & (a != b)
        if touch.any():
            pairs.update(zip(np.minimum(a[touch], b[touch]).tolist(),
                             np.maximum(a[touch], b[touch]).tolist()))
    return {"instances": k, "contacts": len(pairs)}


# ---------------------------------------------------------------------------
# online (photometric) augmentation
# ---------------------------------------------------------------------------

@dataclass
class OnlineAugmentConfig:
    apply_prob: float = 0.5             # blur+jitter one image out of two
    sigma_range: tuple = (0.5, 1.5)     # None disables blurring
    jitter: int = 16                    # per-channel additive amplitude
    exposure_range: tuple = (0.7, 1.3)  # plus mode only


def augment_online(rgb, rng, cfg=None, plus_mode=False):
    """Randomized photometric augmentation; values stay valid uint8."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    cfg = cfg or OnlineAugmentConfig()
    out = rgb.astype(np.float64)
    if rng.random() < cfg.apply_prob:
        if cfg.sigma_range is not None and cfg.sigma_range[1] > 0:
            sigma = rng.uniform(*cfg.sigma_range)
            for ch in range(3):
                out[..., ch] = ndimage.gaussian_filter(out[..., ch], sigma)
        if cfg.jitter > 0:
            out += rng.integers(-cfg.jitter, cfg.jitter + 1, size=3)
    if plus_mode:
        perm = rng.permutation(3)
        out = out[..., perm]
        out *= rng.uniform(*cfg.exposure_range)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# offline (geometric) augmentation
# ---------------------------------------------------------------------------

@dataclass
class GeometricTransform:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0        # quarter turns, counter-clockwise
    scale: float = 1.0    # nearest-neighbor rescale


def sample_transform(rng, scale_range=(0.8, 1.25), allow_scale=True):
    scale = float(rng.uniform(*scale_range)) if allow_scale else 1.0
    return GeometricTransform(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        rot90=int(rng.integers(0, 4)),
        scale=scale,
    )


def _nn_resize(arr, new_h, new_w):
    h, w = arr.shape[:2]
    ys = np.minimum((np.arange(new_h) * (h / new_h)).astype(np.int64), h - 1)
    xs = np.minimum((np.arange(new_w) * (w / new_w)).astype(np.int64), w - 1)
    return arr[np.ix_(ys, xs)]


def apply_transform(sample, tf):
    """Apply one geometric transform jointly to rgb, instances and depth.

    Instance and depth maps use nearest-neighbor resampling; visible labels
    are compacted afterwards so downstream ground-truth code sees contiguous
    ids.
    """
    rgb, labels, depth = sample.rgb, sample.instances, sample.depth
    if tf.hflip:
        rgb, labels, depth = rgb[:, ::-1], labels[:, ::-1], depth[:, ::-1]
    if tf.vflip:
        rgb, labels, depth = rgb[::-1], labels[::-1], depth[::-1]
    if tf.rot90 % 4:
        k = tf.rot90 % 4
        rgb, labels, depth = (np.rot90(rgb, k), np.rot90(labels, k),
                              np.rot90(depth, k))
    if tf.scale != 1.0:
        h, w = labels.shape
        nh, nw = max(1, round(h * tf.scale)), max(1, round(w * tf.scale))
        rgb = _nn_resize(rgb, nh, nw)
        labels = _nn_resize(labels, nh, nw)
        depth = _nn_resize(depth, nh, nw)
    labels = relabel_compact(np.ascontiguousarray(labels))
    return Sample(rgb=np.ascontiguousarray(rgb),
                  instances=labels,
                  depth=np.ascontiguousarray(depth))


def augment_offline(sample, rng, allow_scale=True):
    return apply_transform(sample, sample_transform(rng, allow_scale=allow_scale))


def random_crop(sample, size, rng):
    """Random size x size crop, with labels compacted afterwards."""
    h, w = sample.instances.shape
    if size > h or size > w:
        raise ValueError("crop %d larger than image %dx%d" % (size, h, w))
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    sl = (slice(y0, y0 + size), slice(x0, x0 + size))
    return Sample(rgb=np.ascontiguousarray(sample.rgb[sl]),
                  instances=relabel_compact(sample.instances[sl]),
                  depth=np.ascontiguousarray(sample.depth[sl]))


def corpus_seed(base_seed, index):
    """Stable per-scene seed derivation for embarrassingly parallel corpora."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_corpus(cfg, count):
    """Deterministic list of scenes; scene i depends only on (seed, i)."""
    out = []
    for i in range(count):
        out.append(generate_scene(replace(cfg, rng_seed=corpus_seed(cfg.rng_seed, i))))
    return out
