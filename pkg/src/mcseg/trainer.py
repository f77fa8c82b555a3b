"""End-to-end training, inference and evaluation loops.

Training follows a fixed recipe: Xavier-initialized parameters for every
column (no pretrained backbone), per-epoch shuffling, random square crops with
joint geometric augmentation, photometric augmentation of the RGB input,
balanced cross-entropy losses over all heads, and Adam with L2 weight decay.
The whole run is reproducible from (config, seed), including dropout masks
and augmentation draws.
"""

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from mcseg import metrics as mt
from mcseg.autodiff import Tape, Tensor, backward
from mcseg.groundtruth import generate_ground_truth
from mcseg.losses import LossConfig, head_kind, total_loss
from mcseg.networks import (FilterTable, build_multicameral, config_from_dict,
                            forward)
from mcseg.optim import AdamState, adam_step
from mcseg.scenegen import (OnlineAugmentConfig, augment_online,
                            random_crop, sample_transform, apply_transform)

CHECKPOINT_MAGIC = b"MCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    arch: object                  # MCConfig
    filters: FilterTable = field(default_factory=FilterTable)
    crop_size: int = 256
    batch_size: int = 8
    epochs: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    gt_window: int = 2
    gt_threshold: float = 0.95
    pseudo_depth: bool = False
    offline_flips: bool = True
    offline_scale: tuple = None       # e.g. (1.0, 1.25); None disables
    online: OnlineAugmentConfig = field(default_factory=OnlineAugmentConfig)
    plus_mode: bool = False

    def validate(self):
        div = 2 ** (self.arch.scales - 1)
        if self.crop_size % div:
            raise ValueError("crop_size must be divisible by %d" % div)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch_size/epochs")


def _prepare_example(sample, cfg, rng):
    """Crop + geometric augmentation + ground truth + photometric augmentation."""
    if cfg.offline_flips or cfg.offline_scale:
        tf = sample_transform(rng, scale_range=cfg.offline_scale or (1.0, 1.0),
                              allow_scale=bool(cfg.offline_scale))
        if not cfg.offline_flips:
            tf.hflip = tf.vflip = False
            tf.rot90 = 0
        sample = apply_transform(sample, tf)
    h, w = sample.instances.shape
    if cfg.crop_size > min(h, w):
        raise ValueError("crop %d larger than image %dx%d"
                         % (cfg.crop_size, h, w))
    sample = random_crop(sample, cfg.crop_size, rng)
    gt = generate_ground_truth(sample.instances, sample.depth,
                               window_radius=cfg.gt_window,
                               threshold=cfg.gt_threshold,
                               pseudo=cfg.pseudo_depth)
    rgb = augment_online(sample.rgb, rng, cfg.online, plus_mode=cfg.plus_mode)
    x = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
    return x, gt


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def train(cfg, samples, log_path=None):
    """Train on a list of scenes; returns (graph, AdamState, loss log rows)."""
    cfg.validate()
    if not samples:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    graph = build_multicameral(cfg.arch, cfg.filters, rng=rng)
    state = AdamState(graph.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      epsilon=cfg.epsilon, weight_decay=cfg.weight_decay)
    head_names = list(graph.heads)
    log = []
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        for batch_idx in _batches(order, cfg.batch_size):
            xs, gts = [], {"boundary": [], "occlusion": [], "segmentation": []}
            for i in batch_idx:
                x, gt = _prepare_example(samples[i], cfg, rng)
                xs.append(x)
                gts["boundary"].append(gt.b)
                gts["occlusion"].append(gt.o)
                gts["segmentation"].append(gt.y)
            batch = Tensor(np.stack(xs))
            gt_arrays = {k: np.stack(v)[:, None].astype(np.float32)
                         for k, v in gts.items()}
            tape = Tape()
            heads = forward(graph, batch, training=True, rng=rng, tape=tape)
            loss, per_head = total_loss(heads, gt_arrays, cfg.loss, tape=tape)
            for p in graph.params.values():
                p.grad = None
            backward(loss, tape)
            adam_step(graph.params, state)
            iteration += 1
            log.append({"iteration": iteration, "epoch": epoch,
                        **per_head, "total": loss.item()})
    if log_path:
        write_loss_log(log_path, log, head_names)
    return graph, state, log


def write_loss_log(path, log, head_names):
    """CSV loss log: iteration, epoch, one column per head, total."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "epoch"] + head_names + ["total"])
        for row in log:
            writer.writerow([row["iteration"], row["epoch"]]
                            + ["%.8f" % row[h] for h in head_names]
                            + ["%.8f" % row["total"]])


def infer(graph, rgb):
    """Head probability maps for one RGB image (uint8 HxWx3 or float in 0..1)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an HxWx3 image")
    if rgb.dtype == np.uint8:
        x = rgb.astype(np.float32) / 255.0
    else:
        x = rgb.astype(np.float32)
    batch = Tensor(x.transpose(2, 0, 1)[None])
    heads = forward(graph, batch, training=False)
    return {name: t.data[0, 0] for name, t in heads.items()}


GT_KEY_BY_KIND = {"boundary": "b", "occlusion": "o", "segmentation": "y"}


def evaluate(graph, samples, eval_cfg=None, gt_window=2, gt_threshold=0.95,
             pseudo_depth=False, ground_truths=None):
    """Per-head PR curves and ODS/AP/AP60 summaries over a dataset.

    ``samples`` may hold plain Samples or (id, Sample) pairs; precomputed
    ground truths may be supplied in matching order.
    """
    eval_cfg = eval_cfg or mt.EvalConfig()
    pairs = [(s if isinstance(s, tuple) else (None, s)) for s in samples]
    if not pairs:
        raise ValueError("empty evaluation dataset")
    preds = {name: [] for name in graph.heads}
    gts = {name: [] for name in graph.heads}
    for i, (_, sample) in enumerate(pairs):
        maps = infer(graph, sample.rgb)
        if ground_truths is not None:
            gt = ground_truths[i]
        else:
            gt = generate_ground_truth(sample.instances, sample.depth,
                                       window_radius=gt_window,
                                       threshold=gt_threshold,
                                       pseudo=pseudo_depth)
        for name, prob in maps.items():
            preds[name].append(prob)
            gts[name].append(getattr(gt, GT_KEY_BY_KIND[head_kind(name)]))
    out = {}
    for name in graph.heads:
        curve = mt.pr_sweep(preds[name], gts[name], eval_cfg)
        out[name] = (curve, mt.summarize(curve))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_doc(graph):
    cfg, ft = graph.config, graph.filters
    return {
        "scales": cfg.scales,
        "merge_mode": cfg.merge_mode,
        "horizontal_skips": cfg.horizontal_skips,
        "kernel_size": cfg.kernel_size,
        "dropout_p": cfg.dropout_p,
        "aspp_bridge": cfg.aspp_bridge,
        "divisor": ft.divisor,
        "columns": [{"kind": c.kind, "node_type": c.node_type,
                     "pooling": c.pooling, "head": c.head}
                    for c in cfg.columns],
    }


def _write_record(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _must_read(fh, n, what):
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError("truncated checkpoint: incomplete %s" % what)
    return blob


def _read_record(fh):
    (nlen,) = struct.unpack("<I", _must_read(fh, 4, "record header"))
    name = _must_read(fh, nlen, "record name").decode("utf-8")
    (ndim,) = struct.unpack("<I", _must_read(fh, 4, "record rank"))
    shape = struct.unpack("<%dI" % ndim, _must_read(fh, 4 * ndim, "record dims"))
    count = int(np.prod(shape)) if ndim else 1
    raw = _must_read(fh, 4 * count, "record %r data" % name)
    data = np.frombuffer(raw, dtype="<f4", count=count)
    return name, data.reshape(shape).copy()


def save_checkpoint(path, graph, state=None, epoch=0):
    """Binary checkpoint: magic, version, tensor count, named f32 records.

    Adam moments and scalars, the epoch counter and the architecture document
    are appended with the same record encoding under reserved name prefixes.
    """
    records = [(name, p.data) for name, p in graph.params.items()]
    if state is not None:
        for name in graph.params:
            records.append(("adam.m." + name, state.m[name]))
            records.append(("adam.v." + name, state.v[name]))
        records.append(("adam.scalars", np.array(
            [state.t, state.lr, state.beta1, state.beta2, state.epsilon,
             state.weight_decay], dtype=np.float32)))
    records.append(("meta.epoch", np.array([epoch], dtype=np.float32)))
    arch_bytes = np.frombuffer(
        json.dumps(_config_doc(graph), sort_keys=True).encode("utf-8"),
        dtype=np.uint8)
    records.append(("meta.arch", arch_bytes.astype(np.float32)))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


def _read_records(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic %r in %s" % (magic, path))
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version %d" % version)
        return dict(_read_record(fh) for _ in range(count))


def load_checkpoint(path, graph=None):
    """Load a checkpoint; rebuilds the graph from the stored architecture
    document unless one is supplied. Returns (graph, AdamState or None, epoch).

    Loading into an incompatible graph raises a CheckpointError naming the
    offending tensor.
    """
    records = _read_records(path)
    if graph is None:
        if "meta.arch" not in records:
            raise CheckpointError("checkpoint has no architecture document")
        doc = json.loads(bytes(records["meta.arch"].astype(np.uint8)).decode("utf-8"))
        cfg, ft = config_from_dict(doc)
        graph = build_multicameral(cfg, ft)
    for name, p in graph.params.items():
        if name not in records:
            raise CheckpointError("checkpoint is missing tensor %r" % name)
        arr = records[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                "shape mismatch for tensor %r: checkpoint %s vs graph %s"
                % (name, arr.shape, p.data.shape))
        p.data = arr.astype(np.float32)
    state = None
    if "adam.scalars" in records:
        t, lr, b1, b2, eps, wd = records["adam.scalars"]
        state = AdamState(graph.params, lr=float(lr), beta1=float(b1),
                          beta2=float(b2), epsilon=float(eps),
                          weight_decay=float(wd))
        state.t = int(t)
        for name in graph.params:
            for prefix, store in (("adam.m.", state.m), ("adam.v.", state.v)):
                key = prefix + name
                if key not in records:
                    raise CheckpointError("checkpoint is missing tensor %r" % key)
                if records[key].shape != graph.params[name].data.shape:
                    raise CheckpointError(
                        "shape mismatch for tensor %r: checkpoint %s vs graph %s"
                        % (key, records[key].shape, graph.params[name].data.shape))
                store[name] = records[key].astype(np.float32)
    epoch = int(records.get("meta.epoch", np.zeros(1))[0])
    return graph, state, epoch
