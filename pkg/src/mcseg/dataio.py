"""Dataset directory layout and file formats.

Per sample id: ``{id}_rgb.png`` (8-bit RGB), ``{id}_inst.png`` (16-bit
grayscale, 0 = background), ``{id}_depth.raw`` (magic ``MKDD``, u32 LE width
and height, then width*height little-endian f32, row-major). Ground-truth
maps, when generated, sit beside them as ``{id}_b.png`` / ``{id}_o.png`` /
``{id}_y.png`` (8-bit, 0/255). ``manifest.json`` lists the sample ids.
"""

import json
import os
import struct

import numpy as np
from PIL import Image

from mcseg.scenegen import Sample

SCHEMA_VERSION = 1
DEPTH_MAGIC = b"MKDD"


class DatasetFormatError(ValueError):
    pass


def sample_id(index):
    return "%06d" % index


def write_depth(path, depth):
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DEPTH_MAGIC:
        raise DatasetFormatError("bad depth magic in %s: %r" % (path, blob[:4]))
    if len(blob) < 12:
        raise DatasetFormatError("truncated depth header in %s" % path)
    w, h = struct.unpack("<II", blob[4:12])
    expect = 12 + 4 * w * h
    if len(blob) != expect:
        raise DatasetFormatError(
            "truncated depth payload in %s: %d bytes, expected %d"
            % (path, len(blob), expect))
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w).copy()


def write_mask_png(path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path):
    return np.asarray(Image.open(path)) >= 128


def write_instances_png(path, labels):
    if labels.max() > 65535:
        raise DatasetFormatError("more than 65535 instances cannot be encoded")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_instances_png(path):
    arr = np.asarray(Image.open(path))
    return arr.astype(np.int32)


def write_sample(outdir, sid, sample):
    Image.fromarray(sample.rgb).save(os.path.join(outdir, sid + "_rgb.png"))
    write_instances_png(os.path.join(outdir, sid + "_inst.png"), sample.instances)
    write_depth(os.path.join(outdir, sid + "_depth.raw"), sample.depth)


def read_sample(outdir, sid):
    rgb = np.asarray(Image.open(os.path.join(outdir, sid + "_rgb.png")))
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DatasetFormatError("%s_rgb.png is not an RGB image" % sid)
    inst = read_instances_png(os.path.join(outdir, sid + "_inst.png"))
    depth = read_depth(os.path.join(outdir, sid + "_depth.raw"))
    if inst.shape != rgb.shape[:2] or depth.shape != rgb.shape[:2]:
        raise DatasetFormatError(
            "dimension mismatch between the files of sample %s: rgb %s, "
            "instances %s, depth %s"
            % (sid, rgb.shape[:2], inst.shape, depth.shape))
    return Sample(rgb=rgb.copy(), instances=inst, depth=depth)


def write_dataset(samples, outdir, config_echo=None):
    os.makedirs(outdir, exist_ok=True)
    ids = []
    for i, sample in enumerate(samples):
        sid = sample_id(i)
        write_sample(outdir, sid, sample)
        ids.append(sid)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "ids": ids,
        "config": config_echo or {},
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return ids


def read_manifest(datadir):
    path = os.path.join(datadir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetFormatError("no manifest.json in %s" % datadir)
    except json.JSONDecodeError as e:
        raise DatasetFormatError("malformed manifest.json in %s: %s" % (datadir, e))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError("unsupported dataset schema version %r"
                                 % (manifest.get("schema_version"),))
    return manifest


def read_dataset(datadir):
    """Load every sample listed in the manifest; returns [(id, Sample), ...]."""
    manifest = read_manifest(datadir)
    return [(sid, read_sample(datadir, sid)) for sid in manifest["ids"]]


def write_ground_truth(datadir, sid, gt):
    write_mask_png(os.path.join(datadir, sid + "_b.png"), gt.b)
    write_mask_png(os.path.join(datadir, sid + "_o.png"), gt.o)
    write_mask_png(os.path.join(datadir, sid + "_y.png"), gt.y)


def read_ground_truth(datadir, sid):
    from mcseg.groundtruth import GroundTruth
    return GroundTruth(
        b=read_mask_png(os.path.join(datadir, sid + "_b.png")),
        o=read_mask_png(os.path.join(datadir, sid + "_o.png")),
        y=read_mask_png(os.path.join(datadir, sid + "_y.png")),
    )
