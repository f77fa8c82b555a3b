import json
import os

import numpy as np
import pytest

from mcseg import dataio
from mcseg.dataio import DatasetFormatError
from mcseg.groundtruth import GroundTruth, generate_ground_truth
from mcseg.scenegen import SceneConfig, generate_scene


@pytest.fixture
def scene():
    return generate_scene(SceneConfig(width=64, height=48,
                                      instance_count=(3, 6), rng_seed=11))


class TestDepthFormat:
    def test_round_trip(self, tmp_path, scene):
        path = tmp_path / "d.raw"
        dataio.write_depth(path, scene.depth)
        back = dataio.read_depth(path)
        np.testing.assert_array_equal(back, scene.depth)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.raw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DatasetFormatError, match="magic"):
            dataio.read_depth(path)

    def test_truncated_payload(self, tmp_path, scene):
        path = tmp_path / "d.raw"
        dataio.write_depth(path, scene.depth)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(DatasetFormatError, match="truncated"):
            dataio.read_depth(path)

    def test_header_layout(self, tmp_path, scene):
        path = tmp_path / "d.raw"
        dataio.write_depth(path, scene.depth)
        blob = path.read_bytes()
        assert blob[:4] == b"MKDD"
        w = int.from_bytes(blob[4:8], "little")
        h = int.from_bytes(blob[8:12], "little")
        assert (w, h) == (64, 48)
        assert len(blob) == 12 + 4 * w * h


class TestInstancePng:
    def test_round_trip_16bit(self, tmp_path):
        labels = np.zeros((20, 30), dtype=np.int32)
        labels[3:9, 4:22] = 1
        labels[0, 0] = 40000  # needs 16 bits
        path = tmp_path / "i.png"
        dataio.write_instances_png(path, labels)
        back = dataio.read_instances_png(path)
        np.testing.assert_array_equal(back, labels)

    def test_overflow_rejected(self, tmp_path):
        labels = np.full((4, 4), 70000, dtype=np.int64)
        with pytest.raises(DatasetFormatError):
            dataio.write_instances_png(tmp_path / "i.png", labels)


class TestDataset:
    def test_write_read_round_trip(self, tmp_path, scene):
        outdir = str(tmp_path / "ds")
        dataio.write_dataset([scene], outdir, config_echo={"seed": 11})
        pairs = dataio.read_dataset(outdir)
        assert len(pairs) == 1
        sid, back = pairs[0]
        assert sid == "000000"
        np.testing.assert_array_equal(back.rgb, scene.rgb)
        np.testing.assert_array_equal(back.instances, scene.instances)
        np.testing.assert_array_equal(back.depth, scene.depth)

    def test_write_is_byte_deterministic(self, tmp_path, scene):
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        dataio.write_dataset([scene], d1)
        dataio.write_dataset([scene], d2)
        for name in sorted(os.listdir(d1)):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_manifest_counts_match_dir(self, tmp_path, scene):
        outdir = str(tmp_path / "ds")
        ids = dataio.write_dataset([scene, scene], outdir)
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["ids"] == ids
        rgbs = [f for f in os.listdir(outdir) if f.endswith("_rgb.png")]
        assert len(rgbs) == len(manifest["ids"])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            dataio.read_dataset(str(tmp_path))

    def test_dimension_mismatch_between_files(self, tmp_path, scene):
        outdir = str(tmp_path / "ds")
        dataio.write_dataset([scene], outdir)
        dataio.write_depth(os.path.join(outdir, "000000_depth.raw"),
                           np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(DatasetFormatError, match="mismatch"):
            dataio.read_dataset(outdir)


class TestGroundTruthFiles:
    def test_round_trip(self, tmp_path, scene):
        outdir = str(tmp_path / "ds")
        dataio.write_dataset([scene], outdir)
        gt = generate_ground_truth(scene.instances, scene.depth)
        dataio.write_ground_truth(outdir, "000000", gt)
        back = dataio.read_ground_truth(outdir, "000000")
        np.testing.assert_array_equal(back.b, gt.b)
        np.testing.assert_array_equal(back.o, gt.o)
        np.testing.assert_array_equal(back.y, gt.y)

    def test_masks_encoded_as_0_255(self, tmp_path):
        from PIL import Image
        m = np.zeros((5, 5), dtype=bool)
        m[2, 2] = True
        path = tmp_path / "m.png"
        dataio.write_mask_png(path, m)
        arr = np.asarray(Image.open(path))
        assert set(np.unique(arr)) == {0, 255}
