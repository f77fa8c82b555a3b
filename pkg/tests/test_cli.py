import hashlib
import json
import os

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from mcseg import dataio
from mcseg.cli import main


def run(*argv):
    return main(list(argv))


def dir_digest(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        with open(os.path.join(path, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("data") / "ds")
    assert run("gen", "--out", d, "--count", "3", "--size", "64x64",
               "--instances", "3..6", "--seed", "5") == 0
    return d


@pytest.fixture(scope="module")
def trained_ckpt(tmp_path_factory, tiny_dataset):
    out = str(tmp_path_factory.mktemp("ckpt") / "toy.mckp")
    arch = str(tmp_path_factory.mktemp("cfg") / "arch.json")
    with open(arch, "w") as fh:
        json.dump({"divisor": 8,
                   "columns": [{"kind": "encoder"},
                               {"kind": "decoder", "head": "segmentation"}]},
                  fh)
    assert run("train", "--data", tiny_dataset, "--arch", arch, "--out", out,
               "--epochs", "1", "--batch", "2", "--crop", "64",
               "--seed", "1") == 0
    return out


class TestGen:
    def test_empty_manifest_is_valid(self, tmp_path):
        d = str(tmp_path / "empty")
        assert run("gen", "--out", d, "--count", "0") == 0
        manifest = dataio.read_manifest(d)
        assert manifest["ids"] == []

    def test_same_flags_same_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for d in (a, b):
            assert run("gen", "--out", d, "--count", "2", "--size", "64x64",
                       "--instances", "3..6", "--seed", "9") == 0
        assert dir_digest(a) == dir_digest(b)

    def test_published_scale_accepted(self, tmp_path):
        d = str(tmp_path / "big")
        assert run("gen", "--out", d, "--count", "1", "--size", "640x512",
                   "--seed", "0") == 0
        _, sample = dataio.read_dataset(d)[0]
        assert sample.rgb.shape == (512, 640, 3)

    def test_bad_size_flag(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            run("gen", "--out", str(tmp_path / "x"), "--count", "1",
                "--size", "640by512")


class TestGtgen:
    def test_writes_consistent_maps(self, tiny_dataset):
        assert run("gtgen", "--data", tiny_dataset) == 0
        manifest = dataio.read_manifest(tiny_dataset)
        for sid in manifest["ids"]:
            gt = dataio.read_ground_truth(tiny_dataset, sid)
            dil = ndimage.binary_dilation(gt.b, structure=np.ones((3, 3)))
            assert not (gt.o & ~dil).any()

    def test_idempotent_rerun(self, tiny_dataset):
        assert run("gtgen", "--data", tiny_dataset) == 0
        before = dir_digest(tiny_dataset)
        assert run("gtgen", "--data", tiny_dataset) == 0
        assert dir_digest(tiny_dataset) == before

    def test_pseudo_depth_matches_metric_on_generated_scenes(self, tmp_path):
        d = str(tmp_path / "ds")
        run("gen", "--out", d, "--count", "2", "--size", "64x64",
            "--instances", "3..5", "--seed", "3")
        run("gtgen", "--data", d)
        metric = [dataio.read_ground_truth(d, s)
                  for s in dataio.read_manifest(d)["ids"]]
        run("gtgen", "--data", d, "--pseudo-depth")
        pseudo = [dataio.read_ground_truth(d, s)
                  for s in dataio.read_manifest(d)["ids"]]
        for m, p in zip(metric, pseudo):
            np.testing.assert_array_equal(m.o, p.o)
            np.testing.assert_array_equal(m.y, p.y)

    def test_missing_depth_fails(self, tmp_path, capsys):
        d = str(tmp_path / "ds")
        run("gen", "--out", d, "--count", "1", "--size", "64x64", "--seed", "1")
        os.remove(os.path.join(d, "000000_depth.raw"))
        assert run("gtgen", "--data", d) == 1
        assert "error" in capsys.readouterr().err


class TestParams:
    def test_prints_published_count(self, capsys):
        assert run("params", "--arch", "mc2_pruned") == 0
        assert "1,465,105" in capsys.readouterr().out

    def test_all_presets_build(self, capsys):
        for arch in ("mc2", "mc3d", "mc4", "mc4d", "mc6d", "mc6d_atrous_d4",
                     "mc6d_coords_d4", "red_atrous", "red_coords"):
            assert run("params", "--arch", arch) == 0

    def test_unknown_arch_fails(self, capsys):
        assert run("params", "--arch", "wat") == 1
        assert "error" in capsys.readouterr().err


class TestTrainEvalInferReport:
    def test_eval_writes_summary_and_curves(self, tmp_path, tiny_dataset,
                                            trained_ckpt, capsys):
        out = str(tmp_path / "eval")
        assert run("eval", "--data", tiny_dataset, "--ckpt", trained_ckpt,
                   "--out", out) == 0
        summary = json.loads(open(os.path.join(out, "summary.json")).read())
        assert summary["tau"] == 0.0
        assert "segmentation" in summary["heads"]
        assert os.path.exists(os.path.join(out, "curve_segmentation.txt"))
        txt = capsys.readouterr().out
        assert "ODS" in txt

    def test_report_renders(self, tmp_path, tiny_dataset, trained_ckpt,
                            capsys):
        out = str(tmp_path / "eval")
        run("eval", "--data", tiny_dataset, "--ckpt", trained_ckpt,
            "--out", out)
        capsys.readouterr()
        assert run("report", "--eval", out) == 0
        txt = capsys.readouterr().out
        assert "PR table" in txt and "segmentation" in txt

    def test_infer_writes_probability_maps_and_overlay(self, tmp_path,
                                                       tiny_dataset,
                                                       trained_ckpt):
        out = str(tmp_path / "infer")
        img = os.path.join(tiny_dataset, "000000_rgb.png")
        assert run("infer", "--ckpt", trained_ckpt, "--image", img,
                   "--out", out) == 0
        prob = np.asarray(Image.open(
            os.path.join(out, "000000_rgb_segmentation.png")))
        overlay = np.asarray(Image.open(
            os.path.join(out, "000000_rgb_overlay.png")))
        assert prob.shape == (64, 64)
        assert overlay.shape == (64, 64, 3)

    def test_eval_tau_auto(self, tmp_path, tiny_dataset, trained_ckpt):
        out = str(tmp_path / "evalauto")
        assert run("eval", "--data", tiny_dataset, "--ckpt", trained_ckpt,
                   "--out", out, "--tau-auto") == 0
        summary = json.loads(open(os.path.join(out, "summary.json")).read())
        assert summary["tau"] == pytest.approx(0.0075 * np.hypot(64, 64))

    def test_missing_checkpoint_fails(self, tmp_path, tiny_dataset, capsys):
        assert run("eval", "--data", tiny_dataset, "--ckpt",
                   str(tmp_path / "nope.mckp"), "--out",
                   str(tmp_path / "e")) == 1
