import json

import numpy as np
import pytest

from mcseg import autodiff as ad
from mcseg.autodiff import Tensor
from mcseg.networks import (FilterTable, MCConfig, ColumnSpec,
                            attach_head, build_backbone, build_multicameral,
                            config_from_dict, count_parameters, forward,
                            preset_config, resolve_arch)

PUBLISHED_COUNTS = {
    "mc2": 1_465_105,
    "mc3": 2_145_225,
    "mc4": 2_961_345,
    "mc4d": 2_961_747,
    "mc6d": 5_411_916,
    "red_coords": 1_471_105,
    "red_atrous": 1_957_137,
    "mc2_coords_d": 1_490_113,
    "mc2_atrous_d": 1_367_665,
    "mc6d_coords_d4": 5_417_916,
    "mc6d_atrous_d4": 5_053_356,
    "mc4sd_atrous_d2": 3_273_834,
    "mc3d_full": 34_301_250,
}


def build(name, rng=None, dtype=np.float32):
    cfg, ft = preset_config(name)
    return build_multicameral(cfg, ft, rng=rng, dtype=dtype)


class TestBackbone:
    def test_pruned_block1_channels(self):
        g = build_backbone(FilterTable(4))
        assert g.params["e1.s1.c1.w"].shape == (16, 3, 3, 3)

    def test_full_block3_channels(self):
        g = build_backbone(FilterTable(1))
        assert g.params["e1.s3.c1.w"].shape == (256, 128, 3, 3)

    def test_thirteen_convs(self):
        g = build_backbone(FilterTable(4))
        convs = [n for n in g.nodes if n.op == "conv"]
        assert len(convs) == 13
        pools = [n for n in g.nodes if n.op == "maxpool"]
        assert len(pools) == 4


class TestParameterCounts:
    @pytest.mark.parametrize("name,expected", sorted(PUBLISHED_COUNTS.items()))
    def test_published_count(self, name, expected):
        assert count_parameters(build(name)) == expected

    def test_empty_graph(self):
        from mcseg.networks import NetworkGraph
        g = NetworkGraph(None, None)
        assert count_parameters(g) == 0

    def test_count_invariant_to_input_size(self, rng):
        g = build("mc2_div8", rng=rng)
        before = count_parameters(g)
        for shape in [(1, 3, 32, 32), (2, 3, 64, 48)]:
            forward(g, Tensor(rng.standard_normal(shape).astype(np.float32)))
        assert count_parameters(g) == before


class TestHeads:
    def test_mc3d_heads(self):
        g = build("mc3d")
        assert set(g.heads) == {"boundary", "occlusion"}

    def test_mc6d_exposes_four_heads(self):
        g = build("mc6d")
        assert list(g.heads) == ["boundary", "occlusion", "segmentation_aux",
                                 "segmentation"]

    def test_head_output_shape(self, rng):
        g = build("mc2_div8", rng=rng)
        x = Tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
        out = forward(g, x)
        assert out["segmentation"].shape == (2, 1, 32, 32)

    def test_duplicate_head_rejected(self, rng):
        g = build("mc2_div8", rng=rng)
        with pytest.raises(ValueError):
            attach_head(g, g.heads["segmentation"], 1, "segmentation")

    def test_head_on_encoder_column_rejected(self):
        cols = [ColumnSpec(kind="encoder", head="boundary")]
        with pytest.raises(ValueError):
            MCConfig(columns=cols).validate()


class TestWiring:
    def node(self, g, name):
        for n in g.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def test_decoder_in_edges_follow_column_order(self):
        g = build("mc3")
        merge = self.node(g, "d3.s3.merge")
        assert merge.inputs == ["d3.s3.up", "e1.s3.c3.relu", "d2.s3.drop"]
        up = self.node(g, "d3.s4.up")
        assert up.inputs == ["e1.s5.c3.relu"]  # deepest encoder output

    def test_encoder_unit_in_edges(self):
        g = build("mc6d")
        s1 = self.node(g, "e5.s1.merge")
        assert s1.inputs == ["e1.s1.c2.relu", "d2.s1.drop", "d3.s1.drop",
                             "d4.s1.drop"]
        s2 = self.node(g, "e5.s2.pool")
        assert s2.op == "avgpool"
        # the refinement decoder consumes the refinement encoder's deep output
        up = self.node(g, "d6.s4.up")
        assert up.inputs == ["e5.s5.drop"]
        assert g.params["e5.s5.conv.w"].shape[0] == 128

    def test_without_skips_matches_ablation_wiring(self):
        cfg, ft = preset_config("mc3d")
        cfg.horizontal_skips = False
        g = build_multicameral(cfg, ft)
        names = {n.name for n in g.nodes}
        assert "d2.s3.merge" not in names  # single-input merges collapse
        conv = self.node(g, "d2.s3.conv")
        assert conv.inputs == ["d2.s3.up"]
        # both decoders hang off the shared deepest representation
        assert self.node(g, "d2.s4.up").inputs == ["e1.s5.c3.relu"]
        assert self.node(g, "d3.s4.up").inputs == ["e1.s5.c3.relu"]

    def test_acyclic_topological_order(self):
        g = build("mc6d_atrous_d4")
        seen = set()
        for n in g.nodes:
            for dep in n.inputs:
                assert dep in seen or dep == "input"
            seen.add(n.name)

    def test_decoder_first_rejected(self):
        with pytest.raises(ValueError):
            MCConfig(columns=[ColumnSpec(kind="decoder")]).validate()


class TestForward:
    def test_zero_weights_give_half_everywhere(self, rng):
        g = build("mc3d_div8", rng=rng)
        for p in g.params.values():
            p.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        out = forward(g, x)
        for head in out.values():
            np.testing.assert_array_equal(head.data,
                                          np.full_like(head.data, 0.5))

    def test_output_matches_input_size(self, rng):
        g = build("mc2_div8", rng=rng)
        x = Tensor(rng.standard_normal((1, 3, 48, 64)).astype(np.float32))
        assert forward(g, x)["segmentation"].shape == (1, 1, 48, 64)

    def test_indivisible_size_rejected(self, rng):
        g = build("mc2_div8", rng=rng)
        with pytest.raises(ValueError):
            forward(g, Tensor(np.zeros((1, 3, 40, 40), dtype=np.float32)))

    def test_wrong_channels_rejected(self, rng):
        g = build("mc2_div8", rng=rng)
        with pytest.raises(ValueError):
            forward(g, Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32)))

    def test_mc2_equals_handwired_red(self, rng):
        g = build("mc2_div8", rng=np.random.default_rng(5), dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 3, 32, 32)))
        got = forward(g, x)["segmentation"].data

        p = g.params
        convs_per_block = (2, 2, 3, 3, 3)
        h = x
        skips = {}
        for s in range(1, 6):
            if s > 1:
                h = ad.max_pool2(h)
            for i in range(1, convs_per_block[s - 1] + 1):
                h = ad.relu(ad.conv2d(h, p["e1.s%d.c%d.w" % (s, i)],
                                      p["e1.s%d.c%d.b" % (s, i)]))
            skips[s] = h
        d = skips[5]
        for s in range(4, 0, -1):
            cat = ad.concat_channels([ad.unpool2(d), skips[s]])
            d = ad.relu(ad.conv2d(cat, p["d2.s%d.conv.w" % s],
                                  p["d2.s%d.conv.b" % s]))
        want = ad.sigmoid(ad.conv2d(d, p["head.segmentation.w"],
                                    p["head.segmentation.b"])).data
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_sum_merge_reproduced_by_tied_concat(self, rng):
        # build sum-merge and concat-merge graphs with identical seeds, tie
        # the concat weights across both halves, and compare forwards
        cfg_sum, ft = preset_config("mc2_div8")
        cfg_sum.merge_mode = "sum"
        g_sum = build_multicameral(cfg_sum, ft, rng=np.random.default_rng(3),
                                   dtype=np.float64)
        cfg_cat, _ = preset_config("mc2_div8")
        g_cat = build_multicameral(cfg_cat, ft, rng=np.random.default_rng(3),
                                   dtype=np.float64)
        for name, p in g_sum.params.items():
            q = g_cat.params[name]
            if q.data.shape == p.data.shape:
                q.data = p.data.copy()
            else:  # decoder conv: concat saw [vertical, skip], tie both halves
                k = p.data.shape[1]
                assert q.data.shape[1] == 2 * k
                q.data = np.concatenate([p.data, p.data], axis=1)
        x = Tensor(rng.standard_normal((1, 3, 32, 32)))
        out_sum = forward(g_sum, x)["segmentation"].data
        out_cat = forward(g_cat, x)["segmentation"].data
        np.testing.assert_allclose(out_cat, out_sum, rtol=1e-10, atol=1e-12)

    def test_avg_vs_max_refinement_pooling_not_degenerate(self, rng):
        cfg_a, ft = preset_config("mc6d_div8")
        g_a = build_multicameral(cfg_a, ft, rng=np.random.default_rng(7))
        cfg_b, _ = preset_config("mc6d_div8")
        cfg_b.columns[4].pooling = "max"
        g_b = build_multicameral(cfg_b, ft, rng=np.random.default_rng(7))
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        out_a = forward(g_a, x)["segmentation"].data
        out_b = forward(g_b, x)["segmentation"].data
        assert not np.array_equal(out_a, out_b)

    def test_forward_deterministic_under_training_seed(self, rng):
        g = build("mc2_div8", rng=np.random.default_rng(2))
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        a = forward(g, x, training=True, rng=np.random.default_rng(11))
        b = forward(g, x, training=True, rng=np.random.default_rng(11))
        np.testing.assert_array_equal(a["segmentation"].data,
                                      b["segmentation"].data)


class TestConfigDocuments:
    def test_json_round_trip(self, tmp_path):
        doc = {
            "divisor": 8,
            "kernel_size": 5,
            "columns": [
                {"kind": "encoder"},
                {"kind": "decoder", "head": "boundary"},
                {"kind": "decoder", "head": "occlusion", "node_type": "coords"},
            ],
        }
        path = tmp_path / "arch.json"
        path.write_text(json.dumps(doc))
        cfg, ft = resolve_arch(str(path))
        assert ft.divisor == 8
        assert cfg.columns[2].node_type == "coords"
        g = build_multicameral(cfg, ft)
        assert set(g.heads) == {"boundary", "occlusion"}

    def test_preset_suffixes(self):
        assert preset_config("mc2_full")[1].divisor == 1
        assert preset_config("mc2_pruned")[1].divisor == 4
        assert preset_config("mc2_div8")[1].divisor == 8
        with pytest.raises(ValueError):
            preset_config("nonsense")

    def test_unknown_column_kind_rejected(self):
        assert config_from_dict({"columns": [{"kind": "encoder"},
                                             {"kind": "decoder"}]})
        with pytest.raises(ValueError):
            config_from_dict({"columns": [{"kind": "wat"}]})
