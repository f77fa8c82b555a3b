"""Construction and execution of multicameral encoder-decoder graphs.

A network is a sequence of columns over a 5-scale resolution ladder: a VGG16
backbone encoder first, then lightweight decoder units (scales 4..1) and
encoder units (scales 1..5), all densely coupled through resolution-wise skip
connections. Every non-backbone node is Concat -> Conv -> ReLU -> Dropout,
with optional coordinate-augmented or dilated-pyramid variants.

Decoder columns consume the deepest (scale 5) representation of the most
recent encoder column through an unpooling; encoder units consume the
previous column's full-resolution output through their scale-1 node. The
deepest node of an encoder unit keeps the backbone's channel width, while
all other unit nodes use the halved widths of the unit filter table.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from mcseg import autodiff as ad
from mcseg.autodiff import Tensor
from mcseg.optim import xavier_init

FULL_ENCODER_FILTERS = (64, 128, 256, 512, 512)
FULL_UNIT_FILTERS = (32, 64, 128, 256, 256)
VGG16_CONVS_PER_BLOCK = (2, 2, 3, 3, 3)

HEAD_KINDS = ("boundary", "occlusion", "segmentation")
ASPP_DILATIONS = (1, 3, 6)


@dataclass(frozen=True)
class FilterTable:
    """Per-scale channel counts, as a divisor of the full-VGG16 baseline."""

    divisor: int = 4

    def encoder(self, s):
        return FULL_ENCODER_FILTERS[s - 1] // self.divisor

    def unit(self, s):
        return FULL_UNIT_FILTERS[s - 1] // self.divisor

    def unit_out(self, s, scales):
        # deepest unit node mirrors the backbone width instead of the
        # halved unit width (calibrated against the published model sizes)
        if s == scales:
            return self.encoder(s)
        return self.unit(s)


@dataclass
class ColumnSpec:
    kind: str                  # "encoder" | "decoder"
    node_type: str = "plain"   # "plain" | "coords" | "atrous"
    pooling: str = "max"       # encoder units only; backbone always max-pools
    head: str = None           # head kind or None

    def validate(self, index):
        if self.kind not in ("encoder", "decoder"):
            raise ValueError("column %d: unknown kind %r" % (index, self.kind))
        if self.node_type not in ("plain", "coords", "atrous"):
            raise ValueError("column %d: unknown node_type %r"
                             % (index, self.node_type))
        if self.pooling not in ("max", "avg"):
            raise ValueError("column %d: unknown pooling %r" % (index, self.pooling))
        if self.head is not None and self.head not in HEAD_KINDS:
            raise ValueError("column %d: unknown head kind %r" % (index, self.head))
        if self.kind == "encoder" and self.head is not None:
            raise ValueError("column %d: encoder columns cannot carry a head"
                             % index)


@dataclass
class MCConfig:
    columns: list
    scales: int = 5
    merge_mode: str = "concat"       # "concat" | "sum" | "max"
    horizontal_skips: bool = True
    kernel_size: int = 5
    dropout_p: float = 0.5
    aspp_bridge: bool = False        # dilated-conv stack on top of the encoder

    def validate(self):
        if not self.columns:
            raise ValueError("config needs at least one column")
        if self.columns[0].kind != "encoder":
            raise ValueError("the first column must be the backbone encoder")
        if self.scales != 5:
            raise ValueError("only 5 resolution scales are supported")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.merge_mode not in ("concat", "sum", "max"):
            raise ValueError("unknown merge mode %r" % (self.merge_mode,))
        for i, col in enumerate(self.columns):
            col.validate(i)
        if self.columns[0].node_type == "atrous":
            raise ValueError("the backbone does not support atrous nodes")


@dataclass
class Node:
    name: str
    op: str             # input|conv|relu|sigmoid|maxpool|avgpool|unpool|merge|coords|dropout
    inputs: list
    attrs: dict = field(default_factory=dict)


class NetworkGraph:
    """Topologically ordered layer nodes plus their named parameters."""

    def __init__(self, config, filters):
        self.config = config
        self.filters = filters
        self.nodes = []
        self.heads = {}          # head name -> output node name
        self.params = {}         # tensor name -> Tensor
        self._names = set()

    def add(self, name, op, inputs, **attrs):
        if name in self._names:
            raise ValueError("duplicate node name %r" % name)
        for dep in inputs:
            if dep not in self._names and dep != "input":
                raise ValueError("node %r depends on unknown node %r" % (name, dep))
        self._names.add(name)
        self.nodes.append(Node(name, op, list(inputs), attrs))
        return name

    def add_param(self, name, tensor):
        if name in self.params:
            raise ValueError("duplicate parameter name %r" % name)
        self.params[name] = tensor


def count_parameters(graph):
    return sum(int(p.data.size) for p in graph.params.values())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, config, filters, rng, dtype):
        config.validate()
        self.cfg = config
        self.ft = filters
        self.rng = rng
        self.dtype = dtype
        self.graph = NetworkGraph(config, filters)
        self.outs = {}           # column index (1-based) -> {scale: node name}
        self.scale5_source = None

    # -- primitives ---------------------------------------------------------

    def _conv(self, name, src, cin, cout, k, dilation=1):
        g = self.graph
        w = xavier_init((cout, cin, k, k), self.rng, dtype=self.dtype)
        b = Tensor(np.zeros((1, cout, 1, 1), dtype=self.dtype), requires_grad=True)
        g.add_param(name + ".w", w)
        g.add_param(name + ".b", b)
        return g.add(name, "conv", [src], weight=name + ".w", bias=name + ".b",
                     dilation=dilation, cout=cout)

    def _merge(self, name, srcs):
        if len(srcs) == 1:
            return srcs[0]
        return self.graph.add(name, "merge", srcs, mode=self.cfg.merge_mode)

    def _coords(self, name, ref):
        return self.graph.add(name, "coords", [ref])

    def _dropout(self, name, src):
        if self.cfg.dropout_p <= 0:
            return src
        return self.graph.add(name, "dropout", [src], p=self.cfg.dropout_p)

    def _merged_channels(self, cins):
        if self.cfg.merge_mode == "concat":
            return sum(cins)
        if len(set(cins)) > 1:
            raise ValueError(
                "merge mode %r needs equal channel counts, got %s"
                % (self.cfg.merge_mode, cins))
        return cins[0]

    def _unit_node(self, base, srcs, cins, cout, node_type):
        """One Concat+Conv+ReLU+Dropout unit, with coords/atrous variants."""
        g = self.graph
        k = self.cfg.kernel_size
        if node_type == "coords":
            if self.cfg.merge_mode != "concat":
                raise ValueError("coords nodes require concat merging")
            coords = self._coords(base + ".coords", srcs[0])
            srcs = [coords] + srcs
            cins = [2] + list(cins)
        cin = self._merged_channels(list(cins))
        merged = self._merge(base + ".merge", srcs)
        if node_type == "atrous":
            pre = self._conv(base + ".pre", merged, cin, cout, 1)
            branches = [self._conv(base + ".d%d" % d, pre, cout, cout, k,
                                   dilation=d) for d in ASPP_DILATIONS]
            cat = g.add(base + ".cat", "merge", branches, mode="concat")
            conv = self._conv(base + ".post", cat, cout * len(ASPP_DILATIONS),
                              cout, 1)
        else:
            conv = self._conv(base + ".conv", merged, cin, cout, k)
        act = g.add(base + ".relu", "relu", [conv])
        return self._dropout(base + ".drop", act)

    # -- columns ------------------------------------------------------------

    def backbone(self):
        col = self.cfg.columns[0]
        g = self.graph
        ft = self.ft
        coords = col.node_type == "coords"
        prev = g.add("input", "input", [])
        cin = 3
        outs = {}
        for s in range(1, self.cfg.scales + 1):
            cout = ft.encoder(s)
            if s > 1:
                prev = g.add("e1.pool%d" % (s - 1), "maxpool", [prev])
            for i in range(1, VGG16_CONVS_PER_BLOCK[s - 1] + 1):
                base = "e1.s%d.c%d" % (s, i)
                src = prev
                c = cin
                if coords:
                    cc = self._coords(base + ".coords", src)
                    src = g.add(base + ".withcoords", "merge", [cc, prev],
                                mode="concat")
                    c += 2
                conv = self._conv(base, src, c, cout, 3)
                prev = g.add(base + ".relu", "relu", [conv])
                cin = cout
            outs[s] = prev
        self.outs[1] = outs
        self.scale5_source = outs[self.cfg.scales]
        self.channels = {1: {s: ft.encoder(s) for s in outs}}

    def aspp_bridge(self):
        """Aggregated dilated 3x3 convolutions on top of the deep encoder."""
        g = self.graph
        c5 = self.ft.encoder(self.cfg.scales)
        src = self.scale5_source
        branches = []
        for d in ASPP_DILATIONS:
            branches.append(self._conv("aspp.d%d" % d, src, c5, c5, 3,
                                       dilation=d))
        cat = g.add("aspp.cat", "merge", branches, mode="concat")
        fuse = self._conv("aspp.fuse", cat, c5 * len(ASPP_DILATIONS), c5, 1)
        act = g.add("aspp.relu", "relu", [fuse])
        self.scale5_source = self._dropout("aspp.drop", act)

    def _skips(self, t, s):
        return [self.outs[tp][s] for tp in range(1, t) if s in self.outs[tp]]

    def _skip_channel_list(self, t, s):
        return [self.channels[tp][s] for tp in range(1, t)
                if s in self.channels[tp]]

    def decoder_column(self, t, col):
        g = self.graph
        S = self.cfg.scales
        outs, chans = {}, {}
        deep5 = self.scale5_source
        c5 = self.channels[self._latest_scale5_col()][S]
        for s in range(S - 1, 0, -1):
            base = "d%d.s%d" % (t, s)
            if s == S - 1:
                vert_src, vert_c = deep5, c5
            else:
                vert_src, vert_c = outs[s + 1], chans[s + 1]
            vert = g.add(base + ".up", "unpool", [vert_src])
            srcs = [vert]
            cins = [vert_c]
            if self.cfg.horizontal_skips:
                srcs += self._skips(t, s)
                cins += self._skip_channel_list(t, s)
            cout = self.ft.unit(s)
            outs[s] = self._unit_node(base, srcs, cins, cout, col.node_type)
            chans[s] = cout
        self.outs[t] = outs
        self.channels[t] = chans

    def encoder_column(self, t, col):
        g = self.graph
        S = self.cfg.scales
        pool_op = "avgpool" if col.pooling == "avg" else "maxpool"
        outs, chans = {}, {}
        for s in range(1, S + 1):
            base = "e%d.s%d" % (t, s)
            if s == 1:
                if self.cfg.horizontal_skips:
                    srcs = self._skips(t, 1)
                    cins = self._skip_channel_list(t, 1)
                else:
                    srcs = [self.outs[t - 1][1]]
                    cins = [self.channels[t - 1][1]]
            else:
                vert = g.add(base + ".pool", pool_op, [outs[s - 1]])
                srcs = [vert]
                cins = [chans[s - 1]]
                if self.cfg.horizontal_skips:
                    srcs += self._skips(t, s)
                    cins += self._skip_channel_list(t, s)
            cout = self.ft.unit_out(s, S)
            outs[s] = self._unit_node(base, srcs, cins, cout, col.node_type)
            chans[s] = cout
        self.outs[t] = outs
        self.channels[t] = chans
        self.scale5_source = outs[S]

    def _latest_scale5_col(self):
        latest = 1
        for tp in sorted(self.channels):
            if self.cfg.scales in self.channels[tp]:
                latest = tp
        return latest

    # -- heads ---------------------------------------------------------------

    def head_names(self):
        """Stable head names: repeated kinds get an _aux suffix except the last."""
        kinds = [c.head for c in self.cfg.columns if c.head is not None]
        names = []
        seen = {}
        remaining = {k: kinds.count(k) for k in set(kinds)}
        for k in kinds:
            remaining[k] -= 1
            if remaining[k] == 0:
                names.append(k)
            else:
                seen[k] = seen.get(k, 0) + 1
                suffix = "_aux" if seen[k] == 1 else "_aux%d" % seen[k]
                names.append(k + suffix)
        return names

    def build(self):
        self.backbone()
        if self.cfg.aspp_bridge:
            self.aspp_bridge()
        for t, col in enumerate(self.cfg.columns[1:], start=2):
            if col.kind == "decoder":
                self.decoder_column(t, col)
            else:
                self.encoder_column(t, col)
        names = iter(self.head_names())
        for t, col in enumerate(self.cfg.columns):
            if col.head is not None:
                attach_head(self.graph, self.outs[t + 1][1],
                            self.channels[t + 1][1], col.head,
                            name=next(names), rng=self.rng, dtype=self.dtype)
        return self.graph


def attach_head(graph, node_name, in_channels, kind, name=None, rng=None,
                dtype=np.float32):
    """Conv+Sigmoid 1-channel head on a column's full-resolution node."""
    if kind not in HEAD_KINDS:
        raise ValueError("unknown head kind %r" % (kind,))
    name = name or kind
    if name in graph.heads:
        raise ValueError("duplicate head name %r" % name)
    rng = rng if rng is not None else np.random.default_rng(0)
    k = graph.config.kernel_size
    base = "head.%s" % name
    w = xavier_init((1, in_channels, k, k), rng, dtype=dtype)
    b = Tensor(np.zeros((1, 1, 1, 1), dtype=dtype), requires_grad=True)
    graph.add_param(base + ".w", w)
    graph.add_param(base + ".b", b)
    conv = graph.add(base, "conv", [node_name], weight=base + ".w",
                     bias=base + ".b", dilation=1, cout=1)
    out = graph.add(base + ".sig", "sigmoid", [conv])
    graph.heads[name] = out
    return graph


def build_backbone(filters, rng=None, dtype=np.float32):
    """Standalone VGG16-shaped backbone graph (13 convs, 4 max pools)."""
    cfg = MCConfig(columns=[ColumnSpec(kind="encoder")])
    return build_multicameral(cfg, filters, rng=rng, dtype=dtype)


def build_multicameral(config, filters=None, rng=None, dtype=np.float32):
    if filters is None:
        filters = FilterTable()
    if rng is None:
        rng = np.random.default_rng(0)
    return _Builder(config, filters, rng, dtype).build()


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def forward(graph, batch, training=False, rng=None, tape=None):
    """Evaluate all heads in one pass; returns {head name: (n,1,H,W) tensor}."""
    cfg = graph.config
    n, c, h, w = batch.shape
    if c != 3:
        raise ValueError("expected a 3-channel input, got %d channels" % c)
    div = 2 ** (cfg.scales - 1)
    if h % div or w % div:
        raise ValueError("input spatial dims must be divisible by %d, got %dx%d"
                         % (div, h, w))
    if training and cfg.dropout_p > 0 and rng is None:
        raise ValueError("training forward needs an rng for dropout")

    env = {"input": batch}
    for node in graph.nodes:
        if node.op == "input":
            continue
        srcs = [env[nm] for nm in node.inputs]
        if node.op == "conv":
            out = ad.conv2d(srcs[0], graph.params[node.attrs["weight"]],
                            graph.params[node.attrs["bias"]],
                            dilation=node.attrs["dilation"], tape=tape)
        elif node.op == "relu":
            out = ad.relu(srcs[0], tape=tape)
        elif node.op == "sigmoid":
            out = ad.sigmoid(srcs[0], tape=tape)
        elif node.op == "maxpool":
            out = ad.max_pool2(srcs[0], tape=tape)
        elif node.op == "avgpool":
            out = ad.avg_pool2(srcs[0], tape=tape)
        elif node.op == "unpool":
            out = ad.unpool2(srcs[0], tape=tape)
        elif node.op == "merge":
            out = ad.merge(srcs, mode=node.attrs["mode"], tape=tape)
        elif node.op == "coords":
            ref = srcs[0]
            out = ad.coord_channels(ref.shape[0], ref.shape[2], ref.shape[3],
                                    dtype=ref.dtype)
        elif node.op == "dropout":
            out = ad.dropout(srcs[0], node.attrs["p"], training, rng=rng,
                             tape=tape)
        else:
            raise ValueError("unknown node op %r" % (node.op,))
        env[node.name] = out
    return {name: env[node] for name, node in graph.heads.items()}


# ---------------------------------------------------------------------------
# presets and config files
# ---------------------------------------------------------------------------

def _dec(head=None, node_type="plain"):
    return ColumnSpec(kind="decoder", node_type=node_type, head=head)


def _enc(pooling="avg", node_type="plain"):
    return ColumnSpec(kind="encoder", pooling=pooling, node_type=node_type)


def _backbone_col(node_type="plain"):
    return ColumnSpec(kind="encoder", node_type=node_type)


def _preset_columns(name):
    if name in ("mc2", "red"):
        return [_backbone_col(), _dec("segmentation")], {}
    if name == "mc3":
        return [_backbone_col(), _dec(), _dec("segmentation")], {}
    if name == "mc3d":
        return [_backbone_col(), _dec("boundary"), _dec("occlusion")], {}
    if name == "mc4":
        return [_backbone_col(), _dec(), _dec(), _dec("segmentation")], {}
    if name == "mc4d":
        return [_backbone_col(), _dec("boundary"), _dec("occlusion"),
                _dec("segmentation")], {}
    if name == "mc6d":
        return [_backbone_col(), _dec("boundary"), _dec("occlusion"),
                _dec("segmentation"), _enc(), _dec("segmentation")], {}
    if name == "mc6d_atrous_d4":
        cols, kw = _preset_columns("mc6d")
        cols[3] = replace(cols[3], node_type="atrous")
        return cols, kw
    if name == "mc6d_coords_d4":
        cols, kw = _preset_columns("mc6d")
        cols[3] = replace(cols[3], node_type="coords")
        return cols, kw
    if name == "red_coords":
        return [_backbone_col(), _dec("segmentation", node_type="coords")], {}
    if name == "red_atrous":
        cols, _ = _preset_columns("mc2")
        return cols, {"aspp_bridge": True}
    if name == "mc2_coords_d":
        return [_backbone_col(node_type="coords"),
                _dec("segmentation", node_type="coords")], {}
    if name == "mc2_atrous_d":
        return [_backbone_col(), _dec("segmentation", node_type="atrous")], {}
    if name == "mc4sd":
        return [_backbone_col(), _dec("segmentation"), _enc(),
                _dec("segmentation")], {}
    if name == "mc4sd_atrous_d2":
        cols, kw = _preset_columns("mc4sd")
        cols[1] = replace(cols[1], node_type="atrous")
        return cols, kw
    raise KeyError(name)


PRESET_NAMES = ("mc2", "mc3", "mc3d", "mc4", "mc4d", "mc6d", "mc6d_atrous_d4",
                "mc6d_coords_d4", "red_coords", "red_atrous", "mc2_coords_d",
                "mc2_atrous_d", "mc4sd", "mc4sd_atrous_d2")


def preset_config(name):
    """Named architecture preset -> (MCConfig, FilterTable).

    A ``_full``, ``_pruned`` or ``_div<N>`` suffix picks the filter table
    (default: pruned, i.e. a quarter of the full VGG16 widths).
    """
    base = name.lower()
    divisor = 4
    for suffix, d in (("_full", 1), ("_pruned", 4)):
        if base.endswith(suffix):
            base = base[:-len(suffix)]
            divisor = d
            break
    else:
        if "_div" in base:
            base, _, num = base.rpartition("_div")
            divisor = int(num)
    try:
        columns, kwargs = _preset_columns(base)
    except KeyError:
        raise ValueError("unknown architecture preset %r (known: %s)"
                         % (name, ", ".join(PRESET_NAMES)))
    return MCConfig(columns=columns, **kwargs), FilterTable(divisor=divisor)


def config_from_dict(doc):
    """Build (MCConfig, FilterTable) from a parsed JSON document."""
    cols = []
    for i, c in enumerate(doc.get("columns", [])):
        cols.append(ColumnSpec(
            kind=c.get("kind", "decoder"),
            node_type=c.get("node_type", "plain"),
            pooling=c.get("pooling", "avg" if i > 0 else "max"),
            head=c.get("head"),
        ))
    cfg = MCConfig(
        columns=cols,
        scales=doc.get("scales", 5),
        merge_mode=doc.get("merge_mode", "concat"),
        horizontal_skips=doc.get("horizontal_skips", True),
        kernel_size=doc.get("kernel_size", 5),
        dropout_p=doc.get("dropout_p", 0.5),
        aspp_bridge=doc.get("aspp_bridge", False),
    )
    cfg.validate()
    return cfg, FilterTable(divisor=doc.get("divisor", 4))


def resolve_arch(spec):
    """Accept a preset name or a path to a JSON config document."""
    if spec.endswith(".json"):
        with open(spec) as fh:
            return config_from_dict(json.load(fh))
    return preset_config(spec)
