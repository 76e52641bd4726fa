"""Graph builders: residual dense blocks, CBAM, upsampling blocks, full networks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .graph import GraphError, LayerNode, NetworkGraph, ParamSpec

UPSAMPLE_MODES = ("traditional", "attention_transpose", "attention_pixelshuffle")
KINDS = ("mask_generator", "smfd_unet")


@dataclass(frozen=True)
class NetConfig:
    stages: int = 4
    base_channels: int = 32
    rdc_depth: int = 1
    rdc_growth: int | None = None  # None: half the block's output channels
    classes: int = 5
    upsample: str = "attention_pixelshuffle"
    postprocess: bool = True
    mask_branch: bool = True
    attention: bool = True
    cbam_reduction: int = 8
    bottleneck_factor: int = 1
    input_size: int = 256

    def __post_init__(self):
        for f in ("stages", "base_channels", "classes", "cbam_reduction",
                  "bottleneck_factor", "input_size"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.rdc_depth < 0:
            raise ValueError("rdc_depth must be non-negative")
        if self.rdc_growth is not None and self.rdc_growth < 1:
            raise ValueError("rdc_growth must be positive")
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}")

    def growth_for(self, out_ch: int) -> int:
        return self.rdc_growth or max(1, out_ch // 2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "NetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


ABLATIONS = {
    "backbone": NetConfig(mask_branch=False, upsample="traditional", postprocess=False),
    "mask_branch_traditional": NetConfig(upsample="traditional", postprocess=False),
    "mask_branch_attention_transpose": NetConfig(upsample="attention_transpose", postprocess=False),
    "mask_branch_attention_pixelshuffle": NetConfig(postprocess=False),
    "mask_branch_attention_postprocess": NetConfig(),
}


class GraphBuilder:
    """Accumulates nodes and parameter specs while tracking declared shapes."""

    def __init__(self, name: str = "net"):
        self.name = name
        self.nodes: list[LayerNode] = []
        self.params: dict[str, ParamSpec] = {}
        self.inputs: dict[str, int] = {}
        self.stages: dict[str, str] = {}
        self._shape: dict[str, tuple[int, int]] = {}

    def channels(self, x: str) -> int:
        return self._shape[x][0]

    def level(self, x: str) -> int:
        return self._shape[x][1]

    def _add(self, id, kind, inputs, channels, level, **params):
        if id in self._shape:
            raise GraphError(f"duplicate node id {id}")
        self.nodes.append(LayerNode(id, kind, tuple(inputs), params, channels, level))
        self._shape[id] = (channels, level)
        return id

    def _param(self, name, shape, trainable=True, init="glorot", fan=(1, 1)):
        if name not in self.params:
            self.params[name] = ParamSpec(tuple(shape), trainable, init, fan)
        elif self.params[name].shape != tuple(shape):
            raise GraphError(f"parameter {name} reused with a different shape")
        return name

    def input(self, id, channels):
        self.inputs[id] = channels
        return self._add(id, "input", (), channels, 0)

    def conv(self, x, out, id, k=3, bias=True, share=None):
        """k x k same-padded convolution; ``share`` reuses another conv's weights."""
        cin = self.channels(x)
        key = share or id
        w = self._param(f"{key}.w", (k, k, cin, out), fan=(k * k * cin, k * k * out))
        params = {"w": w, "stride": 1, "padding": "same"}
        if bias:
            params["b"] = self._param(f"{key}.b", (out,), init="zeros")
        return self._add(id, "conv", [x], out, self.level(x), **params)

    def transpose_up(self, x, out, id, k=2):
        cin = self.channels(x)
        w = self._param(f"{id}.w", (k, k, cin, out), fan=(k * k * cin, k * k * out))
        b = self._param(f"{id}.b", (out,), init="zeros")
        return self._add(id, "transpose_up", [x], out, self.level(x) - 1, w=w, b=b, stride=2)

    def bn(self, x, id):
        c = self.channels(x)
        return self._add(
            id, "bn", [x], c, self.level(x),
            gamma=self._param(f"{id}.gamma", (c,), init="ones"),
            beta=self._param(f"{id}.beta", (c,), init="zeros"),
            mean=self._param(f"{id}.mean", (c,), trainable=False, init="zeros"),
            var=self._param(f"{id}.var", (c,), trainable=False, init="ones"),
            eps=1e-5, momentum=0.9)

    def act(self, x, fn, id, role=None):
        params = {"fn": fn}
        if role:
            params["role"] = role
        return self._add(id, "act", [x], self.channels(x), self.level(x), **params)

    def pool(self, x, id):
        return self._add(id, "pool", [x], self.channels(x), self.level(x) + 1,
                         window=2, stride=2, mode="max")

    def nearest_up(self, x, id):
        return self._add(id, "nearest_up", [x], self.channels(x), self.level(x) - 1, factor=2)

    def pixel_up(self, x, id, r=2):
        c = self.channels(x)
        if c % (r * r):
            raise GraphError(f"{id}: {c} channels not divisible by {r * r}")
        return self._add(id, "pixel_up", [x], c // (r * r), self.level(x) - 1, factor=r)

    def concat(self, xs, id):
        levels = {self.level(x) for x in xs}
        if len(levels) != 1:
            raise GraphError(f"{id}: concatenating tensors at different resolutions")
        return self._add(id, "concat", xs, sum(self.channels(x) for x in xs), levels.pop())

    def add(self, a, b, id):
        return self._add(id, "add", [a, b], self.channels(a), self.level(a))

    def mul(self, a, b, id):
        return self._add(id, "mul", [a, b], self.channels(a), self.level(a))

    def reduce(self, x, op, over, id):
        if over == "channel":
            return self._add(id, "reduce", [x], 1, self.level(x), op=op, over=over)
        # level None marks a 1x1 spatial map
        return self._add(id, "reduce", [x], self.channels(x), None, op=op, over=over)

    def postprocess(self, x, id, contrast=2.0, brightness=0.1):
        return self._add(id, "postprocess", [x], self.channels(x), self.level(x),
                         contrast=contrast, brightness=brightness)

    def clamp(self, x, id, lo=0.0, hi=1.0):
        return self._add(id, "clamp", [x], self.channels(x), self.level(x), lo=lo, hi=hi)

    def stage(self, label, x):
        self.stages[label] = x
        return x

    def build(self, output: str) -> NetworkGraph:
        return NetworkGraph(tuple(self.nodes), dict(self.inputs), output, dict(self.params),
                            self.name, dict(self.stages))


# ---------------------------------------------------------------------------
# blocks


def rdc(b: GraphBuilder, x: str, out: int, depth: int, growth: int, id: str) -> str:
    """Residual dense convolution block.

    Unit i convolves the concatenation of the block input and all earlier
    unit outputs (conv 3x3 -> BN -> ReLU). A 1x1 conv fuses the full
    concatenation, a 1x1 conv projects the input, and their sum goes
    through a final ReLU.
    """
    feats = [x]
    cur = x
    for i in range(depth):
        h = b.conv(cur, growth, f"{id}.unit{i}.conv")
        h = b.bn(h, f"{id}.unit{i}.bn")
        h = b.act(h, "relu", f"{id}.unit{i}.relu")
        feats.append(h)
        cur = b.concat(feats, f"{id}.cat{i}")
    fused = b.conv(cur, out, f"{id}.fuse", k=1)
    proj = b.conv(x, out, f"{id}.proj", k=1)
    return b.act(b.add(fused, proj, f"{id}.add"), "relu", f"{id}.out")


def cbam(b: GraphBuilder, x: str, reduction: int, id: str) -> str:
    """Channel attention then spatial attention, both as sigmoid gates."""
    c = b.channels(x)
    if reduction < 1 or reduction > c or c % reduction:
        raise GraphError(f"{id}: reduction {reduction} must divide {c} channels")
    hidden = c // reduction
    pooled = []
    for kind in ("avg", "max"):
        r = b.reduce(x, "mean" if kind == "avg" else "max", "spatial", f"{id}.ch_{kind}")
        h = b.conv(r, hidden, f"{id}.ch_{kind}.fc1", k=1, share=f"{id}.mlp1")
        h = b.act(h, "relu", f"{id}.ch_{kind}.relu")
        pooled.append(b.conv(h, c, f"{id}.ch_{kind}.fc2", k=1, share=f"{id}.mlp2"))
    wc = b.act(b.add(pooled[0], pooled[1], f"{id}.ch_sum"), "sigmoid", f"{id}.ch_gate",
               role="gate")
    xc = b.mul(x, wc, f"{id}.ch_out")
    avg = b.reduce(xc, "mean", "channel", f"{id}.sp_avg")
    mx = b.reduce(xc, "max", "channel", f"{id}.sp_max")
    s = b.conv(b.concat([avg, mx], f"{id}.sp_cat"), 1, f"{id}.sp_conv", k=7)
    ws = b.act(s, "sigmoid", f"{id}.sp_gate", role="gate")
    return b.mul(xc, ws, f"{id}.out")


def fit_reduction(channels: int, reduction: int) -> int:
    """Largest divisor of ``channels`` not above ``reduction``."""
    r = min(reduction, channels)
    while channels % r:
        r -= 1
    return r


def upsample_block(b: GraphBuilder, x: str, skip: str, mode: str, out: int, id: str,
                   reduction: int = 8) -> str:
    """Double the resolution of ``x`` and concatenate the skip connection.

    Attention variants gate the skip with CBAM first.
    """
    if mode == "attention_pixelshuffle":
        u = b.conv(x, out * 4, f"{id}.expand")
        u = b.act(b.pixel_up(u, f"{id}.shuffle"), "relu", f"{id}.relu")
    elif mode == "attention_transpose":
        u = b.act(b.transpose_up(x, out, f"{id}.tconv"), "relu", f"{id}.relu")
    elif mode == "traditional":
        u = b.act(b.conv(b.nearest_up(x, f"{id}.nearest"), out, f"{id}.conv"), "relu",
                  f"{id}.relu")
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    if mode != "traditional":
        skip = cbam(b, skip, fit_reduction(b.channels(skip), reduction), f"{id}.skip_cbam")
    return b.concat([u, skip], f"{id}.cat")


def build_rdc(in_ch: int, depth: int, growth: int, out_ch: int) -> NetworkGraph:
    if min(in_ch, growth, out_ch) < 1 or depth < 0:
        raise ValueError("channel counts must be positive and depth non-negative")
    b = GraphBuilder("rdc")
    x = b.input("x", in_ch)
    return b.build(rdc(b, x, out_ch, depth, growth, "rdc"))


def build_cbam(channels: int, reduction: int) -> NetworkGraph:
    b = GraphBuilder("cbam")
    x = b.input("x", channels)
    return b.build(cbam(b, x, reduction, "cbam"))


def build_upsample_block(mode: str, in_ch: int, skip_ch: int, out_ch: int,
                         reduction: int = 8) -> NetworkGraph:
    """Standalone block with inputs ``x`` (level 1) and ``skip`` (level 0)."""
    b = GraphBuilder(f"up_{mode}")
    b.input("skip", skip_ch)
    x = b._add("x", "input", (), in_ch, 1)
    b.inputs["x"] = in_ch
    return b.build(upsample_block(b, x, "skip", mode, out_ch, "up", reduction))


def postprocess_image(img: np.ndarray, c: float = 2.0, b: float = 0.1,
                      clamp: bool = False) -> np.ndarray:
    """(img - mean) * c + mean + b with the scalar mean of ``img``."""
    img = np.asarray(img, dtype=np.float64)
    mu = img.mean()
    out = (img - mu) * c + mu + b
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# networks


def _encoder(b, x, cfg, prefix):
    skips = []
    for k in range(cfg.stages):
        ch = cfg.base_channels << k
        e = rdc(b, x, ch, cfg.rdc_depth, cfg.growth_for(ch), f"{prefix}{k}")
        skips.append(b.stage(f"{prefix}{k}", e))
        x = b.pool(e, f"{prefix}{k}.pool")
    return skips, x


def _decoder(b, x, skips, cfg):
    for k in reversed(range(cfg.stages)):
        ch = cfg.base_channels << k
        u = upsample_block(b, x, skips[k], cfg.upsample, ch, f"up{k}", cfg.cbam_reduction)
        if k > 0:
            x = b.stage(f"dec{k}", rdc(b, u, ch, cfg.rdc_depth, cfg.growth_for(ch), f"dec{k}"))
        else:
            x = u
    if cfg.attention:
        x = cbam(b, x, fit_reduction(b.channels(x), cfg.cbam_reduction), "final.cbam")
    ch = cfg.base_channels
    return b.stage("final", rdc(b, x, ch, cfg.rdc_depth, cfg.growth_for(ch), "final.rdc"))


def build_network(kind: str, config: NetConfig | None = None) -> NetworkGraph:
    """Build the mask generator or the mask-fused deblurring network.

    Both are U-shaped: ``stages`` RDC + max-pool encoder steps, a bottleneck
    RDC, then one upsampling block per stage. The deblurring network runs a
    second encoder over the one-hot mask and concatenates matching stages.
    """
    cfg = config or NetConfig()
    if cfg.input_size >> cfg.stages < 1 or cfg.input_size % (1 << cfg.stages):
        raise GraphError(f"input size {cfg.input_size} cannot be pooled {cfg.stages} times")
    if not cfg.attention and cfg.upsample != "traditional":
        # attention upsampling carries CBAM on the skip path by definition
        raise GraphError("attention upsampling needs attention enabled")
    b = GraphBuilder(kind)
    bott_ch = (cfg.base_channels << (cfg.stages - 1)) * cfg.bottleneck_factor
    if kind == "mask_generator":
        img = b.input("image", 1)
        skips, x = _encoder(b, img, cfg, "enc")
    elif kind == "smfd_unet":
        img = b.input("image", 3)
        skips, x = _encoder(b, img, cfg, "img")
        if cfg.mask_branch:
            mask = b.input("mask", cfg.classes)
            mskips, mx = _encoder(b, mask, cfg, "msk")
            skips = [b.stage(f"fuse{k}", b.concat([s, m], f"fuse{k}"))
                     for k, (s, m) in enumerate(zip(skips, mskips))]
            x = b.concat([x, mx], "fuse.bottom")
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    x = b.stage("bottleneck", rdc(b, x, bott_ch, cfg.rdc_depth, cfg.growth_for(bott_ch),
                                  "bottleneck"))
    x = _decoder(b, x, skips, cfg)
    if kind == "mask_generator":
        x = b.act(b.conv(x, cfg.classes, "head", k=1), "softmax", "head.softmax")
        x = b.act(b.conv(x, cfg.classes, "refine", k=1), "softmax", "refine.softmax")
        return b.build(x)
    x = b.conv(x, 3, "head", k=1)
    x = b.conv(x, 3, "refine", k=1)
    if cfg.postprocess:
        x = b.postprocess(x, "postprocess")
    return b.build(b.clamp(x, "output"))
