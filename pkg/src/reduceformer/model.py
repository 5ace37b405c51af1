"""Model family: stem, inverted-residual blocks, attention blocks, stages.

A variant is a stack of five parts: a stem (3x3 stride-2 conv plus one
MBConv), four stages that each open with a stride-2 downsampling MBConv
followed by L_s repetitions, and a classification head.  In the attention
stages (by default the last two) each repetition is an MBConv followed by
an attention block: multi-scale local context -> reduction attention ->
1x1 projection back to C channels with a residual.  Elsewhere repetitions
are plain residual MBConvs.

Blocks are stateless descriptors; all learnable state lives in the model's
named parameter table, so the same topology drives eager forwards,
recorded (differentiable) forwards, and the analytic cost counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ops
from .attention import (CostReport, LocalContextConfig, LocalContextWeights,
                        multi_scale_local_context, reduce_former_attention)
from .graph import Graph, backward
from .tensor import Rng, ShapeError, Tensor


class TrainingDivergedError(RuntimeError):
    """Toy training met a non-finite loss."""


# ---------------------------------------------------------------------------
# configuration


_PRESETS = {
    "b1": dict(stage_channels=(16, 32, 64, 128, 256), stage_depths=(2, 3, 3, 4),
               input_resolution=224),
    "b2": dict(stage_channels=(24, 48, 96, 192, 384), stage_depths=(3, 3, 5, 7),
               input_resolution=256),
    "b3": dict(stage_channels=(32, 64, 128, 256, 512), stage_depths=(4, 6, 6, 9),
               input_resolution=288),
}

# stem stride * four stage entry strides
TOTAL_STRIDE = 32


@dataclass(frozen=True)
class VariantConfig:
    """Architecture hyperparameters for one model variant.

    head_width / head_hidden default to 6*C4 and 25*C4/4; the head is a
    global average pool followed by a widening MLP and the classifier.
    """

    name: str = "custom"
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    stage_depths: tuple[int, ...] = (2, 3, 3, 4)
    attn_stages: frozenset[int] = frozenset({3, 4})
    scales: int = 2
    dw_kernels: tuple[int, ...] = (5,)
    mbconv_expansion: int = 4
    num_classes: int = 1000
    input_resolution: int = 224
    eps: float = 1e-6
    head_width: Optional[int] = None
    head_hidden: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "attn_stages", frozenset(int(s) for s in self.attn_stages))
        object.__setattr__(self, "dw_kernels", tuple(int(k) for k in self.dw_kernels))
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels must list stem + 4 stage widths")
        if len(self.stage_depths) != 4:
            raise ValueError("stage_depths must list 4 depths")
        if any(c < 1 for c in self.stage_channels) or any(d < 1 for d in self.stage_depths):
            raise ValueError("channels and depths must be >= 1")
        if not self.attn_stages <= {1, 2, 3, 4}:
            raise ValueError(f"attn_stages must be within 1..4, got {sorted(self.attn_stages)}")
        if self.scales < 1 or len(self.dw_kernels) != self.scales - 1:
            raise ValueError("dw_kernels must have scales-1 entries")
        if any(k < 1 or k % 2 == 0 for k in self.dw_kernels):
            raise ValueError("depthwise kernels must be odd")
        if self.mbconv_expansion < 1:
            raise ValueError("mbconv_expansion must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_resolution < 1:
            raise ValueError("input_resolution must be >= 1")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")

    @property
    def resolved_head_width(self) -> int:
        return self.head_width if self.head_width is not None else 6 * self.stage_channels[4]

    @property
    def resolved_head_hidden(self) -> int:
        if self.head_hidden is not None:
            return self.head_hidden
        return max(25 * self.stage_channels[4] // 4, self.num_classes)

    @classmethod
    def preset(cls, name: str, **overrides) -> "VariantConfig":
        key = name.lower()
        if key not in _PRESETS:
            raise ValueError(f"unknown variant {name!r} (expected one of {sorted(_PRESETS)})")
        kw = dict(_PRESETS[key])
        kw.update(overrides)
        return cls(name=key, **kw)

    def override(self, **kw) -> "VariantConfig":
        return replace(self, **kw)


_LIST_FIELDS = {"stage_channels", "stage_depths", "attn_stages", "dw_kernels"}
_INT_FIELDS = {"scales", "mbconv_expansion", "num_classes", "input_resolution"}
_OPT_INT_FIELDS = {"head_width", "head_hidden"}
_CONFIG_KEYS = ["name", "stage_channels", "stage_depths", "attn_stages", "scales",
                "dw_kernels", "mbconv_expansion", "num_classes", "input_resolution",
                "eps", "head_width", "head_hidden"]


def config_to_lines(cfg: VariantConfig) -> list[str]:
    """Flat key=value lines (also the weight-file header encoding)."""
    vals = {
        "name": cfg.name,
        "stage_channels": ",".join(map(str, cfg.stage_channels)),
        "stage_depths": ",".join(map(str, cfg.stage_depths)),
        "attn_stages": ",".join(map(str, sorted(cfg.attn_stages))),
        "scales": str(cfg.scales),
        "dw_kernels": ",".join(map(str, cfg.dw_kernels)),
        "mbconv_expansion": str(cfg.mbconv_expansion),
        "num_classes": str(cfg.num_classes),
        "input_resolution": str(cfg.input_resolution),
        "eps": repr(cfg.eps),
        "head_width": "" if cfg.head_width is None else str(cfg.head_width),
        "head_hidden": "" if cfg.head_hidden is None else str(cfg.head_hidden),
    }
    return [f"{k}={vals[k]}" for k in _CONFIG_KEYS]


def config_from_lines(lines: Iterable[str]) -> VariantConfig:
    kw: dict = {}
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {line!r}")
        key, val = line.split("=", 1)
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        if key == "name":
            kw[key] = val
        elif key == "eps":
            kw[key] = float(val)
        elif key in _LIST_FIELDS:
            kw[key] = tuple(int(v) for v in val.split(",") if v != "")
        elif key in _OPT_INT_FIELDS:
            kw[key] = None if val == "" else int(val)
        elif key in _INT_FIELDS:
            kw[key] = int(val)
    return VariantConfig(**kw)


# ---------------------------------------------------------------------------
# layers and blocks


def _conv_fan_in(cin: int, k: int, groups: int) -> int:
    return (cin // groups) * k * k


class ConvNorm:
    """conv (optionally biased) -> optional per-channel affine -> optional relu.

    zero_scale initializes the affine scale at 0: used on the last layer of
    residual branches so every residual block starts as the identity, which
    keeps activations bounded at any depth without batch statistics (the
    attention op is degree-2 in its input scale, so an unscaled stack would
    blow up at init).  The scale is learnable and leaves 0 after one step.
    """

    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int = 1,
                 groups: int = 1, act: bool = False, norm: bool = True,
                 bias: bool = False, zero_scale: bool = False):
        self.name = name
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.groups = stride, groups
        self.act, self.norm, self.bias = act, norm, bias
        self.zero_scale = zero_scale

    def param_specs(self):
        fan = _conv_fan_in(self.cin, self.k, self.groups)
        specs = [(f"{self.name}.weight",
                  (self.cout, self.cin // self.groups, self.k, self.k), "uniform", fan)]
        if self.bias:
            specs.append((f"{self.name}.bias", (1, self.cout, 1, 1), "uniform_bias", fan))
        if self.norm:
            kind = "zero" if self.zero_scale else "one"
            specs.append((f"{self.name}.norm_scale", (1, self.cout, 1, 1), kind, 0))
            specs.append((f"{self.name}.norm_shift", (1, self.cout, 1, 1), "zero", 0))
        return specs

    def forward(self, P, x: Tensor) -> Tensor:
        y = ops.conv2d(x, P[f"{self.name}.weight"],
                       bias=P[f"{self.name}.bias"] if self.bias else None,
                       stride=self.stride, padding=self.k // 2, groups=self.groups)
        if self.norm:
            y = ops.channel_affine(y, P[f"{self.name}.norm_scale"],
                                   P[f"{self.name}.norm_shift"])
        if self.act:
            y = ops.relu(y)
        return y

    def out_hw(self, h: int, w: int):
        p = self.k // 2
        return ((h + 2 * p - self.k) // self.stride + 1,
                (w + 2 * p - self.k) // self.stride + 1)

    def cost(self, h: int, w: int):
        ho, wo = self.out_hw(h, w)
        n = self.cout * ho * wo
        macs = (self.cin // self.groups) * self.k * self.k * n
        ew = (n if self.bias else 0) + (2 * n if self.norm else 0) + (n if self.act else 0)
        return macs, ew, ho, wo


class MBConvBlock:
    """Inverted residual: 1x1 expand -> 3x3 depthwise (stride here) -> 1x1
    project, residual when shape-preserving."""

    def __init__(self, name: str, cin: int, cout: int, stride: int, expansion: int):
        mid = cin * expansion
        self.name, self.cin, self.cout, self.stride = name, cin, cout, stride
        self.residual = stride == 1 and cin == cout
        self.expand = ConvNorm(f"{name}.expand", cin, mid, 1, act=True)
        self.depthwise = ConvNorm(f"{name}.depthwise", mid, mid, 3, stride=stride,
                                  groups=mid, act=True)
        self.project = ConvNorm(f"{name}.project", mid, cout, 1, act=False,
                                zero_scale=self.residual)

    def param_specs(self):
        return (self.expand.param_specs() + self.depthwise.param_specs()
                + self.project.param_specs())

    def forward(self, P, x: Tensor) -> Tensor:
        y = self.project.forward(P, self.depthwise.forward(P, self.expand.forward(P, x)))
        return ops.add(x, y) if self.residual else y

    def cost(self, h: int, w: int):
        macs = ew = 0
        for layer in (self.expand, self.depthwise, self.project):
            m, e, h, w = layer.cost(h, w)
            macs += m
            ew += e
        if self.residual:
            ew += self.cout * h * w
        return macs, ew, h, w


class AttentionBlock:
    """Multi-scale local context -> reduction attention -> 1x1 projection
    back to C channels (normalized) with a residual.  Shape preserving."""

    def __init__(self, name: str, c: int, scales: int, dw_kernels: Sequence[int],
                 eps: float):
        self.name = name
        self.cin = self.cout = c
        self.eps = eps
        self.cfg = LocalContextConfig(c, scales, tuple(dw_kernels))
        self.project = ConvNorm(f"{name}.project", scales * c, c, 1, act=False,
                                zero_scale=True)

    def param_specs(self):
        c3 = 3 * self.cfg.base_channels
        specs = [(f"{self.name}.qkv.weight", (c3, self.cfg.base_channels, 1, 1),
                  "uniform", self.cfg.base_channels)]
        for i, k in enumerate(self.cfg.dw_kernels):
            specs.append((f"{self.name}.dw{i}.weight", (c3, 1, k, k), "uniform", k * k))
        return specs + self.project.param_specs()

    def forward(self, P, x: Tensor) -> Tensor:
        weights = LocalContextWeights(
            point=P[f"{self.name}.qkv.weight"],
            dw=[P[f"{self.name}.dw{i}.weight"] for i in range(len(self.cfg.dw_kernels))])
        bundle = multi_scale_local_context(x, self.cfg, weights)
        o = reduce_former_attention(bundle, self.eps)
        y = self.project.forward(P, o)
        return ops.add(x, y)

    def cost(self, h: int, w: int):
        c = self.cfg.base_channels
        c3 = 3 * c
        macs = c3 * c * h * w              # qkv pointwise
        for k in self.cfg.dw_kernels:
            macs += c3 * k * k * h * w     # depthwise scales
        d, n = self.cfg.group_channels, h * w
        ew = 11 * d * n - 3 * d            # attention elementwise/reduction ops
        m, e, h, w = self.project.cost(h, w)
        macs += m
        ew += e + self.cout * h * w        # + residual
        return macs, ew, h, w


class Head:
    """Global average pool, widening MLP (1x1 convs on the pooled vector),
    and the classifier layer."""

    def __init__(self, name: str, cin: int, width: int, hidden: int, classes: int):
        self.name, self.cin, self.cout = name, cin, classes
        self.fc1 = ConvNorm(f"{name}.fc1", cin, width, 1, act=True, norm=False, bias=True)
        self.fc2 = ConvNorm(f"{name}.fc2", width, hidden, 1, act=True, norm=False, bias=True)
        self.classifier = ConvNorm(f"{name}.classifier", hidden, classes, 1,
                                   act=False, norm=False, bias=True)

    def param_specs(self):
        return (self.fc1.param_specs() + self.fc2.param_specs()
                + self.classifier.param_specs())

    def forward(self, P, x: Tensor) -> Tensor:
        y = ops.global_avg_pool(x)
        return self.classifier.forward(P, self.fc2.forward(P, self.fc1.forward(P, y)))

    def cost(self, h: int, w: int):
        ew = self.cin * (h * w - 1) + self.cin  # pool: sum + scale
        macs = 0
        h = w = 1
        for layer in (self.fc1, self.fc2, self.classifier):
            m, e, h, w = layer.cost(h, w)
            macs += m
            ew += e
        return macs, ew, h, w


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class Model:
    config: VariantConfig
    parameters: dict
    topology: list
    stage_of: dict = field(default_factory=dict)  # block name -> stage label
    dtype: np.dtype = np.dtype(np.float32)

    def astype(self, dtype) -> "Model":
        params = {k: v.astype(dtype) for k, v in self.parameters.items()}
        return Model(self.config, params, self.topology, self.stage_of, np.dtype(dtype))

    def blocks_in_stage(self, label: str) -> list:
        return [b for b in self.topology if self.stage_of[b.name] == label]


def _build_topology(cfg: VariantConfig):
    blocks = []
    stage_of = {}

    def put(block, label):
        blocks.append(block)
        stage_of[block.name] = label

    c0 = cfg.stage_channels[0]
    put(ConvNorm("stem.conv", 3, c0, 3, stride=2, act=True), "stem")
    put(MBConvBlock("stem.mb", c0, c0, 1, cfg.mbconv_expansion), "stem")
    prev = c0
    for s in range(1, 5):
        cs = cfg.stage_channels[s]
        label = f"stage{s}"
        put(MBConvBlock(f"{label}.down", prev, cs, 2, cfg.mbconv_expansion), label)
        for i in range(cfg.stage_depths[s - 1]):
            if s in cfg.attn_stages:
                put(MBConvBlock(f"{label}.block{i}.mb", cs, cs, 1,
                                cfg.mbconv_expansion), label)
                put(AttentionBlock(f"{label}.block{i}.attn", cs, cfg.scales,
                                   cfg.dw_kernels, cfg.eps), label)
            else:
                put(MBConvBlock(f"{label}.block{i}", cs, cs, 1,
                                cfg.mbconv_expansion), label)
        prev = cs
    put(Head("head", prev, cfg.resolved_head_width, cfg.resolved_head_hidden,
             cfg.num_classes), "head")
    return blocks, stage_of


def init_param_table(specs, rng: Rng, dtype=np.float32) -> dict:
    """Draw parameters for the given specs in order: fan-in-scaled uniform
    (He-style sqrt(6/fan_in) limit for weights, 1/sqrt(fan_in) for biases,
    so activation scale survives deep conv+relu chains), ones for norm
    scales, zeros for norm shifts."""
    params: dict = {}
    for name, shape, kind, fan in specs:
        if name in params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if kind == "uniform":
            lim = np.sqrt(6.0 / max(fan, 1))
            params[name] = rng.uniform(shape, -lim, lim, dtype)
        elif kind == "uniform_bias":
            lim = 1.0 / np.sqrt(max(fan, 1))
            params[name] = rng.uniform(shape, -lim, lim, dtype)
        elif kind == "one":
            params[name] = np.ones(shape, dtype=dtype)
        elif kind == "zero":
            params[name] = np.zeros(shape, dtype=dtype)
        else:  # pragma: no cover - spec kinds are closed
            raise ValueError(f"unknown init kind {kind!r}")
    return params


def build_variant(cfg: VariantConfig, rng: Rng, dtype=np.float32) -> Model:
    """Materialize a model: topology from the config, parameters drawn from
    the rng in topology order."""
    blocks, stage_of = _build_topology(cfg)
    specs = [spec for block in blocks for spec in block.param_specs()]
    params = init_param_table(specs, rng, dtype)
    return Model(cfg, params, blocks, stage_of, np.dtype(dtype))


def forward(m: Model, x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    """Logits for a (B, 3, R, R) input, shape (B, num_classes, 1, 1).

    R defaults to the config resolution; other square sizes are accepted
    when every stride divides evenly (R % 32 == 0).  Pass a Graph to record
    a differentiable tape (parameters become named leaves).
    """
    B, C, H, W = x.shape
    if C != 3:
        raise ShapeError(f"expected 3 input channels, got {C}")
    if H != W:
        raise ShapeError(f"expected square input, got {H}x{W}")
    if H != m.config.input_resolution and H % TOTAL_STRIDE != 0:
        raise ShapeError(
            f"resolution {H} is neither the configured {m.config.input_resolution} "
            f"nor divisible by the total stride {TOTAL_STRIDE}")
    if graph is not None:
        P = {name: graph.leaf(Tensor(arr), name) for name, arr in m.parameters.items()}
    else:
        P = {name: Tensor(arr) for name, arr in m.parameters.items()}
    y = x
    for block in m.topology:
        y = block.forward(P, y)
    return y


def predict_logits(m: Model, x: Tensor) -> np.ndarray:
    """Eager forward returning a plain (B, num_classes) array."""
    out = forward(m, x)
    return out.data[:, :, 0, 0]


def count_params(m: Model) -> int:
    return sum(int(a.size) for a in m.parameters.values())


def cost_report(m: Model, resolution: Optional[int] = None) -> CostReport:
    """Analytic per-image (batch 1) cost at the given square resolution."""
    res = resolution or m.config.input_resolution
    macs = ew = 0
    h = w = res
    for block in m.topology:
        bm, be, h, w = block.cost(h, w)
        macs += bm
        ew += be
    return CostReport(params=count_params(m), macs=macs, ew_flops=ew)


def count_macs(m: Model, resolution: Optional[int] = None) -> int:
    return cost_report(m, resolution).macs


def stage_table(m: Model, resolution: Optional[int] = None) -> list[dict]:
    """Per-stage summary rows: blocks, output channels/resolution, params, macs."""
    res = resolution or m.config.input_resolution
    rows: dict[str, dict] = {}
    order = []
    h = w = res
    for block in m.topology:
        label = m.stage_of[block.name]
        bm, be, h, w = block.cost(h, w)
        nparams = sum(int(np.prod(shape)) for _, shape, _, _ in block.param_specs())
        if label not in rows:
            rows[label] = dict(stage=label, blocks=0, channels=block.cout,
                               out_hw=(h, w), params=0, macs=0, ew_flops=0)
            order.append(label)
        r = rows[label]
        r["blocks"] += 1
        r["channels"] = block.cout
        r["out_hw"] = (h, w)
        r["params"] += nparams
        r["macs"] += bm
        r["ew_flops"] += be
    return [rows[label] for label in order]


def record_block_graph(m: Model, block, h: int = 8, w: int = 8,
                       seed: int = 0) -> Graph:
    """Record one block's forward on a random input; for structural scans
    and block-level gradient checks."""
    rng = Rng(seed)
    g = Graph()
    xt = g.leaf(rng.tensor((1, block.cin, h, w), dtype=m.dtype))
    P = {}
    for name, _, _, _ in block.param_specs():
        P[name] = g.leaf(Tensor(m.parameters[name]), name)
    out = block.forward(P, xt)
    g.mark_output(out)
    return g


# ---------------------------------------------------------------------------
# toy training


def toy_config(classes: int = 8, resolution: int = 16) -> VariantConfig:
    """Reduced-width custom variant for desk-scale trainability checks."""
    return VariantConfig(
        name="custom", stage_channels=(8, 16, 16, 32, 32), stage_depths=(1, 1, 1, 1),
        attn_stages=frozenset({3, 4}), scales=2, dw_kernels=(5,),
        mbconv_expansion=2, num_classes=classes, input_resolution=resolution)


def make_toy_batch(samples: int, classes: int, resolution: int,
                   seed: int = 0) -> tuple[Tensor, np.ndarray]:
    """Fixed random inputs with fixed random labels (a memorization target)."""
    rng = Rng(seed)
    x = rng.tensor((samples, 3, resolution, resolution), -1.0, 1.0)
    y = rng.integers(samples, classes)
    return x, y


def train_toy(m: Model, data: tuple[Tensor, np.ndarray], steps: int,
              lr: float) -> list[float]:
    """Plain full-batch gradient descent on cross-entropy; returns the loss
    before each update (length = steps).  Aborts on a non-finite loss."""
    x, labels = data
    if x.shape[0] > 32:
        raise ValueError(f"toy batches are capped at 32 samples, got {x.shape[0]}")
    if x.shape[2] > 32 or x.shape[3] > 32:
        raise ValueError(f"toy resolution is capped at 32, got {x.shape[2:]}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    trace = []
    with np.errstate(all="ignore"):  # divergence is detected and raised below
        for step in range(steps):
            g = Graph()
            logits = forward(m, x, graph=g)
            loss = ops.softmax_xent(logits, labels)
            g.mark_output(loss)
            val = float(loss.data.reshape(()))
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step}: {val}")
            trace.append(val)
            if lr != 0.0:
                grads = backward(g, Tensor.from_values((1, 1, 1, 1), [1.0], m.dtype))
                for name in m.parameters:
                    gid = g.leaf_id(name)
                    m.parameters[name] = (m.parameters[name]
                                          - m.dtype.type(lr) * grads[gid])
    return trace
