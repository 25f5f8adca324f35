"""Detector architecture: shared backbone, iterative pyramid, heads.

One entry block halves the input once; a single parameter-shared backbone
stage (a stack of inverted-residual blocks plus a strided 3x3 conv) is then
applied N times, halving resolution each pass, which yields the N-level
pyramid from one weight set.  The fpn variant walks back up with per-step
upsample blocks and skip additions; heads are per-level 3x3 convs, with a
background maxout on the stride-4 level.

Parameters live in a flat name->ndarray dict so sharing, serialization and
cost accounting all see the same names.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import ops

FINEST_STRIDE = 4
CLS_BG_CHANNELS = 3  # background logits collapsed by maxout at the finest level

DEFAULT_DEPTH = {32: 8, 48: 6, 64: 6}
DEFAULT_EXPANSION = {
    16: (1, 2, 2, 2, 2, 2, 1, 1),
    32: (1, 2, 2, 2, 2, 2, 1, 1),
    48: (1, 2, 2, 2, 1, 1),
    64: (1, 2, 2, 1, 1, 1),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "fpn"          # "fpn" or "ssd"
    width: int = 32               # pyramid channel width
    depth: int = 8                # inverted-residual blocks per backbone pass
    activation: str = "prelu"     # relu | lrelu | prelu (IR blocks only)
    expansion: tuple[int, ...] = DEFAULT_EXPANSION[32]
    levels: int = 6               # pyramid levels N
    bn_per_pass: bool = False     # separate BN running stats per backbone pass

    def __post_init__(self):
        if self.variant not in ("ssd", "fpn"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.activation not in ("relu", "lrelu", "prelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.width < 8:
            raise ValueError("width must be >= 8")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if len(self.expansion) != self.depth:
            raise ValueError(f"expansion list has {len(self.expansion)} "
                             f"entries, depth is {self.depth}")
        if any(e < 1 for e in self.expansion):
            raise ValueError("expansion factors must be positive")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2 ** (i + 1) for i in range(1, self.levels + 1))

    def input_multiple(self) -> int:
        return 2 ** (self.levels + 1)


def default_config(variant: str = "fpn", width: int = 32,
                   activation: str = "prelu", levels: int = 6) -> ModelConfig:
    depth = DEFAULT_DEPTH.get(width, 8)
    expansion = DEFAULT_EXPANSION.get(width, (1,) + (2,) * 5 + (1, 1))[:depth]
    return ModelConfig(variant=variant, width=width, depth=depth,
                       activation=activation, expansion=expansion,
                       levels=levels)


# ---------------------------------------------------------------------------
# architecture plan


@dataclass(frozen=True)
class ConvUnit:
    """One conv, optionally followed by batch norm and an activation."""

    name: str
    spec: ops.ConvSpec
    bn: bool = True
    act: str | None = "relu"

    def param_count(self) -> int:
        n = int(np.prod(self.spec.weight_shape))
        if self.spec.has_bias:
            n += self.spec.out_channels
        if self.bn:
            n += 2 * self.spec.out_channels  # gamma, beta
        if self.act == "prelu":
            n += self.spec.out_channels
        return n


@dataclass(frozen=True)
class ResBlock:
    name: str
    units: tuple[ConvUnit, ...]
    skip: bool


@dataclass(frozen=True)
class Plan:
    entry: ConvUnit
    backbone: tuple[ResBlock, ...]
    down: ConvUnit
    ups: tuple[tuple[ConvUnit, ConvUnit], ...]   # (depthwise, pointwise)
    heads: tuple[tuple[int, ConvUnit, ConvUnit], ...]  # (stride, cls, reg)


def _ir_block(name: str, width: int, expand: int, act: str,
              first: bool) -> ResBlock:
    units = []
    hidden = width if first else width * expand
    if not first:
        units.append(ConvUnit(f"{name}.expand",
                              ops.ConvSpec(width, hidden, (1, 1)), act=act))
    units.append(ConvUnit(
        f"{name}.dw",
        ops.ConvSpec(hidden, hidden, (3, 3), padding=1, groups=hidden),
        act=act))
    units.append(ConvUnit(f"{name}.project",
                          ops.ConvSpec(hidden, width, (1, 1)), act=None))
    return ResBlock(name, tuple(units), skip=True)


def architecture_plan(config: ModelConfig) -> Plan:
    w = config.width
    entry = ConvUnit("entry", ops.ConvSpec(3, w, (3, 3), stride=2, padding=1))
    blocks = tuple(
        _ir_block(f"backbone.ir{i + 1}", w, config.expansion[i],
                  config.activation, first=(i == 0))
        for i in range(config.depth))
    down = ConvUnit("backbone.down",
                    ops.ConvSpec(w, w, (3, 3), stride=2, padding=1))
    ups = ()
    if config.variant == "fpn":
        ups = tuple(
            (ConvUnit(f"fpn.up{i}.dw",
                      ops.ConvSpec(w, w, (3, 3), padding=1, groups=w)),
             ConvUnit(f"fpn.up{i}.pw", ops.ConvSpec(w, w, (1, 1))))
            for i in range(1, config.levels))
    heads = []
    for stride in config.strides:
        cls_out = CLS_BG_CHANNELS + 1 if stride == FINEST_STRIDE else 2
        heads.append((
            stride,
            ConvUnit(f"head.s{stride}.cls",
                     ops.ConvSpec(w, cls_out, (3, 3), padding=1, has_bias=True),
                     bn=False, act=None),
            ConvUnit(f"head.s{stride}.reg",
                     ops.ConvSpec(w, 4, (3, 3), padding=1, has_bias=True),
                     bn=False, act=None),
        ))
    return Plan(entry, blocks, down, ups, tuple(heads))


def plan_units(plan: Plan) -> list[ConvUnit]:
    units = [plan.entry]
    for block in plan.backbone:
        units.extend(block.units)
    units.append(plan.down)
    for dw, pw in plan.ups:
        units.extend((dw, pw))
    for _, cls, reg in plan.heads:
        units.extend((cls, reg))
    return units


# ---------------------------------------------------------------------------
# parameters


STATS_SUFFIXES = (".bn.rmean", ".bn.rvar")


def is_running_stat(name: str) -> bool:
    return any(s in name for s in STATS_SUFFIXES)


def trainable_names(params: dict[str, np.ndarray]) -> list[str]:
    return [k for k in params if not is_running_stat(k)]


def decay_exempt(name: str) -> bool:
    """BN affine parameters and prelu slopes are excluded from weight decay."""
    return name.endswith((".bn.gamma", ".bn.beta", ".slope"))


def _backbone_unit_names(plan: Plan) -> set[str]:
    names = set()
    for block in plan.backbone:
        names.update(u.name for u in block.units)
    names.add(plan.down.name)
    return names


def build_model(config: ModelConfig, seed: int,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Allocate and He-initialize every named parameter tensor."""
    plan = architecture_plan(config)
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    backbone = _backbone_unit_names(plan)
    for u in plan_units(plan):
        spec = u.spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        std = np.sqrt(2.0 / fan_in)
        params[f"{u.name}.w"] = rng.normal(
            0.0, std, spec.weight_shape).astype(dtype)
        if spec.has_bias:
            params[f"{u.name}.b"] = np.zeros(spec.out_channels, dtype=dtype)
        if u.bn:
            c = spec.out_channels
            params[f"{u.name}.bn.gamma"] = np.ones(c, dtype=dtype)
            params[f"{u.name}.bn.beta"] = np.zeros(c, dtype=dtype)
            if config.bn_per_pass and u.name in backbone:
                for p in range(1, config.levels + 1):
                    params[f"{u.name}.bn.rmean.p{p}"] = np.zeros(c, dtype=dtype)
                    params[f"{u.name}.bn.rvar.p{p}"] = np.ones(c, dtype=dtype)
            else:
                params[f"{u.name}.bn.rmean"] = np.zeros(c, dtype=dtype)
                params[f"{u.name}.bn.rvar"] = np.ones(c, dtype=dtype)
        if u.act == "prelu":
            params[f"{u.name}.slope"] = np.full(
                spec.out_channels, ops.PRELU_INIT, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# forward graph


@dataclass
class ForwardOutput:
    feats: list[ag.Var]                 # f_1..f_N, fine -> coarse
    pyramid: list[ag.Var]               # head inputs, fine -> coarse
    strides: list[int]                  # per pyramid entry
    heads: list[tuple[ag.Var, ag.Var]]  # (cls 2ch after maxout, reg 4ch)
    bn_updates: list[tuple[str, str, np.ndarray, np.ndarray]]


def wrap_trainable(params: dict[str, np.ndarray]) -> dict[str, ag.Var]:
    return {k: ag.leaf(params[k]) for k in trainable_names(params)}


class _Runner:
    def __init__(self, params, config, pvars, train):
        self.params = params
        self.config = config
        self.pvars = pvars if pvars is not None else wrap_trainable(params)
        self.train = train
        self.bn_updates: list[tuple[str, str, np.ndarray, np.ndarray]] = []

    def unit(self, u: ConvUnit, x: ag.Var, stats_sfx: str = "") -> ag.Var:
        pv = self.pvars
        bias = pv.get(f"{u.name}.b") if u.spec.has_bias else None
        y = ag.conv2d(x, pv[f"{u.name}.w"], u.spec, bias)
        if u.bn:
            gamma, beta = pv[f"{u.name}.bn.gamma"], pv[f"{u.name}.bn.beta"]
            if self.train:
                y, mean, var = ag.batch_norm_train(y, gamma, beta)
                self.bn_updates.append(
                    (f"{u.name}.bn.rmean{stats_sfx}",
                     f"{u.name}.bn.rvar{stats_sfx}", mean, var))
            else:
                y = ag.batch_norm_infer(
                    y, gamma, beta,
                    self.params[f"{u.name}.bn.rmean{stats_sfx}"],
                    self.params[f"{u.name}.bn.rvar{stats_sfx}"])
        if u.act is not None:
            y = ag.activation(y, u.act, pv.get(f"{u.name}.slope"))
        return y

    def block(self, b: ResBlock, x: ag.Var, stats_sfx: str) -> ag.Var:
        y = x
        for u in b.units:
            y = self.unit(u, y, stats_sfx)
        return ag.add(y, x) if b.skip else y


def forward_graph(params: dict[str, np.ndarray], config: ModelConfig,
                  image: ag.Var | np.ndarray, train: bool = False,
                  pvars: dict[str, ag.Var] | None = None) -> ForwardOutput:
    """Run image -> pyramid -> heads as one autograd graph."""
    if not isinstance(image, ag.Var):
        image = ag.leaf(image)
    mult = config.input_multiple()
    h, w = image.shape[2], image.shape[3]
    if h % mult or w % mult:
        raise ValueError(f"input {h}x{w} not divisible by {mult}; pad first")
    plan = architecture_plan(config)
    run = _Runner(params, config, pvars, train)

    f = run.unit(plan.entry, image)
    feats: list[ag.Var] = []
    for p in range(1, config.levels + 1):
        sfx = f".p{p}" if config.bn_per_pass else ""
        h_var = f
        for b in plan.backbone:
            h_var = run.block(b, h_var, sfx)
        f = run.unit(plan.down, h_var, sfx)
        feats.append(f)

    if config.variant == "fpn":
        g = [feats[-1]]
        for i in range(1, config.levels):
            dw, pw = plan.ups[i - 1]
            up = ag.bilinear_upsample_x2(g[-1])
            up = run.unit(pw, run.unit(dw, up))
            g.append(ag.add(up, feats[config.levels - 1 - i]))
        pyramid = list(reversed(g))       # reorder fine -> coarse
    else:
        pyramid = feats

    heads = []
    for (stride, cls_u, reg_u), feat in zip(plan.heads, pyramid):
        cls = run.unit(cls_u, feat)
        if stride == FINEST_STRIDE:
            cls = ag.maxout_background(cls, CLS_BG_CHANNELS)
        heads.append((cls, run.unit(reg_u, feat)))

    return ForwardOutput(feats=feats, pyramid=pyramid,
                         strides=list(config.strides), heads=heads,
                         bn_updates=run.bn_updates)


def apply_bn_updates(params: dict[str, np.ndarray],
                     updates: list[tuple[str, str, np.ndarray, np.ndarray]],
                     momentum: float = 0.1) -> None:
    for mean_key, var_key, mean, var in updates:
        rm, rv = params[mean_key], params[var_key]
        rm += momentum * (mean.astype(rm.dtype) - rm)
        rv += momentum * (var.astype(rv.dtype) - rv)


# ---------------------------------------------------------------------------
# public pyramid API


@dataclass
class PyramidFeatures:
    maps: list[np.ndarray]
    strides: list[int]


def iterate_features(params: dict[str, np.ndarray], config: ModelConfig,
                     image: np.ndarray, train: bool = False) -> PyramidFeatures:
    """f_1..f_N from repeated application of the shared backbone stage."""
    out = forward_graph(params, config, image, train=train)
    if train:
        apply_bn_updates(params, out.bn_updates)
    return PyramidFeatures([f.data for f in out.feats], list(config.strides))


def fpn_combine(params: dict[str, np.ndarray], config: ModelConfig,
                features: PyramidFeatures) -> PyramidFeatures:
    """Top-down combination; returns g_1..g_N ordered coarse -> fine."""
    if config.variant != "fpn":
        raise ValueError("fpn_combine needs an fpn-variant config")
    plan = architecture_plan(config)
    run = _Runner(params, config, None, train=False)
    feats = [ag.leaf(m) for m in features.maps]
    g = [feats[-1]]
    for i in range(1, config.levels):
        dw, pw = plan.ups[i - 1]
        up = ag.bilinear_upsample_x2(g[-1])
        up = run.unit(pw, run.unit(dw, up))
        target = feats[config.levels - 1 - i]
        if up.shape != target.shape:
            raise ValueError(f"upsample step {i} produced {up.shape}, "
                             f"skip map is {target.shape}")
        g.append(ag.add(up, target))
    return PyramidFeatures([v.data for v in g],
                           list(reversed(features.strides)))


def heads_forward(params: dict[str, np.ndarray], config: ModelConfig,
                  pyramid: PyramidFeatures) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-level (cls logits, reg deltas); cls is 2-channel after maxout."""
    plan = architecture_plan(config)
    run = _Runner(params, config, None, train=False)
    by_stride = {stride: (c, r) for stride, c, r in plan.heads}
    outs = []
    for stride, feat in zip(pyramid.strides, pyramid.maps):
        cls_u, reg_u = by_stride[stride]
        fv = ag.leaf(feat)
        cls = run.unit(cls_u, fv)
        if stride == FINEST_STRIDE:
            cls = ag.maxout_background(cls, CLS_BG_CHANNELS)
        outs.append((cls.data, run.unit(reg_u, fv).data))
    return outs


# ---------------------------------------------------------------------------
# MobileFaceNet-backbone reference net (static description, cost accounting)

_MFN_TYPES = ["a"] + ["b"] * 13
_MFN_OUT = [64] * 6 + [128] * 8
_MFN_HIDDEN = [64, 128, 128, 128, 128, 128,
               256, 256, 256, 256, 256, 256, 256, 512]
_MFN_STRIDE = [2, 1, 1, 1, 1, 2, 2, 1, 1, 1, 1, 1, 1, 2]


@dataclass(frozen=True)
class SequentialNet:
    """Linear stack of blocks with head attachment points, for accounting."""

    name: str
    stem: tuple[ResBlock, ...]          # single-unit blocks have skip=False
    head_after: tuple[str, ...]         # block names whose output feeds a head
    head_widths: tuple[int, ...]


def describe_s3fd_mobilefacenet() -> SequentialNet:
    """Static 14-block MobileFaceNet-backbone detector used as a baseline."""
    stem = [ResBlock("entry", (ConvUnit(
        "entry", ops.ConvSpec(3, 64, (3, 3), stride=1, padding=1)),), False)]
    cin = 64
    for i, (btype, cout, hidden, stride) in enumerate(
            zip(_MFN_TYPES, _MFN_OUT, _MFN_HIDDEN, _MFN_STRIDE), start=1):
        name = f"block{i}"
        units = []
        if btype == "b":
            units.append(ConvUnit(f"{name}.expand",
                                  ops.ConvSpec(cin, hidden, (1, 1)),
                                  act="prelu"))
        units.append(ConvUnit(
            f"{name}.dw",
            ops.ConvSpec(hidden, hidden, (3, 3), stride=stride, padding=1,
                         groups=hidden), act="prelu"))
        units.append(ConvUnit(f"{name}.project",
                              ops.ConvSpec(hidden, cout, (1, 1)), act=None))
        stem.append(ResBlock(name, tuple(units),
                             skip=(stride == 1 and cin == cout)))
        cin = cout
    for i in range(1, 4):
        stem.append(ResBlock(f"extra{i}", (ConvUnit(
            f"extra{i}",
            ops.ConvSpec(cin, 128, (3, 3), stride=2, padding=1)),), False))
        cin = 128
    head_after = ("block6", "block7", "block14", "extra1", "extra2", "extra3")
    head_widths = (64, 128, 128, 128, 128, 128)
    return SequentialNet("s3fd-mobilefacenet", tuple(stem),
                         head_after, head_widths)
