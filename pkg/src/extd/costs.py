"""Parameter and multiply-add accounting.

Conv rows use the exact formula outH*outW*outC*(inC/groups)*kH*kW; batch
norm, activations, biases, residual adds and bilinear upsampling are billed
at one madd per output element on separate `.elem` rows, which a flag can
zero out.  Shared backbone tensors are counted once (pass-1 rows carry the
params, later passes carry 0) while every pass contributes its own madds
row, so totals always equal the plain sum of the rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (ModelConfig, ConvUnit, Plan, ResBlock, SequentialNet,
                    architecture_plan, is_running_stat)


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    madds_per_pass: int
    passes: int

    @property
    def total_madds(self) -> int:
        return self.madds_per_pass * self.passes


@dataclass
class CostReport:
    rows: list[CostRow]
    input_hw: tuple[int, int]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.total_madds for r in self.rows)

    def render_table(self) -> str:
        head = ("layer", "params", "madds/pass", "passes", "madds")
        data = [(r.name, str(r.params), str(r.madds_per_pass), str(r.passes),
                 str(r.total_madds)) for r in self.rows]
        data.append(("TOTAL", str(self.total_params), "", "",
                     str(self.total_madds)))
        widths = [max(len(row[i]) for row in [head] + data)
                  for i in range(len(head))]
        lines = [" ".join(h.ljust(widths[i]) for i, h in enumerate(head))]
        lines.append(" ".join("-" * w for w in widths))
        for row in data:
            lines.append(" ".join(
                c.ljust(widths[0]) if i == 0 else c.rjust(widths[i])
                for i, c in enumerate(row)))
        return "\n".join(lines)

    def render_machine(self) -> str:
        return "\n".join(
            f"{r.name} {r.params} {r.madds_per_pass} {r.passes} {r.total_madds}"
            for r in self.rows)


def count_params(params: dict[str, np.ndarray]) -> int:
    """Element count over unique named tensors, running stats excluded."""
    return sum(int(v.size) for k, v in params.items() if not is_running_stat(k))


# ---------------------------------------------------------------------------
# walkers


def _conv_madds(u: ConvUnit, h: int, w: int) -> tuple[int, int, int]:
    """(madds, outH, outW) of one conv execution on an h x w input."""
    spec = u.spec
    oh, ow = spec.out_hw(h, w)
    kh, kw = spec.kernel
    madds = oh * ow * spec.out_channels * (spec.in_channels // spec.groups) \
        * kh * kw
    return madds, oh, ow


def _weight_params(u: ConvUnit) -> int:
    spec = u.spec
    return int(np.prod(spec.weight_shape))


def _elem_params(u: ConvUnit) -> int:
    n = 0
    if u.spec.has_bias:
        n += u.spec.out_channels
    if u.bn:
        n += 2 * u.spec.out_channels
    if u.act == "prelu":
        n += u.spec.out_channels
    return n


def _elem_ops_per_out(u: ConvUnit) -> int:
    return int(u.spec.has_bias) + int(u.bn) + int(u.act is not None)


class _Walker:
    def __init__(self, include_elementwise: bool):
        self.rows: list[CostRow] = []
        self.include = include_elementwise
        self.counted: set[str] = set()

    def unit(self, u: ConvUnit, h: int, w: int, tag: str = "") -> tuple[int, int]:
        madds, oh, ow = _conv_madds(u, h, w)
        first = u.name not in self.counted
        self.counted.add(u.name)
        self.rows.append(CostRow(u.name + tag, _weight_params(u) if first else 0,
                                 madds, 1))
        per_out = _elem_ops_per_out(u)
        if per_out or _elem_params(u):
            elem = per_out * oh * ow * u.spec.out_channels
            self.rows.append(CostRow(f"{u.name}.elem{tag}",
                                     _elem_params(u) if first else 0,
                                     elem if self.include else 0, 1))
        return oh, ow

    def block(self, b: ResBlock, h: int, w: int, tag: str = "") -> tuple[int, int]:
        for u in b.units:
            h, w = self.unit(u, h, w, tag)
        if b.skip:
            elems = h * w * b.units[-1].spec.out_channels
            self.rows.append(CostRow(f"{b.name}.skip{tag}", 0,
                                     elems if self.include else 0, 1))
        return h, w


def count_madds(config: ModelConfig, input_h: int, input_w: int,
                include_elementwise: bool = True) -> CostReport:
    """Per-layer cost report for a detector config at a given input size."""
    mult = config.input_multiple()
    if input_h % mult or input_w % mult:
        raise ValueError(f"input {input_h}x{input_w} not divisible by {mult}")
    plan = architecture_plan(config)
    walk = _Walker(include_elementwise)
    h, w = walk.unit(plan.entry, input_h, input_w)
    level_hw = []
    for p in range(1, config.levels + 1):
        tag = f"@p{p}"
        for b in plan.backbone:
            h, w = walk.block(b, h, w, tag)
        h, w = walk.unit(plan.down, h, w, tag)
        level_hw.append((h, w))
    if config.variant == "fpn":
        gh, gw = level_hw[-1]
        for i in range(1, config.levels):
            gh, gw = 2 * gh, 2 * gw
            cw = config.width
            walk.rows.append(CostRow(
                f"fpn.up{i}.bilinear", 0,
                gh * gw * cw if include_elementwise else 0, 1))
            dw_u, pw_u = plan.ups[i - 1]
            gh, gw = walk.unit(dw_u, gh, gw)
            gh, gw = walk.unit(pw_u, gh, gw)
    for (stride, cls_u, reg_u), (lh, lw) in zip(plan.heads, level_hw):
        walk.unit(cls_u, lh, lw)
        walk.unit(reg_u, lh, lw)
    return CostReport(walk.rows, (input_h, input_w))


def count_net_madds(net: SequentialNet, input_h: int, input_w: int,
                    include_elementwise: bool = True) -> CostReport:
    """Cost report for a static sequential description (stem + heads)."""
    from . import ops
    walk = _Walker(include_elementwise)
    h, w = input_h, input_w
    attach: dict[str, tuple[int, int]] = {}
    for b in net.stem:
        h, w = walk.block(b, h, w)
        if b.name in net.head_after:
            attach[b.name] = (h, w)
    for idx, (bname, width) in enumerate(zip(net.head_after, net.head_widths)):
        lh, lw = attach[bname]
        cls_out = 4 if idx == 0 else 2  # background maxout on the finest head
        walk.unit(ConvUnit(f"head.{bname}.cls",
                           ops.ConvSpec(width, cls_out, (3, 3), padding=1,
                                        has_bias=True), bn=False, act=None),
                  lh, lw)
        walk.unit(ConvUnit(f"head.{bname}.reg",
                           ops.ConvSpec(width, 4, (3, 3), padding=1,
                                        has_bias=True), bn=False, act=None),
                  lh, lw)
    return CostReport(walk.rows, (input_h, input_w))


def plan_param_total(config: ModelConfig) -> int:
    """Parameter count straight from the plan (no allocation)."""
    from .model import plan_units
    return sum(u.param_count() for u in plan_units(architecture_plan(config)))


# ---------------------------------------------------------------------------
# expansion calibration


def calibrate_expansions(target_params: int, skeleton: ModelConfig,
                         tolerance: float = 0.10,
                         max_expand: int = 6) -> tuple[int, ...]:
    """Integer expansion factors whose parameter count best matches a target.

    The count is linear in the expansion sum with one shared coefficient per
    block, so the search enumerates sums and returns the lexicographically
    smallest tuple realizing the best sum (first slot pinned to 1: the
    leading no-expansion block ignores it).
    """
    slots = skeleton.depth - 1
    best_sum, best_err = None, None
    for s in range(slots, max_expand * slots + 1):
        expansion = (1,) + _lex_smallest(s, slots, max_expand)
        cfg = ModelConfig(variant=skeleton.variant, width=skeleton.width,
                          depth=skeleton.depth, activation=skeleton.activation,
                          expansion=expansion, levels=skeleton.levels)
        err = abs(plan_param_total(cfg) - target_params)
        if best_err is None or err < best_err:
            best_sum, best_err = s, err
    expansion = (1,) + _lex_smallest(best_sum, slots, max_expand)
    final = ModelConfig(variant=skeleton.variant, width=skeleton.width,
                        depth=skeleton.depth, activation=skeleton.activation,
                        expansion=expansion, levels=skeleton.levels)
    got = plan_param_total(final)
    if abs(got - target_params) > tolerance * target_params:
        raise ValueError(
            f"no expansion setting reaches {target_params} params within "
            f"{tolerance:.0%} (closest: {got})")
    return expansion


def _lex_smallest(total: int, slots: int, max_expand: int) -> tuple[int, ...]:
    out = []
    remaining = total
    for i in range(slots):
        e = max(1, remaining - max_expand * (slots - i - 1))
        out.append(e)
        remaining -= e
    return tuple(out)
