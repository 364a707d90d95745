"""Compound model scaling and the architecture plan text format.

A plan file is line oriented::

    # comments start with '#'
    name = toy-b0
    classes = 3
    resolution = 32
    stem_channels = 16
    ...
    [stage.1]
    repeats = 1
    channels = 16
    kernel = 3
    stride = 1
    expansion = 1
    se_ratio = 0.25

Top-level keys come before the first ``[stage.N]`` header; stages are
numbered from 1 without gaps. Scaled plans additionally carry ``alpha``,
``beta``, ``gamma``, ``phi`` and the derived multipliers. Printing then
parsing any plan is a fixpoint.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

from .layers import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    GlobalAvgPool,
    Input,
    MBConvBlock,
    MBConvConfig,
    Network,
    Softmax,
)
from .tensor import rng


class PlanError(ValueError):
    """Invalid architecture description or scaling request."""


@dataclass(frozen=True)
class StageSpec:
    repeats: int
    channels: int
    kernel: int = 3
    stride: int = 1
    expansion: float = 6.0
    se_ratio: float = 0.25


@dataclass(frozen=True)
class BaseArchitecture:
    stages: tuple[StageSpec, ...]
    classes: int
    base_resolution: int
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    head_channels: int = 128
    in_channels: int = 1
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        validate_layout(self, self.base_resolution)
        total = self.stem_stride * math.prod(s.stride for s in self.stages)
        if self.base_resolution % total:
            raise PlanError(f"base resolution {self.base_resolution} is not divisible by total stride {total}")


@dataclass(frozen=True)
class ScalingCoefficients:
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15
    phi: float = 0.0

    def __post_init__(self):
        for key in ("alpha", "beta", "gamma"):
            if getattr(self, key) < 1:
                raise PlanError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.phi < 0:
            raise PlanError(f"phi must be >= 0, got {self.phi}")


@dataclass(frozen=True)
class ScaledModelPlan:
    stages: tuple[StageSpec, ...]
    classes: int
    resolution: int
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    head_channels: int = 128
    in_channels: int = 1
    name: str = "custom"
    depth_mult: float = 1.0
    width_mult: float = 1.0
    resolution_mult: float = 1.0
    coefficients: ScalingCoefficients | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        validate_layout(self, self.resolution)


def validate_layout(arch, resolution: int) -> None:
    if arch.classes < 1:
        raise PlanError("classes must be >= 1")
    if resolution < 1:
        raise PlanError("resolution must be positive")
    if not arch.stages:
        raise PlanError("an architecture needs at least one stage")
    if arch.stem_kernel % 2 == 0:
        raise PlanError("stem kernel must be odd")
    for i, s in enumerate(arch.stages, 1):
        if s.repeats < 1:
            raise PlanError(f"stage {i}: repeats must be >= 1")
        if s.channels < 1:
            raise PlanError(f"stage {i}: channels must be >= 1")
        if s.stride not in (1, 2):
            raise PlanError(f"stage {i}: stride must be 1 or 2")
        if s.kernel % 2 == 0:
            raise PlanError(f"stage {i}: kernel must be odd")


def toy_b0(classes: int = 3) -> BaseArchitecture:
    """Small MBConv base: trainable on one CPU core in minutes."""
    return BaseArchitecture(
        name="toy-b0",
        classes=classes,
        base_resolution=32,
        stem_channels=16,
        stem_kernel=3,
        stem_stride=2,
        head_channels=128,
        stages=(
            StageSpec(repeats=1, channels=16, kernel=3, stride=1, expansion=1, se_ratio=0.25),
            StageSpec(repeats=2, channels=24, kernel=3, stride=2, expansion=6, se_ratio=0.25),
            StageSpec(repeats=2, channels=40, kernel=3, stride=2, expansion=6, se_ratio=0.25),
        ),
    )


def base_as_plan(base: BaseArchitecture) -> ScaledModelPlan:
    return ScaledModelPlan(
        stages=base.stages,
        classes=base.classes,
        resolution=base.base_resolution,
        stem_channels=base.stem_channels,
        stem_kernel=base.stem_kernel,
        stem_stride=base.stem_stride,
        head_channels=base.head_channels,
        in_channels=base.in_channels,
        name=base.name,
    )


# ---------------------------------------------------------------------------
# compound scaling


def constraint_value(c: ScalingCoefficients) -> float:
    """alpha * beta**2 * gamma**2 (the FLOP growth per unit phi)."""
    return c.alpha * c.beta**2 * c.gamma**2


def round_channels(channels: int, width_mult: float) -> int:
    if channels < 8:
        return channels
    return max(8, int(math.floor(channels * width_mult / 8 + 0.5)) * 8)


def round_repeats(repeats: int, depth_mult: float) -> int:
    # the 1e-9 guard keeps products like 1.1*10 from ceiling one too high
    return int(math.ceil(repeats * depth_mult - 1e-9))


def round_resolution(resolution: int, resolution_mult: float) -> int:
    return int(math.floor(resolution * resolution_mult / 2 + 0.5)) * 2


def compound_scale(
    base: BaseArchitecture,
    c: ScalingCoefficients,
    tolerance: float | None = 0.2,
    warn_tolerance: float = 0.1,
) -> ScaledModelPlan:
    """Scale depth, width and resolution by alpha**phi, beta**phi, gamma**phi.

    ``tolerance=None`` disables the alpha*beta^2*gamma^2 ~ 2 check.
    """
    value = constraint_value(c)
    if tolerance is not None:
        if abs(value - 2.0) > tolerance:
            raise PlanError(
                f"alpha*beta^2*gamma^2 = {value:.6g} is outside 2 +/- {tolerance}"
            )
        if abs(value - 2.0) > warn_tolerance:
            warnings.warn(f"alpha*beta^2*gamma^2 = {value:.6g} deviates from 2 by more than {warn_tolerance}")
    d, w, r = c.alpha**c.phi, c.beta**c.phi, c.gamma**c.phi
    stages = tuple(
        replace(s, repeats=round_repeats(s.repeats, d), channels=round_channels(s.channels, w)) for s in base.stages
    )
    return ScaledModelPlan(
        stages=stages,
        classes=base.classes,
        resolution=round_resolution(base.base_resolution, r),
        stem_channels=round_channels(base.stem_channels, w),
        stem_kernel=base.stem_kernel,
        stem_stride=base.stem_stride,
        head_channels=round_channels(base.head_channels, w),
        in_channels=base.in_channels,
        name=base.name if c.phi == 0 else f"{base.name}-phi{c.phi:g}",
        depth_mult=d,
        width_mult=w,
        resolution_mult=r,
        coefficients=c,
    )


# ---------------------------------------------------------------------------
# network construction and accounting


def block_configs(plan: ScaledModelPlan) -> list[tuple[str, MBConvConfig]]:
    """(name, config) for every MBConv block, e.g. ``block2b``."""
    out = []
    in_ch = plan.stem_channels
    for si, stage in enumerate(plan.stages, 1):
        for bi in range(stage.repeats):
            cfg = MBConvConfig(
                expansion=stage.expansion,
                kernel=stage.kernel,
                stride=stage.stride if bi == 0 else 1,
                in_ch=in_ch,
                out_ch=stage.channels,
                se_ratio=stage.se_ratio,
            )
            out.append((f"block{si}{_letters(bi)}", cfg))
            in_ch = stage.channels
    return out


def _letters(i: int) -> str:
    s = ""
    i += 1
    while i:
        i, rem = divmod(i - 1, 26)
        s = chr(ord("a") + rem) + s
    return s


def build_network(plan: ScaledModelPlan | BaseArchitecture, seed: int = 0, momentum: float = 0.99, epsilon: float = 1e-3) -> Network:
    """Instantiate the plan with deterministic per-layer initialisation."""
    if isinstance(plan, BaseArchitecture):
        plan = base_as_plan(plan)
    blocks = block_configs(plan)
    last = plan.stages[-1].channels
    layers = [
        Input("input"),
        Conv2D("stem_conv", plan.in_channels, plan.stem_channels, plan.stem_kernel, plan.stem_stride),
        BatchNorm("stem_bn", plan.stem_channels, momentum, epsilon),
        Activation("stem_act"),
        *[MBConvBlock(name, cfg, momentum, epsilon) for name, cfg in blocks],
        Conv2D("top_conv", last, plan.head_channels, 1),
        BatchNorm("top_bn", plan.head_channels, momentum, epsilon),
        Activation("top_act"),
        GlobalAvgPool("avg_pool"),
        Dense("logits", plan.head_channels, plan.classes),
        Softmax("predictions"),
    ]
    net = Network(layers, plan.classes, plan.resolution, plan.in_channels, plan=plan)
    for i, leaf in enumerate(net.leaves()):
        leaf.init(rng([seed, i]))
    return net


def conv_params(in_ch: int, out_ch: int, kernel: int, bias: bool = False) -> int:
    return in_ch * out_ch * kernel * kernel + (out_ch if bias else 0)


def conv_macs(out_h: int, out_w: int, in_ch: int, out_ch: int, kernel: int) -> int:
    return out_h * out_w * in_ch * out_ch * kernel * kernel


def depthwise_params(channels: int, kernel: int) -> int:
    return channels * kernel * kernel


def depthwise_macs(out_h: int, out_w: int, channels: int, kernel: int) -> int:
    return out_h * out_w * channels * kernel * kernel


def dense_params(in_features: int, out_features: int, bias: bool = True) -> int:
    return in_features * out_features + (out_features if bias else 0)


def batchnorm_params(channels: int) -> int:
    return 2 * channels


def mbconv_params_macs(cfg: MBConvConfig, in_h: int, in_w: int) -> tuple[int, int, int, int]:
    """Returns (params, macs, out_h, out_w) for one block."""
    mid = cfg.expanded_ch
    params = macs = 0
    if cfg.expansion != 1:
        params += conv_params(cfg.in_ch, mid, 1) + batchnorm_params(mid)
        macs += conv_macs(in_h, in_w, cfg.in_ch, mid, 1)
    out_h, out_w = math.ceil(in_h / cfg.stride), math.ceil(in_w / cfg.stride)
    params += depthwise_params(mid, cfg.kernel) + batchnorm_params(mid)
    macs += depthwise_macs(out_h, out_w, mid, cfg.kernel)
    if cfg.se_reduced:
        r = cfg.se_reduced
        params += dense_params(mid, r) + dense_params(r, mid)
        macs += mid * r + r * mid
    params += conv_params(mid, cfg.out_ch, 1) + batchnorm_params(cfg.out_ch)
    macs += conv_macs(out_h, out_w, mid, cfg.out_ch, 1)
    return params, macs, out_h, out_w


def count_params_flops(plan: ScaledModelPlan | BaseArchitecture) -> tuple[int, int]:
    """(trainable parameter count, multiply-accumulates per image)."""
    if isinstance(plan, BaseArchitecture):
        plan = base_as_plan(plan)
    h = w = plan.resolution
    h, w = math.ceil(h / plan.stem_stride), math.ceil(w / plan.stem_stride)
    params = conv_params(plan.in_channels, plan.stem_channels, plan.stem_kernel) + batchnorm_params(plan.stem_channels)
    macs = conv_macs(h, w, plan.in_channels, plan.stem_channels, plan.stem_kernel)
    for _, cfg in block_configs(plan):
        p, m, h, w = mbconv_params_macs(cfg, h, w)
        params += p
        macs += m
    last = plan.stages[-1].channels
    params += conv_params(last, plan.head_channels, 1) + batchnorm_params(plan.head_channels)
    macs += conv_macs(h, w, last, plan.head_channels, 1)
    params += dense_params(plan.head_channels, plan.classes)
    macs += plan.head_channels * plan.classes
    return params, macs


# ---------------------------------------------------------------------------
# text format

_TOP_INT = ("classes", "resolution", "stem_channels", "stem_kernel", "stem_stride", "head_channels", "in_channels")
_TOP_FLOAT = ("depth_mult", "width_mult", "resolution_mult")
_COEFF = ("alpha", "beta", "gamma", "phi")
_STAGE_INT = ("repeats", "channels", "kernel", "stride")
_STAGE_FLOAT = ("expansion", "se_ratio")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_plan(plan: ScaledModelPlan | BaseArchitecture) -> str:
    if isinstance(plan, BaseArchitecture):
        plan = base_as_plan(plan)
    lines = [f"name = {plan.name}"]
    for key in _TOP_INT:
        lines.append(f"{key} = {getattr(plan, key)}")
    for key in _TOP_FLOAT:
        lines.append(f"{key} = {_fmt(float(getattr(plan, key)))}")
    if plan.coefficients is not None:
        for key in _COEFF:
            lines.append(f"{key} = {_fmt(float(getattr(plan.coefficients, key)))}")
    for i, s in enumerate(plan.stages, 1):
        lines.append("")
        lines.append(f"[stage.{i}]")
        for key in _STAGE_INT:
            lines.append(f"{key} = {getattr(s, key)}")
        for key in _STAGE_FLOAT:
            lines.append(f"{key} = {_fmt(float(getattr(s, key)))}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> tuple[dict[str, str], list[tuple[str, dict[str, str]]]]:
    """Split ``key = value`` text into top-level keys and ``[section]`` blocks."""
    top: dict[str, str] = {}
    sections: list[tuple[str, dict[str, str]]] = []
    current = top
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = {}
            sections.append((line[1:-1].strip(), current))
            continue
        if "=" not in line:
            raise PlanError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise PlanError(f"line {lineno}: empty key")
        if key in current:
            raise PlanError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value
    return top, sections


def _num(kind, key: str, value: str):
    try:
        return kind(value)
    except ValueError:
        raise PlanError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def parse_plan(text: str) -> ScaledModelPlan:
    top, sections = parse_key_values(text)
    known = {"name", *_TOP_INT, *_TOP_FLOAT, *_COEFF}
    unknown = set(top) - known
    if unknown:
        raise PlanError(f"unknown keys: {sorted(unknown)}")
    for key in ("classes", "resolution"):
        if key not in top:
            raise PlanError(f"missing required key {key!r}")
    stages = []
    for i, (title, body) in enumerate(sections, 1):
        if title != f"stage.{i}":
            raise PlanError(f"expected section [stage.{i}], got [{title}]")
        extra = set(body) - {*_STAGE_INT, *_STAGE_FLOAT}
        if extra:
            raise PlanError(f"[{title}]: unknown keys {sorted(extra)}")
        if "repeats" not in body or "channels" not in body:
            raise PlanError(f"[{title}]: repeats and channels are required")
        kw = {k: _num(int, k, v) for k, v in body.items() if k in _STAGE_INT}
        kw.update({k: _num(float, k, v) for k, v in body.items() if k in _STAGE_FLOAT})
        stages.append(StageSpec(**kw))
    kwargs = {k: _num(int, k, v) for k, v in top.items() if k in _TOP_INT}
    kwargs.update({k: _num(float, k, v) for k, v in top.items() if k in _TOP_FLOAT})
    coeff = None
    if any(k in top for k in _COEFF):
        coeff = ScalingCoefficients(**{k: _num(float, k, top[k]) for k in _COEFF if k in top})
    return ScaledModelPlan(stages=tuple(stages), name=top.get("name", "custom"), coefficients=coeff, **kwargs)


def parse_base(text: str) -> BaseArchitecture:
    plan = parse_plan(text)
    return BaseArchitecture(
        stages=plan.stages,
        classes=plan.classes,
        base_resolution=plan.resolution,
        stem_channels=plan.stem_channels,
        stem_kernel=plan.stem_kernel,
        stem_stride=plan.stem_stride,
        head_channels=plan.head_channels,
        in_channels=plan.in_channels,
        name=plan.name,
    )
