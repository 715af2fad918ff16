"""Classifier families and the dual-head network container.

Three families share one stage layout: an initial convolution stage,
a run of residual (or plain conv) groups, and a classifier tail.  A
network splits at "end of group g" into a stem and a head, which is how
a second head and, later, a logits-fusion merge CNN get attached.

wideresnet   pre-activation wide blocks, widths 16, 16w, 32w, 64w,
             depth constrained by (depth - 4) % 6 == 0.
resnet       post-activation basic blocks, widths 64, 128, 256, 512,
             group sizes given explicitly (default 3-4-6-3).
smallconv    2 to 4 conv-BN-ReLU-pool stages for desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ArchitectureError, ArgumentError, StateError
from .merge import MergeCNN, init_average
from .nn import (BasicBlock, BatchNorm2d, Conv2d, GlobalAvgPool, Linear,
                 Module, ReLU, Sequential, SpatialAvgPool, WideBasicBlock,
                 residual_group)
from .tensor import Tensor

FAMILIES = ("wideresnet", "resnet", "smallconv")
FORWARD_MODES = ("main", "second", "merged")

RESNET_WIDTHS = (64, 128, 256, 512)
SMALLCONV_WIDTHS = (8, 16, 32, 64)


@dataclass
class ArchSpec:
    """Declarative description of one classifier."""

    family: str
    depth: int
    num_classes: int
    widen_factor: int = 1
    group_sizes: tuple[int, ...] | None = None
    input_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArchitectureError(f"unknown family {self.family!r}")
        if self.num_classes < 2:
            raise ArchitectureError("num_classes must be at least 2")
        if self.widen_factor < 1:
            raise ArchitectureError("widen_factor must be at least 1")
        if self.input_channels < 1 or self.input_size < 1:
            raise ArchitectureError("input geometry must be positive")
        if self.group_sizes is not None:
            self.group_sizes = tuple(int(g) for g in self.group_sizes)
            if any(g < 1 for g in self.group_sizes):
                raise ArchitectureError("group sizes must be positive")
        if self.family == "wideresnet":
            if (self.depth - 4) % 6 != 0 or self.depth < 10:
                raise ArchitectureError(
                    f"wideresnet depth must satisfy (depth - 4) % 6 == 0, got {self.depth}")
        elif self.family == "resnet":
            sizes = self.group_sizes or (3, 4, 6, 3)
            if len(sizes) != 4:
                raise ArchitectureError("resnet expects exactly 4 group sizes")
        elif self.family == "smallconv":
            if not 2 <= self.depth <= 4:
                raise ArchitectureError(f"smallconv depth must be 2..4, got {self.depth}")
            if self.input_size >> self.depth < 1:
                raise ArchitectureError(
                    f"input size {self.input_size} collapses to nothing over "
                    f"{self.depth} pooling stages")

    def resolved_group_sizes(self) -> tuple[int, ...]:
        if self.family == "wideresnet":
            n = (self.depth - 4) // 6
            return (n, n, n)
        if self.family == "resnet":
            return self.group_sizes or (3, 4, 6, 3)
        return tuple(1 for _ in range(self.depth))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "num_classes": self.num_classes,
            "widen_factor": self.widen_factor,
            "group_sizes": list(self.group_sizes) if self.group_sizes else None,
            "input_channels": self.input_channels,
            "input_size": self.input_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        gs = d.get("group_sizes")
        return cls(
            family=d["family"], depth=d["depth"], num_classes=d["num_classes"],
            widen_factor=d.get("widen_factor", 1),
            group_sizes=tuple(gs) if gs else None,
            input_channels=d.get("input_channels", 3),
            input_size=d.get("input_size", 32),
        )


@dataclass
class AttachPoint:
    """Stem boundary: the second head attaches at the end of group ``group``."""

    group: int = 1


class _ClassifierTail(Module):
    """Final BN-ReLU (wideresnet only) + global pool + fully connected."""

    def __init__(self, channels: int, num_classes: int, pre_bn: bool, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.bn = BatchNorm2d(channels, dtype=dtype) if pre_bn else None
        self.pool = GlobalAvgPool()
        self.fc = Linear(channels, num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if self.bn is not None:
            x = T.relu(self.bn(x, train=train))
        return self.fc(self.pool(x, train=train), train=train)


class _FlattenTail(Module):
    """Flatten the last feature map into a fully connected classifier.

    Used by smallconv, where class identity can live in feature
    positions; averaging those away would discard the signal.
    """

    def __init__(self, in_features: int, num_classes: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.fc = Linear(in_features, num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return self.fc(T.flatten(x), train=train)


class _ConvBlock(Module):
    """smallconv stage: conv-BN-ReLU followed by 2x spatial pooling."""

    def __init__(self, in_ch: int, out_ch: int, *, rng, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.act = ReLU()
        self.pool = SpatialAvgPool(2, 2)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return self.pool(self.act(self.bn(self.conv(x, train=train), train=train)))


class SingleHeadNet(Module):
    """A full classifier assembled as an ordered list of stages.

    For the residual families stage 0 is the initial convolution,
    stages 1..G are the groups, and the last stage is the classifier
    tail; smallconv has no separate initial stage, so every conv block
    is its own group.  ``split`` divides the stage list at an attach
    point expressed as "end of group g".
    """

    def __init__(self, spec: ArchSpec, stages: list[Module], dtype):
        super().__init__()
        self.spec = spec
        self.dtype = dtype
        self.stages = Sequential(stages)
        self._group_offset = 0 if spec.family == "smallconv" else 1

    @property
    def num_groups(self) -> int:
        return len(self.stages) - 1 - self._group_offset

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return self.stages(x, train=train)

    def logits(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward(x, train=train)

    def split(self, group: int) -> tuple[Sequential, Sequential]:
        """Stem = stages up to the end of group ``group``; head = the rest."""
        if not 1 <= group <= self.num_groups:
            raise ArchitectureError(
                f"attach point must name a group in 1..{self.num_groups}, got {group}")
        boundary = self._group_offset + group
        stem = Sequential(self.stages.layers[:boundary])
        head = Sequential(self.stages.layers[boundary:])
        return stem, head


def build_network(spec: ArchSpec, seed: int = 0, dtype=np.float64) -> SingleHeadNet:
    """Construct a freshly initialized classifier for ``spec``.

    Conv weights use He normal fan-in init, BN affine starts at identity,
    and fully connected layers use uniform fan-in init.
    """
    rng = np.random.default_rng(seed)
    stages: list[Module] = []
    if spec.family == "wideresnet":
        w = spec.widen_factor
        widths = (16, 16 * w, 32 * w, 64 * w)
        n = (spec.depth - 4) // 6
        stages.append(Sequential([Conv2d(spec.input_channels, widths[0], 3,
                                         stride=1, padding=1, rng=rng, dtype=dtype)]))
        in_ch = widths[0]
        for gi, out_ch in enumerate(widths[1:]):
            stride = 1 if gi == 0 else 2
            stages.append(residual_group(WideBasicBlock, in_ch, out_ch, n, stride,
                                         rng=rng, dtype=dtype))
            in_ch = out_ch
        stages.append(_ClassifierTail(in_ch, spec.num_classes, pre_bn=True,
                                      rng=rng, dtype=dtype))
    elif spec.family == "resnet":
        widths = tuple(wd * spec.widen_factor for wd in RESNET_WIDTHS)
        sizes = spec.resolved_group_sizes()
        stages.append(Sequential([
            Conv2d(spec.input_channels, widths[0], 3, stride=1, padding=1, rng=rng, dtype=dtype),
            BatchNorm2d(widths[0], dtype=dtype),
            ReLU(),
        ]))
        in_ch = widths[0]
        for gi, (out_ch, blocks) in enumerate(zip(widths, sizes)):
            stride = 1 if gi == 0 else 2
            stages.append(residual_group(BasicBlock, in_ch, out_ch, blocks, stride,
                                         rng=rng, dtype=dtype))
            in_ch = out_ch
        stages.append(_ClassifierTail(in_ch, spec.num_classes, pre_bn=False,
                                      rng=rng, dtype=dtype))
    else:
        widths = tuple(wd * spec.widen_factor for wd in SMALLCONV_WIDTHS[:spec.depth])
        stages.append(Sequential([_ConvBlock(spec.input_channels, widths[0],
                                             rng=rng, dtype=dtype)]))
        in_ch = widths[0]
        for out_ch in widths[1:]:
            stages.append(Sequential([_ConvBlock(in_ch, out_ch, rng=rng, dtype=dtype)]))
            in_ch = out_ch
        side = spec.input_size >> spec.depth
        stages.append(_FlattenTail(in_ch * side * side, spec.num_classes,
                                   rng=rng, dtype=dtype))
    return SingleHeadNet(spec, stages, dtype)


class DualHeadNetwork(Module):
    """Shared stem, two heads, and an optional logits-fusion merge CNN.

    Forward modes: ``main`` and ``second`` return that head's logits;
    ``merged`` runs the stem once, feeds both heads, and returns the
    merge CNN's probability vector.
    """

    def __init__(self, spec: ArchSpec, second_spec: ArchSpec, attach_group: int,
                 stem: Sequential, head_main: Sequential, head_second: Sequential,
                 dtype):
        super().__init__()
        self.spec = spec
        self.second_spec = second_spec
        self.attach_group = attach_group
        self.dtype = dtype
        self.stem = stem
        self.head_main = head_main
        self.head_second = head_second
        self.merge: MergeCNN | None = None
        self.enabled = {"main": True, "second": True}

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def set_enabled(self, head: str, value: bool) -> None:
        if head not in ("main", "second"):
            raise ArgumentError(f"unknown head {head!r}")
        self.enabled[head] = bool(value)

    def regions(self) -> dict[str, Module]:
        out = {"stem": self.stem, "head_main": self.head_main,
               "head_second": self.head_second}
        if self.merge is not None:
            out["merge"] = self.merge
        return out

    def _require(self, mode: str) -> None:
        if mode not in FORWARD_MODES:
            raise ArgumentError(f"unknown forward mode {mode!r}")
        if mode == "merged":
            if self.merge is None:
                raise StateError("merged mode requested but no merge CNN is attached")
            if not (self.enabled["main"] and self.enabled["second"]):
                raise StateError("merged mode needs both heads enabled")
        elif not self.enabled[mode]:
            raise StateError(f"{mode} head is disabled")

    def forward_logits(self, x: Tensor, mode: str = "main", train: bool = False) -> Tensor:
        """Pre-softmax scores for any mode (merge FC output for merged)."""
        self._require(mode)
        feats = self.stem(x, train=train)
        if mode == "main":
            return self.head_main(feats, train=train)
        if mode == "second":
            return self.head_second(feats, train=train)
        z_main = self.head_main(feats, train=train)
        z_second = self.head_second(feats, train=train)
        return self.merge.forward_logits(z_main, z_second, train=train)

    def forward(self, x: Tensor, mode: str = "main", train: bool = False) -> Tensor:
        """Logits for head modes; merge-CNN probabilities for merged mode."""
        z = self.forward_logits(x, mode=mode, train=train)
        return T.softmax(z) if mode == "merged" else z

    def head_view(self, mode: str) -> "HeadView":
        return HeadView(self, mode)


class HeadView:
    """A single forward mode of a dual-head net, seen as a plain model."""

    def __init__(self, net: DualHeadNetwork, mode: str):
        net._require(mode)
        self.net = net
        self.mode = mode

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    def logits(self, x: Tensor, train: bool = False) -> Tensor:
        return self.net.forward_logits(x, mode=self.mode, train=train)


def attach_second_head(base: SingleHeadNet, attach: AttachPoint | int,
                       second_spec: ArchSpec | None = None, init: str = "copy",
                       seed: int = 1) -> DualHeadNetwork:
    """Split ``base`` at the attach point and bolt on a second head.

    The second head is the post-attach part of a network built from
    ``second_spec`` (defaults to the base spec).  ``init="copy"``
    duplicates the main head's parameters and buffers into it, which
    requires structurally identical heads; ``init="fresh"`` keeps the
    new head's own seeded initialization.
    """
    if init not in ("copy", "fresh"):
        raise ArgumentError(f"init must be 'copy' or 'fresh', got {init!r}")
    group = attach.group if isinstance(attach, AttachPoint) else int(attach)
    second_spec = second_spec or base.spec
    if second_spec.num_classes != base.spec.num_classes:
        raise ArchitectureError("both heads must emit the same number of classes")
    if second_spec.input_channels != base.spec.input_channels \
            or second_spec.input_size != base.spec.input_size:
        raise ArchitectureError("second head spec must share the base input geometry")

    stem, head_main = base.split(group)
    donor = build_network(second_spec, seed=seed, dtype=base.dtype)
    if not 1 <= group <= donor.num_groups:
        raise ArchitectureError(
            f"attach group {group} is out of range for the second head spec")
    head_second = donor.split(group)[1]

    net = DualHeadNetwork(base.spec, second_spec, group, stem, head_main,
                          head_second, base.dtype)
    _probe_attach_shapes(net)
    if init == "copy":
        nn.copy_state(head_main, head_second)
    return net


def _probe_attach_shapes(net: DualHeadNetwork) -> None:
    """Run a zeros batch through both paths to validate attach geometry."""
    spec = net.spec
    probe = Tensor(np.zeros((2, spec.input_channels, spec.input_size, spec.input_size),
                            dtype=net.dtype))
    try:
        feats = net.stem(probe, train=False)
        net.head_main(feats, train=False)
        net.head_second(feats, train=False)
    except (ArchitectureError,) as exc:
        raise exc
    except Exception as exc:
        raise ArchitectureError(f"attach point shape mismatch: {exc}") from exc
    net.stem.calls = 0
    for region in (net.stem, net.head_main, net.head_second):
        for m in region.modules():
            if isinstance(m, Sequential):
                m.calls = 0


def attach_merge(net: DualHeadNetwork, seed: int = 2,
                 init: str = "random") -> MergeCNN:
    """Create and attach a logits-fusion merge CNN sized for the net.

    ``init="random"`` keeps the seeded He initialization;
    ``init="average"`` rewires the fresh CNN so the merged output starts
    as the mean of the two heads' logits (see ``merge.init_average``),
    which hands later training an ensemble-strength starting point.
    """
    if net.merge is not None:
        raise StateError("a merge CNN is already attached")
    if init not in ("random", "average"):
        raise ArgumentError(f"init must be 'random' or 'average', got {init!r}")
    net.merge = MergeCNN(net.num_classes, rng=np.random.default_rng(seed), dtype=net.dtype)
    if init == "average":
        init_average(net.merge)
    return net.merge


def set_freeze(net: DualHeadNetwork | SingleHeadNet, region: str, frozen: bool) -> None:
    """Freeze or thaw one region: stem, head_main, head_second, or merge."""
    if isinstance(net, SingleHeadNet):
        raise ArgumentError("set_freeze expects a dual-head network; "
                            "freeze single-head nets via nn.set_module_freeze")
    regions = net.regions()
    if region not in regions:
        raise ArgumentError(f"unknown region {region!r}, have {sorted(regions)}")
    nn.set_module_freeze(regions[region], frozen)


def parameter_census(net: DualHeadNetwork | SingleHeadNet) -> dict:
    """Per-region parameter counts, ratios, and per-parameter freeze flags."""
    if isinstance(net, SingleHeadNet):
        total = net.param_count()
        return {
            "counts": {"total": total},
            "ratios": {},
            "frozen": {name: p.frozen for name, p in net.named_parameters()},
        }
    counts = {name: region.param_count() for name, region in net.regions().items()}
    counts["total"] = sum(counts.values())
    base = counts["stem"] + counts["head_main"]
    ratios = {
        "second_over_base": counts["head_second"] / base,
        "second_over_main": counts["head_second"] / counts["head_main"],
    }
    frozen = {name: p.frozen for name, p in net.named_parameters()}
    return {"counts": counts, "ratios": ratios, "frozen": frozen,
            "enabled": dict(net.enabled)}
