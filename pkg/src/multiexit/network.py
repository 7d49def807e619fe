"""Group-wise backbones and sampling-based branch augmentation.

A backbone is a stem convolution, G groups of residual blocks and one
classifier head.  Augmentation attaches extra classifiers after chosen
groups; each branch replays the downsampling pattern of the remaining
groups with one fresh block per group, so every classifier ends in a
feature vector of the same length and a fully-connected layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T


class ValidationError(ValueError):
    """A network spec violates one of its invariants."""


@dataclass(frozen=True)
class StemSpec:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class GroupSpec:
    num_blocks: int
    out_channels: int
    first_block_stride: int = 1


@dataclass(frozen=True)
class BackboneSpec:
    stem: StemSpec
    groups: tuple[GroupSpec, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        self.validate()

    def validate(self) -> None:
        if len(self.groups) < 2:
            raise ValidationError(f"need at least 2 groups for an early exit, got {len(self.groups)}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stem.channels < 1 or self.stem.stride not in (1, 2):
            raise ValidationError(f"bad stem {self.stem}")
        if self.stem.kernel < 1 or self.stem.kernel % 2 == 0:
            raise ValidationError(f"stem kernel must be odd and positive, got {self.stem.kernel}")
        prev = 0
        for i, g in enumerate(self.groups, start=1):
            if g.num_blocks < 1:
                raise ValidationError(f"group {i}: num_blocks must be >= 1")
            if g.first_block_stride not in (1, 2):
                raise ValidationError(f"group {i}: first_block_stride must be 1 or 2")
            if g.out_channels < prev:
                raise ValidationError(
                    f"group {i}: out_channels must be nondecreasing ({g.out_channels} < {prev})")
            prev = g.out_channels


def _kaiming_conv(rng: np.random.Generator, out_ch, in_ch, k, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype)


class _Conv:
    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype):
        self.stride = stride
        self.padding = kernel // 2
        self.weight = T.Tensor(_kaiming_conv(rng, out_ch, in_ch, kernel, dtype), requires_grad=True)
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return T.conv2d(x, self.weight, self.stride, self.padding)

    def named_params(self, prefix):
        yield f"{prefix}.weight", self.weight

    def macs(self, hw):
        co, ci, k, _ = self.weight.shape
        ho = (hw[0] + 2 * self.padding - k) // self.stride + 1
        wo = (hw[1] + 2 * self.padding - k) // self.stride + 1
        return ci * co * k * k * ho * wo, (ho, wo)


class _BatchNorm:
    def __init__(self, channels, dtype, momentum=0.9, eps=1e-5):
        self.gamma = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.calls = 0

    def forward(self, x, training):
        self.calls += 1
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)

    def named_params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class _Linear:
    def __init__(self, in_features, out_features, rng, dtype):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = T.Tensor(rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype),
                               requires_grad=True)
        self.bias = T.Tensor(rng.uniform(-bound, bound, size=out_features).astype(dtype),
                             requires_grad=True)
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return T.linear(x, self.weight, self.bias)

    def named_params(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def macs(self):
        o, i = self.weight.shape
        return i * o


class _Block:
    """Residual block: two 3x3 convs with batch norm, identity or 1x1 projection skip."""

    def __init__(self, in_ch, out_ch, stride, rng, dtype):
        self.conv1 = _Conv(in_ch, out_ch, 3, stride, rng, dtype)
        self.bn1 = _BatchNorm(out_ch, dtype)
        self.conv2 = _Conv(out_ch, out_ch, 3, 1, rng, dtype)
        self.bn2 = _BatchNorm(out_ch, dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj_conv = _Conv(in_ch, out_ch, 1, stride, rng, dtype)
            self.proj_bn = _BatchNorm(out_ch, dtype)
        else:
            self.proj_conv = None
            self.proj_bn = None

    def forward(self, x, training):
        h = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        h = self.bn2.forward(self.conv2.forward(h), training)
        skip = x if self.proj_conv is None else self.proj_bn.forward(self.proj_conv.forward(x), training)
        return T.relu(T.residual_add(h, skip))

    def submodules(self, prefix):
        yield f"{prefix}.conv1", self.conv1
        yield f"{prefix}.bn1", self.bn1
        yield f"{prefix}.conv2", self.conv2
        yield f"{prefix}.bn2", self.bn2
        if self.proj_conv is not None:
            yield f"{prefix}.proj_conv", self.proj_conv
            yield f"{prefix}.proj_bn", self.proj_bn

    def macs(self, hw):
        m1, hw1 = self.conv1.macs(hw)
        m2, hw2 = self.conv2.macs(hw1)
        total = m1 + m2
        if self.proj_conv is not None:
            mp, _ = self.proj_conv.macs(hw)
            total += mp
        return total, hw2


class _Stem:
    def __init__(self, in_ch, spec: StemSpec, rng, dtype):
        self.conv = _Conv(in_ch, spec.channels, spec.kernel, spec.stride, rng, dtype)
        self.bn = _BatchNorm(spec.channels, dtype)

    def forward(self, x, training):
        return T.relu(self.bn.forward(self.conv.forward(x), training))

    def submodules(self, prefix):
        yield f"{prefix}.conv", self.conv
        yield f"{prefix}.bn", self.bn


class _Head:
    """Global average pool + fully-connected classifier."""

    def __init__(self, in_features, num_classes, rng, dtype):
        self.fc = _Linear(in_features, num_classes, rng, dtype)

    def forward(self, x):
        feature = T.global_avg_pool(x)
        return self.fc.forward(feature), feature

    def submodules(self, prefix):
        yield f"{prefix}.fc", self.fc


class _Branch:
    def __init__(self, blocks, head):
        self.blocks = blocks
        self.head = head

    def forward(self, x, training):
        h = x
        for blk in self.blocks:
            h = blk.forward(h, training)
        return self.head.forward(h)

    def submodules(self, prefix):
        for i, blk in enumerate(self.blocks, start=1):
            yield from blk.submodules(f"{prefix}.block{i}")
        yield from self.head.submodules(prefix)

    def macs(self, hw):
        total = 0
        for blk in self.blocks:
            m, hw = blk.macs(hw)
            total += m
        return total + self.head.fc.macs()


class MultiExitNetwork:
    """Backbone plus attached branch classifiers, ordered shallow to deep.

    Classifier N (the deepest) is always the original backbone head;
    augmentation never alters its computation path.  Backbone modules
    are shared between the pre- and post-augmentation networks.
    """

    def __init__(self, spec: BackboneSpec, stem, groups, head, branches, attach_points,
                 dtype, input_hw=(32, 32)):
        self.spec = spec
        self.stem = stem
        self.groups = groups
        self.head = head
        self.branches = branches
        self.attach_points = tuple(attach_points)
        self.dtype = dtype
        self.input_hw = tuple(input_hw)

    @property
    def num_classifiers(self) -> int:
        return len(self.branches) + 1

    # -- traversal ---------------------------------------------------------

    def _submodules(self):
        yield from self.stem.submodules("stem")
        for gi, blocks in enumerate(self.groups, start=1):
            for bi, blk in enumerate(blocks, start=1):
                yield from blk.submodules(f"group{gi}.block{bi}")
        for i, br in enumerate(self.branches, start=1):
            yield from br.submodules(f"branch{i}")
        yield from self.head.submodules("head")

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for prefix, mod in self._submodules():
            for name, p in mod.named_params(prefix):
                out[name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self._submodules():
            if hasattr(mod, "named_buffers"):
                for name, b in mod.named_buffers(prefix):
                    out[name] = b
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def reset_call_counters(self) -> None:
        for _, mod in self._submodules():
            mod.calls = 0

    def call_counts(self) -> dict[str, int]:
        return {prefix: mod.calls for prefix, mod in self._submodules()}

    # -- forward -----------------------------------------------------------

    def _check_input(self, x: T.Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"expected input [B, 3, H, W], got {x.shape}")

    def iter_classifiers(self, x: T.Tensor, training: bool = False) -> Iterator[tuple[T.Tensor, T.Tensor]]:
        """Yield (logits, feature) shallow to deep, computing lazily."""
        self._check_input(x)
        h = self.stem.forward(x, training)
        bi = 0
        for gi, blocks in enumerate(self.groups, start=1):
            for blk in blocks:
                h = blk.forward(h, training)
            if bi < len(self.branches) and self.attach_points[bi] == gi:
                yield self.branches[bi].forward(h, training)
                bi += 1
        yield self.head.forward(h)

    def forward_all(self, x: T.Tensor, training: bool = False) -> list[tuple[T.Tensor, T.Tensor]]:
        return list(self.iter_classifiers(x, training))

    def forward_prefix(self, x: T.Tensor, exit_index: int, training: bool = False) -> tuple[T.Tensor, T.Tensor]:
        """Logits and feature of one classifier, touching only its prefix."""
        n = self.num_classifiers
        if not 1 <= exit_index <= n:
            raise IndexError(f"exit_index {exit_index} out of range [1, {n}]")
        self._check_input(x)
        h = self.stem.forward(x, training)
        if exit_index == n:
            for blocks in self.groups:
                for blk in blocks:
                    h = blk.forward(h, training)
            return self.head.forward(h)
        upto = self.attach_points[exit_index - 1]
        for gi in range(1, upto + 1):
            for blk in self.groups[gi - 1]:
                h = blk.forward(h, training)
        return self.branches[exit_index - 1].forward(h, training)

    # -- cost model --------------------------------------------------------

    def count_flops(self, exit_index: int, input_hw: Optional[tuple[int, int]] = None) -> int:
        """Multiply-accumulate count of forward_prefix at this exit."""
        n = self.num_classifiers
        if not 1 <= exit_index <= n:
            raise IndexError(f"exit_index {exit_index} out of range [1, {n}]")
        hw = tuple(input_hw) if input_hw is not None else self.input_hw
        total, hw = self.stem.conv.macs(hw)
        if exit_index == n:
            for blocks in self.groups:
                for blk in blocks:
                    m, hw = blk.macs(hw)
                    total += m
            return total + self.head.fc.macs()
        upto = self.attach_points[exit_index - 1]
        for gi in range(1, upto + 1):
            for blk in self.groups[gi - 1]:
                m, hw = blk.macs(hw)
                total += m
        return total + self.branches[exit_index - 1].macs(hw)

    # -- config ------------------------------------------------------------

    def to_arch_config(self) -> dict:
        return {
            "stem": {"channels": self.spec.stem.channels, "kernel": self.spec.stem.kernel,
                     "stride": self.spec.stem.stride},
            "groups": [
                {"num_blocks": g.num_blocks, "out_channels": g.out_channels,
                 "first_block_stride": g.first_block_stride}
                for g in self.spec.groups
            ],
            "num_classes": self.spec.num_classes,
            "attach_points": list(self.attach_points),
        }

    def arch_digest(self) -> str:
        return arch_digest(self.to_arch_config())


def arch_digest(config: dict) -> str:
    canonical = {k: config[k] for k in ("stem", "groups", "num_classes", "attach_points")}
    return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode()).hexdigest()[:16]


def build_backbone(spec: BackboneSpec, seed: int = 0, dtype=np.float32,
                   input_hw=(32, 32)) -> MultiExitNetwork:
    """Single-classifier network: stem, residual groups, pooled FC head."""
    spec.validate()
    rng = np.random.default_rng(seed)
    stem = _Stem(3, spec.stem, rng, dtype)
    groups = []
    in_ch = spec.stem.channels
    for g in spec.groups:
        blocks = []
        for b in range(g.num_blocks):
            stride = g.first_block_stride if b == 0 else 1
            blocks.append(_Block(in_ch, g.out_channels, stride, rng, dtype))
            in_ch = g.out_channels
        groups.append(blocks)
    head = _Head(spec.groups[-1].out_channels, spec.num_classes, rng, dtype)
    return MultiExitNetwork(spec, stem, groups, head, [], (), dtype, input_hw)


def augment_with_branches(net: MultiExitNetwork, attach_points, seed: int = 1) -> MultiExitNetwork:
    """Attach one sampled branch classifier per attach point.

    Branch k after group g gets G-g fresh blocks copying the channel
    width and first-block stride of groups g+1..G, then a pooled FC
    head, so its pre-FC feature length equals the backbone's.
    """
    if net.branches:
        raise ValidationError("network already has branches; augment the bare backbone")
    spec = net.spec
    g_count = len(spec.groups)
    points = tuple(int(p) for p in attach_points)
    if not points:
        raise ValidationError("attach_points must be non-empty")
    if list(points) != sorted(set(points)):
        raise ValidationError(f"attach points must be strictly increasing, got {list(points)}")
    if points[0] < 1 or points[-1] > g_count - 1:
        raise ValidationError(f"attach points must lie in [1, {g_count - 1}], got {list(points)}")
    rng = np.random.default_rng(seed)
    final_ch = spec.groups[-1].out_channels
    branches = []
    for g in points:
        in_ch = spec.groups[g - 1].out_channels
        blocks = []
        for j in range(g, g_count):
            mirrored = spec.groups[j]
            blocks.append(_Block(in_ch, mirrored.out_channels, mirrored.first_block_stride, rng, net.dtype))
            in_ch = mirrored.out_channels
        head = _Head(final_ch, spec.num_classes, rng, net.dtype)
        branches.append(_Branch(blocks, head))
    return MultiExitNetwork(spec, net.stem, net.groups, net.head, branches, points,
                            net.dtype, net.input_hw)


def backbone_spec_from_config(config: dict) -> BackboneSpec:
    try:
        stem = StemSpec(**config["stem"])
        groups = tuple(GroupSpec(**g) for g in config["groups"])
        return BackboneSpec(stem=stem, groups=groups, num_classes=int(config["num_classes"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed architecture config: {exc}") from exc


def build_from_config(config: dict, seed: int = 0, dtype=np.float32,
                      input_hw=(32, 32)) -> MultiExitNetwork:
    """Build (and, when attach points are given, augment) from a JSON-style dict."""
    spec = backbone_spec_from_config(config)
    if "input_hw" in config:
        input_hw = tuple(config["input_hw"])
    net = build_backbone(spec, seed=seed, dtype=dtype, input_hw=input_hw)
    points = config.get("attach_points") or []
    if points:
        net = augment_with_branches(net, points, seed=seed + 1)
    return net


def resnet18_config(num_classes: int = 100) -> dict:
    """ResNet18-shaped reference: 4 groups of 2 blocks, widths 64..512."""
    return {
        "stem": {"channels": 64, "kernel": 3, "stride": 1},
        "groups": [
            {"num_blocks": 2, "out_channels": 64, "first_block_stride": 1},
            {"num_blocks": 2, "out_channels": 128, "first_block_stride": 2},
            {"num_blocks": 2, "out_channels": 256, "first_block_stride": 2},
            {"num_blocks": 2, "out_channels": 512, "first_block_stride": 2},
        ],
        "num_classes": num_classes,
        "attach_points": [1, 2, 3],
    }
