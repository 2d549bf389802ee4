"""Adapted 18-layer residual network for patch classification.

Layout: 7×7/2 stem conv → BN → ReLU → 3×3/2 max pool, four groups of two
basic blocks, global average pool, linear head to K logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


@dataclass(frozen=True)
class StemSpec:
    kernel: int = 7
    channels: int = 64
    stride: int = 2
    pool_kernel: int = 3
    pool_stride: int = 2


@dataclass(frozen=True)
class GroupSpec:
    channels: int
    first_stride: int
    blocks_per_group: int = 2


@dataclass(frozen=True)
class ModelSpec:
    input_size: int = 512
    stem: StemSpec = field(default_factory=StemSpec)
    groups: tuple = (
        GroupSpec(64, 1), GroupSpec(128, 2), GroupSpec(256, 2), GroupSpec(512, 2),
    )
    num_classes: int = 4

    def validate(self) -> None:
        if len(self.groups) != 4:
            raise ValueError(f"expected 4 block groups, got {len(self.groups)}")
        for i, g in enumerate(self.groups):
            if g.blocks_per_group != 2:
                raise ValueError(f"group {i + 1}: expected 2 basic blocks, got {g.blocks_per_group}")
            want = 1 if i == 0 else 2
            if g.first_stride != want:
                raise ValueError(f"group {i + 1}: first_stride must be {want}, got {g.first_stride}")
        if self.groups[0].channels != self.stem.channels:
            raise ValueError("group 1 uses identity shortcuts only, so its width must equal the stem width")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_size=d["input_size"],
            stem=StemSpec(**d["stem"]),
            groups=tuple(GroupSpec(**g) for g in d["groups"]),
            num_classes=d["num_classes"],
        )


def full_spec(num_classes: int = 4) -> ModelSpec:
    return ModelSpec(num_classes=num_classes)


def desk_spec(input_size: int = 64, channels=(8, 16, 32, 64), num_classes: int = 4) -> ModelSpec:
    return ModelSpec(
        input_size=input_size,
        stem=StemSpec(channels=channels[0]),
        groups=tuple(GroupSpec(c, 1 if i == 0 else 2) for i, c in enumerate(channels)),
        num_classes=num_classes,
    )


@dataclass
class PatchOutput:
    features: np.ndarray  # C×h×w, final pre-pool activation
    probs: np.ndarray     # 1×K


class PatchNet:
    """Parameters, batchnorm buffers and forward pass of the residual patch classifier."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}

    # -- construction helpers
    def _conv(self, name, cin, cout, k, rng):
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[name] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True, name=name)

    def _bn(self, name, c):
        self.params[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True, name=name + ".gamma")
        self.params[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True, name=name + ".beta")
        self.stats[name] = RunningStats(c)

    def blocks(self):
        """Yield (prefix, cin, cout, stride) for each basic block in order."""
        cin = self.spec.stem.channels
        for gi, g in enumerate(self.spec.groups):
            for bi in range(g.blocks_per_group):
                stride = g.first_stride if bi == 0 else 1
                yield f"g{gi + 1}.b{bi}", cin, g.channels, stride
                cin = g.channels

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward
    def _bn_apply(self, x, name, mode):
        return T.batchnorm2d(x, self.params[name + ".gamma"], self.params[name + ".beta"],
                             self.stats[name], mode)

    def _block(self, x, prefix, cin, cout, stride, mode):
        p = self.params
        h = T.conv2d(x, p[prefix + ".conv1"], stride=stride, padding=1)
        h = T.relu(self._bn_apply(h, prefix + ".bn1", mode))
        h = T.conv2d(h, p[prefix + ".conv2"], stride=1, padding=1)
        h = self._bn_apply(h, prefix + ".bn2", mode)
        if prefix + ".proj" in p:
            sc = T.conv2d(x, p[prefix + ".proj"], stride=stride, padding=0)
            sc = self._bn_apply(sc, prefix + ".proj_bn", mode)
        else:
            sc = x
        return T.relu(T.add(h, sc))

    def features(self, x: Tensor, mode: str = "eval") -> Tensor:
        s = self.spec.stem
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.spec.input_size,) * 2:
            raise T.ShapeError(
                f"expected N×3×{self.spec.input_size}×{self.spec.input_size} input, got {x.shape}")
        h = T.conv2d(x, self.params["stem.conv"], stride=s.stride, padding=s.kernel // 2)
        h = T.relu(self._bn_apply(h, "stem.bn", mode))
        h = T.maxpool2d(h, s.pool_kernel, s.pool_stride, padding=s.pool_kernel // 2)
        for prefix, cin, cout, stride in self.blocks():
            h = self._block(h, prefix, cin, cout, stride, mode)
        return h

    def logits(self, x: Tensor, mode: str = "eval") -> Tensor:
        pooled = T.global_avgpool(self.features(x, mode))
        return T.linear(pooled, self.params["fc.weight"], self.params["fc.bias"])

    def forward(self, x: Tensor, mode: str = "eval") -> tuple[Tensor, Tensor]:
        """Return (features, probs) for a batch."""
        feats = self.features(x, mode)
        logits = T.linear(T.global_avgpool(feats), self.params["fc.weight"], self.params["fc.bias"])
        return feats, T.softmax(logits)


def build_patchnet(spec: ModelSpec, rng: np.random.Generator) -> PatchNet:
    """He fan-in initialisation; batchnorm gamma=1, beta=0."""
    net = PatchNet(spec)
    s = spec.stem
    net._conv("stem.conv", 3, s.channels, s.kernel, rng)
    net._bn("stem.bn", s.channels)
    for prefix, cin, cout, stride in list(net.blocks()):
        net._conv(prefix + ".conv1", cin, cout, 3, rng)
        net._bn(prefix + ".bn1", cout)
        net._conv(prefix + ".conv2", cout, cout, 3, rng)
        net._bn(prefix + ".bn2", cout)
        if stride != 1 or cin != cout:
            net._conv(prefix + ".proj", cin, cout, 1, rng)
            net._bn(prefix + ".proj_bn", cout)
    c = spec.groups[-1].channels
    k = spec.num_classes
    net.params["fc.weight"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / c), (c, k)), requires_grad=True,
                                     name="fc.weight")
    net.params["fc.bias"] = Tensor(np.zeros(k), requires_grad=True, name="fc.bias")
    return net


def forward_patch(model: PatchNet, patch, mode: str = "eval") -> PatchOutput:
    """Run one standardized 1×3×S×S patch through the network."""
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise T.ShapeError(f"forward_patch expects a 1×3×S×S patch, got {x.shape}")
    feats, probs = model.forward(x, mode)
    return PatchOutput(features=feats.data[0], probs=probs.data)


def count_parameters(spec: ModelSpec) -> int:
    """Closed-form parameter count (conv weights, BN affine pairs, linear head)."""
    s = spec.stem
    total = 3 * s.channels * s.kernel ** 2 + 2 * s.channels
    cin = s.channels
    for g in spec.groups:
        for b in range(g.blocks_per_group):
            stride = g.first_stride if b == 0 else 1
            total += cin * g.channels * 9 + 2 * g.channels
            total += g.channels * g.channels * 9 + 2 * g.channels
            if stride != 1 or cin != g.channels:
                total += cin * g.channels + 2 * g.channels
            cin = g.channels
    return total + cin * spec.num_classes + spec.num_classes


def feature_size(spec: ModelSpec) -> int:
    """Spatial side of the final feature map, by the conv/pool extent rule."""
    s = spec.stem
    size = (spec.input_size + 2 * (s.kernel // 2) - s.kernel) // s.stride + 1
    size = (size + 2 * (s.pool_kernel // 2) - s.pool_kernel) // s.pool_stride + 1
    for g in spec.groups:
        size = (size + 2 - 3) // g.first_stride + 1
    return size


def receptive_fields(spec: ModelSpec) -> list[tuple[int, int]]:
    """Per-group (min, max) receptive field: after the first and last conv of each group.

    Uses rf' = rf + (k-1)·jump, jump' = jump·stride along the main path.
    """
    s = spec.stem
    rf, jump = 1, 1
    rf, jump = rf + (s.kernel - 1) * jump, jump * s.stride
    if s.pool_kernel:
        rf, jump = rf + (s.pool_kernel - 1) * jump, jump * s.pool_stride
    out = []
    for g in spec.groups:
        first = None
        for b in range(g.blocks_per_group):
            for conv in range(2):
                stride = g.first_stride if (b == 0 and conv == 0) else 1
                rf, jump = rf + 2 * jump, jump * stride
                if first is None:
                    first = rf
        out.append((first, rf))
    return out


def layer_sequence_rf(layers) -> int:
    """Receptive field of a plain chain of (kernel, stride) layers."""
    rf, jump = 1, 1
    for k, stride in layers:
        rf, jump = rf + (k - 1) * jump, jump * stride
    return rf
