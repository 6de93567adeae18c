"""Second-stage R-CNN heads.

:class:`DoubleHeadParams` is the two-branch head: a fully connected
classification branch and a convolutional residual-bottleneck regression
branch, both passing their RoIs through one shared attention stack.
:class:`SingleHeadParams` is the shared two-fc baseline used for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import RoiAttentionStack, stack_forward
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 256
    roi_size: int = 7
    num_classes: int = 4
    fc_hidden: int = 1024
    reg_mid: int = 256
    reg_out: int = 1024
    reg_blocks: int = 2
    d: int = 10
    depth: int = 1
    attach_attention_cls: bool = True
    attach_attention_reg: bool = True

    @property
    def L(self) -> int:
        return self.channels * self.roi_size * self.roi_size


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True, dtype=dtype)


def _zeros(n, dtype):
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)


@dataclass
class Linear:
    weight: Tensor  # in × out
    bias: Tensor

    @classmethod
    def init(cls, n_in, n_out, rng, std=None, dtype=np.float32):
        if std is None:
            w = _he(rng, (n_in, n_out), n_in, dtype)
        else:
            w = Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True, dtype=dtype)
        return cls(w, _zeros(n_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class Conv:
    weight: Tensor  # out × in × k × k
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def init(cls, n_in, n_out, k, rng, stride=1, padding=None, dtype=np.float32):
        padding = (k - 1) // 2 if padding is None else padding
        return cls(_he(rng, (n_out, n_in, k, k), n_in * k * k, dtype), _zeros(n_out, dtype), stride, padding)

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class Bottleneck:
    """3×3 conv -> relu -> 1×1 conv, plus a 1×1 identity projection, relu after the add."""

    conv3: Conv
    conv1: Conv
    identity: Conv

    @classmethod
    def init(cls, n_in, mid, n_out, rng, dtype=np.float32):
        return cls(
            Conv.init(n_in, mid, 3, rng, dtype=dtype),
            Conv.init(mid, n_out, 1, rng, dtype=dtype),
            Conv.init(n_in, n_out, 1, rng, dtype=dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        path = self.conv1(T.relu(self.conv3(x)))
        return T.relu(T.add(path, self.identity(x)))

    def named_parameters(self, prefix):
        out = {}
        for name in ("conv3", "conv1", "identity"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


@dataclass
class HeadOutput:
    class_logits: Tensor  # s × (K+1), background last
    box_deltas: Tensor  # s × 4, class-agnostic (dx, dy, dw, dh)


def _params_of(named: dict[str, Tensor]) -> list[Tensor]:
    seen, out = set(), []
    for p in named.values():
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


@dataclass
class DoubleHeadParams:
    config: HeadConfig
    shared_attention: RoiAttentionStack
    cls_fc1: Linear
    cls_fc2: Linear
    reg_blocks: list[Bottleneck] = field(default_factory=list)
    reg_out: Linear | None = None

    @classmethod
    def init(cls, config: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> "DoubleHeadParams":
        attn = RoiAttentionStack.init(config.d, config.L, config.depth, rng, dtype)
        blocks = []
        n_in = config.channels
        for _ in range(config.reg_blocks):
            blocks.append(Bottleneck.init(n_in, config.reg_mid, config.reg_out, rng, dtype))
            n_in = config.reg_out
        return cls(
            config,
            attn,
            Linear.init(config.L, config.fc_hidden, rng, dtype=dtype),
            Linear.init(config.fc_hidden, config.num_classes + 1, rng, std=0.01, dtype=dtype),
            blocks,
            Linear.init(n_in, 4, rng, std=0.001, dtype=dtype),
        )

    def named_parameters(self, prefix: str = "head") -> dict[str, Tensor]:
        out = dict(self.shared_attention.named_parameters(f"{prefix}.attn"))
        out.update(self.cls_fc1.named_parameters(f"{prefix}.cls_fc1"))
        out.update(self.cls_fc2.named_parameters(f"{prefix}.cls_fc2"))
        for i, b in enumerate(self.reg_blocks):
            out.update(b.named_parameters(f"{prefix}.reg_blocks.{i}"))
        out.update(self.reg_out.named_parameters(f"{prefix}.reg_out"))
        return out

    def parameters(self) -> list[Tensor]:
        return _params_of(self.named_parameters())

    def channel_plan(self) -> list[tuple[str, int, int]]:
        """(layer, kernel, out_channels) for every regression-branch conv, in order."""
        plan = []
        for i, b in enumerate(self.reg_blocks):
            plan += [
                (f"block{i}.conv3", b.conv3.kernel, b.conv3.out_channels),
                (f"block{i}.conv1", b.conv1.kernel, b.conv1.out_channels),
                (f"block{i}.identity", b.identity.kernel, b.identity.out_channels),
            ]
        return plan


def _check_rois(rois: Tensor, cfg: HeadConfig) -> None:
    want = (cfg.channels, cfg.roi_size, cfg.roi_size)
    if rois.ndim != 4 or rois.shape[1:] != want:
        raise DimensionError(f"RoI features {rois.shape} do not match s×{want[0]}×{want[1]}×{want[2]}")
    if rois.shape[0] < 1:
        raise DimensionError("head needs at least one RoI")


def forward_cls(rois: Tensor, p: DoubleHeadParams) -> Tensor:
    _check_rois(rois, p.config)
    if p.config.attach_attention_cls:
        rois = stack_forward(rois, p.shared_attention)
    return p.cls_fc2(T.relu(p.cls_fc1(T.flatten(rois))))


def forward_reg(rois: Tensor, p: DoubleHeadParams) -> Tensor:
    _check_rois(rois, p.config)
    h = stack_forward(rois, p.shared_attention) if p.config.attach_attention_reg else rois
    for block in p.reg_blocks:
        h = block(h)
    return p.reg_out(T.avg_pool_global(h))


def head_forward(cls_rois: Tensor, reg_rois: Tensor, p: DoubleHeadParams) -> HeadOutput:
    if cls_rois.shape[0] != reg_rois.shape[0]:
        raise DimensionError(
            f"classification and regression branches got different RoI counts: {cls_rois.shape[0]} vs {reg_rois.shape[0]}"
        )
    return HeadOutput(forward_cls(cls_rois, p), forward_reg(reg_rois, p))


@dataclass
class SingleHeadParams:
    """Shared two-fc head producing both outputs from the classification crops."""

    config: HeadConfig
    attention: RoiAttentionStack
    fc1: Linear
    fc2: Linear
    cls_out: Linear
    reg_out: Linear

    @classmethod
    def init(cls, config: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> "SingleHeadParams":
        attn = RoiAttentionStack.init(config.d, config.L, config.depth, rng, dtype)
        return cls(
            config,
            attn,
            Linear.init(config.L, config.fc_hidden, rng, dtype=dtype),
            Linear.init(config.fc_hidden, config.fc_hidden, rng, dtype=dtype),
            Linear.init(config.fc_hidden, config.num_classes + 1, rng, std=0.01, dtype=dtype),
            Linear.init(config.fc_hidden, 4, rng, std=0.001, dtype=dtype),
        )

    def named_parameters(self, prefix: str = "head") -> dict[str, Tensor]:
        out = dict(self.attention.named_parameters(f"{prefix}.attn"))
        for name in ("fc1", "fc2", "cls_out", "reg_out"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out

    def parameters(self) -> list[Tensor]:
        return _params_of(self.named_parameters())


def single_head_forward(rois: Tensor, p: SingleHeadParams) -> HeadOutput:
    _check_rois(rois, p.config)
    if p.config.attach_attention_cls:
        rois = stack_forward(rois, p.attention)
    h = T.relu(p.fc2(T.relu(p.fc1(T.flatten(rois)))))
    return HeadOutput(p.cls_out(h), p.reg_out(h))
