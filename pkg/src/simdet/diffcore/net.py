"""Three-segment micro-detector (backbone / neck / head) and its SGD loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from simdet.diffcore import tensor as T
from simdet.diffcore.tensor import Tensor
from simdet.errors import ConfigurationError, NonFiniteError, StateError
from simdet.rng import SplitMix, derive

SEGMENT_NAMES = ("backbone", "neck", "head")


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 64
    boxes_per_cell: int = 2
    num_classes: int = 7
    backbone_channels: tuple[int, int, int] = (16, 32, 64)
    neck_channels: int = 64
    leaky_slope: float = 0.1

    def __post_init__(self) -> None:
        if self.input_size <= 0 or self.input_size % 8:
            raise ConfigurationError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.boxes_per_cell < 1 or self.num_classes < 1:
            raise ConfigurationError("boxes_per_cell and num_classes must be >= 1")
        if len(self.backbone_channels) != 3 or min(self.backbone_channels) < 1 or self.neck_channels < 1:
            raise ConfigurationError(f"bad channel widths: {self.backbone_channels}, {self.neck_channels}")

    @property
    def grid_size(self) -> int:
        return self.input_size // 8

    @property
    def slot_channels(self) -> int:
        return 5 + self.num_classes

    @property
    def out_channels(self) -> int:
        return self.boxes_per_cell * self.slot_channels


@dataclass
class ConvLayer:
    name: str
    weight: Tensor
    bias: Tensor | None
    stride: int = 1
    pad: int = 0

    def params(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


@dataclass
class Segment:
    name: str
    layers: list[ConvLayer]
    frozen: bool = False

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


def _init_param(shape: tuple[int, ...], fan_in: int, seed: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return SplitMix(seed).uniform(-bound, bound, size=shape).astype(np.float32)


class DetectorNet:
    """Backbone of three stride-2 3x3 convs, a lateral 1x1 merge neck and a 1x1 head.

    ``forward`` returns raw (pre-activation) predictions of shape
    ``(S, S, B * (5 + K))`` per image; every channel is later squashed by a
    sigmoid (see :mod:`simdet.detloss`).
    """

    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = config or NetConfig()
        self.seed = seed
        cfg = self.config
        c1, c2, c3 = cfg.backbone_channels

        def conv(seg: int, idx: int, name: str, k: int, cin: int, cout: int, stride: int, bias: bool = True) -> ConvLayer:
            fan_in = k * k * cin
            w = _init_param((k, k, cin, cout), fan_in, derive(seed, seg, idx, 0))
            b = _init_param((cout,), fan_in, derive(seed, seg, idx, 1)) if bias else None
            return ConvLayer(
                name,
                Tensor(w, requires_grad=True, name=f"{name}.weight"),
                None if b is None else Tensor(b, requires_grad=True, name=f"{name}.bias"),
                stride=stride,
                pad=k // 2,
            )

        self.segments: dict[str, Segment] = {
            "backbone": Segment(
                "backbone",
                [
                    conv(0, 0, "backbone.conv1", 3, 3, c1, 2),
                    conv(0, 1, "backbone.conv2", 3, c1, c2, 2),
                    conv(0, 2, "backbone.conv3", 3, c2, c3, 2),
                ],
            ),
            "neck": Segment(
                "neck",
                [
                    conv(1, 0, "neck.lateral", 1, c3, cfg.neck_channels, 1),
                    # bottom-up path: stride-2 projection of the finer map
                    conv(1, 1, "neck.down", 1, c2, cfg.neck_channels, 2, bias=False),
                ],
            ),
            "head": Segment("head", [conv(2, 0, "head.pred", 1, cfg.neck_channels, cfg.out_channels, 1)]),
        }
        self.velocity: dict[str, np.ndarray] = {}
        self._forward_pending = False

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> Iterator[Tensor]:
        for seg in self.segments.values():
            yield from seg.params()

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for p in self.parameters():
            yield p.name, p

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> dict[str, list[np.ndarray]]:
        return {name: [p.data.copy() for p in seg.params()] for name, seg in self.segments.items()}

    def copy(self) -> "DetectorNet":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "DetectorNet":
        """Copy with every parameter cast to ``dtype`` (used by float64 oracles)."""
        out = self.copy()
        for p in out.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        out.velocity = {}
        return out

    # -- graph --------------------------------------------------------------

    def forward(self, images) -> Tensor:
        return forward(self, images)

    def __repr__(self) -> str:
        frozen = [n for n, s in self.segments.items() if s.frozen]
        return f"DetectorNet({self.config}, params={self.num_parameters()}, frozen={frozen})"


def forward(net: DetectorNet, images) -> Tensor:
    """Raw prediction tensor ``(S, S, B*(5+K))``, or ``(N, S, S, ...)`` for a batch."""
    cfg = net.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    single = x.data.ndim == 3
    if single:
        x = Tensor(x.data[None], dtype=x.data.dtype)
    if x.data.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, 3):
        raise ConfigurationError(
            f"expected image shape ({cfg.input_size}, {cfg.input_size}, 3), got {tuple(x.shape[-3:]) if x.data.ndim >= 3 else x.shape}"
        )
    slope = cfg.leaky_slope
    b1, b2, b3 = net.segments["backbone"].layers
    lateral, down = net.segments["neck"].layers
    (head,) = net.segments["head"].layers

    f1 = T.leaky_relu(b1(x), slope)
    f2 = T.leaky_relu(b2(f1), slope)
    f3 = T.leaky_relu(b3(f2), slope)
    merged = T.leaky_relu(T.add(lateral(f3), down(f2)), slope)
    out = head(merged)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("forward produced non-finite predictions")
    if single:
        out = T.reshape(out, out.shape[1:])
    net._forward_pending = True
    return out


def backward(net: DetectorNet, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) for every trainable parameter of ``net``."""
    if not net._forward_pending:
        raise StateError("backward called before forward")
    T.backward(loss)
    net._forward_pending = False
    for seg in net.segments.values():
        for p in seg.params():
            if seg.frozen:
                p.grad = None
            elif p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in {p.name}")


def set_frozen(net: DetectorNet, segment_names: Iterable[str], frozen: bool = True) -> None:
    names = set(segment_names)
    unknown = names - set(SEGMENT_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown segment(s) {sorted(unknown)}; valid: {list(SEGMENT_NAMES)}")
    for name in names:
        seg = net.segments[name]
        seg.frozen = frozen
        for p in seg.params():
            p.requires_grad = not frozen
            p.grad = None


def sgd_step(net: DetectorNet, lr: float, momentum: float = 0.9) -> None:
    """Momentum SGD: ``v <- momentum * v + g; w <- w - lr * v``, then clear gradients."""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
    for seg in net.segments.values():
        for p in seg.params():
            if seg.frozen:
                p.grad = None
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = net.velocity.get(p.name)
            v = g.copy() if v is None or momentum == 0 else momentum * v + g
            net.velocity[p.name] = v
            p.data = p.data - lr * v
            p.grad = None
