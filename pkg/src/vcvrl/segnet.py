"""3-D encoder-decoder segmentation backbone.

Each encoder level is two 3x3x3 conv+ReLU layers followed (except at the
deepest level) by 2x max pooling.  The deepest level is the bottleneck whose
output serves as the latent code.  Each decoder level upsamples trilinearly,
concatenates the matching encoder skip and applies two conv+ReLU layers.  A
1x1x1 convolution and a sigmoid give per-voxel probabilities.

Nothing in this module knows about the Siamese head: inference is the plain
backbone forward pass.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat_channels,
    conv3d,
    maxpool3d,
    no_grad,
    relu,
    sigmoid,
    upsample_trilinear,
)


@dataclass
class SegNetConfig:
    levels: int = 2
    channels: List[int] = field(default_factory=lambda: [8, 16])
    input_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if not self.channels:
            raise ValueError("channels must not be empty")
        if len(self.channels) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} channel widths, got {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def latent_dim(self) -> int:
        return self.channels[-1]

    @property
    def divisor(self) -> int:
        """Spatial extents must be multiples of this."""
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegNetConfig":
        return cls(**d)


def _layer_shapes(cfg: SegNetConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    k = cfg.kernel_size
    ch = cfg.channels
    layers = []
    cin = cfg.input_channels
    for i, c in enumerate(ch):
        layers.append((f"enc{i}.conv1", (c, cin, k, k, k)))
        layers.append((f"enc{i}.conv2", (c, c, k, k, k)))
        cin = c
    for i in reversed(range(cfg.levels - 1)):
        layers.append((f"dec{i}.conv1", (ch[i], ch[i + 1] + ch[i], k, k, k)))
        layers.append((f"dec{i}.conv2", (ch[i], ch[i], k, k, k)))
    layers.append(("out", (1, ch[0], 1, 1, 1)))
    return layers


class SegNet:
    def __init__(self, config: SegNetConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def _conv(self, name: str, x: Tensor, padding: int) -> Tensor:
        return conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=padding)

    def _check_input(self, volume: Tensor) -> None:
        if volume.ndim != 5 or volume.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected (B, {self.config.input_channels}, D, H, W) input, got {volume.shape}"
            )
        div = self.config.divisor
        if any(n % div for n in volume.shape[2:]):
            raise ShapeError(f"spatial extents {volume.shape[2:]} must be divisible by {div}")

    def forward(self, volume: Tensor) -> Tuple[Tensor, Tensor]:
        """Return ``(probs, bottleneck)`` for a ``(B, 1, D, H, W)`` volume."""
        self._check_input(volume)
        pad = self.config.kernel_size // 2
        skips = []
        x = volume
        for i in range(self.config.levels):
            if i > 0:
                x = maxpool3d(x, 2)
            x = relu(self._conv(f"enc{i}.conv1", x, pad))
            x = relu(self._conv(f"enc{i}.conv2", x, pad))
            skips.append(x)
        bottleneck = x
        for i in reversed(range(self.config.levels - 1)):
            skip = skips[i]
            x = upsample_trilinear(x, skip.shape[2:])
            x = concat_channels([x, skip])
            x = relu(self._conv(f"dec{i}.conv1", x, pad))
            x = relu(self._conv(f"dec{i}.conv2", x, pad))
        probs = sigmoid(self._conv("out", x, 0))
        return probs, bottleneck

    __call__ = forward


def segnet_init(config: SegNetConfig, seed: int) -> SegNet:
    """He-uniform weights from ``seed``, zero biases."""
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in _layer_shapes(config):
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(shape[0], np.float32), requires_grad=True)
    return SegNet(config, params)


def segnet_forward(net: SegNet, volume: Tensor) -> Tuple[Tensor, Tensor]:
    return net.forward(volume)


def segnet_infer(net: SegNet, volume) -> np.ndarray:
    """Probabilities only, with no graph recorded."""
    if not isinstance(volume, Tensor):
        volume = Tensor(volume)
    with no_grad():
        probs, _ = net.forward(volume)
    return probs.data


def infer_padded(net: SegNet, volume: np.ndarray) -> np.ndarray:
    """Infer on a single ``(D, H, W)`` volume of any size.

    The volume is zero-padded up to the next divisible extent and the
    prediction is cropped back.
    """
    div = net.config.divisor
    shape = volume.shape
    padded = [(0, (-n) % div) for n in shape]
    x = np.pad(volume.astype(np.float32), padded)[None, None]
    probs = segnet_infer(net, x)[0, 0]
    return probs[: shape[0], : shape[1], : shape[2]]


def count_parameters(config: SegNetConfig) -> int:
    """Parameter count from layer shapes alone."""
    return int(sum(int(np.prod(s)) + s[0] for _, s in _layer_shapes(config)))
