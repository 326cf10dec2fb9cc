"""Weight-sharing four-level convolutional encoder.

Each block is conv3d(3x3x3, pad 1) -> LeakyReLU(0.2) -> avg-pool(2), so
level l sits at 1/2**l of the input resolution.  The same parameters encode
both the fixed and the moving image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore

LEAKY_SLOPE = 0.2
NUM_LEVELS = 4


@dataclass
class EncoderConfig:
    channel_schedule: list = field(default_factory=lambda: [8, 16, 16, 16])

    def __post_init__(self):
        if len(self.channel_schedule) != NUM_LEVELS:
            raise ValueError("channel_schedule must list 4 levels")
        if any(c < 1 for c in self.channel_schedule):
            raise ValueError("channel counts must be >= 1")


def fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(store: ParamStore, config: EncoderConfig,
                        rng: np.random.Generator):
    in_ch = 1
    for level, out_ch in enumerate(config.channel_schedule, start=1):
        store.add(f"encoder/l{level}/kernel",
                  fan_in_uniform(rng, (out_ch, in_ch, 3, 3, 3)))
        store.add(f"encoder/l{level}/bias", np.zeros(out_ch))
        in_ch = out_ch


def encode(image: Tensor, store: ParamStore) -> dict[int, Tensor]:
    """Feature pyramid {level: tensor}, level l at 1/2**l resolution."""
    d, h, w = image.shape[2:]
    if any(dim % 2 ** NUM_LEVELS for dim in (d, h, w)):
        raise ad.ShapeError(
            f"encoder input dims {(d, h, w)} must be divisible by 16; "
            "pad the volume first")
    pyramid: dict[int, Tensor] = {}
    x = image
    for level in range(1, NUM_LEVELS + 1):
        x = ad.conv3d(x, store[f"encoder/l{level}/kernel"],
                      store[f"encoder/l{level}/bias"], stride=1, padding=1)
        x = ad.leaky_relu(x, LEAKY_SLOPE)
        x = ad.avg_pool3d(x, 2)
        pyramid[level] = x
    return pyramid
