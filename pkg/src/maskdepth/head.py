"""Prediction head: channel re-weighting followed by two 3x3 convolutions.

The squeeze step pools the fused features to one descriptor per channel,
passes it through a two-layer bottleneck (no biases), and scales each channel
by the resulting sigmoid gate.  The excited features then go through
conv3x3 - BN - ReLU - conv3x3 and are scaled to meters.  No output
activation: the training signal alone keeps predictions in range, and
clamping happens only when maps are exported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config
from .unet import BNParams, ConvParams, _bn, _he_conv


@dataclass
class HeadParams:
    se_w1: T.Tensor     # (C/r, C)
    se_w2: T.Tensor     # (C, C/r)
    conv1: ConvParams
    bn1: BNParams
    conv2: ConvParams
    depth_scale: float


def init_head(cfg: Config, rng: np.random.Generator) -> HeadParams:
    dtype = cfg.np_dtype
    c = cfg.fusion_channels
    hidden = max(c // cfg.se_reduction, 1)
    se_w1 = T.Tensor((rng.standard_normal((hidden, c)) * np.sqrt(2.0 / c)).astype(dtype),
                     requires_grad=True)
    se_w2 = T.Tensor((rng.standard_normal((c, hidden)) * np.sqrt(1.0 / hidden)).astype(dtype),
                     requires_grad=True)
    return HeadParams(
        se_w1=se_w1,
        se_w2=se_w2,
        conv1=_he_conv(rng, cfg.head_channels, c, 3, dtype),
        bn1=_bn(cfg.head_channels, dtype),
        conv2=_he_conv(rng, 1, cfg.head_channels, 3, dtype),
        depth_scale=cfg.max_depth)


def squeeze_excite(f: T.Tensor, w1: T.Tensor, w2: T.Tensor) -> T.Tensor:
    """Scale each channel of (B, C, H, W) by a learned global gate."""
    if f.ndim != 4:
        raise ValueError(f"squeeze_excite expects (B, C, H, W), got {f.shape}")
    b, c = f.shape[0], f.shape[1]
    if w1.shape[1] != c or w2.shape[0] != c or w1.shape[0] != w2.shape[1]:
        raise ValueError(
            f"gate shapes {w1.shape}/{w2.shape} incompatible with {c} channels")
    z = T.global_avg_pool(f)                        # (B, C)
    hidden = T.relu(T.matmul(z, T.transpose2d(w1)))  # (B, C/r)
    s = T.sigmoid(T.matmul(hidden, T.transpose2d(w2)))  # (B, C)
    return T.mul(f, T.reshape(s, (b, c, 1, 1)))


def head_forward(f_fused: T.Tensor, params: HeadParams, mode: str) -> T.Tensor:
    """Fused features (B, C_f, H, W) -> final depth (B, 1, H, W) in meters."""
    x = squeeze_excite(f_fused, params.se_w1, params.se_w2)
    x = T.conv2d(x, params.conv1.w, params.conv1.b, stride=1, padding=1)
    x = T.relu(T.batchnorm2d(x, params.bn1.gamma, params.bn1.beta,
                             params.bn1.state, mode))
    x = T.conv2d(x, params.conv2.w, params.conv2.b, stride=1, padding=1)
    return T.scale(x, params.depth_scale)
