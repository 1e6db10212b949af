"""Encoder-decoder backbone over the five-channel input.

The input stacks RGB, sparse depth normalized by the depth range, and a
validity plane.  Five encoder levels (channel widths doubling from
``base_channels``) of [conv3x3 - BN - ReLU] x2 with 2x2 max pooling between
them; four decoder stages of [transposed conv 2x2 stride 2 - skip concat -
conv3x3 - BN - ReLU].  The final decoder stage emits ``depth_channels``
feature maps, from which a 1x1 convolution predicts the initial depth (in
meters, via the depth-range scale).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import Config

IN_CHANNELS = 5
LEVELS = 5  # encoder levels; LEVELS - 1 poolings, so sizes must divide by 16


@dataclass
class ConvParams:
    w: T.Tensor
    b: Optional[T.Tensor]


@dataclass
class BNParams:
    gamma: T.Tensor
    beta: T.Tensor
    state: T.BNState


@dataclass
class ConvBlock:
    """[conv3x3 - BN - ReLU] x2."""

    conv1: ConvParams
    bn1: BNParams
    conv2: ConvParams
    bn2: BNParams


@dataclass
class DecoderStage:
    up: ConvParams          # transposed conv 2x2 stride 2, no bias
    conv: ConvParams
    bn: BNParams


@dataclass
class UNetParams:
    encoder: list
    decoder: list
    init_head: ConvParams   # 1x1, depth_channels -> 1
    depth_scale: float


def _he_conv(rng, c_out, c_in, k, dtype, with_bias=True) -> ConvParams:
    std = np.sqrt(2.0 / (c_in * k * k))
    w = T.Tensor((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype),
                 requires_grad=True)
    b = T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if with_bias else None
    return ConvParams(w, b)


def _he_convt(rng, c_from, c_to, k, dtype) -> ConvParams:
    std = np.sqrt(2.0 / (c_from * k * k))
    w = T.Tensor((rng.standard_normal((c_from, c_to, k, k)) * std).astype(dtype),
                 requires_grad=True)
    return ConvParams(w, None)


def _bn(c, dtype) -> BNParams:
    return BNParams(gamma=T.Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                    beta=T.Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
                    state=T.BNState(c, dtype=dtype))


def encoder_widths(cfg: Config) -> list:
    return [cfg.base_channels * (1 << i) for i in range(LEVELS)]


def init_unet(cfg: Config, rng: np.random.Generator) -> UNetParams:
    dtype = cfg.np_dtype
    widths = encoder_widths(cfg)
    encoder = []
    c_in = IN_CHANNELS
    for c in widths:
        encoder.append(ConvBlock(
            conv1=_he_conv(rng, c, c_in, 3, dtype), bn1=_bn(c, dtype),
            conv2=_he_conv(rng, c, c, 3, dtype), bn2=_bn(c, dtype)))
        c_in = c
    decoder = []
    for i in range(LEVELS - 2, -1, -1):  # stages ending at widths[i]
        c_src = widths[i + 1]
        c_skip = widths[i]
        c_out = cfg.depth_channels if i == 0 else widths[i]
        decoder.append(DecoderStage(
            up=_he_convt(rng, c_src, c_skip, 2, dtype),
            conv=_he_conv(rng, c_out, 2 * c_skip, 3, dtype),
            bn=_bn(c_out, dtype)))
    init_head = _he_conv(rng, 1, cfg.depth_channels, 1, dtype)
    return UNetParams(encoder=encoder, decoder=decoder, init_head=init_head,
                      depth_scale=cfg.max_depth)


def stack_input(rgb: T.Tensor, depth_sparse: T.Tensor, validity: T.Tensor,
                max_depth: float) -> T.Tensor:
    """Assemble the (B, 5, H, W) network input; depth prescaled to [0, 1]."""
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"rgb must be (B, 3, H, W), got {rgb.shape}")
    for name, t in (("depth_sparse", depth_sparse), ("validity", validity)):
        if t.ndim != 4 or t.shape[1] != 1:
            raise ValueError(f"{name} must be (B, 1, H, W), got {t.shape}")
        if t.shape[0] != rgb.shape[0] or t.shape[2:] != rgb.shape[2:]:
            raise ValueError(f"{name} shape {t.shape} does not match rgb {rgb.shape}")
    return T.concat_channels(
        T.concat_channels(rgb, T.scale(depth_sparse, 1.0 / max_depth)), validity)


def _block(x: T.Tensor, blk: ConvBlock, mode: str) -> T.Tensor:
    x = T.conv2d(x, blk.conv1.w, blk.conv1.b, stride=1, padding=1)
    x = T.relu(T.batchnorm2d(x, blk.bn1.gamma, blk.bn1.beta, blk.bn1.state, mode))
    x = T.conv2d(x, blk.conv2.w, blk.conv2.b, stride=1, padding=1)
    return T.relu(T.batchnorm2d(x, blk.bn2.gamma, blk.bn2.beta, blk.bn2.state, mode))


def unet_forward(x: T.Tensor, params: UNetParams, mode: str):
    """Run the backbone; returns (f_depth, d_init).

    ``f_depth`` is the (B, depth_channels, H, W) feature map and ``d_init``
    the (B, 1, H, W) initial depth prediction in meters.
    """
    if x.ndim != 4 or x.shape[1] != IN_CHANNELS:
        raise ValueError(f"expected (B, {IN_CHANNELS}, H, W) input, got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    if H % 16 or W % 16:
        raise ValueError(
            f"spatial size {H}x{W} must be divisible by 16 (four pooling levels)")

    skips = []
    h = x
    for i, blk in enumerate(params.encoder):
        h = _block(h, blk, mode)
        if i < LEVELS - 1:
            skips.append(h)
            h = T.maxpool2(h)
    for stage, skip in zip(params.decoder, reversed(skips)):
        h = T.conv_transpose2d(h, stage.up.w, stride=2)
        h = T.concat_channels(h, skip)
        h = T.conv2d(h, stage.conv.w, stage.conv.b, stride=1, padding=1)
        h = T.relu(T.batchnorm2d(h, stage.bn.gamma, stage.bn.beta, stage.bn.state, mode))
    f_depth = h
    d_init = T.scale(T.conv2d(f_depth, params.init_head.w, params.init_head.b),
                     params.depth_scale)
    return f_depth, d_init


def unet_param_count(cfg: Config) -> int:
    """Closed-form trainable parameter count for the backbone."""
    widths = encoder_widths(cfg)
    total = 0
    c_in = IN_CHANNELS
    for c in widths:
        total += c * c_in * 9 + c + 2 * c    # conv1 + bias + bn affine
        total += c * c * 9 + c + 2 * c       # conv2 + bias + bn affine
        c_in = c
    for i in range(LEVELS - 2, -1, -1):
        c_src, c_skip = widths[i + 1], widths[i]
        c_out = cfg.depth_channels if i == 0 else widths[i]
        total += c_src * c_skip * 4           # transposed conv, no bias
        total += c_out * 2 * c_skip * 9 + c_out + 2 * c_out
    total += cfg.depth_channels * 1 + 1       # 1x1 init head
    return total
