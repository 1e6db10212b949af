"""Mask-guided cross-attention between segmentation and depth features.

Both streams are resampled to a small working grid where full pairwise
attention is affordable.  Queries come from the merged segmentation map,
keys and values from the backbone's depth features; each of the N = H'*W'
query locations attends over all N locations, and the re-projected result
is returned at the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config
from .unet import ConvParams, _he_conv


@dataclass
class AttentionParams:
    wq: ConvParams      # 1x1, 1 -> attention_channels
    wk: ConvParams      # 1x1, depth_channels -> attention_channels
    wv: ConvParams      # 1x1, depth_channels -> attention_channels
    w_out: ConvParams   # 1x1, attention_channels -> depth_channels
    work_h: int
    work_w: int
    mask_downsample: str


def init_attention(cfg: Config, rng: np.random.Generator) -> AttentionParams:
    dtype = cfg.np_dtype
    return AttentionParams(
        wq=_he_conv(rng, cfg.attention_channels, 1, 1, dtype),
        wk=_he_conv(rng, cfg.attention_channels, cfg.depth_channels, 1, dtype),
        wv=_he_conv(rng, cfg.attention_channels, cfg.depth_channels, 1, dtype),
        w_out=_he_conv(rng, cfg.depth_channels, cfg.attention_channels, 1, dtype),
        work_h=cfg.attention_height,
        work_w=cfg.attention_width,
        mask_downsample=cfg.mask_downsample)


def scaled_dot_attention(q: T.Tensor, k: T.Tensor, v: T.Tensor):
    """Single-head attention on (N, C) matrices; returns (weights, output).

    Weights are ``softmax(q k^T / sqrt(C))`` row-wise, so each of the N rows
    is a distribution over the N locations.
    """
    if q.ndim != 2 or k.shape != q.shape or v.shape != q.shape:
        raise ValueError(
            f"q/k/v must share one (N, C) shape, got {q.shape}, {k.shape}, {v.shape}")
    c = q.shape[1]
    logits = T.scale(T.matmul(q, T.transpose2d(k)), 1.0 / np.sqrt(c))
    weights = T.softmax_rows(logits)
    return weights, T.matmul(weights, v)


def _to_rows(x: T.Tensor, b: int, c: int, n: int) -> T.Tensor:
    """(B, C, h, w) -> rows (N, C) for batch item b."""
    return T.transpose2d(T.reshape(T.take_batch(x, b), (c, n)))


def cross_attention(m_seg: T.Tensor, f_depth: T.Tensor, params: AttentionParams,
                    collect_weights=None) -> T.Tensor:
    """Attend depth features with segmentation queries.

    ``m_seg`` is the merged foreground map (B, 1, H, W) and ``f_depth`` the
    backbone features (B, C_d, H, W).  Returns the attended feature map
    upsampled back to (B, C_d, H, W).  When ``collect_weights`` is a list,
    the (N, N) attention matrix of every batch item is appended to it (as
    plain arrays; test instrumentation).
    """
    if m_seg.ndim != 4 or m_seg.shape[1] != 1:
        raise ValueError(f"m_seg must be (B, 1, H, W), got {m_seg.shape}")
    if f_depth.ndim != 4 or f_depth.shape[0] != m_seg.shape[0] \
            or f_depth.shape[2:] != m_seg.shape[2:]:
        raise ValueError(
            f"f_depth shape {f_depth.shape} does not match m_seg {m_seg.shape}")
    B = m_seg.shape[0]
    H, W = f_depth.shape[2], f_depth.shape[3]
    hw, ww = params.work_h, params.work_w
    n = hw * ww
    c_a = params.wq.w.shape[0]
    c_d = params.w_out.w.shape[0]

    m_work = T.interpolate(m_seg, hw, ww, params.mask_downsample)
    f_work = T.interpolate(f_depth, hw, ww, "bilinear")
    q = T.conv2d(m_work, params.wq.w, params.wq.b)
    k = T.conv2d(f_work, params.wk.w, params.wk.b)
    v = T.conv2d(f_work, params.wv.w, params.wv.b)

    attended = None
    for b in range(B):
        weights, rows = scaled_dot_attention(_to_rows(q, b, c_a, n),
                                             _to_rows(k, b, c_a, n),
                                             _to_rows(v, b, c_a, n))
        if collect_weights is not None:
            collect_weights.append(weights.data.copy())
        item = T.reshape(T.transpose2d(rows), (1, c_a, hw, ww))
        attended = item if attended is None else T.concat(attended, item, axis=0)

    out = T.relu(T.conv2d(attended, params.w_out.w, params.w_out.b))
    return T.interpolate(out, H, W, "bilinear")
