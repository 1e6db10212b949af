"""Full model assembly, parameter registry, and checkpoint serialization.

The pipeline: backbone features and initial depth from the five-channel
input; cross-attention of those features against the merged segmentation
map; fusion of attended and raw depth features through a 1x1 convolution;
and the squeeze-excite head for the final depth.  With attention disabled
(ablation) the attended features are replaced by zeros of the right shape,
leaving everything else untouched.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, cross_attention, init_attention
from .config import Config, config_from_items, config_to_text
from .head import HeadParams, head_forward, init_head
from .netpbm import FormatError
from .unet import (BNParams, ConvParams, UNetParams, _bn, _he_conv, init_unet,
                   unet_forward, unet_param_count)

CHECKPOINT_MAGIC = b"MDCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"float32": 1, "float64": 0}
_CODE_DTYPES = {1: np.float32, 0: np.float64}


@dataclass
class FusionParams:
    conv: ConvParams    # 1x1, 2*depth_channels -> fusion_channels
    bn: BNParams


@dataclass
class Model:
    config: Config
    unet: UNetParams
    attention: AttentionParams
    fusion: FusionParams
    head: HeadParams


@dataclass
class ModelOut:
    d_init: T.Tensor
    d_final: T.Tensor


def init_model(cfg: Config, seed: int = 0) -> Model:
    """Deterministic initialization: same (config, seed) -> same weights."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6D6F64)))
    unet = init_unet(cfg, rng)
    attention = init_attention(cfg, rng)
    fusion = FusionParams(
        conv=_he_conv(rng, cfg.fusion_channels, 2 * cfg.depth_channels, 1, cfg.np_dtype),
        bn=_bn(cfg.fusion_channels, cfg.np_dtype))
    head = init_head(cfg, rng)
    return Model(config=cfg, unet=unet, attention=attention, fusion=fusion, head=head)


def _register_conv(reg, name, p: ConvParams):
    reg[f"{name}.w"] = p.w
    if p.b is not None:
        reg[f"{name}.b"] = p.b


def _register_bn(reg, name, p: BNParams):
    reg[f"{name}.gamma"] = p.gamma
    reg[f"{name}.beta"] = p.beta


def named_parameters(model: Model) -> dict:
    """Ordered name -> Tensor map of every trainable parameter."""
    reg: dict = {}
    for i, blk in enumerate(model.unet.encoder):
        _register_conv(reg, f"enc{i}.conv1", blk.conv1)
        _register_bn(reg, f"enc{i}.bn1", blk.bn1)
        _register_conv(reg, f"enc{i}.conv2", blk.conv2)
        _register_bn(reg, f"enc{i}.bn2", blk.bn2)
    for i, stage in enumerate(model.unet.decoder):
        _register_conv(reg, f"dec{i}.up", stage.up)
        _register_conv(reg, f"dec{i}.conv", stage.conv)
        _register_bn(reg, f"dec{i}.bn", stage.bn)
    _register_conv(reg, "init_head", model.unet.init_head)
    _register_conv(reg, "att.wq", model.attention.wq)
    _register_conv(reg, "att.wk", model.attention.wk)
    _register_conv(reg, "att.wv", model.attention.wv)
    _register_conv(reg, "att.w_out", model.attention.w_out)
    _register_conv(reg, "fusion.conv", model.fusion.conv)
    _register_bn(reg, "fusion.bn", model.fusion.bn)
    reg["head.se_w1"] = model.head.se_w1
    reg["head.se_w2"] = model.head.se_w2
    _register_conv(reg, "head.conv1", model.head.conv1)
    _register_bn(reg, "head.bn1", model.head.bn1)
    _register_conv(reg, "head.conv2", model.head.conv2)
    return reg


def named_bn_states(model: Model) -> dict:
    reg: dict = {}
    for i, blk in enumerate(model.unet.encoder):
        reg[f"enc{i}.bn1"] = blk.bn1.state
        reg[f"enc{i}.bn2"] = blk.bn2.state
    for i, stage in enumerate(model.unet.decoder):
        reg[f"dec{i}.bn"] = stage.bn.state
    reg["fusion.bn"] = model.fusion.bn.state
    reg["head.bn1"] = model.head.bn1.state
    return reg


def count_parameters(model: Model) -> int:
    return sum(t.data.size for t in named_parameters(model).values())


def expected_param_count(cfg: Config) -> int:
    """Closed-form parameter count for the whole model."""
    c_d, c_a, c_f = cfg.depth_channels, cfg.attention_channels, cfg.fusion_channels
    total = unet_param_count(cfg)
    total += (c_a * 1 + c_a) + 2 * (c_a * c_d + c_a)   # wq, wk, wv (1x1 + bias)
    total += c_d * c_a + c_d                           # w_out
    total += c_f * 2 * c_d + c_f + 2 * c_f             # fusion conv + bn
    hidden = max(c_f // cfg.se_reduction, 1)
    total += hidden * c_f + c_f * hidden               # gate weights, no biases
    total += cfg.head_channels * c_f * 9 + cfg.head_channels \
        + 2 * cfg.head_channels                        # head conv1 + bn
    total += 1 * cfg.head_channels * 9 + 1             # head conv2
    return total


def run_model(model: Model, x5: T.Tensor, m_seg: T.Tensor, mode: str) -> ModelOut:
    """Forward pass; ``m_seg`` is the merged foreground map (B, 1, H, W)."""
    f_depth, d_init = unet_forward(x5, model.unet, mode)
    if model.config.attention_enabled:
        f_att = cross_attention(m_seg, f_depth, model.attention)
    else:
        f_att = T.Tensor(np.zeros(f_depth.shape, dtype=f_depth.dtype))
    fused = T.conv2d(T.concat_channels(f_att, f_depth),
                     model.fusion.conv.w, model.fusion.conv.b)
    fused = T.relu(T.batchnorm2d(fused, model.fusion.bn.gamma, model.fusion.bn.beta,
                                 model.fusion.bn.state, mode))
    d_final = head_forward(fused, model.head, mode)
    return ModelOut(d_init=d_init, d_final=d_final)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout (all integers little-endian):
#   magic "MDCK" | version u8 | dtype code u8 | step u64 | adam_t u64
#   config blob: u32 length + ascii key=value text
#   array table: u32 count, then per array u16 name length, ascii name,
#     u8 ndim, ndim x u32 dims
#   raw array data in table order, file dtype, C order


def _collect_arrays(model: Model, opt_state: Optional[dict]) -> dict:
    arrays: dict = {}
    for name, t in named_parameters(model).items():
        arrays[f"param.{name}"] = t.data
    for name, st in named_bn_states(model).items():
        arrays[f"stats.{name}.mean"] = st.running_mean
        arrays[f"stats.{name}.var"] = st.running_var
    if opt_state is not None:
        for name, m in opt_state["m"].items():
            arrays[f"adam.m.{name}"] = m
        for name, v in opt_state["v"].items():
            arrays[f"adam.v.{name}"] = v
    return arrays


def save_checkpoint(path, model: Model, opt_state: Optional[dict] = None,
                    step: int = 0) -> None:
    """Serialize weights, BN statistics, optimizer state, and step counter."""
    arrays = _collect_arrays(model, opt_state)
    adam_t = int(opt_state["t"]) if opt_state is not None else 0
    dtype = model.config.np_dtype
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BBQQ", CHECKPOINT_VERSION,
                          _DTYPE_CODES[model.config.dtype], int(step), adam_t))
    blob = config_to_text(model.config).encode("ascii")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("ascii")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
    file_dt = np.dtype(dtype).newbyteorder("<")
    for arr in arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype=file_dt).tobytes())
    data = buf.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild (model, opt_state_or_None, step) from a checkpoint file."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} (field magic)")
    version, dtype_code, step, adam_t = struct.unpack_from("<BBQQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    pos = 4 + struct.calcsize("<BBQQ")
    (blob_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blob = buf[pos:pos + blob_len].decode("ascii")
    pos += blob_len
    items = dict(line.split("=", 1) for line in blob.splitlines() if line)
    cfg = config_from_items(items, source=f"{path} (embedded config)")

    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("ascii")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos) if ndim else ()
        pos += 4 * ndim
        table.append((name, tuple(dims)))
    arrays = {}
    item_dtype = np.dtype(dtype).newbyteorder("<")
    for name, dims in table:
        n = int(np.prod(dims)) if dims else 1
        nbytes = n * item_dtype.itemsize
        chunk = buf[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated data for array {name}")
        arrays[name] = np.frombuffer(chunk, dtype=item_dtype).astype(dtype).reshape(dims)
        pos += nbytes

    model = init_model(cfg, seed=0)
    params = named_parameters(model)
    for name, t in params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise FormatError(f"{path}: missing array {key}")
        if arrays[key].shape != t.data.shape:
            raise FormatError(
                f"{path}: array {key} has shape {arrays[key].shape}, "
                f"model expects {t.data.shape}")
        t.data = arrays[key].copy()
    for name, st in named_bn_states(model).items():
        st.running_mean = arrays[f"stats.{name}.mean"].copy()
        st.running_var = arrays[f"stats.{name}.var"].copy()

    opt_state = None
    if adam_t > 0:
        opt_state = {"t": int(adam_t),
                     "m": {n: arrays[f"adam.m.{n}"].copy() for n in params},
                     "v": {n: arrays[f"adam.v.{n}"].copy() for n in params}}
    return model, opt_state, int(step)
