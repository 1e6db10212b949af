"""Finite-difference verification of the autodiff engine.

Provides the generic central-difference checker plus two curated suites: one
covering every differentiable op on several shapes, and one spot-checking the
assembled network end to end at a small working resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T

OP_TOLERANCE = 1e-5
PIPELINE_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(f: Callable[[T.Tensor], T.Tensor],
                            x: np.ndarray,
                            step: float = 1e-6,
                            coords: Optional[Iterable[int]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one tensor to a scalar tensor and must be deterministic.  The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``coords`` restricts the probe to a subset of flat indices (useful for
    large inputs); by default every coordinate is checked.  All probing runs
    in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    probe = T.Tensor(x.copy(), requires_grad=True)
    with T.GradTape():
        y = f(probe)
        if y.data.size != 1:
            raise ValueError(f"finite_difference_check needs a scalar output, got {y.shape}")
        T.backward(y)
    analytic = probe.grad
    if analytic is None:
        raise RuntimeError("function did not propagate a gradient to its input")
    analytic = analytic.reshape(-1)

    flat_coords = range(x.size) if coords is None else coords
    work = x.copy().reshape(-1)
    max_err = 0.0
    with T.no_grad():
        for i in flat_coords:
            orig = work[i]
            work[i] = orig + step
            hi = f(T.Tensor(work.reshape(x.shape).copy())).item()
            work[i] = orig - step
            lo = f(T.Tensor(work.reshape(x.shape).copy())).item()
            work[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            if err > max_err:
                max_err = err
    return float(max_err)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.2) -> np.ndarray:
    """Random values with |x| >= margin, keeping relu/abs kinks far from
    the finite-difference step."""
    mag = rng.uniform(margin, 1.5, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _spread(t: T.Tensor) -> T.Tensor:
    """Reduce to a scalar through fixed position-dependent weights, so every
    output coordinate influences the loss differently.  Stateless, hence
    safe to call repeatedly during probing."""
    w = np.cos(np.arange(t.size, dtype=np.float64) * 0.7 + 0.3).reshape(t.shape)
    return T.sum_all(T.mul(t, T.Tensor(w)))


def op_gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks for every differentiable op, three or more
    shapes each, against :data:`OP_TOLERANCE`."""
    results: list[CheckResult] = []

    def check(name, f, x, coords=None):
        err = finite_difference_check(f, x, coords=coords)
        results.append(CheckResult(name, err, OP_TOLERANCE))

    rng = np.random.default_rng(seed)

    # unary elementwise
    for kind in ("relu", "abs"):
        for shape in ((7,), (3, 5), (2, 3, 4, 4)):
            x = _away_from_zero(rng, shape)
            check(f"{kind}{list(shape)}",
                  lambda t, kind=kind: _spread(T.elementwise(kind, t)), x)
    for shape in ((7,), (3, 5), (2, 3, 4, 4)):
        check(f"sigmoid{list(shape)}",
              lambda t: _spread(T.sigmoid(t)), rng.standard_normal(shape))

    # binary elementwise, both operands probed
    for kind in ("add", "sub", "mul"):
        for shape in ((6,), (4, 3), (2, 2, 3, 3)):
            other = T.Tensor(rng.standard_normal(shape))
            check(f"{kind}.lhs{list(shape)}",
                  lambda t, kind=kind, o=other: _spread(T.elementwise(kind, t, o)),
                  rng.standard_normal(shape))
            check(f"{kind}.rhs{list(shape)}",
                  lambda t, kind=kind, o=other: _spread(T.elementwise(kind, o, t)),
                  rng.standard_normal(shape))

    # matmul
    for (n, k, m) in ((2, 3, 4), (5, 2, 3), (1, 6, 2)):
        b = T.Tensor(rng.standard_normal((k, m)))
        check(f"matmul.a[{n}x{k}x{m}]",
              lambda t, b=b: _spread(T.matmul(t, b)), rng.standard_normal((n, k)))
        a = T.Tensor(rng.standard_normal((n, k)))
        check(f"matmul.b[{n}x{k}x{m}]",
              lambda t, a=a: _spread(T.matmul(a, t)), rng.standard_normal((k, m)))

    # softmax
    for shape in ((1, 4), (3, 5), (6, 2)):
        check(f"softmax_rows{list(shape)}",
              lambda t: _spread(T.softmax_rows(t)), rng.standard_normal(shape))

    # conv2d: x, w and bias paths over kernel/stride/padding variants
    conv_cases = (
        (1, 2, 3, 5, 5, 3, 1, 1),
        (2, 3, 4, 7, 7, 3, 2, 1),
        (2, 2, 3, 4, 4, 1, 1, 0),
    )
    for (B, Cin, Cout, H, W, k, s, p) in conv_cases:
        w = T.Tensor(rng.standard_normal((Cout, Cin, k, k)))
        b = T.Tensor(rng.standard_normal(Cout))
        tag = f"[k{k}s{s}p{p}]"
        check(f"conv2d.x{tag}",
              lambda t, w=w, b=b, s=s, p=p: _spread(T.conv2d(t, w, b, stride=s, padding=p)),
              rng.standard_normal((B, Cin, H, W)))
        x_fixed = T.Tensor(rng.standard_normal((B, Cin, H, W)))
        check(f"conv2d.w{tag}",
              lambda t, x=x_fixed, b=b, s=s, p=p: _spread(T.conv2d(x, t, b, stride=s, padding=p)),
              rng.standard_normal((Cout, Cin, k, k)))
        check(f"conv2d.bias{tag}",
              lambda t, x=x_fixed, w=w, s=s, p=p: _spread(T.conv2d(x, w, t, stride=s, padding=p)),
              rng.standard_normal(Cout))

    # conv_transpose2d
    for (B, Cin, Cout, H, W, k, s) in ((1, 2, 3, 3, 4, 2, 2),
                                       (2, 3, 2, 4, 4, 2, 2),
                                       (1, 2, 2, 5, 5, 3, 1)):
        w = T.Tensor(rng.standard_normal((Cin, Cout, k, k)))
        tag = f"[{B}x{Cin}x{H}x{W} k{k}s{s}]"
        check(f"conv_transpose2d.x{tag}",
              lambda t, w=w, s=s: _spread(T.conv_transpose2d(t, w, s)),
              rng.standard_normal((B, Cin, H, W)))
        x_fixed = T.Tensor(rng.standard_normal((B, Cin, H, W)))
        check(f"conv_transpose2d.w{tag}",
              lambda t, x=x_fixed, s=s: _spread(T.conv_transpose2d(x, t, s)),
              rng.standard_normal((Cin, Cout, k, k)))

    # maxpool2 (distinct values keep window maxima unambiguous under probing)
    for shape in ((1, 1, 4, 4), (2, 3, 6, 8), (1, 2, 2, 2)):
        x = rng.permutation(np.arange(int(np.prod(shape)), dtype=np.float64))
        check(f"maxpool2{list(shape)}",
              lambda t: _spread(T.maxpool2(t)), x.reshape(shape) * 0.1)

    # batchnorm2d, train mode, x/gamma/beta paths
    for shape in ((2, 3, 4, 4), (4, 2, 3, 3), (2, 1, 5, 6)):
        C = shape[1]
        gamma = T.Tensor(rng.uniform(0.5, 1.5, C))
        beta = T.Tensor(rng.standard_normal(C))
        tag = f"{list(shape)}"

        def bn_x(t, gamma=gamma, beta=beta, C=C):
            return _spread(T.batchnorm2d(t, gamma, beta, T.BNState(C), "train"))

        check(f"batchnorm2d.x{tag}", bn_x, rng.standard_normal(shape))
        x_fixed = T.Tensor(rng.standard_normal(shape))

        def bn_gamma(t, x=x_fixed, beta=beta, C=C):
            return _spread(T.batchnorm2d(x, t, beta, T.BNState(C), "train"))

        check(f"batchnorm2d.gamma{tag}", bn_gamma, rng.uniform(0.5, 1.5, C))

        def bn_beta(t, x=x_fixed, gamma=gamma, C=C):
            return _spread(T.batchnorm2d(x, gamma, t, T.BNState(C), "train"))

        check(f"batchnorm2d.beta{tag}", bn_beta, rng.standard_normal(C))

    # concat, both operands
    for (sa, sb, axis) in (((2, 3), (2, 2), 1),
                           ((1, 2, 4, 4), (1, 3, 4, 4), 1),
                           ((2, 2, 2, 3), (1, 2, 2, 3), 0)):
        other = T.Tensor(rng.standard_normal(sb))
        check(f"concat.a[{len(sa)}d axis{axis}]",
              lambda t, o=other, axis=axis: _spread(T.concat(t, o, axis)),
              rng.standard_normal(sa))
        first = T.Tensor(rng.standard_normal(sa))
        check(f"concat.b[{len(sa)}d axis{axis}]",
              lambda t, f=first, axis=axis: _spread(T.concat(f, t, axis)),
              rng.standard_normal(sb))

    # bilinear interpolate: up, down and identity
    for (shape, oh, ow) in (((1, 2, 3, 4), 6, 8),
                            ((2, 1, 4, 4), 2, 2),
                            ((1, 3, 5, 5), 5, 5)):
        check(f"interpolate.bilinear{list(shape)}->{oh}x{ow}",
              lambda t, oh=oh, ow=ow: _spread(T.interpolate(t, oh, ow, "bilinear")),
              rng.standard_normal(shape))

    # global_avg_pool
    for shape in ((1, 2, 3, 3), (2, 4, 2, 5), (3, 1, 4, 4)):
        check(f"global_avg_pool{list(shape)}",
              lambda t: _spread(T.global_avg_pool(t)), rng.standard_normal(shape))

    # shape ops and scalar reductions
    for shape in ((2, 6), (3, 2, 2), (1, 3, 2, 2)):
        check(f"reshape{list(shape)}",
              lambda t: _spread(T.reshape(t, (-1,))), rng.standard_normal(shape))
    for shape in ((2, 3), (4, 4), (1, 5)):
        check(f"transpose2d{list(shape)}",
              lambda t: _spread(T.transpose2d(t)), rng.standard_normal(shape))
    for shape in ((2, 2, 2, 2), (3, 1, 2, 3), (4, 2, 1, 1)):
        idx = int(rng.integers(shape[0]))
        check(f"take_batch{list(shape)}[{idx}]",
              lambda t, idx=idx: _spread(T.take_batch(t, idx)), rng.standard_normal(shape))
    for shape in ((5,), (2, 3), (2, 2, 2, 2)):
        check(f"sum_all{list(shape)}", lambda t: T.sum_all(t), rng.standard_normal(shape))
        check(f"scale{list(shape)}",
              lambda t: T.sum_all(T.scale(t, 3.7)), rng.standard_normal(shape))

    return results


def pipeline_gradcheck(seed: int = 0, n_coords: int = 40) -> CheckResult:
    """Spot finite-difference check through the full network.

    Builds the miniature configuration (16x32 input, 4 depth channels,
    8 attention channels, 16 fusion channels), probes ``n_coords``
    coordinates of the first encoder weight, and compares the analytic
    gradient of the masked L1 loss against central differences, verified
    against :data:`PIPELINE_TOLERANCE`.
    """
    from .config import Config
    from .losses import masked_weighted_l1
    from .model import init_model, run_model

    cfg = Config(height=16, width=32, base_channels=2, depth_channels=4,
                 attention_channels=8, fusion_channels=16, head_channels=8,
                 se_reduction=2, dtype="float64")
    model = init_model(cfg, seed=seed + 100)

    rng = np.random.default_rng(seed)
    B = 2
    x5 = T.Tensor(rng.uniform(0.0, 1.0, (B, 5, cfg.height, cfg.width)))
    m_seg = T.Tensor((rng.random((B, 1, cfg.height, cfg.width)) < 0.3).astype(np.float64))
    gt = T.Tensor(rng.uniform(1.0, 70.0, (B, 1, cfg.height, cfg.width)))

    block = model.unet.encoder[0]
    orig = block.conv1.w

    def f(t: T.Tensor) -> T.Tensor:
        # swap the probed tensor into the parameter slot for this evaluation
        block.conv1.w = t
        try:
            out = run_model(model, x5, m_seg, "train")
            return masked_weighted_l1(out.d_final, gt, m_seg, 3.0)
        finally:
            block.conv1.w = orig

    total = orig.data.size
    picks = np.random.default_rng(seed + 7).choice(total, size=min(n_coords, total),
                                                   replace=False)
    # step kept small: the composed network is piecewise smooth, and wider
    # probes cross relu/L1 kinks whose effect grows linearly with the step
    err = finite_difference_check(f, orig.data.copy(), step=1e-6,
                                  coords=[int(i) for i in picks])
    return CheckResult("pipeline[16x32]", err, PIPELINE_TOLERANCE)
