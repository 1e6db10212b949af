"""Training loop, evaluation, and single-sample inference.

One step: assemble a batch (RGB, Bernoulli-sparsified depth, validity, the
merged segmentation map, ground truth), run the pipeline in train mode,
apply the combined loss, backpropagate, and take one Adam step.  Batch
order, sparsification, and initialization all derive from the run seed, so
two runs with the same seed produce byte-identical histories and weights.

A non-finite loss aborts the run: the offending step is re-executed under
per-op finite checking so the error names the first operation that produced
a NaN or Inf, and no parameter update is applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import Config
from .losses import LossBreakdown, LossWeights, total_loss
from .masks import MaskSource, merged_mask_for
from .metrics import Metrics, aggregate, evaluate_depth
from .model import Model, init_model, named_parameters, run_model
from .optim import Adam
from .data import Sample, sparsify
from .unet import stack_input


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the op-level diagnosis."""


@dataclass
class PreparedSample:
    """Per-sample constants, precomputed once per run (or per epoch when
    sparsity is resampled)."""

    scene_id: str
    rgb: np.ndarray        # (3, H, W)
    gt: np.ndarray         # (1, H, W)
    mask: np.ndarray       # (1, H, W) merged segmentation input
    sparse: np.ndarray     # (1, H, W)
    validity: np.ndarray   # (1, H, W)


@dataclass
class HistoryRow:
    step: int
    loss: float
    val_mae: float
    val_rmse: float


@dataclass
class TrainResult:
    model: Model
    opt: Adam
    history: list
    initial_loss: float
    final_loss: float
    final_step: int
    train_final: Metrics
    train_init: Metrics
    val_final: Metrics
    val_init: Metrics


def _sparsity_rng(cfg: Config, index: int, epoch: int) -> np.random.Generator:
    tag = epoch if cfg.resample_sparsity else 0
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5A, index, tag)))


def prepare_samples(samples, cfg: Config, source: MaskSource,
                    sample_dirs=None, epoch: int = 0) -> list:
    """Resolve masks and sparsify depth for a list of samples."""
    dtype = cfg.np_dtype
    prepared = []
    for i, s in enumerate(samples):
        if (s.height, s.width) != (cfg.height, cfg.width):
            raise ValueError(
                f"sample {s.scene_id} is {s.width}x{s.height}, config expects "
                f"{cfg.width}x{cfg.height}")
        merged = merged_mask_for(
            s, source, sample_dirs[i] if sample_dirs is not None else None)
        sparse, validity = sparsify(s.depth, cfg.keep_prob,
                                    _sparsity_rng(cfg, i, epoch))
        prepared.append(PreparedSample(
            scene_id=s.scene_id,
            rgb=s.rgb.astype(dtype),
            gt=s.depth[None].astype(dtype),
            mask=merged[None].astype(dtype),
            sparse=sparse[None].astype(dtype),
            validity=validity[None].astype(dtype)))
    return prepared


def make_batch(prepared, idxs, cfg: Config):
    """Stack prepared samples into (x5, gt, mask) tensors."""
    rgb = T.Tensor(np.stack([prepared[i].rgb for i in idxs]))
    sparse = T.Tensor(np.stack([prepared[i].sparse for i in idxs]))
    validity = T.Tensor(np.stack([prepared[i].validity for i in idxs]))
    x5 = stack_input(rgb, sparse, validity, cfg.max_depth)
    gt = T.Tensor(np.stack([prepared[i].gt for i in idxs]))
    mask = T.Tensor(np.stack([prepared[i].mask for i in idxs]))
    return x5, gt, mask


def _epoch_order(cfg: Config, n: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x0E, epoch)))
    return rng.permutation(n)


def _step_once(model: Model, opt: Adam, x5, gt, mask, cfg: Config,
               weights: LossWeights, step: int) -> LossBreakdown:
    with T.GradTape():
        out = run_model(model, x5, mask, "train")
        breakdown = total_loss(out.d_init, out.d_final, gt, mask,
                               mask.data[:, 0], weights,
                               mask_mode=cfg.mask_mode, loss_kind=cfg.loss_kind)
        if not np.isfinite(breakdown.total.data):
            # replay the same forward with per-op checking to name the culprit
            try:
                with T.finite_checks(), T.GradTape(), np.errstate(all="ignore"):
                    out2 = run_model(model, x5, mask, "train")
                    total_loss(out2.d_init, out2.d_final, gt, mask,
                               mask.data[:, 0], weights,
                               mask_mode=cfg.mask_mode, loss_kind=cfg.loss_kind)
                detail = "loss non-finite but replay was finite"
            except FloatingPointError as e:
                detail = str(e)
            raise TrainingDiverged(f"step {step}: non-finite loss ({detail})")
        T.backward(breakdown.total)
    opt.step()
    opt.zero_grad()
    return breakdown


def _forward_eval(model: Model, prep: PreparedSample, cfg: Config):
    with T.no_grad():
        x5, gt, mask = make_batch([prep], [0], cfg)
        out = run_model(model, x5, mask, "eval")
    return out


def eval_metrics(model: Model, prepared, cfg: Config):
    """Per-sample and pooled metrics for both depth outputs, eval mode."""
    per_final, per_init = [], []
    for prep in prepared:
        out = _forward_eval(model, prep, cfg)
        per_final.append(evaluate_depth(out.d_final.data[0, 0], prep.gt[0]))
        per_init.append(evaluate_depth(out.d_init.data[0, 0], prep.gt[0]))
    return per_final, per_init, aggregate(per_final), aggregate(per_init)


def train_loop(cfg: Config, train_samples, val_samples,
               source: Optional[MaskSource] = None,
               model: Optional[Model] = None, opt: Optional[Adam] = None,
               start_step: int = 0, train_dirs=None, val_dirs=None,
               log=None) -> TrainResult:
    """Run ``cfg.steps`` optimization steps; returns the trained model plus
    the logged history.  Pass ``model``/``opt``/``start_step`` to resume."""
    cfg.validate()
    if not train_samples:
        raise ValueError("training requires at least one sample")
    if not val_samples:
        raise ValueError("validation requires at least one sample")
    if source is None:
        source = MaskSource(cfg.mask_mode, cfg.mask_file)
    if model is None:
        model = init_model(cfg, seed=cfg.seed)
    if opt is None:
        opt = Adam(named_parameters(model), lr=cfg.lr, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps)
    weights = LossWeights(cfg.lambda_init, cfg.lambda_obj, cfg.lambda_seg)

    n = len(train_samples)
    batch_size = min(cfg.batch_size, n)
    val_prepared = prepare_samples(val_samples, cfg, source, val_dirs)
    train_prepared = prepare_samples(train_samples, cfg, source, train_dirs, epoch=0)

    history = []
    initial_loss = None
    final_loss = None
    step = start_step
    epoch = 0
    order = _epoch_order(cfg, n, epoch)
    cursor = 0
    last_logged = None

    while step < start_step + cfg.steps:
        if cursor + batch_size > n:
            epoch += 1
            order = _epoch_order(cfg, n, epoch)
            cursor = 0
            if cfg.resample_sparsity:
                train_prepared = prepare_samples(train_samples, cfg, source,
                                                 train_dirs, epoch=epoch)
        idxs = order[cursor:cursor + batch_size]
        cursor += batch_size
        step += 1

        x5, gt, mask = make_batch(train_prepared, idxs, cfg)
        breakdown = _step_once(model, opt, x5, gt, mask, cfg, weights, step)
        loss_val = float(breakdown.total.data)
        if initial_loss is None:
            initial_loss = loss_val
        final_loss = loss_val

        if step % cfg.log_every == 0 or step == start_step + cfg.steps:
            _, _, vf, _ = eval_metrics(model, val_prepared, cfg)
            row = HistoryRow(step=step, loss=loss_val, val_mae=vf.mae,
                             val_rmse=vf.rmse)
            history.append(row)
            last_logged = row
            if log is not None:
                log(row)

    _, _, train_final, train_init = eval_metrics(model, train_prepared, cfg)
    _, _, val_final, val_init = eval_metrics(model, val_prepared, cfg)
    return TrainResult(model=model, opt=opt, history=history,
                       initial_loss=float(initial_loss),
                       final_loss=float(final_loss), final_step=step,
                       train_final=train_final, train_init=train_init,
                       val_final=val_final, val_init=val_init)


@dataclass
class InferenceOut:
    d_init: np.ndarray     # (H, W) meters
    d_final: np.ndarray    # (H, W) meters
    mask: np.ndarray       # (H, W) merged segmentation input
    sparse: np.ndarray     # (H, W) the sparsified depth the model saw
    metrics_final: Metrics
    metrics_init: Metrics


def infer_sample(model: Model, sample: Sample, cfg: Config,
                 source: Optional[MaskSource] = None, sample_dir=None,
                 keep_prob: Optional[float] = None,
                 seed: Optional[int] = None) -> InferenceOut:
    """Eval-mode forward pass on one sample."""
    if source is None:
        source = MaskSource(cfg.mask_mode, cfg.mask_file)
    run_cfg = cfg
    if keep_prob is not None or seed is not None:
        import dataclasses
        run_cfg = dataclasses.replace(
            cfg,
            keep_prob=cfg.keep_prob if keep_prob is None else keep_prob,
            seed=cfg.seed if seed is None else seed).validate()
    prep = prepare_samples([sample], run_cfg, source,
                           [sample_dir] if sample_dir is not None else None)[0]
    out = _forward_eval(model, prep, run_cfg)
    d_init = out.d_init.data[0, 0].astype(np.float64)
    d_final = out.d_final.data[0, 0].astype(np.float64)
    return InferenceOut(
        d_init=d_init, d_final=d_final, mask=prep.mask[0].astype(np.float64),
        sparse=prep.sparse[0].astype(np.float64),
        metrics_final=evaluate_depth(d_final, sample.depth),
        metrics_init=evaluate_depth(d_init, sample.depth))
