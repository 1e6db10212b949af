"""End-to-end workflows behind the service endpoints and the command line.

Each function here is one complete user-facing operation: generate a
dataset, train, evaluate, infer on one sample, or run the gradient
verification suites.  They take plain values, write their artifacts to
disk, and return plain dicts, so both the HTTP layer and tests can call
them directly.

Error taxonomy (mapped to exit codes and HTTP statuses elsewhere):

- ``UsageError``: the request itself is malformed (bad counts, unknown
  split names, missing required combinations).
- ``VerificationFailure``: a check that guards correctness failed
  (gradient suite over tolerance, training diverged).
- I/O problems surface as ``FileNotFoundError``/``OSError``/``FormatError``
  from the layers below and are passed through untouched.
"""

from __future__ import annotations

import dataclasses
import os
import time
from typing import Optional

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from .config import Config, _parse_value, config_to_text, load_config
from .masks import MaskSource
from .metrics import evaluate_depth, aggregate
from .model import (count_parameters, load_checkpoint, named_parameters,
                    save_checkpoint)
from .netpbm import FormatError
from .optim import Adam
from .trainer import TrainingDiverged, eval_metrics, infer_sample, \
    prepare_samples, train_loop
from .viz import write_strip

HISTORY_FILE = "history.csv"
CHECKPOINT_FILE = "checkpoint.mdck"
MANIFEST_FILE = "manifest.txt"
EVAL_REPORT_FILE = "eval_report.txt"

PRESETS = {
    # small-enough-to-iterate geometry; everything else stays at defaults
    "desk": {"height": 64, "width": 128, "steps": 500},
}


class UsageError(ValueError):
    """The request contradicts the interface contract."""


class VerificationFailure(RuntimeError):
    """A correctness check did not hold."""


def _float_text(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def gen_data(out_dir, count: int, seed: int = 0, height: int = 256,
             width: int = 512, objects: int = 6) -> dict:
    """Generate ``count`` scenes plus the split file; returns the layout."""
    if count < 1:
        raise UsageError(f"count must be >= 1, got {count}")
    if objects < 1:
        raise UsageError(f"objects must be >= 1, got {objects}")
    if height < 16 or width < 16:
        raise UsageError(f"size {height}x{width} too small (min 16x16)")
    index = data_mod.generate_dataset(out_dir, count, seed=seed,
                                      height=height, width=width,
                                      objects=objects)
    artifacts = [os.path.join(index.root, data_mod.SPLIT_FILE)]
    for sid in index.train_ids + index.val_ids:
        artifacts.append(os.path.join(index.root, sid))
    return {
        "root": index.root,
        "train_ids": index.train_ids,
        "val_ids": index.val_ids,
        "artifacts": artifacts,
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def parse_overrides(items: Optional[dict]) -> dict:
    """Coerce string key=value overrides to typed config values."""
    if not items:
        return {}
    fields = {f.name: f for f in dataclasses.fields(Config)}
    out = {}
    for key, raw in items.items():
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        try:
            out[key] = _parse_value(fields[key], str(raw), "override")
        except ValueError as e:
            raise UsageError(str(e)) from None
    return out


def resolve_config(config_path=None, preset: Optional[str] = None,
                   overrides: Optional[dict] = None) -> Config:
    """Defaults -> preset -> config file -> explicit overrides, last wins."""
    cfg = Config()
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(
                f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        cfg = dataclasses.replace(cfg, **PRESETS[preset])
    if config_path is not None:
        cfg = load_config(config_path, base=cfg)
    if overrides:
        field_names = {f.name for f in dataclasses.fields(Config)}
        unknown = sorted(set(overrides) - field_names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()


def _write_history(path, rows) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("step,loss,val_mae,val_rmse\n")
        for r in rows:
            f.write(f"{r.step},{_float_text(r.loss)},"
                    f"{_float_text(r.val_mae)},{_float_text(r.val_rmse)}\n")


def _write_manifest(path, cfg: Config, result, n_train: int, n_val: int,
                    n_params: int, resumed_from_step: int) -> None:
    lines = [config_to_text(cfg).rstrip("\n")]
    lines.append(f"n_train={n_train}")
    lines.append(f"n_val={n_val}")
    lines.append(f"n_params={n_params}")
    lines.append("depth_unit=meters")
    lines.append(f"resumed_from_step={resumed_from_step}")
    lines.append(f"final_step={result.final_step}")
    lines.append(f"initial_loss={_float_text(result.initial_loss)}")
    lines.append(f"final_loss={_float_text(result.final_loss)}")
    for tag, m in (("train_final", result.train_final),
                   ("train_init", result.train_init),
                   ("val_final", result.val_final),
                   ("val_init", result.val_init)):
        lines.append(f"{tag}_mae={_float_text(m.mae)}")
        lines.append(f"{tag}_rmse={_float_text(m.rmse)}")
    # refinement margin: how much the fused head improves on the first pass
    lines.append("refine_margin_train="
                 + _float_text(result.train_init.mae - result.train_final.mae))
    lines.append("refine_margin_val="
                 + _float_text(result.val_init.mae - result.val_final.mae))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def train(data_dir, out_dir, config_path=None, preset: Optional[str] = None,
          overrides: Optional[dict] = None, resume_from=None,
          log=None) -> dict:
    """Train on a generated dataset and write checkpoint/history/manifest.

    When ``resume_from`` names a checkpoint, its embedded configuration is
    authoritative for the model; the request may still change ``steps``
    (how many more to run) and ``log_every``.
    """
    index = data_mod.load_dataset_index(data_dir)
    train_samples = data_mod.load_samples(index, "train")
    val_samples = data_mod.load_samples(index, "val")
    if not train_samples or not val_samples:
        raise UsageError(
            f"dataset at {data_dir} needs both splits populated "
            f"(train={len(train_samples)}, val={len(val_samples)})")

    model = None
    opt = None
    start_step = 0
    if resume_from is not None:
        model, opt_state, start_step = load_checkpoint(resume_from)
        cfg = model.config
        allowed = {"steps", "log_every"}
        extra = {k: v for k, v in (overrides or {}).items() if k in allowed}
        if extra:
            cfg = dataclasses.replace(cfg, **extra).validate()
            model.config = cfg
        if opt_state is not None:
            opt = Adam(named_parameters(model), lr=cfg.lr, beta1=cfg.beta1,
                       beta2=cfg.beta2, eps=cfg.eps)
            opt.load_state_dict(opt_state)
    else:
        cfg = resolve_config(config_path, preset, overrides)

    train_dirs = [os.path.join(index.root, s.scene_id) for s in train_samples]
    val_dirs = [os.path.join(index.root, s.scene_id) for s in val_samples]

    t0 = time.perf_counter()
    result = train_loop(cfg, train_samples, val_samples, model=model, opt=opt,
                        start_step=start_step, train_dirs=train_dirs,
                        val_dirs=val_dirs, log=log)
    elapsed = time.perf_counter() - t0

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_FILE)
    hist_path = os.path.join(out_dir, HISTORY_FILE)
    man_path = os.path.join(out_dir, MANIFEST_FILE)
    save_checkpoint(ckpt_path, result.model, result.opt.state_dict(),
                    step=result.final_step)
    _write_history(hist_path, result.history)
    _write_manifest(man_path, cfg, result, len(train_samples),
                    len(val_samples), count_parameters(result.model),
                    start_step)
    return {
        "checkpoint": ckpt_path,
        "history": hist_path,
        "manifest": man_path,
        "artifacts": [ckpt_path, hist_path, man_path],
        "final_step": result.final_step,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "train_final_mae": result.train_final.mae,
        "train_init_mae": result.train_init.mae,
        "val_final_mae": result.val_final.mae,
        "val_final_rmse": result.val_final.rmse,
        "elapsed_seconds": elapsed,
    }


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _metrics_row(scene_id: str, m) -> dict:
    return {"scene_id": scene_id, "mae": m.mae, "rmse": m.rmse,
            "n_valid": m.n_valid}


def evaluate(data_dir, checkpoint_path=None, split: str = "val",
             oracle: bool = False, report_path=None) -> dict:
    """Score a checkpoint (or the gt-as-prediction oracle) on one split.

    The oracle mode substitutes the ground truth for the prediction; it
    exists to pin the zero point of the metric plumbing.
    """
    if split not in ("train", "val"):
        raise UsageError(f"split must be 'train' or 'val', got {split!r}")
    if not oracle and checkpoint_path is None:
        raise UsageError("evaluation needs a checkpoint (or oracle mode)")
    index = data_mod.load_dataset_index(data_dir)
    samples = data_mod.load_samples(index, split)
    if not samples:
        raise UsageError(f"split {split!r} of {data_dir} is empty")

    if oracle:
        per_final = [evaluate_depth(s.depth, s.depth) for s in samples]
        per_init = per_final
        agg_final = aggregate(per_final)
        agg_init = agg_final
        unit_note = "oracle"
    else:
        model, _, _ = load_checkpoint(checkpoint_path)
        cfg = model.config
        dirs = [os.path.join(index.root, s.scene_id) for s in samples]
        prepared = prepare_samples(samples, cfg, MaskSource(
            cfg.mask_mode, cfg.mask_file), dirs)
        per_final, per_init, agg_final, agg_init = \
            eval_metrics(model, prepared, cfg)
        unit_note = "meters"

    rows_final = [_metrics_row(s.scene_id, m)
                  for s, m in zip(samples, per_final)]
    rows_init = [_metrics_row(s.scene_id, m)
                 for s, m in zip(samples, per_init)]

    if report_path is None:
        report_path = os.path.join(data_dir, EVAL_REPORT_FILE)
    lines = [f"split={split}", f"n_samples={len(samples)}",
             f"depth_unit={unit_note}"]
    for row in rows_final:
        lines.append(f"sample={row['scene_id']} mae={_float_text(row['mae'])} "
                     f"rmse={_float_text(row['rmse'])} n_valid={row['n_valid']}")
    lines.append(f"aggregate_mae={_float_text(agg_final.mae)}")
    lines.append(f"aggregate_rmse={_float_text(agg_final.rmse)}")
    lines.append(f"aggregate_n_valid={agg_final.n_valid}")
    lines.append(f"init_aggregate_mae={_float_text(agg_init.mae)}")
    lines.append(f"init_aggregate_rmse={_float_text(agg_init.rmse)}")
    with open(report_path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")

    return {
        "split": split,
        "per_sample": rows_final,
        "per_sample_init": rows_init,
        "aggregate": {"mae": agg_final.mae, "rmse": agg_final.rmse,
                      "n_valid": agg_final.n_valid},
        "aggregate_init": {"mae": agg_init.mae, "rmse": agg_init.rmse,
                           "n_valid": agg_init.n_valid},
        "report": str(report_path),
        "artifacts": [str(report_path)],
    }


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(checkpoint_path, sample_dir, out_dir,
          keep_prob: Optional[float] = None,
          seed: Optional[int] = None) -> dict:
    """Run one sample through a checkpoint and write the panel strip."""
    model, _, _ = load_checkpoint(checkpoint_path)
    cfg = model.config
    sample = data_mod.read_sample(sample_dir)
    out = infer_sample(model, sample, cfg,
                       source=MaskSource(cfg.mask_mode, cfg.mask_file),
                       sample_dir=sample_dir, keep_prob=keep_prob, seed=seed)
    paths = write_strip(out_dir, sample.rgb, sample.depth, out.sparse,
                        out.mask, out.d_init, out.d_final, cfg.max_depth)
    return {
        "artifacts": paths,
        "mae_final": out.metrics_final.mae,
        "rmse_final": out.metrics_final.rmse,
        "mae_init": out.metrics_init.mae,
        "rmse_init": out.metrics_init.rmse,
        "n_valid": out.metrics_final.n_valid,
    }


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def run_gradcheck(scope: str = "all", seed: int = 0) -> dict:
    """Finite-difference verification; raises on any failure."""
    if scope not in ("op", "pipeline", "all"):
        raise UsageError(f"scope must be op, pipeline, or all, got {scope!r}")
    results = []
    if scope in ("op", "all"):
        results.extend(gradcheck_mod.op_gradcheck_suite(seed=seed))
    if scope in ("pipeline", "all"):
        results.append(gradcheck_mod.pipeline_gradcheck(seed=seed))
    rows = [{"name": r.name, "max_rel_error": r.max_rel_error,
             "tolerance": r.tolerance, "passed": r.passed} for r in results]
    report = {"ok": all(r["passed"] for r in rows), "checks": rows}
    if not report["ok"]:
        bad = ", ".join(r["name"] for r in rows if not r["passed"])
        raise VerificationFailure(f"gradient check failed for: {bad}")
    return report
