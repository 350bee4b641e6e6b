"""Training loops: pretraining, block-wise weight transfer, finetuning,
evaluation, and the append-only metrics CSV.

Every stochastic choice inside step t is drawn from root.child("step", t),
so a run resumed from a checkpoint continues the exact trajectory of an
unbroken run, bit for bit.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .autodiff import EVAL, TRAIN, Tape, as_tensor, backward, softmax_cross_entropy
from .checkpoint import CheckpointManifest, load_checkpoint, restore_store, save_checkpoint
from .config import ExperimentConfig
from .contrastive import predict_assignment
from .data import Dataset
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .model import (HYBRID, ClassifierConfig, ModelConfig, classifier_forward,
                    init_classifier, init_pretrain_model, pretrain_forward)
from .optim import OptimizerState, cosine_lr, nesterov_step
from .params import ParamStore
from .patches import PretrainBatch, augment_pad_crop, build_pretrain_batch
from .rng import RngStream

METRICS_HEADER = "step,split,loss,accuracy,lr,seed"

# Roles copied by weight transfer; hybrid mode also reuses the pooling stack.
TRANSFER_ROLES = ("stem", "group1", "group2", "group3")
HYBRID_EXTRA_ROLES = ("pool", "embed")


def format_metrics_row(step: int, split: str, loss: float, accuracy: float,
                       lr: float, seed: int) -> str:
    return (f"{step},{split},{loss:.9g},{accuracy:.9g},{lr:.9g},{seed}")


def append_metrics(path: str, rows: list[str]) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as f:
        if fresh:
            f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")


def _check_finite(loss_value: np.ndarray, tape: Tape, step: int) -> None:
    if np.isfinite(loss_value).all():
        return
    report = tape.max_abs_by_op()
    lines = [f"  {op}: max|out| = {m:.6g}" for op, m in report[-12:]]
    raise TrainingDiverged(
        f"non-finite loss at step {step}; last recorded ops:\n" + "\n".join(lines),
        layer_report=report)


def pretrain_step(store: ParamStore, cfg: ModelConfig, batch: PretrainBatch,
                  opt: OptimizerState, rng_step: RngStream) -> tuple[float, float]:
    """Forward, backward, Nesterov update; returns (loss, pretext accuracy)."""
    store.zero_grads()
    tape = Tape()
    with tape:
        loss, scores, _ = pretrain_forward(store, cfg, batch, TRAIN,
                                           rng_step.child("model"))
    _check_finite(loss.data, tape, opt.t)
    _, accuracy = predict_assignment(scores)
    backward(loss, tape)
    lr = cosine_lr(opt.t + 1, opt.lr_max, opt.warmup, opt.total)
    nesterov_step(store, opt, lr)
    return float(loss.data), accuracy


def _restore_run(path: str, cfg: ExperimentConfig, store: ParamStore,
                 opt: OptimizerState) -> RngStream:
    manifest = load_checkpoint(path, expect_digest=cfg.digest())
    restore_store(manifest, store)
    vels = manifest.velocities()
    for name in opt.velocity:
        if name not in vels:
            raise CheckpointError(f"checkpoint has no velocity for {name!r}")
        opt.velocity[name][...] = vels[name]
    opt.t = manifest.step
    return RngStream(manifest.rng_key)


def run_pretrain(ds: Dataset, cfg: ExperimentConfig, out_dir: str,
                 resume: Optional[str] = None) -> str:
    """Pretraining loop; returns the final checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    model_cfg = cfg.model_config()
    root = RngStream.from_seed(cfg.seed)
    store = init_pretrain_model(model_cfg, root.child("init"))
    opt = OptimizerState.create(store, cfg.lr_max, cfg.steps, cfg.warmup,
                                cfg.momentum, cfg.weight_decay)
    if resume is not None:
        root = _restore_run(resume, cfg, store, opt)

    metrics = os.path.join(out_dir, "pretrain_metrics.csv")
    pad = cfg.resolved_pad()
    final = os.path.join(out_dir, "checkpoint_final.slfe")
    for t in range(opt.t, cfg.steps):
        step_rng = root.child("step", t)
        idx = step_rng.child("sample").generator().integers(0, len(ds), cfg.batch_size)
        batch = build_pretrain_batch([ds.images[i] for i in idx], cfg.ps, cfg.p,
                                     step_rng.child("batch"), pad=pad)
        loss, acc = pretrain_step(store, model_cfg, batch, opt, step_rng)
        done = t + 1
        if done == 1 or done % cfg.eval_every == 0 or done == cfg.steps:
            append_metrics(metrics, [format_metrics_row(
                done, "pretrain", loss, acc,
                cosine_lr(done, cfg.lr_max, cfg.warmup, cfg.steps), cfg.seed)])
        if done % cfg.checkpoint_every == 0 or done == cfg.steps:
            path = os.path.join(out_dir, f"checkpoint_{done:07d}.slfe")
            save_checkpoint(path, store, done, root.key, cfg.digest(), opt.velocity)
            if done == cfg.steps:
                save_checkpoint(final, store, done, root.key, cfg.digest(),
                                opt.velocity)
    return final


def transfer_weights(manifest: CheckpointManifest, target: ParamStore,
                     hybrid: bool = False) -> list[str]:
    """Copy pretrained blocks (and the pooling stack in hybrid mode) into a
    freshly initialized classifier; returns the copied parameter names."""
    roles = TRANSFER_ROLES + (HYBRID_EXTRA_ROLES if hybrid else ())
    source = manifest.param_arrays()
    copied = []
    for e in target.entries():
        if e.role not in roles:
            continue
        if e.name not in source:
            raise CheckpointError(f"pretrained checkpoint is missing {e.name!r}; "
                                  "pretrain and finetune model configs must agree")
        arr = source[e.name]
        if arr.shape != e.tensor.data.shape:
            raise CheckpointError(f"shape mismatch for {e.name!r}: checkpoint "
                                  f"{arr.shape}, classifier {e.tensor.data.shape}")
        e.tensor.data[...] = arr
        copied.append(e.name)
    if not copied:
        raise CheckpointError("weight transfer copied nothing; check model configs")
    return copied


def prime_batch_norm(store: ParamStore, ccfg: ClassifierConfig,
                     images: np.ndarray, rng: RngStream) -> None:
    """One train-mode forward (no update) to seed BN running statistics, so a
    never-trained model can still be evaluated."""
    classifier_forward(store, ccfg, images, TRAIN, rng)


def evaluate_classifier(store: ParamStore, ccfg: ClassifierConfig, ds: Dataset,
                        batch_size: int = 64,
                        limit: Optional[int] = None) -> tuple[float, float]:
    """Mean loss and accuracy over (up to ``limit``) examples, eval mode."""
    n = len(ds) if limit is None else min(limit, len(ds))
    losses, hits = [], 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        images = ds.images[start:stop]
        labels = ds.labels[start:stop]
        logits = classifier_forward(store, ccfg, images, EVAL)
        loss = softmax_cross_entropy(logits, labels)
        losses.append(float(loss.data) * (stop - start))
        hits += int((np.argmax(logits.data, axis=1) == labels).sum())
    return sum(losses) / n, hits / n


def finetune_step(store: ParamStore, ccfg: ClassifierConfig, images: np.ndarray,
                  labels: np.ndarray, opt: OptimizerState,
                  rng_step: RngStream) -> tuple[float, float]:
    store.zero_grads()
    tape = Tape()
    with tape:
        logits = classifier_forward(store, ccfg, images, TRAIN,
                                    rng_step.child("model"))
        loss = softmax_cross_entropy(logits, labels)
    _check_finite(loss.data, tape, opt.t)
    accuracy = float((np.argmax(logits.data, axis=1) == labels).mean())
    backward(loss, tape)
    lr = cosine_lr(opt.t + 1, opt.lr_max, opt.warmup, opt.total)
    nesterov_step(store, opt, lr)
    return float(loss.data), accuracy


def run_finetune(train_ds: Dataset, test_ds: Dataset, cfg: ExperimentConfig,
                 init: str, out_dir: str) -> tuple[float, float]:
    """Supervised finetuning from ``init`` ("random" or a checkpoint path);
    returns final (test loss, test accuracy)."""
    if train_ds.labels is None:
        raise ConfigError("finetuning needs labeled training data")
    os.makedirs(out_dir, exist_ok=True)
    ccfg = cfg.classifier_config()
    root = RngStream.from_seed(cfg.seed)
    store = init_classifier(ccfg, root.child("init"))
    if init != "random":
        transfer_weights(load_checkpoint(init), store, hybrid=(cfg.finetune_mode == HYBRID))
    opt = OptimizerState.create(store, cfg.lr_max, cfg.steps, cfg.warmup,
                                cfg.momentum, cfg.weight_decay)

    metrics = os.path.join(out_dir, "finetune_metrics.csv")
    pad = cfg.resolved_pad()
    test_metrics: tuple[float, float] = (float("nan"), 0.0)
    for t in range(cfg.steps):
        step_rng = root.child("ft_step", t)
        idx = step_rng.child("sample").generator().integers(0, len(train_ds),
                                                            cfg.batch_size)
        images = np.stack([
            augment_pad_crop(train_ds.images[i], pad,
                             step_rng.child("aug", int(k)).generator())
            for k, i in enumerate(idx)])
        loss, acc = finetune_step(store, ccfg, images, train_ds.labels[idx],
                                  opt, step_rng)
        done = t + 1
        if done == 1 or done % cfg.eval_every == 0 or done == cfg.steps:
            lr_now = cosine_lr(done, cfg.lr_max, cfg.warmup, cfg.steps)
            rows = [format_metrics_row(done, "train", loss, acc, lr_now, cfg.seed)]
            test_metrics = evaluate_classifier(store, ccfg, test_ds,
                                               cfg.batch_size, cfg.eval_examples)
            rows.append(format_metrics_row(done, "test", test_metrics[0],
                                           test_metrics[1], lr_now, cfg.seed))
            append_metrics(metrics, rows)
    save_checkpoint(os.path.join(out_dir, "classifier_final.slfe"), store,
                    cfg.steps, root.key, cfg.digest(), opt.velocity)
    return test_metrics
