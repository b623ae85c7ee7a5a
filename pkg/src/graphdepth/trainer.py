"""AdamW with decoupled weight decay, global-norm clipping and a cosine schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, batch_iter, stack
from .errors import ConfigurationError, NumericError, UsageError
from .model import GraphDepthModel, load_checkpoint, save_checkpoint
from .objective import LossWeights, compute_metrics, depth_loss
from .tensorcore import Tape, Tensor, backward

log = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ["step", "epoch", "lr", "l1", "grad", "unc", "total", "grad_norm", "clipped_norm"]
METRIC_FIELDS = ["step", "split", "rmse", "abs_rel", "delta1", "mae"]


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    steps: int = 0  # overrides epochs when > 0
    clip_max_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    validate_every: int = 1  # epochs; 0 disables
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.steps < 0:
            raise ConfigurationError("base_lr, batch_size and epochs must be positive; steps >= 0")
        if self.clip_max_norm <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigurationError("clip_max_norm and eps must be positive, weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("moment decay rates must lie in [0, 1)")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale every gradient by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``.

    Returns the (possibly) scaled gradients and the norm observed before clipping.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted", op="clip_gradients")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``; no warmup."""
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        if lr < 0:
            raise UsageError("learning rate must be non-negative")
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1 - self.beta1 ** t, 1 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise UsageError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.m = {k[len("optim.m."):]: v.copy() for k, v in arrays.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: v.copy() for k, v in arrays.items() if k.startswith("optim.v.")}
        self.step_count = step_count


def optimizer_step(params, grads, state: AdamW, lr: float) -> AdamW:
    state.step(params, grads, lr)
    return state


def evaluate(model: GraphDepthModel, samples: Sequence[Sample], batch_size: int = 8) -> dict[str, float]:
    """Metrics pooled over every valid pixel of ``samples``."""
    preds, truths, masks = [], [], []
    for start in range(0, len(samples), batch_size):
        b = stack(samples[start:start + batch_size])
        preds.append(model.predict(b.rgb).depth.data)
        truths.append(b.depth)
        masks.append(b.mask)
    return compute_metrics(np.concatenate(preds), np.concatenate(truths), np.concatenate(masks))


class CsvLog:
    """Append-only CSV with a fixed header; floats written with ``repr`` for exact replay."""

    def __init__(self, path, fields):
        self.path, self.fields = path, fields
        self.rows: list[dict] = []
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(fields)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in self.fields])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class TrainResult:
    steps: int
    train_log: list[dict]
    metric_log: list[dict]
    checkpoint: Path | None
    optimizer: AdamW
    max_clipped_norm: float


def _save(out_dir, stem, model, opt, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / stem
    save_checkpoint(path, model, step, opt.state_arrays(), {"optim.step": str(opt.step_count)})
    return path


def train_loop(model: GraphDepthModel, dataset: Sequence[Sample], config: TrainConfig = TrainConfig(),
               weights: LossWeights = LossWeights(), val_dataset: Sequence[Sample] | None = None,
               out_dir=None, optimizer: AdamW | None = None, start_step: int = 0,
               stop_at: int | None = None) -> TrainResult:
    """Run forward, loss, backward, clip, AdamW and schedule for every step.

    With ``out_dir`` set, writes ``train_log.csv``, ``metrics.csv`` and a
    ``checkpoint`` (plus ``last_good`` if a non-finite loss aborts the run).
    Resuming from ``start_step`` with a restored optimizer replays the same
    batch order as an uninterrupted run. ``stop_at`` ends the run early
    without changing the schedule length, which is how an interruption is
    reproduced.
    """
    if len(dataset) < config.batch_size:
        raise UsageError(f"dataset of {len(dataset)} samples is smaller than batch size {config.batch_size}")
    per_epoch = len(dataset) // config.batch_size
    total = config.steps or config.epochs * per_epoch
    end = total if stop_at is None else min(stop_at, total)
    opt = optimizer or AdamW.from_config(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_log = CsvLog(out / "train_log.csv" if out else None, TRAIN_LOG_FIELDS)
    metric_log = CsvLog(out / "metrics.csv" if out else None, METRIC_FIELDS)
    params = model.parameters()
    use_unc = model.config.uncertainty_head_on
    max_clipped = 0.0
    step = start_step
    epoch = step // per_epoch
    skip = step % per_epoch
    while step < end:
        for batch in batch_iter(dataset, config.batch_size, config.seed, epoch):
            if skip:
                skip -= 1
                continue
            if step >= end:
                break
            lr = lr_schedule(step, total, config.base_lr)
            try:
                with Tape() as tape:
                    pred = model(Tensor(batch.rgb))
                    losses = depth_loss(pred.depth, pred.log_var if use_unc else None, batch.depth, batch.mask,
                                        weights)
                grads = backward(tape, losses.total)
                raw = {k: grads[p] if p in grads else np.zeros_like(p.data) for k, p in params.items()}
                clipped, norm = clip_gradients(raw, config.clip_max_norm)
            except NumericError:
                _save(out, "last_good", model, opt, step)
                log.error("non-finite value at step %d; last good state kept", step)
                raise
            post = global_norm(clipped)
            if post > config.clip_max_norm + 1e-9:
                raise NumericError(f"clipped norm {post} exceeds {config.clip_max_norm}", op="clip_gradients")
            max_clipped = max(max_clipped, post)
            opt.step(params, clipped, lr)
            v = losses.values()
            train_log.write({"step": step + 1, "epoch": epoch, "lr": lr, **v, "grad_norm": norm,
                             "clipped_norm": post})
            step += 1
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                _save(out, "checkpoint", model, opt, step)
        epoch += 1
        if val_dataset and config.validate_every and epoch % config.validate_every == 0:
            metric_log.write({"step": step, "split": "val", **evaluate(model, val_dataset, config.batch_size)})
    ckpt = _save(out, "checkpoint", model, opt, step)
    return TrainResult(step, train_log.rows, metric_log.rows, ckpt, opt, max_clipped)


def resume(stem, dataset, config: TrainConfig = TrainConfig(), weights: LossWeights = LossWeights(),
           val_dataset=None, out_dir=None) -> tuple[GraphDepthModel, TrainResult]:
    """Continue training from a checkpoint, restoring optimizer moments exactly."""
    ck = load_checkpoint(stem)
    model = ck.build_model()
    opt = AdamW.from_config(config)
    opt.load_state(ck.arrays, int(ck.meta.get("optim.step", ck.step)))
    return model, train_loop(model, dataset, config, weights, val_dataset, out_dir, opt, ck.step)
