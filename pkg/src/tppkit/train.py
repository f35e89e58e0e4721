"""Training loop, evaluation, and run reporting.

Training is deterministic given (seed, config, data): batch order, dropout
masks, and Monte Carlo samples are all derived streams of the seed.  The
dev-best checkpoint is written whenever the dev per-event log-likelihood
improves; evaluation always runs without dropout and with the large
fixed-sample compensator estimate.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .checkpoint import save_checkpoint
from .data import Dataset, make_batches, normalize_times
from .intensity import batch_log_likelihood
from .optim import AdamState, adam_step, clip_gradient_norm
from .predict import (PredictionAccumulator, Metrics, predict_next,
                      time_loss, total_objective, type_loss)
from .recurrence import ModelParams, forward
from .seeding import DropoutStreams

log = logging.getLogger(__name__)

EVAL_MC_SAMPLES = 10_000
_EVAL_MC_SEED = 999_983  # fixed stream tag: evaluation is seed-independent


class TrainError(RuntimeError):
    """Training aborted (non-finite loss or invalid setup)."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    estimator: str = "mc"          # compensator during training: mc | trapezoid
    mc_samples: int = 100          # Monte Carlo samples per interval (training)
    alpha_type: float = 1.0
    alpha_time: float = 0.01
    eval_every: int = 1            # dev evaluation cadence, in epochs
    checkpoint_path: str | None = None
    early_stop_patience: int = 10  # epochs without dev improvement; 0 disables
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 5.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.estimator not in ("mc", "trapezoid"):
            raise ValueError("estimator must be 'mc' or 'trapezoid'")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.alpha_type < 0 or self.alpha_time < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class EpochRecord:
    epoch: int
    train_objective: float
    wall_time_s: float
    act_mean_iters: float = 0.0
    dev: Metrics | None = None

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch, "train_objective": self.train_objective,
             "wall_time_s": self.wall_time_s, "act_mean_iters": self.act_mean_iters}
        if self.dev is not None:
            d["dev"] = self.dev.to_dict()
        return d


@dataclass
class RunReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_per_event_ll: float = float("-inf")
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {"epochs": [e.to_dict() for e in self.epochs],
                "best_epoch": self.best_epoch,
                "best_dev_per_event_ll": self.best_dev_per_event_ll,
                "stopped_early": self.stopped_early}


def _prepare(dataset: Dataset, params: ModelParams) -> Dataset:
    return normalize_times(dataset) if params.config.normalize_times else dataset


def batch_objective(params: ModelParams, batch, cfg: TrainConfig,
                    mc_seed, drops=None):
    """Composite objective of one batch plus diagnostics."""
    hidden, act_stats = forward(params, batch, drops)
    ll, row_ll = batch_log_likelihood(
        params, batch, hidden, cfg.estimator, cfg.mc_samples, mc_seed)
    preds = predict_next(params, batch, hidden)
    objective = total_objective(ll, type_loss(preds, batch),
                                time_loss(preds, batch),
                                cfg.alpha_type, cfg.alpha_time)
    return objective, hidden, preds, row_ll, act_stats


def train(params: ModelParams, train_set: Dataset, dev_set: Dataset | None,
          cfg: TrainConfig) -> tuple[ModelParams, RunReport]:
    """Optimize in place; returns the params and the per-epoch report.

    The checkpoint at ``cfg.checkpoint_path`` always holds the best-dev
    parameters seen so far (the final parameters when no dev evaluation
    ever ran).
    """
    cfg.validate()
    if len(train_set) == 0:
        raise TrainError("training set is empty")
    train_set = _prepare(train_set, params)
    dev_set = _prepare(dev_set, params) if dev_set is not None and len(dev_set) else None

    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    report = RunReport()
    trainable = params.trainable()
    since_best = 0
    saved_once = False

    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        batches = make_batches(train_set, cfg.batch_size,
                               shuffle_seed=(cfg.seed, epoch))
        epoch_obj = 0.0
        iter_sum, iter_count = 0.0, 0
        for b_idx, batch in enumerate(batches):
            drops = (DropoutStreams(cfg.seed, epoch, b_idx)
                     if params.config.dropout > 0 else None)
            try:
                objective, _, _, _, act_stats = batch_objective(
                    params, batch, cfg, mc_seed=(cfg.seed, epoch), drops=drops)
            except NonFiniteError as err:
                raise TrainError(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}: {err}; "
                    f"last saved checkpoint retained") from err
            grads = ad.gradients(objective, trainable)
            params.mask_fixed_gradients(grads)
            clip_gradient_norm(grads, cfg.clip_norm)
            adam_step(trainable, grads, adam)
            epoch_obj += objective.item()
            if act_stats is not None:
                iter_sum += act_stats.n_updates[act_stats.pad_mask].sum()
                iter_count += int(act_stats.pad_mask.sum())

        record = EpochRecord(
            epoch=epoch,
            train_objective=epoch_obj,
            wall_time_s=time.perf_counter() - tic,
            act_mean_iters=iter_sum / iter_count if iter_count else 0.0,
        )

        if dev_set is not None and epoch % cfg.eval_every == 0:
            record.dev = evaluate(params, dev_set, cfg)
            if record.dev.per_event_ll > report.best_dev_per_event_ll:
                report.best_dev_per_event_ll = record.dev.per_event_ll
                report.best_epoch = epoch
                since_best = 0
                if cfg.checkpoint_path:
                    save_checkpoint(cfg.checkpoint_path, params)
                    saved_once = True
            else:
                since_best += 1
        report.epochs.append(record)
        log.info("epoch %d objective %.4f%s", epoch, epoch_obj,
                 f" dev_ll {record.dev.per_event_ll:.4f}" if record.dev else "")

        if (cfg.early_stop_patience and dev_set is not None
                and since_best >= cfg.early_stop_patience):
            report.stopped_early = True
            break

    if cfg.checkpoint_path and not saved_once:
        save_checkpoint(cfg.checkpoint_path, params)
    return params, report


def evaluate(params: ModelParams, dataset: Dataset, cfg: TrainConfig | None = None,
             batch_size: int | None = None) -> Metrics:
    """Metrics on a dataset: per-event log-likelihood (nats), type accuracy
    (percent), timestamp RMSE, and mean halting iterations.

    Runs without dropout, with the fixed large-sample Monte Carlo
    compensator; results are independent of batch size up to float rounding.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    dataset = _prepare(dataset, params)
    bs = batch_size or (cfg.batch_size if cfg else 16)
    acc = PredictionAccumulator()
    iter_sum, iter_count = 0.0, 0
    with ad.no_grad():
        for batch in make_batches(dataset, bs):
            hidden, act_stats = forward(params, batch)
            ll, _ = batch_log_likelihood(params, batch, hidden, "mc",
                                         EVAL_MC_SAMPLES, _EVAL_MC_SEED)
            preds = predict_next(params, batch, hidden)
            acc.add_batch(preds, batch, ll.item())
            if act_stats is not None:
                iter_sum += act_stats.n_updates[act_stats.pad_mask].sum()
                iter_count += int(act_stats.pad_mask.sum())
                log.debug("%s", act_stats.summary())
    mean_iters = iter_sum / iter_count if iter_count else 0.0
    return acc.metrics(act_mean_iters=mean_iters)


def sequence_log_likelihoods(params: ModelParams, dataset: Dataset,
                             batch_size: int = 16) -> np.ndarray:
    """Per-sequence log-likelihoods in dataset order (evaluation settings)."""
    dataset = _prepare(dataset, params)
    out = np.zeros(len(dataset))
    with ad.no_grad():
        for batch in make_batches(dataset, batch_size):
            hidden, _ = forward(params, batch)
            _, row_ll = batch_log_likelihood(params, batch, hidden, "mc",
                                             EVAL_MC_SAMPLES, _EVAL_MC_SEED)
            out[batch.seq_ids] = row_ll
    return out
