"""Next-event heads, prediction losses, the composite objective, and metrics.

From the hidden row of event i the model predicts event i+1: a linear map
for its timestamp and a softmax over types.  The first event of a sequence
is never predicted.  Composite training objective per sequence:

    -loglik + alpha_type * type_loss + alpha_time * time_loss

with (alpha_type, alpha_time) = (0, 0) for likelihood-only runs and
(1, 0.01) for prediction runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch

LOG_CLAMP = 1e-12

ALPHAS_LIKELIHOOD_ONLY = (0.0, 0.0)
ALPHAS_PREDICTION = (1.0, 0.01)


@dataclass
class BatchPredictions:
    """Differentiable head outputs for one batch.

    Index [b, i] holds the prediction OF event i (made from event i-1's
    hidden row); index 0 of each row is meaningless and always masked.
    """

    t_hat: Tensor      # (B, I)
    p_hat: Tensor      # (B, I, C) rows on the simplex
    valid: np.ndarray  # (B, I) bool; True exactly on predicted events

    def c_hat(self) -> np.ndarray:
        """Argmax type ids (ties toward the smaller id); 0 where invalid."""
        ids = np.argmax(self.p_hat.data, axis=-1) + 1
        return np.where(self.valid, ids, 0)


def predict_next(params, batch: Batch, hidden: Tensor) -> BatchPredictions:
    """Head outputs aligned to their target events."""
    t = params.tensors
    b, i_max = batch.times.shape
    t_src = ad.reshape(hidden @ ad.transpose(t["head.W_time"]), (b, i_max)) + t["head.b_time"]
    logits_src = hidden @ ad.transpose(t["head.W_type"]) + t["head.b_type"]
    # shift source positions one step right so index i holds event i's prediction
    zero_col = np.zeros((b, 1))
    t_hat = ad.concat([Tensor(zero_col), t_src[:, :-1]], axis=1)
    p_hat = ad.row_softmax(ad.concat(
        [Tensor(np.zeros((b, 1, logits_src.shape[-1]))), logits_src[:, :-1, :]], axis=1))
    valid = batch.pad_mask.copy()
    valid[:, 0] = False
    return BatchPredictions(t_hat, p_hat, valid)


def time_loss(preds: BatchPredictions, batch: Batch) -> Tensor:
    """Sum of squared timestamp errors over predicted events."""
    err = (Tensor(batch.times) - preds.t_hat) * preds.valid.astype(np.float64)
    return ad.tsum(err * err)


def type_loss(preds: BatchPredictions, batch: Batch) -> Tensor:
    """Cross-entropy against the true types, log clamped at 1e-12."""
    ty = np.maximum(batch.type_ids - 1, 0)[..., None]
    p_true = ad.reshape(ad.gather(preds.p_hat, ty, -1), batch.times.shape)
    logp = ad.log(ad.clamp_min(p_true, LOG_CLAMP))
    return -ad.tsum(logp * preds.valid.astype(np.float64))


def total_objective(loglik: Tensor, l_type: Tensor, l_time: Tensor,
                    alpha_type: float, alpha_time: float) -> Tensor:
    if alpha_type < 0 or alpha_time < 0:
        raise ValueError("loss weights must be non-negative")
    return -loglik + alpha_type * l_type + alpha_time * l_time


@dataclass
class Metrics:
    per_event_ll: float
    accuracy: float    # percent
    rmse: float        # time units
    act_mean_iters: float = 0.0

    def to_dict(self) -> dict:
        return {"per_event_ll": self.per_event_ll, "accuracy": self.accuracy,
                "rmse": self.rmse, "act_mean_iters": self.act_mean_iters}


@dataclass
class PredictionAccumulator:
    """Streams batch outputs into dataset-level metrics."""

    total_ll: float = 0.0
    n_scored: int = 0
    n_correct: int = 0
    sq_err: float = 0.0

    def add_batch(self, preds: BatchPredictions, batch: Batch,
                  batch_ll: float) -> None:
        v = preds.valid
        self.total_ll += batch_ll
        self.n_scored += int(v.sum())
        self.n_correct += int((preds.c_hat()[v] == batch.type_ids[v]).sum())
        diff = (preds.t_hat.data - batch.times)[v]
        self.sq_err += float((diff * diff).sum())

    def metrics(self, act_mean_iters: float = 0.0) -> Metrics:
        if self.n_scored == 0:
            raise ValueError("no predicted events (all sequences have length 1)")
        return Metrics(
            per_event_ll=self.total_ll / self.n_scored,
            accuracy=100.0 * self.n_correct / self.n_scored,
            rmse=float(np.sqrt(self.sq_err / self.n_scored)),
            act_mean_iters=act_mean_iters,
        )


def prediction_records(preds: BatchPredictions, batch: Batch) -> list[dict]:
    """Export rows: {"seq": dataset index, "i": 1-based event index,
    "t_hat": ..., "c_hat": ..., "p_hat": [...]}, predicted events only."""
    rows = []
    c_hat = preds.c_hat()
    for b in range(batch.times.shape[0]):
        for i in range(1, int(batch.lengths[b])):
            rows.append({
                "seq": int(batch.seq_ids[b]),
                "i": i + 1,
                "t_hat": float(preds.t_hat.data[b, i]),
                "c_hat": int(c_hat[b, i]),
                "p_hat": [float(x) for x in preds.p_hat.data[b, i]],
            })
    return rows
