"""Continuous conditional intensity and point-process log-likelihood.

For a query time t in the interval (t_i, t_(i+1)] the per-type intensity is

    lambda_c(t) = softplus_beta(b_c + alpha_c * (t - t_i) / t_i + w_c . h(t_i))

where h(t_i) is the hidden row of the event opening the interval, so the
intensity after an event never sees the future.  For the same reason the
event term of the log-likelihood scores event i with the hidden row of event
i-1, the first event is never scored, and the compensator integrates from
t_1 to t_(I_n).  Intervals that open at t=0 drop the slope term (the
normalized slope is singular there); this is logged once.

Two compensator estimators are provided: Monte Carlo over per-interval
uniform samples (unbiased; samples are held fixed so the estimate is
differentiable in the model parameters) and the trapezoidal rule over the
interval endpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Batch, EventSequence
from .seeding import derive_rng

log = logging.getLogger(__name__)

MC_EVAL_CHUNK = 1000

_warned_zero_start = False


def _warn_zero_start():
    global _warned_zero_start
    if not _warned_zero_start:
        log.warning("interval starting at t=0: slope term of the intensity "
                    "is defined as 0 there")
        _warned_zero_start = True


def _slope_ratio(t, start, relevant=None):
    """(t - start) / start elementwise, 0 where start == 0.

    ``relevant`` masks which entries are real intervals (for the one-time
    zero-start warning); irrelevant entries never warn.
    """
    t = np.asarray(t, dtype=np.float64)
    start = np.asarray(start, dtype=np.float64)
    ok = start > 0.0
    if relevant is None:
        relevant = np.ones_like(ok)
    if np.any(~ok & np.asarray(relevant, dtype=bool)):
        _warn_zero_start()
    return np.where(ok, (t - start) / np.where(ok, start, 1.0), 0.0)


@dataclass
class IntensityView:
    """The intensity head's tensors: per-type background b, slope alpha,
    history weights w (C x D), and the shared softplus softness beta."""

    b: Tensor
    alpha: Tensor
    w: Tensor
    beta: float

    @classmethod
    def from_model(cls, params) -> "IntensityView":
        t = params.tensors
        return cls(t["intensity.b"], t["intensity.alpha"], t["intensity.w"],
                   params.config.softplus_beta)

    @property
    def num_types(self) -> int:
        return self.b.shape[0]


@dataclass
class IntensityQuery:
    """A query time inside one inter-event interval.

    ``interval_start`` is the timestamp of the event opening the interval and
    ``hidden`` that event's hidden row (shape (dim,)).  ``t`` may equal
    ``interval_start`` to evaluate the right limit at the interval opening.
    """

    t: float
    interval_start: float
    hidden: Tensor

    def __post_init__(self):
        if self.t < self.interval_start:
            raise ValueError("query time precedes its interval")


def type_intensity(query: IntensityQuery, type_id: int, view: IntensityView) -> Tensor:
    """lambda_c at the query time; strictly positive scalar."""
    c = type_id - 1
    if not 0 <= c < view.num_types:
        raise IndexError(f"type_id {type_id} out of range")
    ratio = float(_slope_ratio(query.t, query.interval_start))
    hist = ad.tsum(view.w[c] * query.hidden)
    return ad.softplus(view.b[c] + view.alpha[c] * ratio + hist, view.beta)


def total_intensity(query: IntensityQuery, view: IntensityView) -> Tensor:
    """Sum of the per-type intensities at the query time."""
    ratio = float(_slope_ratio(query.t, query.interval_start))
    hist = ad.reshape(view.w @ ad.reshape(query.hidden, (-1, 1)), (-1,))
    return ad.tsum(ad.softplus(view.b + view.alpha * ratio + hist, view.beta))


def _interval_rows(seq: EventSequence, hidden: Tensor):
    if len(seq) < 2:
        return None
    times = seq.times()
    return times[:-1], times[1:], hidden[:-1, :]


def compensator_mc(seq: EventSequence, hidden: Tensor, view: IntensityView,
                   num_samples: int, rng: np.random.Generator) -> Tensor:
    """Monte Carlo estimate of the integrated total intensity over
    (t_1, t_(I_n)], one uniform sample block per interval."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rows = _interval_rows(seq, hidden)
    if rows is None:
        return Tensor(0.0)
    left, right, h_left = rows
    j = left.size
    delta = right - left
    frac = rng.random((j, num_samples))
    ratio = _slope_ratio(left[:, None] + frac * delta[:, None], left[:, None])
    hw = h_left @ ad.transpose(view.w)                      # (J, C)
    logits = (ad.reshape(view.b, (1, 1, -1))
              + ad.reshape(view.alpha, (1, 1, -1)) * ratio[:, :, None]
              + ad.reshape(hw, (j, 1, -1)))
    lam = ad.tsum(ad.softplus(logits, view.beta), axis=-1)  # (J, M)
    return ad.tsum(ad.tmean(lam, axis=-1) * delta)


def compensator_trapezoid(seq: EventSequence, hidden: Tensor,
                          view: IntensityView) -> Tensor:
    """Trapezoidal estimate: both endpoint intensities of interval i use the
    hidden row of the event opening it."""
    rows = _interval_rows(seq, hidden)
    if rows is None:
        return Tensor(0.0)
    left, right, h_left = rows
    delta = right - left
    ratio_close = _slope_ratio(right, left)[:, None]
    hw = h_left @ ad.transpose(view.w)
    lam_open = ad.tsum(ad.softplus(view.b + hw, view.beta), axis=-1)
    lam_close = ad.tsum(
        ad.softplus(view.b + view.alpha * ratio_close + hw, view.beta), axis=-1)
    return ad.tsum(0.5 * delta * (lam_open + lam_close))


def sequence_loglik(seq: EventSequence, hidden: Tensor, view: IntensityView,
                    estimator: str = "mc", num_samples: int = 100,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Log-likelihood of one sequence: sum over events i >= 2 of
    log lambda_(c_i)(t_i-) minus the estimated compensator.

    Length-1 sequences score 0 (no predicted events, empty integral).
    """
    if len(seq) < 2:
        return Tensor(0.0)
    times = seq.times()
    sel = seq.type_ids()[1:] - 1                            # (J,)
    ratio = _slope_ratio(times[1:], times[:-1])
    hw = hidden[:-1, :] @ ad.transpose(view.w)              # (J, C)
    hw_e = ad.reshape(ad.gather(hw, sel[:, None], -1), (-1,))
    lam = ad.softplus(view.b[sel] + view.alpha[sel] * ratio + hw_e, view.beta)
    if np.any(lam.data <= 0.0):
        raise NonFiniteError(
            f"intensity underflow at event {int(np.argmin(lam.data)) + 2}")
    event_term = ad.tsum(ad.log(lam))
    if estimator == "mc":
        comp = compensator_mc(seq, hidden, view, num_samples,
                              rng if rng is not None else derive_rng(0))
    elif estimator == "trapezoid":
        comp = compensator_trapezoid(seq, hidden, view)
    else:
        raise ValueError(f"unknown estimator '{estimator}'")
    return event_term - comp


# -- vectorized batch path --------------------------------------------------


def batch_log_likelihood(params, batch: Batch, hidden: Tensor,
                         estimator: str = "mc", num_samples: int = 100,
                         mc_seed: int | tuple = 0) -> tuple[Tensor, np.ndarray]:
    """Total log-likelihood of a batch (scalar Tensor) plus the per-sequence
    values as a plain array.

    Monte Carlo sample blocks are keyed by (mc_seed, sequence id), so the
    estimate for a sequence does not depend on how sequences were batched.
    """
    view = IntensityView.from_model(params)
    b, i_max = batch.times.shape
    if i_max < 2:
        return Tensor(0.0), np.zeros(b)

    valid = batch.pad_mask[:, 1:]                           # (B, J) scored events
    valid_f = valid.astype(np.float64)
    left = batch.times[:, :-1]
    right = batch.times[:, 1:]
    delta = np.where(valid, right - left, 0.0)
    ratio_close = np.where(valid, _slope_ratio(right, left, relevant=valid), 0.0)

    hw = hidden[:, :-1, :] @ ad.transpose(view.w)           # (B, J, C)
    ty = np.maximum(batch.type_ids[:, 1:] - 1, 0)           # PAD rows -> 0, masked

    hw_e = ad.reshape(ad.gather(hw, ty[..., None], -1), (b, i_max - 1))
    lam_event = ad.softplus(view.b[ty] + view.alpha[ty] * ratio_close + hw_e,
                            view.beta)
    if np.any(lam_event.data[valid] <= 0.0):
        masked = np.where(valid, lam_event.data, np.inf)
        bi, ev = np.unravel_index(int(np.argmin(masked)), masked.shape)
        raise NonFiniteError(
            f"intensity underflow at sequence {batch.seq_ids[bi]}, event {ev + 2}")
    # pads are remapped to an intensity of exactly 1 so their log term is 0
    event_term = ad.tsum(ad.log(lam_event * valid_f + (1.0 - valid_f)), axis=-1)

    if estimator == "mc":
        key = mc_seed if isinstance(mc_seed, tuple) else (mc_seed,)
        frac = np.empty((b, i_max - 1, num_samples))
        for row, sid in enumerate(batch.seq_ids):
            frac[row] = derive_rng(*key, int(sid)).random((i_max - 1, num_samples))

        def mc_interval_sums(fr):
            ratio_u = _slope_ratio(left[..., None] + fr * delta[..., None],
                                   np.broadcast_to(left[..., None], fr.shape),
                                   relevant=np.broadcast_to(valid[..., None], fr.shape))
            logits = (ad.reshape(view.b, (1, 1, 1, -1))
                      + ad.reshape(view.alpha, (1, 1, 1, -1)) * ratio_u[..., None]
                      + ad.reshape(hw, (b, i_max - 1, 1, -1)))
            lam = ad.tsum(ad.softplus(logits, view.beta), axis=-1)  # (B, J, m)
            return ad.tsum(lam, axis=-1)

        if ad.grad_enabled() or num_samples <= MC_EVAL_CHUNK:
            sums = mc_interval_sums(frac)
        else:
            # bound peak memory during large-sample evaluation
            sums = mc_interval_sums(frac[..., :MC_EVAL_CHUNK])
            for lo in range(MC_EVAL_CHUNK, num_samples, MC_EVAL_CHUNK):
                sums = sums + mc_interval_sums(frac[..., lo:lo + MC_EVAL_CHUNK])
        comp = ad.tsum((sums / float(num_samples)) * delta, axis=-1)
    elif estimator == "trapezoid":
        lam_open = ad.tsum(ad.softplus(
            ad.reshape(view.b, (1, 1, -1)) + hw, view.beta), axis=-1)
        lam_close = ad.tsum(ad.softplus(
            ad.reshape(view.b, (1, 1, -1))
            + ad.reshape(view.alpha, (1, 1, -1)) * ratio_close[..., None]
            + hw, view.beta), axis=-1)
        comp = ad.tsum(0.5 * delta * (lam_open + lam_close), axis=-1)
    else:
        raise ValueError(f"unknown estimator '{estimator}'")

    row_ll = event_term - comp                              # (B,)
    return ad.tsum(row_ll), row_ll.data.copy()
