"""tppkit: neural temporal point processes at desk scale.

An adaptive-recurrence attention encoder over asynchronous event sequences,
a continuous conditional intensity with Monte Carlo / trapezoidal
compensators, maximum-likelihood training with next-event prediction heads,
and an exponential-kernel Hawkes simulator that doubles as a ground-truth
oracle.
"""

from .autodiff import Tensor, gradient_check, gradients, no_grad
from .data import (Batch, Dataset, Event, EventSequence, load_dataset,
                   make_batches, save_dataset, split_dataset)
from .encoder import ModelConfig, temporal_encoding
from .intensity import (IntensityQuery, IntensityView, batch_log_likelihood,
                        compensator_mc, compensator_trapezoid, sequence_loglik,
                        total_intensity, type_intensity)
from .optim import AdamState, adam_step, clip_gradient_norm
from .predict import predict_next, time_loss, total_objective, type_loss
from .recurrence import (ActStats, ModelParams, build_model, count_params,
                         forward, postprocess, run_act, run_pure)
from .synthgen import (GenSpec, HawkesParams, classical_intensity, exact_loglik,
                       oracle_per_event_ll, rescaled_intervals, simulate)
from .checkpoint import load_checkpoint, save_checkpoint
from .train import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"
