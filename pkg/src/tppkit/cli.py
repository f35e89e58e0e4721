"""Command-line interface.

Subcommands: generate, train, evaluate, predict, count-params, grad-check.
Logs go to stderr; results go to files (plus short summaries on stdout for
the two inspection commands).  On failure every command prints exactly one
machine-readable line to stderr:

    {"error": "<category>", "message": "<detail>"}

and exits nonzero (2 for bad inputs/config, 1 for a failed check).
All randomness is governed by the relevant --seed / config seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

import numpy as np

from . import autodiff as ad
from .autodiff import gradient_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataError, Dataset, load_dataset, make_batches,
                   save_dataset)
from .encoder import ConfigError, ModelConfig
from .predict import predict_next, prediction_records
from .recurrence import build_model, count_params, forward, parameter_breakdown
from .seeding import derive_rng
from .synthgen import GenSpec, HawkesParams, simulate
from .train import TrainConfig, TrainError, evaluate, sequence_log_likelihoods, train
from .train import batch_objective

log = logging.getLogger("tppkit")

PATH_KEYS = ("train_data", "dev_data")


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = 2):
        super().__init__(message)
        self.category = category
        self.code = code


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _field_parsers() -> dict:
    parsers: dict[str, tuple[str, object]] = {}
    for f in fields(ModelConfig):
        default = getattr(ModelConfig(), f.name)
        kind = bool if isinstance(default, bool) else type(default)
        parsers[f.name] = ("model", kind)
    for f in fields(TrainConfig):
        default = getattr(TrainConfig(), f.name)
        kind = str if f.name == "checkpoint_path" else (
            bool if isinstance(default, bool) else type(default))
        parsers[f.name] = ("train", kind)
    for key in PATH_KEYS:
        parsers[key] = ("path", str)
    return parsers


def read_config_file(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """Parse the flat `key = value` config file; unknown keys are rejected."""
    parsers = _field_parsers()
    model_kw: dict = {}
    train_kw: dict = {}
    paths: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise CliError("config", f"{path}: {err.strerror}")
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in parsers:
            raise CliError("config", f"{path}:{no}: unknown key '{key}'")
        group, kind = parsers[key]
        try:
            parsed = _parse_bool(value) if kind is bool else kind(value)
        except ValueError:
            raise CliError("config",
                           f"{path}:{no}: bad value for '{key}': {value!r}")
        {"model": model_kw, "train": train_kw, "path": paths}[group][key] = parsed
    try:
        return (ModelConfig(**model_kw).validate(),
                TrainConfig(**train_kw).validate(), paths)
    except (ConfigError, ValueError) as err:
        raise CliError("config", str(err))


def _load_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    if getattr(args, "config", None):
        model_cfg, train_cfg, paths = read_config_file(args.config)
    else:
        model_cfg, train_cfg, paths = ModelConfig(), TrainConfig(), {}
    return model_cfg, train_cfg, paths


def _apply_ablation_flags(model_cfg: ModelConfig, args) -> ModelConfig:
    if getattr(args, "no_act", False):
        model_cfg.act_enabled = False
    if getattr(args, "iters", None) is not None:
        model_cfg.max_iters = args.iters
    if getattr(args, "no_cnn_ffn", False):
        model_cfg.use_cnn_ffn = False
    if getattr(args, "no_postprocess_rnn", False):
        model_cfg.rnn_dim = 0
    if getattr(args, "stacked_layers", False):
        model_cfg.layer_sharing = "stacked"
        model_cfg.act_enabled = False
    try:
        return model_cfg.validate()
    except ConfigError as err:
        raise CliError("config", str(err))


def _load_data(path, num_types=None) -> Dataset:
    try:
        return load_dataset(path, num_types)
    except FileNotFoundError:
        raise CliError("data", f"{path}: no such file")
    except DataError as err:
        raise CliError("data", f"{path}: {err}")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands -------------------------------------------------------------


def _default_excitation(num_types: int) -> np.ndarray:
    off = 0.2 / max(num_types - 1, 1)
    a = np.full((num_types, num_types), off)
    np.fill_diagonal(a, 0.4)
    return a


def cmd_generate(args) -> int:
    c = args.num_types
    mu = (np.array([float(x) for x in args.mu.split(",")])
          if args.mu else np.full(c, 0.2))
    if args.a:
        rows = [[float(x) for x in row.split(",")] for row in args.a.split(";")]
        a = np.array(rows)
    else:
        a = _default_excitation(c)
    try:
        params = HawkesParams(mu, a, args.decay).validate()
        if params.num_types != c:
            raise ValueError(f"--mu has {params.num_types} entries but "
                             f"--num-types is {c}")
        spec = GenSpec(args.n, args.horizon, args.seed).validate()
    except ValueError as err:
        raise CliError("config", str(err))
    dataset = simulate(params, spec)
    save_dataset(args.out, dataset)
    sidecar = {"mu": params.mu.tolist(), "a": params.a.tolist(),
               "decay": params.decay, "seed": spec.seed,
               "horizon": spec.horizon, "num_sequences": spec.num_sequences}
    _write_json(str(args.out) + ".params.json", sidecar)
    log.info("wrote %d sequences (%d events) to %s", len(dataset),
             dataset.total_events(), args.out)
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, paths = _load_configs(args)
    model_cfg = _apply_ablation_flags(model_cfg, args)
    train_path = args.train or paths.get("train_data")
    if not train_path:
        raise CliError("config", "no training data (use --train or train_data=)")
    dev_path = args.dev or paths.get("dev_data")
    train_set = _load_data(train_path)
    dev_set = _load_data(dev_path, train_set.num_types) if dev_path else None
    train_cfg.checkpoint_path = args.out_checkpoint

    params = build_model(model_cfg, train_set.num_types, seed=train_cfg.seed)
    try:
        _, report = train(params, train_set, dev_set, train_cfg)
    except TrainError as err:
        raise CliError("runtime", str(err), code=1)
    report_path = args.report or (str(args.out_checkpoint) + ".report.json")
    _write_json(report_path, report.to_dict())
    log.info("checkpoint: %s  report: %s", args.out_checkpoint, report_path)
    return 0


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("checkpoint", f"{path}: no such file")
    except CheckpointError as err:
        raise CliError("checkpoint", str(err))


def cmd_evaluate(args) -> int:
    params = _load_model(args.checkpoint)
    dataset = _load_data(args.data, params.num_types)
    metrics = evaluate(params, dataset)
    doc = metrics.to_dict()
    doc["sequence_ll"] = sequence_log_likelihoods(params, dataset).tolist()
    _write_json(args.out_metrics, doc)
    log.info("per_event_ll=%.4f accuracy=%.2f rmse=%.4f",
             metrics.per_event_ll, metrics.accuracy, metrics.rmse)
    return 0


def cmd_predict(args) -> int:
    params = _load_model(args.checkpoint)
    dataset = _load_data(args.data, params.num_types)
    with open(args.out, "w", encoding="utf-8") as fh, ad.no_grad():
        for batch in make_batches(dataset, 16):
            hidden, _ = forward(params, batch)
            for row in prediction_records(predict_next(params, batch, hidden), batch):
                fh.write(json.dumps(row) + "\n")
    log.info("wrote predictions to %s", args.out)
    return 0


def cmd_count_params(args) -> int:
    model_cfg, _, _ = _load_configs(args)
    model_cfg = _apply_ablation_flags(model_cfg, args)
    try:
        params = build_model(model_cfg, args.num_types)
    except ConfigError as err:
        raise CliError("config", str(err))
    total = count_params(params)
    rows = parameter_breakdown(params)
    for name, shape, n in rows:
        print(f"{name:28s} {str(shape):16s} {n}")
    print(f"{'total':28s} {'':16s} {total}")
    if args.out:
        _write_json(args.out, {"total": total, "tensors": [
            {"name": n_, "shape": list(s), "count": c} for n_, s, c in rows]})
    return 0


def _grad_check_batch(num_types: int, seed: int, num_sequences: int = 2,
                      length: int = 6):
    """Small deterministic random dataset for gradient checking."""
    rng = derive_rng(seed)
    seqs = []
    for _ in range(num_sequences):
        times = np.cumsum(rng.uniform(0.2, 1.5, size=length))
        types = rng.integers(1, num_types + 1, size=length)
        seqs.append({"t": times, "c": types})
    from .data import Event, EventSequence
    ds = Dataset([EventSequence([Event(float(t), int(c))
                                 for t, c in zip(s["t"], s["c"])])
                  for s in seqs], num_types)
    return make_batches(ds, num_sequences)[0]


def cmd_grad_check(args) -> int:
    model_cfg, train_cfg, _ = _load_configs(args)
    model_cfg = _apply_ablation_flags(model_cfg, args)
    model_cfg.dropout = 0.0  # the checked objective must be deterministic
    train_cfg.estimator = "mc"
    train_cfg.mc_samples = args.mc_samples
    train_cfg.alpha_type, train_cfg.alpha_time = 1.0, 0.01
    params = build_model(model_cfg, args.num_types, seed=args.seed)
    batch = _grad_check_batch(args.num_types, args.seed)

    def build_loss():
        objective, *_ = batch_objective(params, batch, train_cfg,
                                        mc_seed=(args.seed,))
        return objective

    report = gradient_check(build_loss, params.trainable(), h=1e-5)
    print(report.summary())
    if args.out:
        _write_json(args.out, {
            "max_rel_err": report.max_rel_err,
            "max_small_abs_err": report.max_small_abs_err,
            "worst_param": report.worst_param,
            "per_param": report.per_param,
        })
    if not report.ok(rel_tol=args.tolerance):
        raise CliError("gradcheck",
                       f"gradient check failed: {report.summary()}", code=1)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="tppkit",
        description="Neural temporal point processes: simulate, train, "
                    "evaluate, predict.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", formatter_class=fmt,
                       help="simulate an exponential-kernel Hawkes dataset")
    p.add_argument("--out", required=True, help="output JSON Lines path")
    p.add_argument("--num-types", type=int, default=2, help="number of event types")
    p.add_argument("--mu", default=None,
                   help="comma-separated background rates; unset means 0.2 per type")
    p.add_argument("--a", default=None,
                   help="excitation matrix rows 'r1c1,r1c2;r2c1,r2c2'; unset "
                        "means 0.4 diagonal with 0.2 spread off-diagonal")
    p.add_argument("--decay", type=float, default=1.0, help="kernel decay rate")
    p.add_argument("--n", type=int, default=400, help="number of sequences")
    p.add_argument("--horizon", type=float, default=50.0, help="time horizon")
    p.add_argument("--seed", type=int, default=0, help="simulation seed")
    p.set_defaults(func=cmd_generate)

    def add_ablation_flags(q):
        q.add_argument("--no-act", action="store_true",
                       help="fixed-count recursion instead of adaptive halting")
        q.add_argument("--iters", type=int, default=None,
                       help="override the iteration cap")
        q.add_argument("--no-cnn-ffn", action="store_true",
                       help="plain two-layer feed-forward (no conv/pool)")
        q.add_argument("--no-postprocess-rnn", action="store_true",
                       help="disable the recurrent postprocessor")
        q.add_argument("--stacked-layers", action="store_true",
                       help="distinct stacked layers (implies --no-act)")

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model and save the dev-best checkpoint")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--train", default=None, help="training data (JSON Lines)")
    p.add_argument("--dev", default=None, help="dev data for model selection")
    p.add_argument("--out-checkpoint", required=True, help="checkpoint path")
    p.add_argument("--report", default=None,
                   help="run report path (default: <checkpoint>.report.json)")
    add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="compute metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--data", required=True, help="dataset to score (JSON Lines)")
    p.add_argument("--out-metrics", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", formatter_class=fmt,
                       help="write next-event predictions as JSON Lines")
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--data", required=True, help="dataset to score (JSON Lines)")
    p.add_argument("--out", required=True, help="predictions JSON Lines path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count-params", formatter_class=fmt,
                       help="parameter count and per-tensor breakdown")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--num-types", type=int, required=True, help="number of event types")
    p.add_argument("--out", default=None, help="optional JSON output path")
    add_ablation_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", formatter_class=fmt,
                       help="compare analytic gradients of the full objective "
                            "against central finite differences")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=0, help="data/init seed")
    p.add_argument("--num-types", type=int, default=3,
                   help="event types in the check model/data")
    p.add_argument("--mc-samples", type=int, default=20,
                   help="Monte Carlo samples per interval in the objective")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max relative error allowed")
    p.add_argument("--out", default=None, help="optional JSON report path")
    add_ablation_flags(p)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(json.dumps({"error": err.category, "message": str(err)}),
              file=sys.stderr)
        return err.code
    except (DataError, ConfigError, CheckpointError) as err:
        print(json.dumps({"error": "input", "message": str(err)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
