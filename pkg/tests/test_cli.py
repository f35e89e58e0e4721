"""Command-line interface: end-to-end flows, determinism, errors, help."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from tppkit.cli import build_parser, main

GOLDEN = Path(__file__).parent / "golden"

TINY_CONFIG = """\
# desk-scale model for CLI tests
dim = 8
ffn_dim = 16
key_dim = 4
value_dim = 4
heads = 2
rnn_dim = 8
max_iters = 2
dropout = 0.1

epochs = 2
batch_size = 8
seed = 0
mc_samples = 10
lr = 0.001
early_stop_patience = 0
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def tiny_data(tmp_path):
    out = tmp_path / "data.jsonl"
    assert run("generate", "--out", out, "--n", "30", "--horizon", "12",
               "--seed", "5") == 0
    return out


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text(TINY_CONFIG)
    return path


class TestHelpGolden:
    @pytest.mark.parametrize("name", ["main", "generate", "train", "evaluate",
                                      "predict", "count_params", "grad_check"])
    def test_help_matches_golden(self, name, monkeypatch):
        monkeypatch.setenv("COLUMNS", "100")
        parser = build_parser()
        if name == "main":
            text = parser.format_help()
        else:
            import argparse
            subs = next(a for a in parser._subparsers._group_actions
                        if isinstance(a, argparse._SubParsersAction))
            text = subs.choices[name.replace("_", "-")].format_help()
        assert text == (GOLDEN / f"help_{name}.txt").read_text()

    def test_every_flag_shows_its_default(self, monkeypatch):
        monkeypatch.setenv("COLUMNS", "100")
        parser = build_parser()
        import argparse
        subs = next(a for a in parser._subparsers._group_actions
                    if isinstance(a, argparse._SubParsersAction))
        for sub in subs.choices.values():
            text = sub.format_help()
            optional = 0
            for action in sub._actions:
                if action.option_strings and action.option_strings[0] != "-h":
                    assert action.option_strings[0] in text
                    optional += not action.required
            assert text.count("(default:") >= optional, sub.prog


class TestGenerate:
    def test_writes_dataset_and_sidecar(self, tiny_data):
        lines = tiny_data.read_text().splitlines()
        assert json.loads(lines[0]) == {"num_types": 2}
        assert len(lines) == 31
        sidecar = json.loads(Path(str(tiny_data) + ".params.json").read_text())
        assert sidecar["mu"] == [0.2, 0.2]
        assert sidecar["a"] == [[0.4, 0.2], [0.2, 0.4]]
        assert sidecar["seed"] == 5

    def test_idempotent(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run("generate", "--out", a, "--n", "10", "--seed", "3")
        run("generate", "--out", b, "--n", "10", "--seed", "3")
        assert a.read_bytes() == b.read_bytes()

    def test_explicit_parameters(self, tmp_path):
        out = tmp_path / "c.jsonl"
        code = run("generate", "--out", out, "--num-types", "3",
                   "--mu", "0.1,0.2,0.3", "--a", "0.2,0,0;0,0.2,0;0,0,0.2",
                   "--decay", "2.0", "--n", "5", "--seed", "1")
        assert code == 0
        assert json.loads(out.read_text().splitlines()[0]) == {"num_types": 3}

    def test_nonstationary_rejected(self, tmp_path, capsys):
        code = run("generate", "--out", tmp_path / "x.jsonl", "--a", "2.0;0.0",
                   "--n", "2")
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "config"


class TestTrainEvaluatePredict:
    def test_full_flow(self, tmp_path, tiny_data, config_file):
        ckpt = tmp_path / "model.ckpt"
        assert run("train", "--config", config_file, "--train", tiny_data,
                   "--dev", tiny_data, "--out-checkpoint", ckpt) == 0
        assert ckpt.exists()
        report = json.loads(Path(str(ckpt) + ".report.json").read_text())
        assert len(report["epochs"]) == 2

        metrics_path = tmp_path / "metrics.json"
        assert run("evaluate", "--checkpoint", ckpt, "--data", tiny_data,
                   "--out-metrics", metrics_path) == 0
        metrics = json.loads(metrics_path.read_text())
        assert {"per_event_ll", "accuracy", "rmse",
                "act_mean_iters"} <= set(metrics)
        assert len(metrics["sequence_ll"]) == 30

        pred_path = tmp_path / "preds.jsonl"
        assert run("predict", "--checkpoint", ckpt, "--data", tiny_data,
                   "--out", pred_path) == 0
        rows = [json.loads(l) for l in pred_path.read_text().splitlines()]
        assert rows and set(rows[0]) == {"seq", "i", "t_hat", "c_hat", "p_hat"}

    def test_train_and_artifacts_idempotent(self, tmp_path, tiny_data, config_file):
        outs = []
        for tag in ("a", "b"):
            ckpt = tmp_path / f"{tag}.ckpt"
            metrics = tmp_path / f"{tag}.metrics.json"
            preds = tmp_path / f"{tag}.preds.jsonl"
            run("train", "--config", config_file, "--train", tiny_data,
                "--out-checkpoint", ckpt)
            run("evaluate", "--checkpoint", ckpt, "--data", tiny_data,
                "--out-metrics", metrics)
            run("predict", "--checkpoint", ckpt, "--data", tiny_data,
                "--out", preds)
            outs.append((ckpt.read_bytes(), metrics.read_bytes(), preds.read_bytes()))
        assert outs[0] == outs[1]

    def test_ablation_flags_override_config(self, tmp_path, tiny_data, config_file):
        ckpt = tmp_path / "ablate.ckpt"
        assert run("train", "--config", config_file, "--train", tiny_data,
                   "--out-checkpoint", ckpt, "--no-act", "--iters", "1",
                   "--no-cnn-ffn", "--no-postprocess-rnn") == 0
        doc = json.loads(ckpt.read_text())
        mc = doc["model_config"]
        assert (mc["act_enabled"], mc["max_iters"], mc["use_cnn_ffn"],
                mc["rnn_dim"]) == (False, 1, False, 0)

    def test_missing_file_is_machine_readable_error(self, tmp_path, capsys):
        code = run("evaluate", "--checkpoint", tmp_path / "nope.ckpt",
                   "--data", tmp_path / "nope.jsonl",
                   "--out-metrics", tmp_path / "m.json")
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "checkpoint" and "message" in err


class TestConfigFile:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("dim = 8\nbogus_key = 1\n")
        code = run("count-params", "--config", cfg, "--num-types", "2")
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "bogus_key" in err["message"]

    def test_bad_value_reports_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("dim = eight\n")
        assert run("count-params", "--config", cfg, "--num-types", "2") == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert ":1:" in err["message"]

    def test_invalid_combination_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("act_enabled = true\nlayer_sharing = stacked\n")
        assert run("count-params", "--config", cfg, "--num-types", "2") == 2


class TestCountParams:
    def test_shared_smaller_than_stacked(self, tmp_path, capsys, config_file):
        assert run("count-params", "--config", config_file, "--num-types", "3") == 0
        shared_total = int(capsys.readouterr().out.strip().splitlines()[-1].split()[-1])
        assert run("count-params", "--config", config_file, "--num-types", "3",
                   "--stacked-layers") == 0
        stacked_total = int(capsys.readouterr().out.strip().splitlines()[-1].split()[-1])
        assert shared_total < stacked_total

    def test_json_output(self, tmp_path, config_file):
        out = tmp_path / "counts.json"
        run("count-params", "--config", config_file, "--num-types", "3",
            "--out", out)
        doc = json.loads(out.read_text())
        assert doc["total"] == sum(t["count"] for t in doc["tensors"])


class TestGradCheck:
    def test_default_passes_and_reports(self, tmp_path, capsys):
        out = tmp_path / "grad.json"
        cfg = tmp_path / "small.cfg"
        cfg.write_text("dim = 8\nffn_dim = 16\nkey_dim = 4\nvalue_dim = 4\n"
                       "heads = 2\nrnn_dim = 8\n")
        assert run("grad-check", "--config", cfg, "--seed", "0",
                   "--out", out) == 0
        line = capsys.readouterr().out.strip()
        assert "max_rel_err" in line
        doc = json.loads(out.read_text())
        assert doc["max_rel_err"] < 1e-4

    def test_failure_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "small.cfg"
        cfg.write_text("dim = 8\nffn_dim = 16\nkey_dim = 4\nvalue_dim = 4\n"
                       "heads = 2\nrnn_dim = 0\n")
        code = run("grad-check", "--config", cfg, "--tolerance", "1e-12")
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "gradcheck"
