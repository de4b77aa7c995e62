"""Tests for the run-configuration document and the command line."""

import json

import numpy as np
import pytest

from protoflow import cli, config, episodes, gradnet, metatrain
from protoflow.errors import ConfigError


# -- run configuration -------------------------------------------------------------


def test_default_document_resolves_and_round_trips():
    run_cfg = config.RunConfig.from_dict({})
    assert set(run_cfg.document) == {"episodes", "gradnet", "solver",
                                     "train", "eval"}
    again = config.RunConfig.from_json(run_cfg.to_json())
    assert again.document == run_cfg.document
    assert again.to_json() == run_cfg.to_json()


def test_partial_document_overrides_only_named_keys():
    run_cfg = config.RunConfig.from_dict({"train": {"epochs": 3}})
    assert run_cfg.document["train"]["epochs"] == 3
    assert run_cfg.document["train"]["learning_rate"] == 1e-4
    assert run_cfg.train_config().epochs == 3


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError):
        config.RunConfig.from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        config.RunConfig.from_dict({"train": {"momentum": 0.9}})
    with pytest.raises(ConfigError):
        config.RunConfig.from_json("not json at all {")
    with pytest.raises(ConfigError):
        config.RunConfig.from_dict({"train": {"learning_rate": -1.0}})
    with pytest.raises(ConfigError):
        config.RunConfig.from_dict({"eval": {"method": "magic"}})


def test_typed_views_mirror_document():
    run_cfg = config.RunConfig.from_dict(
        {"solver": {"method": "euler", "num_steps": 4},
         "gradnet": {"feature_dim": 6, "num_modules": 2}})
    assert run_cfg.solve_config().method == "euler"
    assert run_cfg.gradnet_config().feature_dim == 6
    assert run_cfg.train_config().solver.num_steps == 4
    assert run_cfg.eval_protocol().episodes == 600


def test_paper_preset_carries_published_schedule():
    doc = config.merge_documents({}, config.PAPER_PRESET)
    run_cfg = config.RunConfig.from_dict(doc)
    train = run_cfg.train_config()
    assert train.epochs == 50
    assert train.learning_rate == 1e-4
    assert train.weight_decay == 5e-4
    assert train.lr_decay_factor == 0.1
    assert train.lr_decay_epochs == (15, 30, 40)
    assert run_cfg.solve_config().method == "rk4"


# -- command line ------------------------------------------------------------------


TINY_CONFIG = {
    "gradnet": {"num_modules": 1, "hidden_dim": 8, "embed_dim": 8,
                "attention_heads": 1, "head_dim": 4},
    "solver": {"method": "euler", "integral_time": 2.0, "num_steps": 2},
    "train": {"epochs": 2, "episodes_per_epoch": 3, "n_way": 3,
              "k_shot": 1, "m_query": 3, "val_episodes": 2},
}


@pytest.fixture(scope="module")
def datafile(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.fv"
    ds = episodes.synth_dataset(6, 5, 12, noise_sigma=0.3, seed=4)
    episodes.save_features(ds, path)
    return str(path)


@pytest.fixture(scope="module")
def configfile(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, datafile, configfile):
    path = str(tmp_path_factory.mktemp("ck") / "tiny.ckpt")
    rc = cli.main(["train", "--data", datafile, "--config", configfile,
                   "--out-checkpoint", path])
    assert rc == 0
    return path


def test_synth_writes_expected_line_count(tmp_path):
    out = tmp_path / "base.fv"
    rc = cli.main(["synth", "--classes", "20", "--dim", "16",
                   "--per-class", "50", "--noise", "0.35", "--seed", "7",
                   "--out", str(out)])
    assert rc == 0
    lines = [l for l in out.read_text().splitlines() if l and not l.startswith("#")]
    assert len(lines) == 1000
    assert (tmp_path / "base.fv.config.json").exists()


def test_synth_reruns_byte_identical(tmp_path):
    args = ["synth", "--classes", "4", "--dim", "5", "--per-class", "6",
            "--seed", "3", "--out"]
    a, b = tmp_path / "a.fv", tmp_path / "b.fv"
    assert cli.main(args + [str(a)]) == 0
    assert cli.main(args + [str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_synth_rejects_single_class(tmp_path, capsys):
    out = tmp_path / "bad.fv"
    rc = cli.main(["synth", "--classes", "1", "--out", str(out)])
    assert rc != 0
    assert "error:" in capsys.readouterr().err
    assert not out.exists()


def test_train_epochs_zero_writes_initialized_checkpoint(tmp_path, datafile,
                                                         configfile):
    out = str(tmp_path / "init.ckpt")
    rc = cli.main(["train", "--data", datafile, "--config", configfile,
                   "--epochs", "0", "--out-checkpoint", out])
    assert rc == 0
    net_cfg, params = gradnet.load_checkpoint(out)
    run_cfg = config.RunConfig.from_dict(
        config.merge_documents(TINY_CONFIG,
                               {"gradnet": {"feature_dim": 5},
                                "train": {"epochs": 0}}))
    fresh = metatrain.initial_params(net_cfg, run_cfg.train_config())
    for (name_a, got), (name_b, want) in zip(gradnet.named_parameters(params),
                                             gradnet.named_parameters(fresh)):
        assert name_a == name_b
        assert np.array_equal(got.values, want.values)
    # log exists but holds no epoch records
    log_lines = open(out + ".log.csv").read().strip().splitlines()
    assert len(log_lines) == 1 and log_lines[0].startswith("#")


def test_train_log_line_count_matches_epochs(checkpoint):
    lines = open(checkpoint + ".log.csv").read().strip().splitlines()
    assert len(lines) == 1 + TINY_CONFIG["train"]["epochs"]
    cfg_doc = json.load(open(checkpoint + ".config.json"))
    assert cfg_doc["train"]["epochs"] == 2
    assert cfg_doc["gradnet"]["feature_dim"] == 5


def test_train_preset_paper_sets_schedule(tmp_path, datafile):
    out = str(tmp_path / "paper.ckpt")
    rc = cli.main(["train", "--data", datafile, "--preset", "paper",
                   "--epochs", "0", "--out-checkpoint", out])
    assert rc == 0
    doc = json.load(open(out + ".config.json"))
    assert doc["train"]["epochs"] == 0          # flag wins over preset
    assert doc["train"]["lr_decay_epochs"] == [15, 30, 40]
    assert doc["train"]["learning_rate"] == 1e-4
    assert doc["solver"]["num_steps"] == 40


def test_eval_mean_needs_no_checkpoint(datafile, capsys, tmp_path):
    out = str(tmp_path / "mean.csv")
    rc = cli.main(["eval", "--data", datafile, "--method", "mean",
                   "--n-way", "3", "--m-query", "3", "--episodes", "5",
                   "--out", out])
    assert rc == 0
    assert "mean:" in capsys.readouterr().out
    rows = open(out).read().strip().splitlines()
    assert rows[1].split(",")[0] == "5"


def test_eval_metanode_without_checkpoint_fails(datafile, capsys):
    rc = cli.main(["eval", "--data", datafile, "--method", "metanode",
                   "--episodes", "2", "--n-way", "3", "--m-query", "2"])
    assert rc != 0
    assert "checkpoint" in capsys.readouterr().err


def test_eval_identical_seeds_identical_reports(checkpoint, datafile, tmp_path):
    outs = []
    for name in ("r1.csv", "r2.csv"):
        out = str(tmp_path / name)
        rc = cli.main(["eval", "--data", datafile, "--checkpoint", checkpoint,
                       "--n-way", "3", "--m-query", "3", "--episodes", "4",
                       "--seed", "11", "--threads", "1", "--out", out])
        assert rc == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]


def test_analyze_trajectory_format(checkpoint, datafile, tmp_path):
    out = str(tmp_path / "traj.csv")
    rc = cli.main(["analyze", "--data", datafile, "--checkpoint", checkpoint,
                   "--report", "trajectory", "--n-way", "3", "--m-query", "3",
                   "--out", out])
    assert rc == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0].startswith("#")
    body = lines[1:]
    # default solver records 40 steps: 41 states, one line per class each
    assert len(body) == 41 * 3
    first = body[0].split(",")
    assert float(first[0]) == 0.0
    assert int(first[1]) == 0
    assert len(first) == 2 + 5


def test_analyze_convergence_rows_match_times(checkpoint, datafile, tmp_path):
    out = str(tmp_path / "curve.csv")
    rc = cli.main(["analyze", "--data", datafile, "--checkpoint", checkpoint,
                   "--report", "convergence", "--times", "1,2",
                   "--episodes", "3", "--n-way", "3", "--m-query", "3",
                   "--out", out])
    assert rc == 0
    lines = open(out).read().strip().splitlines()
    assert len(lines) == 3
    assert [float(l.split(",")[0]) for l in lines[1:]] == [1.0, 2.0]


def test_analyze_bias_reports_write_single_row(checkpoint, datafile, tmp_path):
    for report, header in (("proto-bias", "sim_initial"),
                           ("grad-bias", "sim_averaged")):
        out = str(tmp_path / f"{report}.csv")
        rc = cli.main(["analyze", "--data", datafile, "--checkpoint",
                       checkpoint, "--report", report, "--episodes", "3",
                       "--n-way", "3", "--m-query", "3", "--out", out])
        assert rc == 0
        lines = open(out).read().strip().splitlines()
        assert header in lines[0]
        assert len(lines) == 2
        assert (tmp_path / f"{report}.csv.config.json").exists()


def test_usage_error_gives_nonzero_exit(datafile):
    with pytest.raises(SystemExit) as exc_info:
        cli.main(["eval", "--data", datafile, "--method", "sorcery"])
    assert exc_info.value.code != 0


def test_mode_flag_threads_through_to_report(checkpoint, datafile, tmp_path):
    out_t = str(tmp_path / "t.csv")
    out_i = str(tmp_path / "i.csv")
    common = ["eval", "--data", datafile, "--checkpoint", checkpoint,
              "--n-way", "3", "--m-query", "3", "--episodes", "4",
              "--threads", "1"]
    assert cli.main(common + ["--mode", "transductive", "--out", out_t]) == 0
    assert cli.main(common + ["--mode", "inductive", "--out", out_i]) == 0
    doc_t = json.load(open(out_t + ".config.json"))
    doc_i = json.load(open(out_i + ".config.json"))
    assert doc_t["eval"]["mode"] == "transductive"
    assert doc_i["eval"]["mode"] == "inductive"
