"""Command line pipelines: the datagen -> train -> debug -> eval -> report
chain, config handling, and exit codes."""

import json

import pytest

from partproto.cli import apply_overrides, build_parser, load_config, main
from partproto.data import load_dataset
from partproto.errors import ConfigError, TrainingError

PIPELINE_TOML = """\
[dataset]
v = 3
train_per_class = 3
test_per_class = 2
confounded_classes = []
confounder_colors = []

[model]
v = 3
d_latent = 8
conv_channels = [6, 8]

[train]
epochs = 1
batch_size = 9

[stage2]
steps = 50

[debug]
a = 1
max_rounds = 1
min_display_area = 1

[debug.finetune]
epochs = 1
batch_size = 9
freeze_embedding = true
projection_period = 0
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One datagen + train run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.toml"
    cfg.write_text(PIPELINE_TOML)
    data = root / "dataset"
    run = root / "run"
    assert main(["datagen", "--seed", "7", "--config", str(cfg),
                 "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--config", str(cfg),
                 "--out", str(run)]) == 0
    return {"root": root, "config": cfg, "data": data, "run": run,
            "checkpoint": run / "model.ckpt"}


# -- pipeline -----------------------------------------------------------------------


def test_datagen_writes_dataset_and_manifest(pipeline):
    ds = load_dataset(pipeline["data"])
    assert len(ds.train) == 9 and len(ds.test) == 6
    manifest = json.loads((pipeline["data"] / "run_manifest.json").read_text())
    assert manifest["command"] == "datagen"
    assert manifest["inputs"]["seed"] == 7


def test_train_writes_checkpoint_and_report(pipeline):
    assert pipeline["checkpoint"].exists()
    report = json.loads((pipeline["run"] / "train_report.json").read_text())
    assert len(report["epoch_losses"]) == 1
    assert 0.0 <= report["test_macro_f1"] <= 1.0
    manifest = json.loads((pipeline["run"] / "run_manifest.json").read_text())
    assert manifest["artifacts"]["checkpoint"].endswith("model.ckpt")


def test_debug_oracle_runs_session(pipeline, capsys):
    out = pipeline["root"] / "debug-run"
    rc = main(["debug", "--data", str(pipeline["data"]),
               "--checkpoint", str(pipeline["checkpoint"]),
               "--config", str(pipeline["config"]),
               "--annotator", "oracle", "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "round  n_forbid" in printed
    assert "final test macro-F1" in printed
    report = json.loads((out / "session_report.json").read_text())
    assert report["n_rounds"] >= 1
    lines = (out / "feedback.jsonl").read_text().strip().split("\n")
    assert len(lines) == 6 * report["n_rounds"]  # one verdict per prototype, a=1
    assert (out / "model.ckpt").exists()
    assert (out / "session_state.json").exists()


def test_eval_prints_result(pipeline, capsys):
    rc = main(["eval", "--data", str(pipeline["data"]),
               "--checkpoint", str(pipeline["checkpoint"])])
    assert rc == 0
    result = json.loads(capsys.readouterr().out)
    assert 0.0 <= result["macro_f1"] <= 1.0
    assert len(result["confusion"]) == 3
    assert len(result["prototype_ap"]) == 6


def test_eval_swap_context_flag(pipeline, capsys):
    out = pipeline["root"] / "eval-swap"
    rc = main(["eval", "--data", str(pipeline["data"]),
               "--checkpoint", str(pipeline["checkpoint"]),
               "--swap-context", "--out", str(out)])
    assert rc == 0
    capsys.readouterr()
    written = json.loads((out / "eval.json").read_text())
    assert "macro_f1" in written
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["inputs"]["swap_context"] is True


def test_report_summarizes_run(pipeline, capsys):
    rc = main(["report", "--run", str(pipeline["run"])])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "command: train" in printed
    assert "training: 1 epochs" in printed


# -- config handling ---------------------------------------------------------------


def test_load_config_toml_and_json(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text("[train]\nepochs = 3\n")
    assert load_config(str(toml)) == {"train": {"epochs": 3}}
    js = tmp_path / "c.json"
    js.write_text('{"train": {"epochs": 4}}')
    assert load_config(str(js)) == {"train": {"epochs": 4}}
    assert load_config(None) == {}
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.toml"))
    bad = tmp_path / "c.yaml"
    bad.write_text("train: {}")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_apply_overrides_types_and_nesting():
    cfg = apply_overrides({}, ["train.epochs=10", "train.lr=0.01",
                               "model.conv_channels=[4, 8]", "dataset.name=tiny"])
    assert cfg["train"] == {"epochs": 10, "lr": 0.01}
    assert cfg["model"]["conv_channels"] == [4, 8]
    assert cfg["dataset"]["name"] == "tiny"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["a..b=1"])
    with pytest.raises(ConfigError):
        apply_overrides({"a": {"b": 3}}, ["a.b.c=1"])


def test_set_overrides_reach_the_pipeline(tmp_path, capsys):
    data = tmp_path / "d"
    rc = main(["datagen", "--out", str(data), "--seed", "1",
               "--set", "dataset.v=2", "--set", "dataset.train_per_class=2",
               "--set", "dataset.test_per_class=1",
               "--set", "dataset.confounded_classes=[]",
               "--set", "dataset.confounder_colors=[]"])
    assert rc == 0
    capsys.readouterr()
    ds = load_dataset(data)
    assert ds.spec.v == 2 and len(ds.train) == 4


# -- exit codes ----------------------------------------------------------------------


def test_invalid_config_exits_2(tmp_path, capsys):
    assert main(["datagen", "--config", str(tmp_path / "nope.toml"),
                 "--out", str(tmp_path / "d")]) == 2
    assert "error:" in capsys.readouterr().err
    # mismatched confounder table is a config error, not a crash
    assert main(["datagen", "--out", str(tmp_path / "d2"),
                 "--set", "dataset.confounded_classes=[0]",
                 "--set", "dataset.confounder_colors=[]"]) == 2
    assert "error:" in capsys.readouterr().err


def test_training_failure_exits_1(pipeline, tmp_path, monkeypatch, capsys):
    def boom(*a, **kw):
        raise TrainingError("non-finite loss at epoch 0")

    monkeypatch.setattr("partproto.cli.train_stage1", boom)
    rc = main(["train", "--data", str(pipeline["data"]),
               "--config", str(pipeline["config"]), "--out", str(tmp_path / "r")])
    assert rc == 1
    assert "non-finite loss" in capsys.readouterr().err


def test_model_class_count_must_match_dataset(pipeline, tmp_path, capsys):
    rc = main(["train", "--data", str(pipeline["data"]),
               "--out", str(tmp_path / "r"), "--set", "model.v=4",
               "--set", "model.d_latent=8", "--set", "model.conv_channels=[6, 8]",
               "--set", "train.epochs=1", "--set", "train.batch_size=9"])
    assert rc == 2
    assert "3" in capsys.readouterr().err


def test_report_requires_manifest(tmp_path, capsys):
    assert main(["report", "--run", str(tmp_path)]) == 2
    capsys.readouterr()
    assert main(["report", "--run", str(tmp_path / "missing")]) == 2
    capsys.readouterr()


def test_argparse_surface():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--version"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["debug", "--annotator", "webcam"])
    assert exc.value.code == 2
