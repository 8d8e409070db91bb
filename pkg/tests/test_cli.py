import numpy as np
import pytest

from interpcnn.cli import main
from interpcnn.config import (
    build_network_spec,
    default_config,
    effective_toml,
    load_config,
    validate_config,
)
from interpcnn.errors import ConfigError

DESK_CLASSIFIER = """
task = "classification"

[network]
n_points = 48
n_classes = 3
stem_channels = 8
branch_channels = [8, 8]
module1_lengths = [0.2, 0.4]
module2_lengths = [0.4, 0.8]
head_channels = [16, 8]
dropout = 0.0

[optimizer]
epochs = 2
batch_size = 4

[data]
n_train = 6
n_test = 3
n_points = 48

[runtime]
seed = 3
deterministic = true
"""


def write_config(tmp_path, text=DESK_CLASSIFIER, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Config document
# ---------------------------------------------------------------------------


def test_defaults_materialized():
    config = default_config()
    assert config.network["stem_channels"] == 64
    assert config.network["module1_lengths"] == [0.1, 0.2, 0.4]
    assert config.network["module2_lengths"] == [0.2, 0.4, 0.8]
    assert config.optimizer["lr"] == 1e-3
    assert config.optimizer["lr_decay"] == 0.7
    assert config.optimizer["lr_decay_every"] == 80
    assert config.runtime["precision"] == "f64"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="network.frobnicate"):
        validate_config({"network": {"frobnicate": 1}})
    with pytest.raises(ConfigError, match="top-level"):
        validate_config({"banana": 1})
    with pytest.raises(ConfigError, match="optimizer.lr"):
        validate_config({"optimizer": {"lr": "fast"}})


def test_effective_toml_round_trip(tmp_path):
    config = validate_config({"task": "segmentation",
                              "network": {"arch": "segmenter", "n_parts": 4}})
    text = effective_toml(config)
    path = tmp_path / "eff.toml"
    path.write_text(text)
    again = load_config(path)
    assert again == config


def test_config_parse_error_position(tmp_path):
    path = write_config(tmp_path, "task = \n", name="broken.toml")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(path)


def test_build_network_spec_task_arch_mismatch():
    config = default_config("classification")
    config.network["arch"] = "segmenter"
    with pytest.raises(ConfigError, match="arch"):
        build_network_spec(config)


# ---------------------------------------------------------------------------
# CLI commands
# ---------------------------------------------------------------------------


def test_cli_train_eval_round_trip(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    for artifact in ("metrics.csv", "best.icnn", "effective.toml",
                     "training_curves.png"):
        assert (out / artifact).exists(), artifact
    # effective config is itself a valid config
    load_config(out / "effective.toml")

    assert main(["eval", str(out / "best.icnn"), "--config", str(config),
                 "--out", str(out)]) == 0
    captured = capsys.readouterr().out
    assert "accuracy" in captured
    assert (out / "eval_metrics.csv").exists()
    assert (out / "confusion_matrix.png").exists()


def test_cli_train_deterministic_reruns_identical(tmp_path):
    config = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(config), "--out", str(out_a),
                 "--deterministic"]) == 0
    assert main(["train", "--config", str(config), "--out", str(out_b),
                 "--deterministic"]) == 0
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()


def test_cli_missing_config_exits_2(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.toml")])
    assert code == 2
    assert "nope.toml" in capsys.readouterr().err


def test_cli_missing_manifest_exits_2(tmp_path, capsys):
    config = write_config(tmp_path, DESK_CLASSIFIER.replace(
        '[data]\nn_train = 6', '[data]\nkind = "manifest"\nmanifest = "missing.csv"\nn_train = 6'))
    code = main(["train", "--config", str(config), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "missing.csv" in capsys.readouterr().err


def test_cli_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.icnn"
    bad.write_bytes(b"WRONG" + b"\x00" * 64)
    code = main(["eval", str(bad)])
    assert code == 2
    assert "bad magic" in capsys.readouterr().err


def test_cli_verify_list_and_filter(tmp_path, capsys):
    assert main(["verify", "--list"]) == 0
    names = capsys.readouterr().out.splitlines()
    assert "grid_equivalence" in names

    out = tmp_path / "rep"
    assert main(["verify", "--filter", "grid", "--out", str(out)]) == 0
    report = (out / "verify_report.csv").read_text().splitlines()
    assert len(report) == 2  # header + the one grid check
    assert "grid_equivalence" in report[1]
    assert (out / "verify_report.png").exists()


def test_cli_bench_writes_csv_and_plot(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(config), "--out", str(out),
                 "--points", "32", "--batch", "2", "--repeats", "2"]) == 0
    lines = (out / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("points,batch,forward_ms_mean")
    assert (out / "bench.png").exists()
    printed = capsys.readouterr().out
    assert "params=" in printed


SEGMENTER_CONFIG = """
task = "segmentation"

[network]
arch = "segmenter"
n_points = 48
n_parts = 2
encoder_channels = [8, 16]
decoder_channels = [8, 8]
first_length = 0.1
interpolation = "trilinear"

[optimizer]
epochs = 2
batch_size = 2

[data]
n_train = 4
n_test = 2
n_points = 48

[runtime]
seed = 1
"""


def test_cli_segmentation_round_trip(tmp_path, capsys):
    config = write_config(tmp_path, SEGMENTER_CONFIG, name="seg.toml")
    out = tmp_path / "seg"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert main(["eval", str(out / "best.icnn"), "--config", str(config),
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "miou_inst" in printed

    cloud = tmp_path / "cyl.xyz"
    rng = np.random.default_rng(1)
    theta = rng.uniform(0, 2 * np.pi, 48)
    pts = np.column_stack([0.5 * np.cos(theta), 0.5 * np.sin(theta),
                           rng.uniform(-0.75, 0.75, 48)])
    cloud.write_text("".join(f"{x} {y} {z}\n" for x, y, z in pts))
    assert main(["infer", str(out / "best.icnn"), str(cloud),
                 "--out", str(out)]) == 0
    predictions = (out / "cyl_predictions.csv").read_text().splitlines()
    assert predictions[0] == "x,y,z,label"
    assert len(predictions) == 49


def test_cli_infer_classification(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    cloud = tmp_path / "query.xyz"
    rng = np.random.default_rng(0)
    g = rng.standard_normal((48, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    cloud.write_text("".join(f"{x} {y} {z}\n" for x, y, z in g))
    assert main(["infer", str(out / "best.icnn"), str(cloud)]) == 0
    assert "predicted class" in capsys.readouterr().out
