"""
End-to-end tests for scripts/patch_attack_cli.py
Each subcommand runs on a tiny model; artifacts and exit codes are checked.
"""

import json
import os
import sys
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import scripts.patch_attack_cli as cli_module
from scripts.patch_attack_cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main
from src.checkpoint import load_checkpoint
from src.exceptions import ShapeError

TRAIN_INI = """
[run]
seed = 3
threads = 1

[vit]
image_size = 8
channels = 1
patch_size = 4
d_model = 8
depth = 2
heads = 2
mlp_hidden = 8
num_classes = 2

[dataset]
samples_per_class = 4
test_samples_per_class = 2
noise = 0.1

[train]
epochs = 2
lr = 0.1
batch_size = 4
"""

ATTACK_INI = """
[run]
seed = 3

[attack]
checkpoint = {checkpoint}
num_images = 2
patch_row = 1
patch_col = 0
iterations = 2
step_size = 0.1

[loss]
terms = ce, kq_star

[ablation]
enabled = true
variants = baseline, normalize:off
locations = 0,0
sizes = 1
num_images = 1
"""

CONTROLLED_INI = """
[run]
seed = 3

[controlled]
mu = 1.0
w = 1, 2
d_k = 16
n = 32
seeds = 2
tolerance = 1e-2
"""

DIAGNOSE_INI = """
[run]
seed = 3

[diagnose]
checkpoint = {checkpoint}
init_checkpoint = {init}
compare_init = true
num_images = 2
export_layer = 1
export_head = 0

[attack]
iterations = 2
step_size = 0.1

[loss]
terms = kq
"""


def write_config(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


@pytest.fixture
def trained(tmp_path):
    """Output directory of a tiny training run."""
    out = tmp_path / "train"
    assert main(["train", "--config", write_config(tmp_path, "train.ini", TRAIN_INI), "--out", str(out)]) == EXIT_OK
    return out


class TestTrainCommand:
    """train subcommand"""

    def test_artifacts(self, trained):
        names = [entry["name"] for entry in manifest(trained)["files"]]
        assert names == ["checkpoint.json", "checkpoint_init.json", "config.ini", "metrics.json"]
        model = load_checkpoint(trained / "checkpoint.json")
        assert model.config.depth == 2
        assert model.info.dataset["seed"] == 3
        metrics = json.loads((trained / "metrics.json").read_text())
        assert 0.0 <= metrics["train_accuracy"] <= 1.0

    def test_rerun_is_byte_identical(self, tmp_path, trained):
        again = tmp_path / "again"
        config = write_config(tmp_path, "train2.ini", TRAIN_INI)
        assert main(["train", "--config", config, "--out", str(again)]) == EXIT_OK
        assert manifest(again) == manifest(trained)

    def test_seed_flag_changes_weights(self, tmp_path, trained):
        other = tmp_path / "other"
        config = write_config(tmp_path, "train3.ini", TRAIN_INI)
        assert main(["train", "--config", config, "--out", str(other), "--seed", "4"]) == EXIT_OK
        assert (other / "checkpoint.json").read_bytes() != (trained / "checkpoint.json").read_bytes()
        assert "seed = 4" in (other / "config.ini").read_text()


class TestAttackCommand:
    """attack subcommand"""

    def test_records_summary_and_ablation(self, tmp_path, trained):
        out = tmp_path / "attack"
        text = ATTACK_INI.format(checkpoint=trained / "checkpoint.json")
        assert main(["attack", "--config", write_config(tmp_path, "attack.ini", text), "--out", str(out)]) == EXIT_OK
        records = pd.read_csv(out / "attack_records.csv")
        assert len(records) == 2
        assert {"final_ce", "final_kq_star"} <= set(records.columns)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["patch"]["target_key"] == 3
        assert summary["attack"]["iterations"] == 2
        ablation = pd.read_csv(out / "ablation.csv")
        assert ablation["variant"].tolist() == ["baseline", "normalize:off"]

    def test_missing_checkpoint_fails(self, tmp_path):
        out = tmp_path / "attack"
        text = ATTACK_INI.format(checkpoint=tmp_path / "nope.json")
        assert main(["attack", "--config", write_config(tmp_path, "attack.ini", text), "--out", str(out)]) == EXIT_FAILED
        assert not out.exists()

    def test_ablation_cell_outside_image(self, tmp_path, trained):
        out = tmp_path / "attack"
        text = ATTACK_INI.format(checkpoint=trained / "checkpoint.json").replace("locations = 0,0", "locations = 1,1")
        text = text.replace("sizes = 1", "sizes = 2")
        assert main(["attack", "--config", write_config(tmp_path, "attack.ini", text), "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_patch_outside_grid(self, tmp_path, trained):
        out = tmp_path / "attack"
        text = ATTACK_INI.format(checkpoint=trained / "checkpoint.json").replace("patch_row = 1", "patch_row = 2")
        assert main(["attack", "--config", write_config(tmp_path, "attack.ini", text), "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_rerun_is_byte_identical(self, tmp_path, trained):
        text = ATTACK_INI.format(checkpoint=trained / "checkpoint.json")
        config = write_config(tmp_path, "attack.ini", text)
        first, second = tmp_path / "first", tmp_path / "second"
        assert main(["attack", "--config", config, "--out", str(first)]) == EXIT_OK
        assert main(["attack", "--config", config, "--out", str(second)]) == EXIT_OK
        assert manifest(first) == manifest(second)
        assert (first / "attack_records.csv").read_bytes() == (second / "attack_records.csv").read_bytes()


class TestControlledCommand:
    """controlled subcommand"""

    def test_tables(self, tmp_path):
        out = tmp_path / "controlled"
        config = write_config(tmp_path, "controlled.ini", CONTROLLED_INI)
        assert main(["controlled", "--config", config, "--out", str(out), "--threads", "2"]) == EXIT_OK
        sweep = pd.read_csv(out / "sweep.csv")
        assert len(sweep) == 2 * 3
        assert set(pd.read_csv(out / "monotonicity.csv")["axis"]) == {"w"}
        assert len(pd.read_csv(out / "silhouette.csv")) == 4

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path, "controlled.ini", CONTROLLED_INI)
        first, second = tmp_path / "first", tmp_path / "second"
        assert main(["controlled", "--config", config, "--out", str(first), "--threads", "2"]) == EXIT_OK
        assert main(["controlled", "--config", config, "--out", str(second), "--threads", "2"]) == EXIT_OK
        assert manifest(first) == manifest(second)


class TestDiagnoseCommand:
    """diagnose subcommand"""

    def test_reports(self, tmp_path, trained):
        out = tmp_path / "diagnose"
        text = DIAGNOSE_INI.format(checkpoint=trained / "checkpoint.json", init=trained / "checkpoint_init.json")
        assert main(["diagnose", "--config", write_config(tmp_path, "diagnose.ini", text), "--out", str(out)]) == EXIT_OK
        singular = pd.read_csv(out / "singular_values.csv")
        assert "sigma_max_init" in singular.columns
        assert len(pd.read_csv(out / "gradient_ratio.csv")) == 2
        assert len(pd.read_csv(out / "key_replacement.csv")) == 2
        clean = json.loads((out / "tokens_clean.json").read_text())
        patched = json.loads((out / "tokens_patched.json").read_text())
        assert clean["layer"] == 1 and clean["head"] == 0
        assert patched["target_key"] == 1
        assert clean["queries"] != patched["queries"]

    def test_attention_traces(self, tmp_path, trained):
        out = tmp_path / "diagnose"
        text = DIAGNOSE_INI.format(checkpoint=trained / "checkpoint.json", init=trained / "checkpoint_init.json")
        text = text.replace("export_head = 0", "export_head = 0\nreports = traces")
        assert main(["diagnose", "--config", write_config(tmp_path, "diagnose.ini", text), "--out", str(out)]) == EXIT_OK
        names = [entry["name"] for entry in manifest(out)["files"]]
        assert names == ["config.ini", "traces_clean.json", "traces_patched.json"]
        traces = json.loads((out / "traces_patched.json").read_text())
        assert [layer["layer"] for layer in traces["layers"]] == [0, 1]
        tokens = 1 + (8 // 4) ** 2
        for layer in traces["layers"]:
            assert [head["head"] for head in layer["heads"]] == [0, 1]
            for head in layer["heads"]:
                assert head["P_Q"]["shape"] == [tokens, 4]
                assert head["P_K"]["shape"] == [tokens, 4]
                assert head["B"]["shape"] == [tokens, tokens]
                weights = np.array(head["A"]["values"]).reshape(tokens, tokens)
                assert weights.sum(axis=1) == pytest.approx(np.ones(tokens))

    def test_export_layer_checked_before_writing(self, tmp_path, trained):
        out = tmp_path / "diagnose"
        good = DIAGNOSE_INI.format(checkpoint=trained / "checkpoint.json", init=trained / "checkpoint_init.json")
        bad = write_config(tmp_path, "bad.ini", good.replace("export_layer = 1", "export_layer = 7"))
        assert main(["diagnose", "--config", bad, "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()
        assert main(["diagnose", "--config", write_config(tmp_path, "good.ini", good), "--out", str(out)]) == EXIT_OK

    def test_export_head_checked_before_writing(self, tmp_path, trained):
        out = tmp_path / "diagnose"
        text = DIAGNOSE_INI.format(checkpoint=trained / "checkpoint.json", init=trained / "checkpoint_init.json")
        config = write_config(tmp_path, "bad.ini", text.replace("export_head = 0", "export_head = 2"))
        assert main(["diagnose", "--config", config, "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_failure_after_first_report_leaves_nothing(self, tmp_path, trained):
        out = tmp_path / "diagnose"
        text = DIAGNOSE_INI.format(checkpoint=trained / "checkpoint.json", init=trained / "checkpoint_init.json")
        config = write_config(tmp_path, "diagnose.ini", text)
        with patch.object(cli_module, "key_replacement_ablation", side_effect=ShapeError("broken image")):
            assert main(["diagnose", "--config", config, "--out", str(out)]) == EXIT_FAILED
        assert not out.exists()
        assert main(["diagnose", "--config", config, "--out", str(out)]) == EXIT_OK

    def test_rerun_is_byte_identical(self, tmp_path, trained):
        text = DIAGNOSE_INI.format(checkpoint=trained / "checkpoint.json", init=trained / "checkpoint_init.json")
        config = write_config(tmp_path, "diagnose.ini", text)
        first, second = tmp_path / "first", tmp_path / "second"
        assert main(["diagnose", "--config", config, "--out", str(first)]) == EXIT_OK
        assert main(["diagnose", "--config", config, "--out", str(second)]) == EXIT_OK
        assert manifest(first) == manifest(second)


class TestConfigErrors:
    """Exit code 2, nothing written"""

    def test_malformed_config(self, tmp_path):
        out = tmp_path / "out"
        config = write_config(tmp_path, "bad.ini", "[train]\nepochs = -1\n")
        assert main(["train", "--config", config, "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_unknown_key(self, tmp_path):
        out = tmp_path / "out"
        config = write_config(tmp_path, "bad.ini", "[controlled]\nmus = 1\n")
        assert main(["controlled", "--config", config, "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_no_command(self):
        assert main([]) == EXIT_CONFIG
