import json
import os
from pathlib import Path

import pytest

from gkr.cli import run
from gkr.data import read_features, read_pairs

GOLDEN = Path(__file__).parent / "golden"
# set to rewrite the help snapshots after an intentional change
REGEN = os.environ.get("GKR_REGEN_GOLDEN") == "1"
COMMANDS = ["synth-gen", "train", "eval", "crossval", "ablate", "gradcheck", "inspect"]
FAST = ["--model", "gkr", "--layer-dims", "4,2", "--epochs", "2"]


@pytest.fixture(autouse=True)
def no_env_output(monkeypatch):
    monkeypatch.delenv("GKR_OUTPUT_DIR", raising=False)


@pytest.fixture
def task(tmp_path):
    d = tmp_path / "task"
    assert run(["synth-gen", "--families", "30", "--dim", "6", "--seed", "2", "--out", str(d)]) == 0
    return d


def data_args(d):
    return ["--features", str(d / "features.csv"), "--pairs", str(d / "pairs.csv")]


class TestHelp:
    @pytest.mark.parametrize("command", [None] + COMMANDS)
    def test_matches_golden(self, command, capsys):
        argv = ([command] if command else []) + ["--help"]
        assert run(argv) == 0
        text = capsys.readouterr().out
        path = GOLDEN / f"help_{command or 'gkr'}.txt"
        if REGEN:
            path.parent.mkdir(exist_ok=True)
            path.write_text(text, encoding="utf-8")
        assert text == path.read_text(encoding="utf-8")

    def test_short_flag(self, capsys):
        assert run(["-h"]) == 0
        assert "synth-gen" in capsys.readouterr().out

    def test_version(self, capsys):
        assert run(["--version"]) == 0
        assert capsys.readouterr().out.strip()


class TestSynthGen:
    def test_writes_valid_files(self, task):
        table = read_features(task / "features.csv")
        ps = read_pairs(task / "pairs.csv", table)
        assert len(table) == 60 and table.dim == 6
        assert len(ps.positives) == len(ps.negatives) == 30

    def test_reproducible(self, tmp_path, task):
        assert run(["synth-gen", "--families", "30", "--dim", "6", "--seed", "2", "--out", str(tmp_path / "b")]) == 0
        for name in ("features.csv", "pairs.csv"):
            assert (task / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GKR_OUTPUT_DIR", str(tmp_path / "env"))
        assert run(["synth-gen", "--families", "10"]) == 0
        assert (tmp_path / "env" / "pairs.csv").exists()

    def test_out_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GKR_OUTPUT_DIR", str(tmp_path / "env"))
        assert run(["synth-gen", "--families", "10", "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "flag" / "pairs.csv").exists() and not (tmp_path / "env").exists()

    def test_out_of_range(self):
        assert run(["synth-gen", "--rho", "1.5"]) == 1


class TestTrainEval:
    def test_train_then_eval(self, tmp_path, task, capsys):
        out = tmp_path / "run"
        assert run(["train", *FAST, *data_args(task), "--train-folds", "1,2,3,4", "--out", str(out)]) == 0
        report = json.loads((out / "train_report.json").read_text())
        assert [h["epoch"] for h in report["history"]] == [0, 1, 2]
        capsys.readouterr()
        assert run(["eval", "--checkpoint", str(out / "checkpoint.json"), *data_args(task), "--folds", "5", "--out", str(out)]) == 0
        assert "accuracy" in capsys.readouterr().out
        ev = json.loads((out / "eval.json").read_text())
        assert ev["n"] == 12 and ev["tp"] + ev["fp"] + ev["tn"] + ev["fn"] == 12

    def test_bit_reproducible(self, tmp_path, task):
        for name in ("a", "b"):
            assert run(["train", *FAST, *data_args(task), "--seed", "5", "--out", str(tmp_path / name)]) == 0
        for name in ("checkpoint.json", "train_report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_precedence(self, tmp_path, task):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {
                    "model": {"kind": "gkr", "layer_dims": [4, 2], "aggregator": "mean"},
                    "epochs": 1,
                    "lr": 0.01,
                    "data": {"features": str(task / "features.csv"), "pairs": str(task / "pairs.csv")},
                }
            )
        )
        assert run(["train", "--config", str(cfg), "--epochs", "3", "--out", str(tmp_path / "o")]) == 0
        config = json.loads((tmp_path / "o" / "train_report.json").read_text())["config"]
        assert config["epochs"] == 3
        assert config["lr"] == 0.01
        assert config["model"]["aggregator"] == "mean"
        assert config["batch_size"] == 16

    def test_model_flag_resets_head_options(self, tmp_path, task):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"kind": "gkr", "layer_dims": [4, 2]}, "epochs": 1}))
        assert run(["train", "--config", str(cfg), "--model", "cosine", *data_args(task), "--out", str(tmp_path / "o")]) == 0

    def test_encoder_flags(self, tmp_path, task):
        argv = ["train", *FAST, *data_args(task), "--encoder-dim", "3", "--encoder-hidden", "5", "--out", str(tmp_path)]
        assert run(argv) == 0
        params = json.loads((tmp_path / "checkpoint.json").read_text())["params"]
        assert params["enc.0.W"]["shape"] == [6, 5] and params["enc.1.W"]["shape"] == [5, 3]

    def test_assign_folds_for_positives_only(self, tmp_path, task):
        lines = (task / "pairs.csv").read_text().splitlines()
        head = lines[0].split(",")
        keep = [",".join(r.split(",")[:3]) for r in lines[1:] if r.split(",")[head.index("label")] == "1"]
        (tmp_path / "pos.csv").write_text("parent_id,child_id,label\n" + "\n".join(keep) + "\n")
        argv = ["train", *FAST, "--features", str(task / "features.csv"), "--pairs", str(tmp_path / "pos.csv")]
        assert run(argv + ["--out", str(tmp_path)]) == 1
        assert run(argv + ["--assign-folds", "--out", str(tmp_path)]) == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_2(self, tmp_path, task, capsys):
        assert run(["train", "--model", "mlp", "--lr", "1e300", "--epochs", "1", *data_args(task), "--out", str(tmp_path)]) == 2
        assert "epoch 1" in capsys.readouterr().err

    def test_eval_dim_mismatch(self, tmp_path, task):
        assert run(["train", *FAST, *data_args(task), "--out", str(tmp_path / "m")]) == 0
        other = tmp_path / "other"
        assert run(["synth-gen", "--families", "10", "--dim", "5", "--out", str(other)]) == 0
        assert run(["eval", "--checkpoint", str(tmp_path / "m" / "checkpoint.json"), *data_args(other)]) == 1


class TestCrossvalAblate:
    def test_crossval_byte_identical(self, tmp_path, task, capsys):
        for name in ("a", "b"):
            assert run(["crossval", *FAST, *data_args(task), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        table = (tmp_path / "a" / "table.txt").read_text()
        assert [c.strip() for c in table.splitlines()[0].split("|")][1:] == ["F-S", "F-D", "M-S", "M-D", "Mean"]
        assert table in capsys.readouterr().out

    def test_ablate_central_init(self, tmp_path, task):
        argv = ["ablate", *FAST, "--epochs", "1", *data_args(task), "--grid-central-init", "mean,max,0,0.5,1", "--out", str(tmp_path)]
        assert run(argv) == 0
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert [r["label"] for r in doc["rows"]] == ["Mean", "Max", "0", "0.5", "1"]
        header = (tmp_path / "table.txt").read_text().splitlines()[0]
        assert header.split("|")[0].strip() == "Initialization"

    def test_ablate_needs_grid(self, task):
        assert run(["ablate", *FAST, *data_args(task)]) == 1

    @pytest.mark.parametrize("flag, value", [("--grid-kind", "svm"), ("--grid-aggregator", "sum"), ("--grid-central-init", "median")])
    def test_ablate_bad_values(self, task, flag, value):
        assert run(["ablate", *FAST, *data_args(task), flag, value]) == 1


class TestGradcheck:
    def test_default_variants_pass(self, capsys):
        assert run(["gradcheck", "--seed", "7", "--dims", "4,2,3,2"]) == 0
        out = capsys.readouterr().out
        assert out.count("central_init=") == 10 and out.rstrip().endswith("PASS")

    def test_zero_tolerance_exits_2(self):
        assert run(["gradcheck", "--central-init", "0.5", "--aggregator", "max", "--tolerance", "0"]) == 2

    @pytest.mark.parametrize("dims", ["4,3,2", "4,2", "a,b"])
    def test_bad_dims(self, dims):
        assert run(["gradcheck", "--dims", dims]) == 1


class TestInspect:
    def test_shapes(self, capsys):
        assert run(["inspect", "--shapes"]) == 0
        out = capsys.readouterr().out
        assert "W_mess" in out and "2 x 512" in out

    def test_files(self, tmp_path, task, capsys):
        assert run(["inspect", str(task / "features.csv")]) == 0
        assert run(["inspect", str(task / "pairs.csv")]) == 0
        assert run(["crossval", "--model", "cosine", "--epochs", "1", *data_args(task), "--out", str(tmp_path)]) == 0
        assert run(["inspect", str(tmp_path / "report.json")]) == 0
        out = capsys.readouterr().out
        assert "60 rows" in out and "30 positive" in out and "mean accuracy" in out

    def test_missing_file(self):
        assert run(["inspect", "/nonexistent/x.csv"]) == 1


class TestErrors:
    def test_unknown_flag(self):
        assert run(["train", "--bogus"]) == 1

    def test_unknown_command(self):
        assert run(["fly"]) == 1

    def test_missing_data(self, tmp_path):
        assert run(["train", "--out", str(tmp_path)]) == 1

    def test_bad_config_json(self, tmp_path, task, capsys):
        (tmp_path / "c.json").write_text("{not json")
        assert run(["train", "--config", str(tmp_path / "c.json"), *data_args(task)]) == 1
        assert "invalid JSON" in capsys.readouterr().err

    def test_parse_error_names_line(self, tmp_path, task, capsys):
        (tmp_path / "f.csv").write_text("id,role,f0\na,parent,1\nb,child,x\n")
        assert run(["train", "--features", str(tmp_path / "f.csv"), "--pairs", str(task / "pairs.csv")]) == 1
        assert "f.csv:3:" in capsys.readouterr().err
