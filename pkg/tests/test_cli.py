import json

import numpy as np
import pytest

from aulacaps import cli
from aulacaps import data as D


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    assert cli.dispatch(["gen-data", "--out", str(data), "--subjects", "3", "--frames", "24", "--seed", "2"]) == 0
    code = cli.dispatch(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--batch-size", "8"])
    assert code == 0
    return root, data, out


def test_gen_data_roundtrip(run):
    _, data, _ = run
    manifest, seqs = D.load_dataset(data)
    assert len(seqs) == 3 and seqs[0].frames.shape == (24, 32, 32, 1)
    fresh = D.synth_generate(subjects=3, frames_per_subject=24, size=32, seed=2)
    assert fresh.sequences[1].frames.tobytes() == seqs[1].frames.tobytes()
    echo = json.loads((data / "run_config.json").read_text())
    assert echo["parsed"]["subjects"] == 3


def test_train_outputs(run):
    _, _, out = run
    for name in ("train_log.csv", "metrics.json", "coactivation.csv", "training_curves.png", "coactivation.png"):
        assert (out / name).exists(), name
    resolved = json.loads((out / "run_config.json").read_text())["resolved"]
    assert resolved["model"]["input_size"] == 32 and resolved["train"]["epochs"] == 1


def test_report_commands(run):
    root, data, out = run
    base = ["--run", str(out), "--data", str(data)]
    assert cli.dispatch(["eval", *base, "--out", str(root / "eval")]) == 0
    assert (root / "eval" / "metrics.csv").read_text().splitlines()[0] == "au,precision,recall,f1"
    assert cli.dispatch(["trace", *base, "--subject", "S01", "--out", str(root / "tr")]) == 0
    assert any(p.suffix == ".png" for p in (root / "tr").iterdir())
    assert cli.dispatch(["saliency", *base, "--subject", "S01", "--au", "AU4", "--frame", "3",
                         "--out", str(root / "sal")]) == 0
    assert any(p.suffix == ".png" for p in (root / "sal").iterdir())
    assert cli.dispatch(["reconstruct", *base, "--subject", "S02", "--frames", "0,5",
                         "--out", str(root / "rec")]) == 0
    assert cli.dispatch(["ablate", *base, "--stream", "2d", "--epochs", "1", "--out", str(root / "abl")]) == 0
    rows = (root / "abl" / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("model,avg_f1") and [r.split(",")[0] for r in rows[1:]] == ["full", "2d"]


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.dispatch(["train", "--out", str(tmp_path)]) == 1
    assert cli.dispatch(["bogus"]) == 1
    assert cli.dispatch(["saliency", "--run", "r", "--data", "d", "--subject", "S", "--au", "AU3",
                         "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("error:") for line in err)


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert cli.dispatch(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: DatasetError:") and "\n" not in err


def test_workers_must_be_positive(run, tmp_path):
    _, data, _ = run
    assert cli.dispatch(["train", "--data", str(data), "--out", str(tmp_path), "--workers", "0"]) == 1


def test_config_file_explicit_flag_wins(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"subjects": 2, "frames": 9}))
    out = tmp_path / "d"
    assert cli.dispatch(["gen-data", "--out", str(out), "--config", str(cfg), "--frames", "5"]) == 0
    _, seqs = D.load_dataset(out)
    assert len(seqs) == 2 and all(len(v) == 5 for v in seqs)
    cfg.write_text(json.dumps({"not_a_flag": 1}))
    assert cli.dispatch(["gen-data", "--out", str(out), "--config", str(cfg)]) == 1


def test_gradcheck_command(tmp_path, capsys):
    assert cli.dispatch(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "check,max_rel_error,tolerance,status"
    assert all(line.endswith(",ok") for line in lines[1:])
    assert np.isfinite(float(lines[1].split(",")[1]))
