import json
import subprocess
import sys

import pytest

from sapt.cli import main


def _write_config(path, flat):
    path.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items()))
    return str(path)


@pytest.fixture
def config_file(tmp_path, tiny_overrides):
    return _write_config(tmp_path / "tiny.toml", tiny_overrides)


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["train", "--config", config_file, "--out", str(out)]) == 0
    return out


def test_train_writes_a_run_directory(trained):
    for name in ("config.toml", "matrix.json", "metrics.json", "attention_train.csv", "attention_test.csv",
                 "anchors.json", "audit.json"):
        assert (trained / name).is_file()
    rep = json.loads((trained / "metrics.json").read_text())
    assert rep["method"] == "sapt" and rep["order"] == "copy,uppercase,last-word"


def test_metrics_recompute_is_byte_identical(trained, capsys):
    before = (trained / "metrics.json").read_bytes()
    assert main(["metrics", "--run", str(trained)]) == 0
    assert (trained / "metrics.json").read_bytes() == before
    capsys.readouterr()
    assert main(["metrics", "--run", str(trained), "--stdout"]) == 0
    assert capsys.readouterr().out.encode() == before


def test_heatmap_reproduces_csvs(trained, tmp_path, capsys):
    out = tmp_path / "maps"
    assert main(["heatmap", "--run", str(trained), "--out", str(out)]) == 0
    for name in ("attention_train.csv", "attention_test.csv"):
        text = (out / name).read_text()
        assert text.splitlines()[0] == "task_or_input,block_1,block_2,block_3"
        assert text == (trained / name).read_text()
    assert "argmax block" in capsys.readouterr().out


def test_eval_on_unseen_tasks(trained):
    assert main(["eval", "--run", str(trained), "--tasks", "reverse"]) == 0
    result = json.loads((trained / "eval.json").read_text())
    assert list(result["tasks"]) == ["reverse"]


def test_unseen_results_stay_out_of_metrics(tmp_path, tiny_overrides):
    cfg = _write_config(tmp_path / "u.toml", dict(tiny_overrides, **{"eval.unseen": ["reverse"]}))
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert "reverse" in json.loads((out / "unseen.json").read_text())["tasks"]
    before = (out / "metrics.json").read_bytes()
    assert "unseen" not in json.loads(before)
    assert main(["metrics", "--run", str(out)]) == 0
    assert (out / "metrics.json").read_bytes() == before


def test_dry_run_echoes_normalised_config(tmp_path, capsys):
    empty = tmp_path / "empty.toml"
    empty.write_text("")
    assert main(["train", "--config", str(empty), "--dry-run", "--set", "pet.kind=lora"]) == 0
    out = capsys.readouterr().out
    assert 'pet.kind = "lora"' in out and "temperature = 8.0" in out and "lambda = 0.5" in out


def test_default_output_root(tmp_path, config_file, monkeypatch):
    monkeypatch.setenv("SAPT_RUN_DIR", str(tmp_path / "root"))
    assert main(["train", "--config", config_file, "--set", "method=seq_pet"]) == 0
    assert (tmp_path / "root" / "seq_pet-none-seed0" / "metrics.json").is_file()


def test_ablate(tmp_path, config_file):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", config_file, "--modes", "none,no_arm", "--out", str(out)]) == 0
    summary = json.loads((out / "ablation.json").read_text())
    assert set(summary) == {"none", "no_arm"}
    assert (out / "no_arm" / "metrics.json").is_file()


def test_gen_tasks(tmp_path):
    assert main(["gen-tasks", "--out", str(tmp_path), "--tasks", "copy,parity", "--n-train", "5",
                 "--n-val", "1", "--n-test", "1"]) == 0
    assert (tmp_path / "order.txt").read_text() == "copy\nparity\n"
    assert len((tmp_path / "copy" / "train.jsonl").read_text().splitlines()) == 5


@pytest.mark.parametrize("argv", [
    ["train", "--config", "does-not-exist.toml"],
    ["train", "--config", "{cfg}", "--set", "lambda=-1"],
    ["train", "--config", "{cfg}", "--set", "no.such.key=1"],
    ["metrics", "--run", "{tmp}"],
    ["ablate", "--config", "{cfg}", "--modes", "bogus"],
])
def test_usage_errors_exit_2(argv, tmp_path, config_file, capsys):
    argv = [a.format(cfg=config_file, tmp=tmp_path) for a in argv]
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_lambda_error_names_the_field(tmp_path, config_file, capsys):
    main(["train", "--config", config_file, "--set", "lambda=-1"])
    assert "lambda" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, tiny_overrides, capsys):
    data = tmp_path / "data"
    data.mkdir()
    (data / "copy").mkdir()
    for split in ("train", "val", "test"):
        (data / "copy" / f"{split}.jsonl").write_text('{"instruction": "COPY", "input": "é", "output": "x"}\n')
    flat = dict(tiny_overrides, **{"data.dir": str(data), "data.order": ["copy"]})
    cfg = _write_config(tmp_path / "bad.toml", flat)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert "error" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    proc = subprocess.run([sys.executable, "-m", "sapt.cli", "train"], capture_output=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "sapt.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "heatmap" in proc.stdout
