import csv
import json
import math
import subprocess
import sys

import pytest

from sharpen_lab.cli import main
from sharpen_lab.config import load_config, validate_config
from sharpen_lab.errors import ConfigError


def tiny_config(run_dir, **over):
    cfg = {
        "task": {"family": "parity", "params": {"min_len": 1, "max_len": 3}},
        "length": {"mode": "variable", "l_max": 3},
        "policy": {"backend": "tabular"},
        "corpus": {"n": 300, "noise_rate": 0.3, "verbosity": {"0": 1.0}},
        "pretrain": {"learning_rate": 0.05, "steps": 100, "batch_prompts": 32, "eval_every": 100},
        "regime": {"name": "tilted", "alpha": 1.25, "beta": 0.1, "group_size": 4},
        "optim": {"learning_rate": 0.05, "warmup_steps": 2, "steps": 10, "batch_prompts": 4, "eval_every": 5},
        "eval": {"exact": True, "k": 4},
        "run_dir": str(run_dir),
        "global_seed": 3,
    }
    for key, value in over.items():
        cfg[key] = value
    return cfg


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def err_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_config_defaults_and_round_trip(tmp_path):
    cfg = validate_config(tiny_config(tmp_path / "r"))
    assert cfg.arch.k == 3 + 3 - 1  # longest prompt plus l_max - 1
    assert cfg.optim.group_size == 4 and cfg.optim.global_seed == 3
    again = validate_config(json.loads(json.dumps(cfg.resolved())))
    assert again.resolved() == cfg.resolved()
    inf = validate_config(tiny_config(tmp_path, regime={"name": "tilted", "alpha": 2, "beta": "inf"}))
    assert math.isinf(inf.regime.beta) and inf.resolved()["regime"]["beta"] == "inf"


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"regime": {"name": "tilted", "alpha": 0.5, "beta": 0.1}}, "regime.alpha"),
        ({"extra": 1}, "extra"),
        ({"length": {"mode": "variable", "l_max": 3, "foo": 1}}, "length.foo"),
        ({"optim": {"steps": "ten"}}, "optim.steps"),
        ({"task": {"family": "sorting", "params": {}}}, "task.family"),
    ],
)
def test_config_errors_name_the_field(tmp_path, patch, field):
    with pytest.raises(ConfigError) as e:
        validate_config(tiny_config(tmp_path, **patch))
    assert e.value.field == field


def test_alpha_below_one_exits_2(tmp_path, capsys):
    path = write(tmp_path, tiny_config(tmp_path / "r", regime={"name": "tilted", "alpha": 0.5, "beta": 0.1}))
    assert main(["run", path]) == 2
    line = err_line(capsys)
    assert line["field"] == "regime.alpha" and "alpha" in line["message"]
    assert not (tmp_path / "r").exists()


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    assert err_line(capsys)["field"] == "config"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path = write(tmp, tiny_config(tmp / "run"))
    assert main(["run", path]) == 0
    return tmp, path


def test_run_writes_artifacts(trained):
    tmp, path = trained
    run = tmp / "run"
    for name in ("config.json", "metrics.csv", "train_steps.csv", "base.json", "checkpoints/step_10.json"):
        assert (run / name).exists()
    # the resolved config revalidates and matches the input
    assert validate_config(json.loads((run / "config.json").read_text())).resolved() == load_config(path).resolved()


def test_rerun_is_byte_identical(trained, tmp_path):
    tmp, path = trained
    assert main(["run", path, "--run-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (tmp / "run" / "metrics.csv").read_bytes()


def test_oracle_dump(trained, tmp_path):
    tmp, path = trained
    out = tmp_path / "o.csv"
    assert main(["oracle", path, "--prompt", "1 0", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["sequence", "probability", "reward"]
    assert abs(sum(float(r["probability"]) for r in rows) - 1) <= 1e-9
    good = [r for r in rows if r["reward"] == "1"]
    assert {r["sequence"] for r in good} >= {"<ans> 1 <eos>"}
    assert main(["oracle", path, "--prompt", "1 0", "--target", "--out", str(tmp_path / "t.csv")]) == 0
    target = list(csv.DictReader((tmp_path / "t.csv").open()))
    assert abs(sum(float(r["probability"]) for r in target) - 1) <= 1e-9


def test_bad_prompt_exits_2(trained, capsys):
    _, path = trained
    assert main(["oracle", path, "--prompt", "1 x"]) == 2
    assert err_line(capsys)["error"] == "InputError"


def test_sample_and_eval(trained, tmp_path, capsys):
    _, path = trained
    out = tmp_path / "s.csv"
    assert main(["sample", path, "--prompt", "1 1", "-n", "5", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 5 and all(r["prompt"] == "1 1" for r in rows)
    assert main(["sample", path, "--prompt", "1 1", "--method", "beam", "-n", "1", "--out", str(out)]) == 0
    assert main(["sample", path, "--prompt", "1", "--method", "power", "--alpha", "2", "-n", "3"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
    assert main(["sample", path, "--prompt", "1", "--temperature", "0"]) == 2
    assert main(["eval", path, "--split", "train", "--out", str(tmp_path / "e.csv")]) == 0
    row = next(csv.DictReader((tmp_path / "e.csv").open()))
    assert row["exact"] == "1" and 0 < float(row["pass1"]) < 1


def test_report(trained, tmp_path, capsys):
    tmp, _ = trained
    out = tmp_path / "rep.csv"
    assert main(["report", str(tmp / "run"), str(tmp / "missing"), "--out", str(out)]) == 0
    assert "skipped" in capsys.readouterr().err
    rows = list(csv.DictReader(out.open()))
    assert [r["criterion"] for r in rows] == ["last", "best_validation"]
    assert rows[0]["strategy"] == "tilted" and rows[0]["beta"] == "0.1" and rows[0]["length_mode"] == "variable"
    assert rows[0]["status"] in ("ok", "collapsed") and rows[1]["status"] == "ok"
    again = tmp_path / "rep2.csv"
    assert main(["report", str(tmp / "run"), "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_report_empty_or_all_skipped_exits_2(tmp_path, capsys):
    assert main(["report"]) == 2
    assert main(["report", str(tmp_path / "missing")]) == 2


def test_module_entry_point(tmp_path):
    path = write(tmp_path, tiny_config(tmp_path / "r", regime={"name": "tilted", "alpha": 0.5, "beta": 0.1}))
    proc = subprocess.run([sys.executable, "-m", "sharpen_lab", "run", path], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["field"] == "regime.alpha"
