import json

import pytest

from patchagg import cli

DATA = {"splits": {"train": 3, "val": 1, "test": 2}, "glyph_size": [20, 12], "length": [3, 5]}
TINY = {"channels": [4, 4, 4], "branch_width": 4, "pa_hidden": 4, "pa_classifier_hidden": 4, "scale": 1.0}


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "ds.json", data=DATA)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    return root


def test_gen_data_writes_manifests_and_is_idempotent(dataset, tmp_path):
    data = dataset / "data"
    for name in ("train.tsv", "val.tsv", "test.tsv", "meta.jsonl", "dataset_config.json"):
        assert (data / name).exists(), name
    assert len((data / "train.tsv").read_text().splitlines()) == 12
    assert list(data.glob("**/*.pgm"))
    cli.main(["gen-data", "--config", str(dataset / "ds.json"), "--out", str(tmp_path)])
    assert snapshot(tmp_path) == snapshot(data)
    # rerunning into a used directory leaves the same bytes
    cli.main(["gen-data", "--config", str(dataset / "ds.json"), "--out", str(tmp_path)])
    assert snapshot(tmp_path) == snapshot(data)


def test_train_twice_gives_identical_directories(dataset, tmp_path):
    cfg = write_config(tmp_path / "run.json", model=TINY, trainer={"epochs": 1, "batch_size": 8})
    for name in ("a", "b"):
        argv = ["train", "--config", cfg, "--data", str(dataset / "data"), "--out", str(tmp_path / name), "--seed", "7"]
        assert cli.main(argv) == 0
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
    saved = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert saved["seed"] == 7 and saved["model"]["channels"] == [4, 4, 4]


def test_eval_viz_and_inspect(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", model=TINY, trainer={"epochs": 1, "batch_size": 8},
                       eval={"latency_runs": 2, "viz_count": 2})
    data = str(dataset / "data")
    cli.main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "run")])
    ckpt = str(tmp_path / "run" / "best.ckpt")
    assert cli.main(["eval", "--config", cfg, "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "ev")]) == 0
    assert "latency_ms" in (tmp_path / "ev" / "test.tsv").read_text()
    assert cli.main(["viz", "--config", cfg, "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "viz")]) == 0
    assert len(list((tmp_path / "viz").glob("*_heatmap.pgm"))) == 2
    capsys.readouterr()
    assert cli.main(["inspect-checkpoint", "--checkpoint", ckpt]) == 0
    assert "total_parameters=" in capsys.readouterr().out


def test_overrides_reach_the_saved_config(dataset, tmp_path):
    cfg = write_config(tmp_path / "run.json", model=TINY, trainer={"epochs": 3})
    argv = ["train", "--config", cfg, "--data", str(dataset / "data"), "--out", str(tmp_path / "r"),
            "--epochs", "0", "--variant", "GS", "--scale", "1.0", "--seed", "4"]
    assert cli.main(argv) == 0
    saved = json.loads((tmp_path / "r" / "run_config.json").read_text())
    assert saved["trainer"]["epochs"] == 0 and saved["model"]["variant"] == "GS" and saved["seed"] == 4


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    [],
    ["train", "--epochs", "many"],
])
def test_argument_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"), "--data", "x"]) == 2
    assert cli.main(["train", "--config", str(bad), "--data", "x"]) == 2
    assert cli.main(["train", "--config", write_config(tmp_path / "c.json", optimizer={}), "--data", "x"]) == 2
    for section in ({"trainer": {"epoch": 3}}, {"model": {"colour": 1}}, {"eval": {"seed": [1]}}):
        assert cli.main(["train", "--config", write_config(tmp_path / "k.json", **section), "--data", "x"]) == 2
    assert cli.main(["eval"]) == 2
    assert "needs --checkpoint" in capsys.readouterr().err


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("PAGG_THREADS", "zero")
    assert cli.main(["inspect-checkpoint"]) == 2


def test_grad_check_passes(capsys):
    assert cli.main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "softermax" in out and out.strip().splitlines()[-1].startswith("max ")


def test_help_lists_every_flag():
    text = cli.build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for flag in ("--config", "--out", "--seed", "--data", "--checkpoint", "--variant", "--epochs", "--scale"):
        assert flag in text
    for flag in cli.OVERRIDES:
        assert f"--{flag}" in text
