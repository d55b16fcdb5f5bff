import json
import re
from pathlib import Path

import pytest

from kinform import cli
from kinform.cli import EXIT_CONFIG, EXIT_OK, EXIT_PATH, EXIT_USAGE, build_parser, main

FIXTURE = Path(__file__).parent / "fixtures" / "published_ours.json"
COMMANDS = ["gen-data", "stats", "train", "evaluate", "ablate", "alpha-sweep", "gradcheck", "export-report"]


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


def test_every_subcommand_registered():
    assert list(subparsers()) == COMMANDS


@pytest.mark.parametrize("name", COMMANDS)
def test_flags_documented_in_help(name):
    sub = subparsers()[name]
    text = sub.format_help()
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.dest != "help":
            assert action.help, f"{name} {action.option_strings} has no help text"
    for common in ("--config", "--seed", "--protocol", "--sampler", "--out"):
        assert common in text


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert re.search(r"\d+\.\d+", capsys.readouterr().out)


def test_unknown_flag_is_usage_error(capsys):
    assert main(["stats", "x", "--bogus"]) == EXIT_USAGE
    assert "unrecognized arguments" in capsys.readouterr().err
    assert main([]) == EXIT_USAGE


def test_missing_path(tmp_path, capsys):
    assert main(["stats", str(tmp_path / "nope")]) == EXIT_PATH
    assert "no such file" in capsys.readouterr().err
    assert main(["export-report", str(tmp_path / "r.json")]) == EXIT_PATH


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = -1\n")
    assert main(["gradcheck", "--config", str(cfg), "--seeds", "1"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    cfg.write_text("no_such_key = 3\n")
    assert main(["gradcheck", "--config", str(cfg), "--seeds", "1"]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--families", "20", "--seed", "4", "--out", str(out)]) == EXIT_OK
    return out


def test_gen_data_writes_tree_and_manifest(data_dir):
    assert (data_dir / "families.tsv").exists()
    man = json.loads((data_dir / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["status"] == "ok" and man["seed"] == 4
    assert man["config"]["n_families"] == 20


def test_gen_data_deterministic(data_dir, tmp_path):
    assert main(["gen-data", "--families", "20", "--seed", "4", "--out", str(tmp_path)]) == EXIT_OK
    assert cli.digest_path(tmp_path / "families.tsv") == cli.digest_path(data_dir / "families.tsv")


def test_stats_text_and_csv(data_dir, tmp_path, capsys):
    assert main(["stats", str(data_dir), "--out", str(tmp_path)]) == EXIT_OK
    shown = capsys.readouterr().out
    assert shown == (tmp_path / "stats.txt").read_text()
    assert (tmp_path / "stats.csv").read_text().count("\n") > 5


def train_args(data_dir, out, *extra):
    return ["train", str(data_dir), "--epochs", "2", "--lr", "0.01", "--seed", "9", "--out", str(out), *extra]


def test_train_evaluate_reproducible(data_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(data_dir, a)) == EXIT_OK
    assert main(train_args(data_dir, b)) == EXIT_OK
    assert (a / "checkpoint.kchk").read_bytes() == (b / "checkpoint.kchk").read_bytes()
    for run in (a, b):
        assert main(["evaluate", str(run / "checkpoint.kchk"), str(data_dir), "--out", str(run / "ev")]) == EXIT_OK
    for name in ("report.txt", "report.csv", "report.json"):
        assert (a / "ev" / name).read_bytes() == (b / "ev" / name).read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert man["config"]["seed"] == 9 and str(data_dir) in man["inputs"]


def test_config_file_with_flag_override(data_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nlr = 0.05\n")
    assert main(train_args(data_dir, tmp_path / "r", "--config", str(cfg))) == EXIT_OK
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["config"]["epochs"] == 2 and man["config"]["lr"] == 0.01


def test_gradcheck_few_seeds(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == EXIT_OK
    assert capsys.readouterr().out.rstrip().endswith("PASS")


@pytest.mark.parametrize("fmt,want", [
    ("row", "85.9 86.3 78.0 77.4 74.9 76.9 75.6 | 79.6\n"),
    ("csv", None),
    ("json", None),
])
def test_export_report(fmt, want, tmp_path, capsys):
    assert main(["export-report", str(FIXTURE), "--format", fmt, "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    if want is not None:
        assert out == want
    ext = "txt" if fmt == "row" else fmt
    assert (tmp_path / f"report.{ext}").read_text() == out


def test_export_ablation_layout(capsys):
    assert main(["export-report", str(FIXTURE), "--layout", "ablation", "--format", "row"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("85.90 86.30 78.00 74.90 77.40 75.60 76.90")
