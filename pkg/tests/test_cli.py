import csv
import json

import pytest

from mrialign.cli import build_parser, main
from mrialign.containers import file_sha256, load_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "12", "--balance", "0.5", "--seed", "7", "--out", str(root / "d.bin")]) == 0
    assert main(["gen", "--n", "6", "--balance", "0.5", "--seed", "8", "--shift", "on",
                 "--out", str(root / "ext.bin")]) == 0
    assert main(["pretrain", "--data", str(root / "d.bin"), "--epochs", "2", "--batch", "4",
                 "--out-dir", str(root / "pre")]) == 0
    for init, name in (("random", "rand"), (f"pretrained:{root / 'pre' / 'checkpoint.bin'}", "pre")):
        assert main(["finetune", "--data", str(root / "d.bin"), "--external", str(root / "ext.bin"),
                     "--init", init, "--folds", "2", "--epochs", "2", "--batch", "4", "--name", name,
                     "--out-dir", str(root / f"ft_{name}")]) == 0
    return root


def read_manifest(path):
    return json.loads(path.read_text())


def test_gen_writes_records_and_echoes_shift(workdir):
    spec, records = load_dataset(workdir / "d.bin")
    assert len(records) == 12
    assert read_manifest(workdir / "ext.bin.manifest.json")["effective_config"]["shift"] is True
    assert read_manifest(workdir / "d.bin.manifest.json")["effective_config"]["shift"] is False


def test_gen_rerun_is_hash_identical(workdir, tmp_path):
    assert main(["gen", "--n", "12", "--balance", "0.5", "--seed", "7", "--out", str(tmp_path / "again.bin")]) == 0
    assert file_sha256(tmp_path / "again.bin") == file_sha256(workdir / "d.bin")


def test_bad_config_key_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n_patients = 10\nbogus = 3\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x.bin")]) == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert "bogus" in err and "n_patients" in err


def test_flag_beats_config_file_beats_default(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# comment\nn_patients = 8\nseed = 3\n")
    assert main(["gen", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "g.bin")]) == 0
    eff = read_manifest(tmp_path / "g.bin.manifest.json")["effective_config"]
    assert (eff["n_patients"], eff["seed"], eff["vocab_size"]) == (8, 4, 64)


def test_pretrain_outputs_and_default_echo(workdir):
    run = workdir / "pre"
    manifest = read_manifest(run / "manifest.json")
    eff = manifest["effective_config"]
    assert (eff["margin"], eff["location_coef"], eff["strategy"]) == (0.25, 0.5, "semihard:2")
    assert set(manifest["artifacts"]) == {"checkpoint.bin", "trajectory.csv", "run_config.txt"}
    assert manifest["seed_streams"] and manifest["git_describe"]
    for name, digest in manifest["artifacts"].items():
        assert file_sha256(run / name) == digest
    rows = list(csv.DictReader((run / "trajectory.csv").open()))
    assert len(rows) == 2 and list(rows[0]) == ["epoch", "global_loss", "local_loss", "alpha", "beta", "total"]


def test_pretrain_global_only_has_zero_local_column(workdir, tmp_path):
    assert main(["pretrain", "--data", str(workdir / "d.bin"), "--mode", "global-only", "--epochs", "2",
                 "--batch", "4", "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "trajectory.csv").open()))
    assert all(float(r["local_loss"]) == 0.0 for r in rows)


def test_pretrain_rerun_reproduces_hashes(workdir, tmp_path):
    assert main(["pretrain", "--data", str(workdir / "d.bin"), "--epochs", "2", "--batch", "4",
                 "--out-dir", str(tmp_path)]) == 0
    for name in ("checkpoint.bin", "trajectory.csv", "run_config.txt"):
        assert file_sha256(tmp_path / name) == file_sha256(workdir / "pre" / name)


def test_finetune_outputs(workdir):
    for name in ("rand", "pre"):
        run = workdir / f"ft_{name}"
        metrics = json.loads((run / "metrics.json").read_text())
        assert list(metrics["experiments"]) == [name]
        assert len(metrics["experiments"][name]["external"]["auc"]) == 2
        assert (run / "fold0.bin").is_file() and (run / "fold1.bin").is_file()
        assert len(list(run.glob("*manifest*.json"))) == 1


def test_finetune_missing_checkpoint_fails_with_one_line(workdir, tmp_path, capsys):
    code = main(["finetune", "--data", str(workdir / "d.bin"), "--init", f"pretrained:{tmp_path / 'nope.bin'}",
                 "--out-dir", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "nope.bin" in err


def test_finetune_bad_init_spec_is_usage_error(workdir, tmp_path):
    assert main(["finetune", "--data", str(workdir / "d.bin"), "--init", "imagenet",
                 "--out-dir", str(tmp_path)]) == 2


def test_evaluate_tables_and_self_comparison(workdir, tmp_path, capsys):
    code = main(["evaluate", str(workdir / "ft_pre"), str(workdir / "ft_rand" / "metrics.json"),
                 "--compare", "pre:rand", "--compare", "rand:rand", "--out-dir", str(tmp_path)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "(" in printed and "Explainability" in printed
    header = (tmp_path / "explainability_external.csv").read_text().splitlines()[0]
    assert header == "experiment,dice2d_mean,dice2d_std,dice3d_mean,dice3d_std"
    rows = list(csv.DictReader((tmp_path / "ttests.csv").open()))
    self_rows = [r for r in rows if r["a"] == r["b"] == "rand"]
    assert self_rows and all(float(r["t"]) == 0.0 and float(r["p"]) == 1.0 for r in self_rows)
    assert {r["a"] for r in rows} == {"pre", "rand"}


def test_evaluate_mismatched_folds_fails(workdir, tmp_path):
    assert main(["finetune", "--data", str(workdir / "d.bin"), "--folds", "3", "--epochs", "1", "--batch", "4",
                 "--name", "three", "--out-dir", str(tmp_path / "three")]) == 0
    code = main(["evaluate", str(workdir / "ft_rand"), str(tmp_path / "three"), "--out-dir", str(tmp_path / "ev")])
    assert code == 1


@pytest.mark.parametrize("command", ["gen", "pretrain", "finetune", "evaluate"])
def test_help_lists_every_flag_with_default(command):
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        if action.option_strings and action.dest not in ("help", "out", "out_dir", "data"):
            assert "default" in (action.help or ""), action.dest
