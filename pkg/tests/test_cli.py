"""Command-line client: argument handling, output contract, exit codes."""

import os

import pytest

from maskdepth import cli

TINY_SETS = [
    "--set", "height=32", "--set", "width=64", "--set", "steps=3",
    "--set", "log_every=3", "--set", "base_channels=4",
    "--set", "depth_channels=4", "--set", "attention_channels=8",
    "--set", "fusion_channels=16", "--set", "head_channels=8",
    "--set", "se_reduction=4", "--set", "batch_size=2", "--set", "seed=2",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = cli.main(["gen-data", "--out", str(root / "data"), "--count", "5",
                     "--seed", "2", "--size", "32x64", "--objects", "3"])
    assert code == 0
    code = cli.main(["train", "--data", str(root / "data"),
                     "--out", str(root / "run")] + TINY_SETS)
    assert code == 0
    return root


class TestGenData:
    def test_lists_artifacts_on_stdout(self, workdir, capsys, tmp_path):
        code = cli.main(["gen-data", "--out", str(tmp_path / "d"),
                         "--count", "2", "--size", "32x64"])
        out = capsys.readouterr().out
        assert code == 0
        lines = out.strip().splitlines()
        listed = [ln for ln in lines if ln.startswith(str(tmp_path))]
        assert len(listed) == 3  # split file + 2 sample dirs
        for path in listed:
            assert os.path.exists(path)

    def test_bad_size_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["gen-data", "--out", "x", "--count", "1",
                      "--size", "tall"])
        assert e.value.code == 2

    def test_zero_objects_rejected(self, capsys, tmp_path):
        code = cli.main(["gen-data", "--out", str(tmp_path / "d"),
                         "--count", "1", "--objects", "0"])
        assert code == 2
        assert "usage" in capsys.readouterr().err


class TestTrain:
    def test_artifacts_exist(self, workdir):
        for name in ("checkpoint.mdck", "history.csv", "manifest.txt"):
            assert (workdir / "run" / name).exists()

    def test_unknown_setting_is_usage_error(self, workdir, capsys, tmp_path):
        code = cli.main(["train", "--data", str(workdir / "data"),
                         "--out", str(tmp_path), "--set", "nope=1"])
        assert code == 2

    def test_missing_dataset_is_io_error(self, capsys, tmp_path):
        code = cli.main(["train", "--data", str(tmp_path / "void"),
                         "--out", str(tmp_path / "out")])
        assert code == 3


class TestEval:
    def test_prints_per_sample_and_aggregate(self, workdir, capsys):
        code = cli.main(["eval", "--data", str(workdir / "data"),
                         "--checkpoint", str(workdir / "run/checkpoint.mdck")])
        out = capsys.readouterr().out
        assert code == 0
        assert "sample scene_0004:" in out
        assert "aggregate:" in out
        assert "n_valid" in out

    def test_oracle_mode(self, workdir, capsys):
        code = cli.main(["eval", "--data", str(workdir / "data"), "--oracle"])
        out = capsys.readouterr().out
        assert code == 0
        assert "mae 0.0000" in out

    def test_missing_checkpoint_is_io_error(self, workdir, capsys):
        code = cli.main(["eval", "--data", str(workdir / "data"),
                         "--checkpoint", str(workdir / "absent.mdck")])
        assert code == 3


class TestInfer:
    def test_writes_eight_files(self, workdir, capsys, tmp_path):
        code = cli.main(["infer",
                         "--checkpoint", str(workdir / "run/checkpoint.mdck"),
                         "--sample", str(workdir / "data/scene_0004"),
                         "--out", str(tmp_path / "strip")])
        out = capsys.readouterr().out
        assert code == 0
        listed = [ln for ln in out.strip().splitlines()
                  if ln.startswith(str(tmp_path))]
        assert len(listed) == 8
        for path in listed:
            assert os.path.exists(path)

    def test_missing_sample_is_io_error(self, workdir, capsys, tmp_path):
        code = cli.main(["infer",
                         "--checkpoint", str(workdir / "run/checkpoint.mdck"),
                         "--sample", str(workdir / "data/scene_9999"),
                         "--out", str(tmp_path)])
        assert code == 3


class TestGradcheck:
    def test_op_scope_reports_and_passes(self, capsys):
        code = cli.main(["gradcheck", "--scope", "op"])
        out = capsys.readouterr().out
        assert code == 0
        assert "all checks passed" in out
        assert "max rel error" in out

    def test_bad_scope_rejected_by_parser(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["gradcheck", "--scope", "everything"])
        assert e.value.code == 2


class TestServerFlag:
    def test_unreachable_server_is_io_error(self, capsys):
        code = cli.main(["--server", "http://127.0.0.1:1",
                         "gradcheck", "--scope", "op"])
        assert code == 3
        assert "cannot reach" in capsys.readouterr().err
