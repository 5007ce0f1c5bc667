import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cachefed.cli import main
from cachefed.features import read_features


def run_cli(args, cwd, env_extra=None):
    env = dict(os.environ)
    env.setdefault("CACHEFED_THREADS", "0")
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "cachefed", *args],
        cwd=cwd,
        env=env,
        capture_output=True,
        text=True,
    )


TINY_WORLD = [
    "gen-synth",
    "--classes", "5",
    "--shots", "2",
    "--dim", "16",
    "--train-per-class", "12",
    "--test-per-class", "8",
    "--seed", "3",
]


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("world")
    result = run_cli(TINY_WORLD + ["--out", "w"], cwd=path)
    assert result.returncode == 0, result.stderr
    return path


class TestGenSynth:
    def test_writes_four_files_with_checksums(self, tmp_path):
        result = run_cli(TINY_WORLD + ["--out", "w"], cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        for suffix in ("train", "test", "synthetic", "text"):
            assert (tmp_path / f"w.{suffix}.cff").exists()
        checksum_lines = [l for l in result.stdout.splitlines() if "sha256=" in l]
        assert len(checksum_lines) == 4

    def test_rerun_is_byte_identical(self, tmp_path):
        first = run_cli(TINY_WORLD + ["--out", "a"], cwd=tmp_path)
        second = run_cli(TINY_WORLD + ["--out", "b"], cwd=tmp_path)
        sums_a = [l.split("sha256=")[1] for l in first.stdout.splitlines() if "sha256=" in l]
        sums_b = [l.split("sha256=")[1] for l in second.stdout.splitlines() if "sha256=" in l]
        assert sums_a == sums_b

    def test_invalid_shots_is_validation_error(self, tmp_path):
        result = run_cli(["gen-synth", "--shots", "0", "--out", "x"], cwd=tmp_path)
        assert result.returncode == 2
        assert "error" in result.stderr.lower()

    def test_resolved_config_printed_with_seed(self, tmp_path):
        result = run_cli(TINY_WORLD + ["--out", "w"], cwd=tmp_path)
        assert "resolved configuration" in result.stdout
        assert "seed = 3" in result.stdout


class TestTrain:
    def test_default_run_emits_outputs(self, world_dir, tmp_path):
        result = run_cli(
            [
                "train", "--data", str(world_dir / "w"), "--partition", "pat",
                "--clients", "5", "--rounds", "4", "--seed", "1",
                "--out-dir", str(tmp_path),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        rounds = (tmp_path / "rounds.csv").read_text().strip().split("\n")
        assert rounds[0].startswith("# columns: round,accuracy")
        assert len(rounds) == 1 + 1 + 4  # header, round 0, four rounds
        assert (tmp_path / "rounds.jsonl").exists()
        assert (tmp_path / "checkpoint.cfm").exists()

    def test_zero_rounds_emits_only_round_zero(self, world_dir, tmp_path):
        result = run_cli(
            [
                "train", "--data", str(world_dir / "w"), "--rounds", "0",
                "--clients", "5", "--out-dir", str(tmp_path),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        rounds = (tmp_path / "rounds.csv").read_text().strip().split("\n")
        assert len(rounds) == 2
        assert rounds[1].startswith("0,")

    def test_pathological_infeasible_exits_2(self, world_dir, tmp_path):
        result = run_cli(
            [
                "train", "--data", str(world_dir / "w"), "--partition", "pat",
                "--clients", "10", "--out-dir", str(tmp_path),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 2
        assert "pathological" in result.stderr

    def test_missing_files_exit_3(self, tmp_path):
        result = run_cli(
            ["train", "--data", str(tmp_path / "absent"), "--out-dir", str(tmp_path)],
            cwd=tmp_path,
        )
        assert result.returncode == 3

    def test_config_file_with_flag_precedence(self, world_dir, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text(
            "[train]\n"
            f"data = {world_dir / 'w'}\n"
            "rounds = 2\n"
            "clients = 5\n"
            "seed = 9\n"
        )
        result = run_cli(
            ["train", "--config", str(config), "--rounds", "3", "--out-dir", str(tmp_path)],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        assert "rounds = 3" in result.stdout  # flag beats config file
        assert "seed = 9" in result.stdout  # config beats default
        rounds = (tmp_path / "rounds.csv").read_text().strip().split("\n")
        assert len(rounds) == 1 + 1 + 3


class TestReferenceInvocations:
    def test_paper_default_train_invocation(self, tmp_path):
        # gen-synth with its documented example flags, then the documented
        # train invocation: pat partition, 10 clients, 20 rounds
        gen = run_cli(
            ["gen-synth", "--classes", "10", "--shots", "16", "--dim", "64",
             "--seed", "7", "--out", "world"],
            cwd=tmp_path,
        )
        assert gen.returncode == 0, gen.stderr
        sums = [l.split("sha256=")[1] for l in gen.stdout.splitlines() if "sha256=" in l]
        assert len(sums) == 4
        rerun = run_cli(
            ["gen-synth", "--classes", "10", "--shots", "16", "--dim", "64",
             "--seed", "7", "--out", "again"],
            cwd=tmp_path,
        )
        sums_again = [l.split("sha256=")[1] for l in rerun.stdout.splitlines() if "sha256=" in l]
        assert sums == sums_again

        result = run_cli(
            ["train", "--data", str(tmp_path / "world"), "--partition", "pat",
             "--clients", "10", "--rounds", "20", "--local-epochs", "1",
             "--alpha", "0.5", "--beta", "1.0", "--lr", "0.001", "--seed", "1",
             "--out-dir", str(tmp_path / "run")],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        rounds = (tmp_path / "run" / "rounds.csv").read_text().strip().split("\n")
        assert len(rounds) == 1 + 1 + 20  # header, round 0, twenty rounds
        jsonl = (tmp_path / "run" / "rounds.jsonl").read_text().strip().split("\n")
        assert len(jsonl) == 21
        # the documented example's qualitative point: training helped
        first = json.loads(jsonl[0])
        last = json.loads(jsonl[-1])
        assert last["accuracy"] > first["accuracy"]


class TestPartitionCommand:
    def test_pathological_hundred_classes(self, tmp_path):
        gen = run_cli(
            [
                "gen-synth", "--classes", "100", "--shots", "1", "--dim", "8",
                "--train-per-class", "3", "--test-per-class", "1", "--seed", "0",
                "--out", "big",
            ],
            cwd=tmp_path,
        )
        assert gen.returncode == 0, gen.stderr
        result = run_cli(
            [
                "partition", "--data", str(tmp_path / "big.train.cff"),
                "--scheme", "pat", "--clients", "10", "--out", str(tmp_path / "p.txt"),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        report = json.loads((tmp_path / "p.txt.report.json").read_text())
        hists = np.array(report["histograms"])
        assert hists.shape == (10, 100)
        for k in range(10):
            support = np.flatnonzero(hists[k])
            assert len(support) == 10
        assert (tmp_path / "p.txt.nk.json").exists()

    def test_single_client_emd_zero(self, world_dir, tmp_path):
        result = run_cli(
            [
                "partition", "--data", str(world_dir / "w.train.cff"),
                "--scheme", "iid", "--clients", "1", "--out", str(tmp_path / "p.txt"),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        report = json.loads((tmp_path / "p.txt.report.json").read_text())
        assert report["max_emd"] == 0.0


class TestConvergenceCommand:
    def test_small_reference_run(self, tmp_path):
        result = run_cli(
            [
                "convergence", "--steps", "300", "--runs", "3",
                "--out-dir", str(tmp_path),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["violations"] == 0
        assert summary["C"] > 0.0  # 5/10 participation
        csv_lines = (tmp_path / "certification.csv").read_text().strip().split("\n")
        assert len(csv_lines) == 301

    def test_full_participation_zeroes_c(self, tmp_path):
        result = run_cli(
            [
                "convergence", "--steps", "100", "--runs", "2",
                "--participation", "10/10", "--out-dir", str(tmp_path),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["C"] == 0.0

    def test_degenerate_problem_prints_b_zero(self, tmp_path):
        result = run_cli(
            [
                "convergence", "--sigma", "0", "--heterogeneity", "0",
                "--local-steps", "1", "--participation", "10/10",
                "--steps", "50", "--runs", "1", "--out-dir", str(tmp_path),
            ],
            cwd=tmp_path,
        )
        assert result.returncode == 0, result.stderr
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["B"] == pytest.approx(0.0, abs=1e-12)
        assert "B = 0.000000" in result.stdout

    def test_bad_participation_string(self, tmp_path):
        result = run_cli(
            ["convergence", "--participation", "half", "--out-dir", str(tmp_path)],
            cwd=tmp_path,
        )
        assert result.returncode == 2


class TestHelp:
    @pytest.mark.parametrize("sub", ["gen-synth", "train", "partition", "convergence"])
    def test_subcommand_help_documents_flags(self, sub, tmp_path):
        result = run_cli([sub, "--help"], cwd=tmp_path)
        assert result.returncode == 0
        assert "--seed" in result.stdout
        assert "default" in result.stdout

    def test_in_process_entry_point(self, capsys):
        with pytest.raises(SystemExit):
            main(["--version"])


def test_train_reads_back_features(world_dir):
    ds, cat = read_features(world_dir / "w.train.cff")
    assert len(cat) == 5
    assert len(ds) == 60
