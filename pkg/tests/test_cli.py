"""CLI subcommands: flows, exit codes, idempotence, artifact layout."""

import json

import pytest
from click.testing import CliRunner

from partprompt.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory, runner):
    out = tmp_path_factory.mktemp("cli") / "data"
    result = runner.invoke(
        main,
        ["gen-data", "--categories", "4", "--samples", "6", "--size", "48",
         "--seed", "3", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory, runner, cli_dataset):
    out = tmp_path_factory.mktemp("cli") / "run"
    result = runner.invoke(
        main,
        ["train", "--data", str(cli_dataset), "--out", str(out), "--steps", "3",
         "--design", "ppl", "--seed", "1", "--n-specific", "2", "--n-shared", "2"],
    )
    assert result.exit_code == 0, result.output
    return out


class TestGenData:
    def test_reports_summary(self, runner, cli_dataset):
        assert (cli_dataset / "manifest.json").is_file()
        assert (cli_dataset / "splits.json").is_file()

    def test_rerun_byte_identical_manifest(self, runner, cli_dataset, tmp_path):
        other = tmp_path / "again"
        result = runner.invoke(
            main,
            ["gen-data", "--categories", "4", "--samples", "6", "--size", "48",
             "--seed", "3", "--out", str(other)],
        )
        assert result.exit_code == 0
        assert (other / "manifest.json").read_bytes() == (
            cli_dataset / "manifest.json"
        ).read_bytes()
        for rel in ("images/quad/quad_000.png", "masks/quad/quad_000.png"):
            assert (other / rel).read_bytes() == (cli_dataset / rel).read_bytes()

    def test_too_few_categories_exits_2(self, runner, tmp_path):
        result = runner.invoke(
            main, ["gen-data", "--categories", "2", "--out", str(tmp_path / "x")]
        )
        assert result.exit_code == 2

    def test_ingest_validates(self, cli_dataset):
        from partprompt.data import ingest_dataset

        index = ingest_dataset(cli_dataset)
        assert len(index.categories) == 4


class TestTrain:
    def test_artifacts(self, cli_run):
        assert (cli_run / "checkpoint.ckpt").is_file()
        assert (cli_run / "metrics.jsonl").is_file()
        assert (cli_run / "resolved_config.json").is_file()
        resolved = json.loads((cli_run / "resolved_config.json").read_text())
        assert resolved["design"] == "ppl"
        assert resolved["max_steps"] == 3

    def test_missing_data_flag_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["train", "--out", str(tmp_path / "r")])
        assert result.exit_code == 2

    def test_nonexistent_dataset_exits_3(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")],
        )
        assert result.exit_code == 3

    def test_unknown_flag_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["train", "--bogus-flag", "1"])
        assert result.exit_code == 2

    def test_config_file_with_overrides(self, runner, cli_dataset, tmp_path):
        config_path = tmp_path / "cfg.json"
        config_path.write_text(
            json.dumps(
                {
                    "data_root": str(cli_dataset),
                    "max_steps": 2,
                    "channels": 16,
                    "token_dim": 8,
                    "n_text": 2,
                }
            )
        )
        out = tmp_path / "run"
        result = runner.invoke(
            main,
            ["train", "--config", str(config_path), "--out", str(out), "--seed", "5"],
        )
        assert result.exit_code == 0, result.output
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["max_steps"] == 2  # from file
        assert resolved["seed"] == 5  # flag override


class TestEval:
    def test_eval_report(self, runner, cli_run, tmp_path):
        out = tmp_path / "eval"
        result = runner.invoke(
            main,
            ["eval", "--ckpt", str(cli_run / "checkpoint.ckpt"), "--episodes", "3",
             "--alpha", "0.5", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "eval_report.json").read_text())
        assert report["episode_count"] == 3
        assert 0.0 <= report["miou_mean"] <= 1.0
        assert "mIoU" in result.output

    def test_eval_writes_resolved_config(self, runner, cli_run, tmp_path):
        out = tmp_path / "eval_cfg"
        result = runner.invoke(
            main,
            ["eval", "--ckpt", str(cli_run / "checkpoint.ckpt"), "--episodes", "2",
             "--partition", "base", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["eval_episodes"] == 2
        assert resolved["eval_partition"] == "base"

    def test_eval_missing_checkpoint_exits_3(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")],
        )
        assert result.exit_code == 3


class TestHarnessCommands:
    def test_sweep_m(self, runner, cli_dataset, tmp_path):
        out = tmp_path / "sweep"
        result = runner.invoke(
            main,
            ["sweep-m", "--data", str(cli_dataset), "--out", str(out),
             "--steps", "1", "--episodes", "2", "--values", "0,0.9"],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "sweep_m_report.json").read_text())
        assert [row["momentum"] for row in report["rows"]] == [0.0, 0.9]

    def test_sweep_m_bad_values_exit_2(self, runner, cli_dataset, tmp_path):
        result = runner.invoke(
            main,
            ["sweep-m", "--data", str(cli_dataset), "--out", str(tmp_path / "s"),
             "--values", "0,banana"],
        )
        assert result.exit_code == 2

    def test_sweep_m_out_of_range_exit_2(self, runner, cli_dataset, tmp_path):
        result = runner.invoke(
            main,
            ["sweep-m", "--data", str(cli_dataset), "--out", str(tmp_path / "s"),
             "--values", "1.5"],
        )
        assert result.exit_code == 2

    def test_ablate(self, runner, cli_dataset, tmp_path):
        out = tmp_path / "ablate"
        result = runner.invoke(
            main,
            ["ablate", "--data", str(cli_dataset), "--out", str(out),
             "--steps", "1", "--episodes", "2"],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "ablation_report.json").read_text())
        assert len(report["rows"]) == 5

    def test_xdomain(self, runner, cli_run, cli_dataset, tmp_path):
        out = tmp_path / "xd"
        result = runner.invoke(
            main,
            ["xdomain", "--ckpt", str(cli_run / "checkpoint.ckpt"),
             "--data-b", str(cli_dataset), "--episodes", "2", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "xdomain_report.json").is_file()


class TestPlot:
    def test_loss_curve_and_qualitative(self, runner, cli_run, tmp_path):
        out = tmp_path / "plots"
        result = runner.invoke(
            main,
            ["plot", "--metrics", str(cli_run / "metrics.jsonl"),
             "--ckpt", str(cli_run / "checkpoint.ckpt"), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "loss_curve.png").stat().st_size > 0
        assert (out / "qualitative.png").stat().st_size > 0

    def test_sweep_bars(self, runner, cli_dataset, tmp_path):
        sweep_out = tmp_path / "sw"
        runner.invoke(
            main,
            ["sweep-m", "--data", str(cli_dataset), "--out", str(sweep_out),
             "--steps", "1", "--episodes", "2", "--values", "0,0.5"],
        )
        out = tmp_path / "plots"
        result = runner.invoke(
            main,
            ["plot", "--report", str(sweep_out / "sweep_m_report.json"), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "sweep_bars.png").stat().st_size > 0

    def test_missing_report_exits_3(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["plot", "--metrics", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "p")],
        )
        assert result.exit_code == 3

    def test_nothing_to_plot_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["plot", "--out", str(tmp_path / "p")])
        assert result.exit_code == 2


class TestHelp:
    @pytest.mark.parametrize(
        "command",
        ["gen-data", "train", "eval", "ablate", "sweep-m", "xdomain", "plot"],
    )
    def test_help_documents_flags(self, runner, command):
        result = runner.invoke(main, [command, "--help"])
        assert result.exit_code == 0
        assert "--out" in result.output or "--ckpt" in result.output
