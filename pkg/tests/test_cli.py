from pathlib import Path

import pytest
from typer.testing import CliRunner

from scripts.dfbf import app

SMOKE = str(Path(__file__).parent.parent / "configs" / "smoke.json")

runner = CliRunner()


@pytest.fixture
def finished_run(tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(app, ["pipeline", "--config", SMOKE, "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_pipeline_prints_comparison(tmp_path):
    result = runner.invoke(app, ["pipeline", "--config", SMOKE, "--out", str(tmp_path / "run")])
    assert result.exit_code == 0, result.output
    assert "DFBF" in result.output
    assert "Baseline" in result.output
    assert (tmp_path / "run" / "report.json").exists()


def test_pipeline_refuses_to_overwrite(finished_run):
    result = runner.invoke(app, ["pipeline", "--config", SMOKE, "--out", str(finished_run)])
    assert result.exit_code == 2
    assert "--force" in result.output


def test_ratio_one_is_a_config_error(finished_run):
    result = runner.invoke(app, ["prune", "--config", SMOKE, "--out", str(finished_run), "--ratio", "1.0"])
    assert result.exit_code == 2
    assert "ratio must be in [0,1)" in result.output


def test_step_commands_chain(tmp_path):
    out = str(tmp_path / "run")
    for command in (["train"], ["prune", "--ratio", "0.25"], ["synthesize", "--steps", "1"],
                    ["finetune", "--gamma", "1"]):
        result = runner.invoke(app, command + ["--config", SMOKE, "--out", out])
        assert result.exit_code == 0, result.output
    assert "head sha256 before" in result.output

    result = runner.invoke(app, ["eval", "--config", SMOKE, "--out", out])
    assert result.exit_code == 0, result.output
    assert "all" in result.output


def test_eval_missing_checkpoint(tmp_path):
    result = runner.invoke(app, ["eval", "--config", SMOKE, "--out", str(tmp_path / "empty")])
    assert result.exit_code == 3


def test_inspect_checkpoint_and_dataset(finished_run, tmp_path):
    result = runner.invoke(app, ["inspect", str(finished_run / "checkpoints" / "pruned.dfbf"),
                                 "--plot", str(tmp_path / "filters.png")])
    assert result.exit_code == 0, result.output
    assert "fingerprint" in result.output
    assert (tmp_path / "filters.png").exists()

    result = runner.invoke(app, ["inspect", str(finished_run / "datasets" / "synthetic.dfds")])
    assert result.exit_code == 0, result.output
    assert "pixel range" in result.output


def test_inspect_unknown_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"JUNKJUNK")
    result = runner.invoke(app, ["inspect", str(path)])
    assert result.exit_code == 3


def test_bad_gamma_list(finished_run):
    result = runner.invoke(app, ["sweep-gamma", "--config", SMOKE, "--out", str(finished_run), "--gammas", "a,b"])
    assert result.exit_code != 0


def test_ratio_sweep(finished_run):
    result = runner.invoke(app, ["sweep-ratio", "--config", SMOKE, "--out", str(finished_run), "--ratios", "0.25,0.5"])
    assert result.exit_code == 0, result.output
    assert "prune ratio sweep" in result.output
    assert (finished_run / "sweep_ratio.csv").exists()


def test_ratio_sweep_rejects_ratio_one(finished_run):
    result = runner.invoke(app, ["sweep-ratio", "--config", SMOKE, "--out", str(finished_run), "--ratios", "0.5,1.0"])
    assert result.exit_code == 2
