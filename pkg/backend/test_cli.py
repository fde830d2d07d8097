import pytest

from trialdesign import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main


def test_size_builtin_prints_csv(capsys):
    assert main(["size", "moderate-efficacy", "--format", "csv"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("design,total_py,expected_events,aux_json")
    assert "accf" in out


def test_size_with_design_override(capsys):
    assert main(["size", "moderate-efficacy", "--design", "single_arm"]) == EXIT_OK
    assert "single_arm" in capsys.readouterr().out


def test_bad_config_exits_with_config_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("version: 1\nhypothesis: {gamma: 0.5, gamma_alt: 0.2}\nscenario: {lambda_P: 0.03, lambda_A: 0.01}\n")
    assert main(["size", str(path)]) == EXIT_CONFIG
    assert "hypothesis.gamma_alt" in capsys.readouterr().err


def test_infeasible_design_exits_with_code_two(tmp_path, capsys):
    path = tmp_path / "noisy.yaml"
    path.write_text(
        "version: 1\n"
        "hypothesis: {gamma: 0.5, gamma_alt: 1.36}\n"
        "scenario: {lambda_P: 0.03, placebo_to_active_ratio: 2.2}\n"
        "counterfactual: {kind: fixed_variance, c_p0: 0.0, c_p1: 1.0}\n"
    )
    assert main(["size", str(path)]) == EXIT_INFEASIBLE
    assert "limiting power" in capsys.readouterr().err


def test_zero_replicates_rejected(capsys):
    assert main(["simulate", "moderate-efficacy", "--replicates", "0"]) == EXIT_CONFIG


def test_simulate_writes_csv(tmp_path, capsys):
    code = main(["simulate", "moderate-efficacy", "--replicates", "50", "--seed", "3", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "simulate.csv").exists()


def test_analyze_figA1(capsys):
    assert main(["analyze", "figA1", "--format", "csv"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("x,value")


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["plot"])


def test_reproduce_takes_separate_reps_per_cell(tmp_path, capsys):
    code = main(["reproduce", "figA1", "--reps-per-cell", "5", "--replicates", "7", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "figA1" / "comparison.csv").exists()


def test_zero_reps_per_cell_rejected(capsys):
    assert main(["reproduce", "figA1", "--reps-per-cell", "0"]) == EXIT_CONFIG
    assert "--reps-per-cell" in capsys.readouterr().err
