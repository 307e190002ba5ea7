import os

import pandas as pd
import pytest

import discoflux
import hydro_harness as hh


@pytest.fixture(autouse=True)
def no_dotenv(mocker, monkeypatch):
    mocker.patch("discoflux.load_dotenv")
    for key in ("THREADS", "SEED", "OUT", "EVENT_BUDGET", "DRY_RUN"):
        monkeypatch.delenv("DISCOFLUX_" + key, raising=False)


def _config(tmp_path, text="grid_cells=20\nalphas=0.3,0.5\nepsilon=0.2\n"):
    path = tmp_path / "run.env"
    path.write_text(text)
    return str(path)


def test_steady_command_writes_reports(tmp_path, capsys):
    out = tmp_path / "out"
    code = discoflux.main(["steady", "--config", _config(tmp_path), "--out", str(out)])
    assert code == discoflux.EXIT_OK
    assert sorted(os.listdir(out)) == ["steady.csv", "steady_plot.csv"]
    assert len(pd.read_csv(out / "steady.csv")) == 40
    printed = capsys.readouterr().out
    assert "📝" in printed and "✅ steady done" in printed


def test_failed_check_exits_two(tmp_path, mocker, capsys):
    report = hh.ConvergenceReport(pd.DataFrame({"residual": [-0.1]}), meta={"C": 1.0, "C_refined": 3.0})
    mocker.patch.object(hh, "run_audit", return_value=report)
    code = discoflux.main(["audit", "--config", _config(tmp_path), "--out", str(tmp_path / "out")])
    assert code == discoflux.EXIT_CHECK_FAILED
    assert "⚠️" in capsys.readouterr().out


def test_error_exits_one(tmp_path, capsys):
    code = discoflux.main(["solve", "--config", str(tmp_path / "missing.env")])
    assert code == discoflux.EXIT_ERROR
    assert "❌ solve failed" in capsys.readouterr().out


def test_invalid_config_exits_one(tmp_path):
    assert discoflux.main(["steady", "--config", _config(tmp_path, "colour=blue\n")]) == discoflux.EXIT_ERROR


def test_negative_seed_exits_one(tmp_path, capsys):
    code = discoflux.main(["steady", "--config", _config(tmp_path), "--seed=-1", "--out", str(tmp_path / "o")])
    assert code == discoflux.EXIT_ERROR
    assert "seed must be a non-negative integer" in capsys.readouterr().out
    assert not (tmp_path / "o").exists()


def test_zrp_command_writes_occupancy_and_blocks(tmp_path):
    out = tmp_path / "out"
    text = "n_ladder=40\nt_end=0.05\nblock_radius=2\nsnapshot_times=0.02,0.05\n"
    assert discoflux.main(["zrp", "--config", _config(tmp_path, text), "--out", str(out)]) == discoflux.EXIT_OK
    assert sorted(os.listdir(out)) == [
        "zrp_blocks.csv", "zrp_blocks_plot.csv", "zrp_occupancy.csv", "zrp_occupancy_plot.csv",
    ]
    occupancy = pd.read_csv(out / "zrp_occupancy.csv")
    assert list(occupancy.columns) == ["t", "u", "eta"]
    assert occupancy["t"].unique().tolist() == [0.02, 0.05]
    assert list(pd.read_csv(out / "zrp_blocks.csv").columns) == ["t", "x", "eta_l"]


def test_cli_flags_become_overrides(tmp_path, mocker):
    spy = mocker.spy(hh, "load_config")
    mocker.patch.object(hh, "run_steady", return_value=pd.DataFrame({"x": [0.5]}))
    path = _config(tmp_path)
    discoflux.main(["steady", "--config", path, "--seed", "9", "--threads", "2", "--timing",
                    "--out", str(tmp_path / "o")])
    _, overrides = spy.call_args.args
    assert overrides == {"seed": 9, "out_dir": str(tmp_path / "o"), "threads": 2, "record_wall_time": True}
    assert spy.spy_return.seed == 9 and spy.spy_return.record_wall_time


def test_hydro_runs_optional_studies(tmp_path, mocker):
    convergence = hh.ConvergenceReport(pd.DataFrame({"N": [1, 2], "M": [5, 5], "l1_mean": [0.2, 0.05],
                                                     "l1_std": [0.01, 0.01]}))
    mocker.patch.object(hh, "run_hydro", return_value=convergence)
    young = mocker.patch.object(hh, "run_young_study",
                                return_value=pd.DataFrame({"N": [1, 2], "max_variance": [0.4, 0.19]}))
    eps = mocker.patch.object(hh, "run_epsilon_study", return_value=pd.DataFrame({"l1_diff": [0.1, 0.04]}))
    code = discoflux.main(["hydro", "--config", _config(tmp_path), "--out", str(tmp_path / "o"), "--young",
                           "--epsilon-study"])
    assert code == discoflux.EXIT_OK
    young.assert_called_once()
    eps.assert_called_once()
    assert sorted(os.listdir(tmp_path / "o")) == [
        "convergence.csv", "convergence_plot.csv", "epsilon.csv", "epsilon_plot.csv", "young.csv", "young_plot.csv",
    ]


def test_unknown_command():
    with pytest.raises(SystemExit):
        discoflux.main(["launch"])
