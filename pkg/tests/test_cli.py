import json

import pytest

from mlcsim.cli import (
    EXIT_CONVERGENCE,
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    main,
)
from mlcsim.em import FitResult
from mlcsim.harness import read_csv
from mlcsim.simulate import SimConfig


def small_sim_config(**overrides):
    d = SimConfig(n_patients=400, n_trusts=8, beta_t=0.5, seed=11).to_dict()
    d.update(overrides)
    return d


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def smoke_grid_config():
    return {
        "kinds": ["binary"],
        "beta_t": {"binary": [0.5]},
        "error_fractions": [0.33],
        "seeds": [1],
        "n_datasets": 3,
        "models": {"binary": ["1P2T"]},
        "base": small_sim_config(),
    }


GRID_FLAGS = ["--restarts", "3", "--max-iter", "100"]


class TestSimulate:
    def test_default_config_row_count(self, tmp_path):
        out = tmp_path / "data"
        assert main(["simulate", "--out", str(out)]) == EXIT_OK
        rows = (out / "dataset.csv").read_text().splitlines()
        assert rows[0] == "trust_id,age,sex,ses,outcome"
        assert len(rows) == 24_640 + 1
        side = json.loads((out / "truth.json").read_text())
        assert len(side["trust_covariate"]) == 19

    def test_determinism(self, tmp_path):
        cfg = write_config(tmp_path, small_sim_config())
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "dataset.csv").read_bytes() == (
            tmp_path / "b" / "dataset.csv"
        ).read_bytes()

    def test_invalid_config_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, small_sim_config(n_patients=10))
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
        assert "n_patients" in capsys.readouterr().err

    def test_seed_override_changes_output(self, tmp_path):
        cfg = write_config(tmp_path, small_sim_config())
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--seed-override", "99", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "dataset.csv").read_bytes() != (
            tmp_path / "b" / "dataset.csv"
        ).read_bytes()


@pytest.fixture()
def simulated(tmp_path):
    cfg = write_config(tmp_path, small_sim_config())
    out = tmp_path / "data"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    return out


class TestFit:
    def test_single_class_converges_fast(self, tmp_path, simulated):
        out = tmp_path / "fit.json"
        code = main([
            "fit", "--data", str(simulated), "--model", "1P1T", "--out", str(out),
            "--restarts", "2",
        ])
        assert code == EXIT_OK
        result = FitResult.from_json(out.read_text())
        assert result.converged
        assert result.n_iter <= 2

    def test_two_class_posteriors_normalized(self, tmp_path, simulated):
        out = tmp_path / "fit2.json"
        code = main([
            "fit", "--data", str(simulated), "--model", "1P2T", "--out", str(out),
            "--restarts", "3",
        ])
        assert code == EXIT_OK
        result = FitResult.from_json(out.read_text())
        sums = result.trust_posteriors.sum(axis=1)
        assert max(abs(s - 1.0) for s in sums) < 1e-10

    def test_missing_file_is_io_error(self, tmp_path):
        code = main([
            "fit", "--data", str(tmp_path / "nope"), "--model", "1P2T",
            "--out", str(tmp_path / "f.json"),
        ])
        assert code == EXIT_IO
        assert code != EXIT_CONVERGENCE

    def test_bad_model_label_is_validation_error(self, tmp_path, simulated):
        code = main([
            "fit", "--data", str(simulated), "--model", "junk",
            "--out", str(tmp_path / "f.json"),
        ])
        assert code == EXIT_VALIDATION


class TestRecover:
    def test_recover_round_trip(self, tmp_path, simulated):
        fit_path = tmp_path / "fit.json"
        main([
            "fit", "--data", str(simulated), "--model", "1P2T",
            "--out", str(fit_path), "--restarts", "3",
        ])
        out = tmp_path / "recovered.json"
        code = main([
            "recover", "--fit", str(fit_path), "--data", str(simulated),
            "--out", str(out),
        ])
        assert code == EXIT_OK
        payload = json.loads(out.read_text())
        assert payload["beta_t_sim"] == 0.5
        assert not payload["excluded"]
        assert abs(payload["beta_t_rec"] - 0.5) < 0.15


class TestGrid:
    def test_smoke_grid(self, tmp_path):
        cfg = write_config(tmp_path, smoke_grid_config(), "grid.json")
        out = tmp_path / "run"
        code = main(["grid", "--config", cfg, "--out", str(out)] + GRID_FLAGS)
        assert code == EXIT_OK
        assert (out / "results.csv").exists()
        assert (out / "summary.csv").exists()
        assert (out / "manifest.json").exists()

    def test_worker_determinism(self, tmp_path):
        cfg = write_config(tmp_path, smoke_grid_config(), "grid.json")
        main(["grid", "--config", cfg, "--out", str(tmp_path / "w1"), "--workers", "1"] + GRID_FLAGS)
        main(["grid", "--config", cfg, "--out", str(tmp_path / "w8"), "--workers", "8"] + GRID_FLAGS)
        assert (tmp_path / "w1" / "results.csv").read_bytes() == (
            tmp_path / "w8" / "results.csv"
        ).read_bytes()

    def test_models_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path, smoke_grid_config(), "grid.json")
        out = tmp_path / "run"
        code = main([
            "grid", "--config", cfg, "--out", str(out), "--models", "1P2T,1P3T",
        ] + GRID_FLAGS)
        assert code == EXIT_OK
        rows = read_csv(str(out / "results.csv"))
        assert {r["model_t"] for r in rows} == {"2", "3"}

    def test_resume_mismatch_refused(self, tmp_path):
        cfg = write_config(tmp_path, smoke_grid_config(), "grid.json")
        out = tmp_path / "run"
        main(["grid", "--config", cfg, "--out", str(out)] + GRID_FLAGS)
        changed = smoke_grid_config()
        changed["n_datasets"] = 4
        cfg2 = write_config(tmp_path, changed, "grid2.json")
        code = main(["grid", "--config", cfg2, "--out", str(out)] + GRID_FLAGS)
        assert code == EXIT_VALIDATION


@pytest.fixture(scope="module")
def grid_outputs(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("gridrun")
    grid = {
        "kinds": ["binary", "continuous"],
        "beta_t": {"binary": [0.25, 0.5], "continuous": [0.12, 0.2]},
        "error_fractions": [0.33, 0.5],
        "seeds": [1],
        "n_datasets": 2,
        "models": {"binary": ["1P2T"], "continuous": ["1P2T", "1P3T"]},
        "base": small_sim_config(),
    }
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps(grid))
    out = tmp_path / "run"
    assert main(["grid", "--config", str(cfg), "--out", str(out)] + GRID_FLAGS) == EXIT_OK
    return out


class TestSummarizeAndPlotData:
    def test_summarize_matches_grid_summary(self, tmp_path, grid_outputs):
        out = tmp_path / "summary2.csv"
        code = main([
            "summarize", "--results", str(grid_outputs / "results.csv"),
            "--out", str(out),
        ])
        assert code == EXIT_OK
        assert out.read_bytes() == (grid_outputs / "summary.csv").read_bytes()

    def test_fig2_pools_models(self, tmp_path, grid_outputs):
        out = tmp_path / "fig2.csv"
        code = main([
            "plot-data", "--summary", str(grid_outputs / "summary.csv"),
            "--figure", "fig2", "--out", str(out),
        ])
        assert code == EXIT_OK
        rows = read_csv(str(out))
        assert {r["simulated"] for r in rows} == {"0.25", "0.5"}
        assert all(r["equality"] == r["simulated"] for r in rows)

    def test_fig3_excludes_lowest_beta(self, tmp_path, grid_outputs):
        out = tmp_path / "fig3.csv"
        code = main([
            "plot-data", "--summary", str(grid_outputs / "summary.csv"),
            "--figure", "fig3", "--out", str(out),
        ])
        assert code == EXIT_OK
        rows = read_csv(str(out))
        assert {r["simulated"] for r in rows} == {"0.2"}
        assert {r["model_t"] for r in rows} == {"2", "3"}

    def test_unknown_figure_is_usage_error(self, tmp_path, grid_outputs):
        code = main([
            "plot-data", "--summary", str(grid_outputs / "summary.csv"),
            "--figure", "fig9", "--out", str(tmp_path / "x.csv"),
        ])
        assert code == EXIT_VALIDATION

    def test_empty_summary_rejected(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("kind,beta_t_sim,error_frac,seed,model_p,model_t,median,ci_lo,ci_hi,n_excluded\n")
        out = tmp_path / "fig.csv"
        code = main([
            "plot-data", "--summary", str(empty), "--figure", "fig2", "--out", str(out),
        ])
        assert code == EXIT_VALIDATION
        assert not out.exists()


def test_version_flag():
    assert main(["--version"]) == EXIT_OK
