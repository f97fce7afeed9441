"""CLI contract: subcommands, exit codes, files, determinism."""

import csv
import json
import math

import numpy as np
import pytest

from loofit.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main


def run(argv):
    return main(argv)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


SIM_ARGS = ["simulate", "--model", "direct", "--tau", "0.16", "--kappa", "1.75",
            "--nx", "8", "--ny", "9", "--reps", "10", "--seed", "1"]


class TestSimulate:
    def test_writes_files_and_prints_range(self, tmp_path, capsys):
        code = run(SIM_ARGS + ["--out", str(tmp_path)])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "practical_range: 1.61624" in out
        assert (tmp_path / "dataset.json").exists()
        rows = read_csv(tmp_path / "dataset.csv")
        assert rows[0] == ["replicate", "node_index", "s1", "s2", "value", "is_outlier"]
        assert len(rows) == 1 + 10 * 72

    def test_missing_seed_is_usage_error(self, tmp_path, capsys):
        code = run(["simulate", "--model", "direct", "--tau", "0.16",
                    "--kappa", "1.75", "--out", str(tmp_path)])
        assert code == EXIT_USAGE
        assert "--seed" in capsys.readouterr().err

    def test_outlier_plan(self, tmp_path):
        code = run(SIM_ARGS + ["--outliers", "k=10,K=5", "--out", str(tmp_path)])
        assert code == EXIT_OK
        ds = json.loads((tmp_path / "dataset.json").read_text())
        assert len(ds["outlier_log"]) == 10

    def test_bad_outlier_spec(self, tmp_path, capsys):
        code = run(SIM_ARGS + ["--outliers", "k=10", "--out", str(tmp_path)])
        assert code == EXIT_USAGE
        assert "K=" in capsys.readouterr().err

    def test_byte_deterministic(self, tmp_path):
        run(SIM_ARGS + ["--out", str(tmp_path / "a")])
        run(SIM_ARGS + ["--out", str(tmp_path / "b")])
        assert (tmp_path / "a/dataset.json").read_bytes() == \
            (tmp_path / "b/dataset.json").read_bytes()
        assert (tmp_path / "a/dataset.csv").read_bytes() == \
            (tmp_path / "b/dataset.csv").read_bytes()

    def test_unknown_flag_is_hard_error(self):
        with pytest.raises(SystemExit) as exc:
            run(SIM_ARGS + ["--bogus-flag", "1"])
        assert exc.value.code == EXIT_USAGE

    def test_help_documents_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["simulate", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--seed", "--outliers", "--tau", "--kappa", "--out", "--config"):
            assert flag in text


class TestFit:
    @pytest.fixture()
    def dataset(self, tmp_path):
        run(SIM_ARGS + ["--out", str(tmp_path)])
        return tmp_path / "dataset.json"

    def test_fit_writes_report_and_csv(self, dataset, tmp_path):
        code = run(["fit", "--data", str(dataset), "--method", "loos:rcrps:2",
                    "--out", str(tmp_path / "fit")])
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "fit/fit.csv")
        assert rows[0] == ["method", "rule", "parameter", "value", "kind",
                           "wall_time_s", "n_evaluations", "converged"]
        assert rows[1][0] == "loos" and rows[1][1] == "rcrps:2"
        report = (tmp_path / "fit/fit_report.txt").read_text()
        assert "method: loos:rcrps:2" in report

    def test_rcrps_cutoff_parsed(self, dataset, tmp_path):
        code = run(["fit", "--data", str(dataset), "--method", "loos:rcrps:3.5",
                    "--out", str(tmp_path / "f2")])
        assert code == EXIT_OK
        assert read_csv(tmp_path / "f2/fit.csv")[1][1] == "rcrps:3.5"

    def test_unknown_method_lists_valid(self, dataset, capsys):
        code = run(["fit", "--data", str(dataset), "--method", "bogus"])
        assert code == EXIT_USAGE
        assert "valid methods" in capsys.readouterr().err

    def test_estimates_reproducible(self, dataset, tmp_path):
        run(["fit", "--data", str(dataset), "--method", "loos:log",
             "--out", str(tmp_path / "r1")])
        run(["fit", "--data", str(dataset), "--method", "loos:log",
             "--out", str(tmp_path / "r2")])
        a = read_csv(tmp_path / "r1/fit.csv")
        b = read_csv(tmp_path / "r2/fit.csv")
        # identical apart from the wall-time column
        for ra, rb in zip(a[1:], b[1:]):
            assert ra[:5] == rb[:5] and ra[6:] == rb[6:]

    def test_missing_dataset_is_io_error(self, tmp_path):
        code = run(["fit", "--data", str(tmp_path / "nope.json"), "--method", "ml"])
        assert code == EXIT_IO

    def test_log_loos_fit_matches_independent_pseudolikelihood(self, dataset, tmp_path):
        # independently coded conditional-density objective driven by the
        # same simplex search must land on the same estimates
        code = run(["fit", "--data", str(dataset), "--method", "loos:log",
                    "--out", str(tmp_path / "pl")])
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "pl/fit.csv")
        got = {r[2]: float(r[3]) for r in rows[1:]}

        from loofit.estimators import nelder_mead
        from loofit.gmrf import Theta, build_fem_matrices, build_precision, load_dataset

        ds = load_dataset(dataset)
        matrices = build_fem_matrices(ds.model.lattice)

        def pseudo_loglik(vec):
            theta = Theta(log_tau=float(vec[0]), log_kappa=float(vec[1]))
            q = build_precision(theta, ds.model, *matrices).toarray()
            total = 0.0
            for y in ds.replicates:
                qy = q @ y
                for i in range(ds.model.lattice.n):
                    var = 1.0 / q[i, i]
                    mean = y[i] - qy[i] * var
                    z2 = (y[i] - mean) ** 2 / var
                    total += -0.5 * (z2 + math.log(2 * math.pi * var))
            return total / ds.replicates.size

        x0 = np.array([ds.theta_true.log_tau, ds.theta_true.log_kappa])
        x, _, _, _ = nelder_mead(pseudo_loglik, x0)
        assert got["log_tau"] == pytest.approx(x[0], abs=1e-12)
        assert got["log_kappa"] == pytest.approx(x[1], abs=1e-12)


class TestStudy:
    def test_study_outputs(self, tmp_path):
        code = run(["study", "--preset", "fig2", "--repetitions", "2",
                    "--replicates", "3", "--nx", "8", "--ny", "9",
                    "--methods", "ml,loos:root", "--seed", "3",
                    "--out", str(tmp_path)])
        assert code == EXIT_OK
        est = read_csv(tmp_path / "estimates.csv")
        assert est[0] == ["repetition", "method", "parameter", "estimate", "converged"]
        assert len(est) == 1 + 2 * 2 * 2
        assert (tmp_path / "timings.csv").exists()
        assert (tmp_path / "summary.csv").exists()
        manifest = (tmp_path / "manifest.txt").read_text()
        assert "config_hash:" in manifest and "seed: 3" in manifest

    def test_study_byte_deterministic(self, tmp_path):
        args = ["study", "--preset", "fig2", "--repetitions", "2",
                "--replicates", "3", "--nx", "8", "--ny", "9",
                "--methods", "loos:root", "--seed", "4"]
        run(args + ["--out", str(tmp_path / "a")])
        run(args + ["--out", str(tmp_path / "b"), "--threads", "2"])
        for name in ("estimates.csv", "summary.csv", "manifest.txt"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_unknown_preset(self, capsys):
        code = run(["study", "--preset", "fig99", "--seed", "1"])
        assert code == EXIT_USAGE
        assert "preset" in capsys.readouterr().err

    def test_config_file_provides_defaults_flags_override(self, tmp_path):
        config = {"preset": "fig2", "repetitions": 2, "replicates": 3,
                  "nx": 8, "ny": 9, "methods": "loos:root", "seed": 11}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        run(["study", "--config", str(cfg_path), "--out", str(tmp_path / "c1")])
        m1 = (tmp_path / "c1/manifest.txt").read_text()
        assert "seed: 11" in m1
        run(["study", "--config", str(cfg_path), "--seed", "12",
             "--out", str(tmp_path / "c2")])
        m2 = (tmp_path / "c2/manifest.txt").read_text()
        assert "seed: 12" in m2


class TestOtherSubcommands:
    def test_version(self, capsys):
        assert run(["version"]) == EXIT_OK
        assert "loofit 0.1.0" in capsys.readouterr().out

    def test_score_negate(self, capsys):
        assert run(["score", "--rule", "log", "--mu", "0", "--sigma", "1",
                    "--y", "0"]) == EXIT_OK
        plain = float(capsys.readouterr().out)
        assert run(["score", "--rule", "log", "--mu", "0", "--sigma", "1",
                    "--y", "0", "--negate"]) == EXIT_OK
        assert float(capsys.readouterr().out) == -plain

    def test_godambe_csv(self, tmp_path):
        code = run(["godambe", "--theta", "0.16,1.75", "--methods", "ml",
                    "--nsims", "100", "--replicates", "3", "--nx", "5", "--ny", "5",
                    "--seed", "5", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "godambe.csv")
        assert rows[0] == ["theta", "parameter", "ml"]
        assert len(rows) == 3
        long_rows = read_csv(tmp_path / "godambe_rows.csv")
        assert long_rows[0][:5] == ["method", "rule", "parameter", "value", "kind"]
        assert long_rows[1][4] == "asymptotic_sd"
        assert "godambe report" in (tmp_path / "godambe_report.txt").read_text()

    def test_benchmark_manifest_has_slopes(self, tmp_path):
        code = run(["benchmark", "--sizes", "49,100", "--reps", "1",
                    "--methods", "loos:root", "--seed", "6", "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert "slope[loos:root]:" in (tmp_path / "manifest.txt").read_text()
        rows = read_csv(tmp_path / "runtime.csv")
        assert rows[0] == ["n", "method", "mode", "seconds", "timing_reps"]

    def test_predictive_csv(self, tmp_path):
        code = run(["predictive", "--repetitions", "2", "--replicates", "3",
                    "--nx", "8", "--ny", "9", "--obs-count", "20",
                    "--test-count", "8", "--seed", "7", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "predictive.csv")
        assert rows[0] == ["repetition", "outlier_magnitude", "protocol", "metric",
                           "value_loos", "value_ml", "rel_diff_pct"]
        assert len(rows) == 1 + 2 * 2 * 2

    def test_unwritable_output_is_io_error(self, tmp_path):
        code = run(SIM_ARGS + ["--out", "/dev/null/impossible"])
        assert code == EXIT_IO
