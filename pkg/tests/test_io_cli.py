import json

import numpy as np
import pytest

from covreg.cli import main
from covreg.errors import DataFormatError
from covreg.gibbs import PosteriorArchive
from covreg.io import (
    RunManifest,
    load_archive,
    load_dataset,
    read_series_csv,
    save_archive,
    save_dataset,
    write_series_csv,
)
from covreg.model import Dataset


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        n, p = 7, 3
        observed = np.ones((n, p), bool)
        observed[2, 1] = False
        data = Dataset(xs=np.arange(1, n + 1) / n,
                       y=np.where(observed, rng.standard_normal((n, p)), np.nan),
                       observed=observed)
        path = tmp_path / "d.csv"
        save_dataset(path, data)
        back = load_dataset(path)
        assert np.array_equal(back.observed, data.observed)
        assert np.array_equal(back.y[observed], data.y[observed])
        assert np.array_equal(back.xs, data.xs)

    def test_empty_cell_is_missing(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,a,b\n0.1,1.0,\n0.2,2.0,3.0\n0.3,NaN,4.0\n")
        data = load_dataset(path)
        assert data.observed.sum() == 4
        assert not data.observed[0, 1]
        assert not data.observed[2, 0]

    def test_ragged_row_line_number(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,a\n0.1,1.0\n0.2\n")
        with pytest.raises(DataFormatError, match=":3"):
            load_dataset(path)

    def test_bad_value_line_number(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,a\n0.1,oops\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_dataset(path)

    def test_header_must_start_with_predictors(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1.0,2.0\n")
        with pytest.raises(DataFormatError, match="x1"):
            load_dataset(path)

    def test_duplicate_response_warns(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,a,a\n0.1,1.0,2.0\n")
        with pytest.warns(UserWarning, match="duplicate"):
            data = load_dataset(path)
        assert data.p == 2

    def test_multi_predictor(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,x2,a\n0.1,0.5,1.0\n0.2,0.6,2.0\n")
        data = load_dataset(path)
        assert data.xs.shape == (2, 2)

    def test_block_missingness_loads(self, tmp_path):
        # wide dataset with a leading block of columns absent for early rows
        rng = np.random.default_rng(1)
        n, p, blk = 370, 183, 69
        observed = np.ones((n, p), bool)
        observed[:100, :blk] = False
        y = np.where(observed, rng.standard_normal((n, p)), np.nan)
        data = Dataset(xs=np.arange(1, n + 1) / n, y=y, observed=observed)
        path = tmp_path / "wide.csv"
        save_dataset(path, data)
        back = load_dataset(path)
        assert back.p == p
        assert not back.observed[:100, :blk].any()
        assert back.observed[100:].all()


class TestArchiveRoundTrip:
    def _archive(self, seed=0):
        rng = np.random.default_rng(seed)
        return PosteriorArchive(
            sigmas=rng.standard_normal((3, 4, 2, 2)),
            mus=rng.standard_normal((3, 4, 2)),
            traces={"sigma0": rng.random((3, 2))},
            manifest={"seed": seed, "kappa": 10.0},
        )

    def test_round_trip_exact(self, tmp_path):
        arch = self._archive()
        path = tmp_path / "a.npz"
        save_archive(path, arch, manifest=RunManifest(settings={"seed": 0}))
        back = load_archive(path)
        assert np.array_equal(back.sigmas, arch.sigmas)
        assert np.array_equal(back.mus, arch.mus)
        assert np.array_equal(back.traces["sigma0"], arch.traces["sigma0"])
        assert back.manifest["chain"]["seed"] == 0
        assert back.manifest["settings"] == {"seed": 0}

    def test_different_seeds_differ(self, tmp_path):
        a = self._archive(0)
        b = self._archive(1)
        assert not np.array_equal(a.sigmas, b.sigmas)

    def test_version_mismatch_rejected(self, tmp_path):
        arch = self._archive()
        path = tmp_path / "a.npz"
        save_archive(path, arch)
        import covreg.io as io_mod
        data = dict(np.load(path))
        payload = json.loads(bytes(data["manifest_json"].tobytes()).decode())
        payload["format_version"] = 999
        data["manifest_json"] = np.frombuffer(
            json.dumps(payload).encode(), dtype=np.uint8)
        np.savez_compressed(path, **data)
        with pytest.raises(DataFormatError, match="format"):
            io_mod.load_archive(path)


class TestSeriesCsv:
    def test_sorted_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        n, p = 5, 2
        sig = rng.standard_normal((n, p, p))
        sig = sig + sig.transpose(0, 2, 1)
        xs = np.array([0.5, 0.1, 0.9, 0.3, 0.7])
        path = tmp_path / "s.csv"
        write_series_csv(path, sig, xs)
        i, j, x, v = read_series_csv(path)
        # sorted by (element_i, element_j, x)
        order = np.lexsort((x, j, i))
        assert np.array_equal(order, np.arange(len(x)))
        # values match the source at the right positions
        xmap = {xv: t for t, xv in enumerate(xs)}
        for row in range(len(x)):
            assert v[row] == sig[xmap[x[row]], i[row] - 1, j[row] - 1]


def run_cli(*args):
    return main([str(a) for a in args])


class TestCli:
    def test_pipeline_end_to_end(self, tmp_path):
        d = tmp_path
        assert run_cli("simulate", "--preset", "gp-prior", "--seed", "7",
                       "--out", d / "data.csv",
                       "--truth-out", d / "truth.npz") == 0
        assert run_cli("fit", "--data", d / "data.csv", "--iterations", "20",
                       "--burn-in", "5", "--thin", "1", "--kappa", "10",
                       "--L", "5", "--k", "4", "--seed", "1",
                       "--out", d / "arch.npz") == 0
        assert run_cli("fit", "--data", d / "data.csv", "--iterations", "20",
                       "--burn-in", "5", "--thin", "1", "--kappa", "10",
                       "--L", "5", "--k", "4", "--seed", "2",
                       "--out", d / "arch2.npz") == 0
        assert run_cli("baseline", "mdw", "--data", d / "data.csv",
                       "--draws", "5", "--out", d / "mdw.npz") == 0
        assert run_cli("diagnose", "--data", d / "data.csv",
                       "--archive", f"fit={d/'arch.npz'}",
                       "--archive", f"fit2={d/'arch2.npz'}",
                       "--archive", f"mdw={d/'mdw.npz'}",
                       "--truth", d / "truth.npz",
                       "--outdir", d / "diag") == 0
        report = json.loads((d / "diag" / "report.json").read_text())
        assert "frobenius_mean" in report and "psrf" in report
        assert (d / "diag" / "frobenius.png").exists()
        assert run_cli("emit-series", "--data", d / "data.csv",
                       "--archive", d / "arch.npz",
                       "--out", d / "series.csv") == 0
        assert (d / "series.csv").exists()
        assert (d / "series.png").exists()

    def test_missing_input_exit_code(self, tmp_path):
        assert run_cli("fit", "--data", tmp_path / "nope.csv",
                       "--out", tmp_path / "x.npz") == 3

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("fit")  # missing required arguments
        assert exc.value.code == 2

    def test_fit_is_seed_deterministic(self, tmp_path):
        d = tmp_path
        run_cli("simulate", "--preset", "gp-prior", "--seed", "3",
                "--out", d / "data.csv")
        for name in ("a.npz", "b.npz"):
            run_cli("fit", "--data", d / "data.csv", "--iterations", "10",
                    "--burn-in", "2", "--thin", "1", "--kappa", "10",
                    "--L", "5", "--k", "4", "--seed", "5", "--out", d / name)
        a = load_archive(d / "a.npz")
        b = load_archive(d / "b.npz")
        assert np.array_equal(a.sigmas, b.sigmas)

    def test_mdw_logs_beta(self, tmp_path, caplog):
        d = tmp_path
        run_cli("simulate", "--preset", "gp-prior", "--seed", "3",
                "--out", d / "data.csv")
        import logging
        with caplog.at_level(logging.INFO, logger="covreg"):
            run_cli("baseline", "mdw", "--data", d / "data.csv", "--h0", "40",
                    "--draws", "2", "--out", d / "m.npz")
        assert any("beta = 0.975" in r.getMessage() for r in caplog.records)

    def test_kappa_heuristic_logs_ten(self, tmp_path, caplog):
        d = tmp_path
        run_cli("simulate", "--preset", "gp-prior", "--seed", "9",
                "--out", d / "data.csv")
        import logging
        with caplog.at_level(logging.INFO, logger="covreg"):
            run_cli("fit", "--data", d / "data.csv", "--iterations", "5",
                    "--burn-in", "1", "--thin", "1", "--kappa", "heuristic",
                    "--L", "5", "--k", "4", "--out", d / "a.npz")
        joined = " ".join(r.getMessage() for r in caplog.records)
        assert "rounds to 10" in joined

    def test_scale_max_var_recorded(self, tmp_path):
        d = tmp_path
        run_cli("simulate", "--preset", "gp-prior", "--seed", "3",
                "--out", d / "data.csv")
        run_cli("fit", "--data", d / "data.csv", "--iterations", "5",
                "--burn-in", "1", "--thin", "1", "--kappa", "10",
                "--L", "5", "--k", "4", "--scale", "max-var",
                "--out", d / "a.npz")
        arch = load_archive(d / "a.npz")
        assert arch.manifest["settings"]["response_scale"] != 1.0

    def test_config_file_defaults(self, tmp_path):
        d = tmp_path
        run_cli("simulate", "--preset", "gp-prior", "--seed", "3",
                "--out", d / "data.csv")
        (d / "cfg.txt").write_text("iterations = 6\nburn-in = 2\nkappa = 10\n"
                                   "L = 5\nk = 4\n")
        assert run_cli("fit", "--data", d / "data.csv",
                       "--config", d / "cfg.txt", "--out", d / "a.npz") == 0
        arch = load_archive(d / "a.npz")
        assert arch.manifest["settings"]["iterations"] == 6

    def test_predict_outputs_conditional(self, tmp_path, capsys):
        d = tmp_path
        run_cli("simulate", "--preset", "gp-prior", "--seed", "3",
                "--missing", "0.2", "--out", d / "data.csv")
        run_cli("fit", "--data", d / "data.csv", "--iterations", "10",
                "--burn-in", "2", "--thin", "1", "--kappa", "10",
                "--L", "5", "--k", "4", "--out", d / "a.npz")
        data = load_dataset(d / "data.csv")
        rows = np.flatnonzero(~data.observed.all(axis=1) &
                              data.observed.any(axis=1))
        assert run_cli("predict", "--data", d / "data.csv",
                       "--archive", d / "a.npz", "--row", int(rows[0]),
                       "--out", d / "pred.json") == 0
        pred = json.loads((d / "pred.json").read_text())
        assert len(pred["mean"]) == len(pred["missing_components"])
