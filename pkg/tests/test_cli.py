"""CLI contract: artifact schemas, determinism, holdout splitting, scree
output, manifests, and the 0/2/3 exit-code contract."""

import json
from pathlib import Path

import numpy as np
import pytest

from gradedvi import diffkernel as dk
from gradedvi.cli import main
from gradedvi.fitting import FitConfig, init_state
from gradedvi.grm import GrmParams, GrmValues, softplus_inv
from gradedvi.simlab import SimDesign, read_responses_csv, simulate, write_responses_csv


def write_design(path, **kw):
    doc = {"n_respondents": 60, "n_items": 6, "n_factors": 2, "categories": 3,
           "structure": "simple", "seed": 5}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return doc


def write_config(path, **kw):
    doc = {"estimator": "IWAE", "n_factors": 2, "R": 3, "S": 1, "batch_size": 30,
           "max_iterations": 40, "window": 10, "patience": 2,
           "encoder_hidden": [8], "disc_hidden": [8], "clr_step_size": 20,
           "seed": 3}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return doc


def params_from_values(values: GrmValues, mask, categories) -> GrmParams:
    """Raw parameters whose reconstruction equals the given effective values."""
    maxc = int(np.max(categories))
    base = np.array([[a[0]] for a in values.intercepts])
    incr = []
    for k in range(maxc - 2):
        col = np.array([[softplus_inv(a[k] - a[k + 1] - 1e-6)] for a in values.intercepts])
        incr.append(col)
    chol = np.linalg.cholesky(values.factor_corr)
    chol_raw = np.tril(chol, -1) + np.diag(softplus_inv(np.diag(chol)))
    return GrmParams(
        loadings_raw=dk.parameter(values.loadings),
        intercept_base=dk.parameter(base),
        intercept_incr_raw=[dk.parameter(c) for c in incr],
        chol_raw=dk.parameter(chol_raw),
        loading_mask=np.asarray(mask, dtype=float),
        categories=np.asarray(categories),
        loading_positivity=False,
    )


class TestSimulate:
    def test_full_design_shapes_and_range(self, tmp_path):
        design = tmp_path / "design.json"
        write_design(design, n_respondents=500, n_items=50, n_factors=5,
                     categories=5)
        out = tmp_path / "sims"
        assert main(["simulate", "--design", str(design), "--out", str(out)]) == 0
        resp = read_responses_csv(out / "responses_rep000.csv")
        assert resp.data.shape == (500, 50)
        assert resp.data.min() >= 0 and resp.data.max() <= 4
        assert (out / "truth_rep000.json").exists()
        assert (out / "manifest.json").exists()

    def test_single_respondent_edge(self, tmp_path):
        design = tmp_path / "design.json"
        write_design(design, n_respondents=1)
        out = tmp_path / "sims"
        assert main(["simulate", "--design", str(design), "--out", str(out)]) == 0
        resp = read_responses_csv(out / "responses_rep000.csv",
                                  categories=np.full(6, 3))
        assert resp.data.shape == (1, 6)

    def test_rerun_byte_identical(self, tmp_path):
        design = tmp_path / "design.json"
        write_design(design)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--design", str(design), "--out", str(out1)])
        main(["simulate", "--design", str(design), "--out", str(out2)])
        assert ((out1 / "responses_rep000.csv").read_bytes()
                == (out2 / "responses_rep000.csv").read_bytes())
        assert ((out1 / "truth_rep000.json").read_bytes()
                == (out2 / "truth_rep000.json").read_bytes())

    def test_replications_get_distinct_seeds(self, tmp_path):
        design = tmp_path / "design.json"
        write_design(design, n_replications=2)
        out = tmp_path / "sims"
        main(["simulate", "--design", str(design), "--out", str(out)])
        a = (out / "responses_rep000.csv").read_bytes()
        b = (out / "responses_rep001.csv").read_bytes()
        assert a != b

    def test_invalid_design_exits_2(self, tmp_path, capsys):
        design = tmp_path / "design.json"
        write_design(design, n_items=7, n_factors=2)  # simple needs P | M
        code = main(["simulate", "--design", str(design), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "P | M" in capsys.readouterr().err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    truth = simulate(SimDesign(n_respondents=60, n_items=6, n_factors=2,
                               categories=3, structure="simple", seed=5))
    path = root / "responses.csv"
    write_responses_csv(path, truth.responses)
    return path, truth


class TestFit:
    def test_smoke_and_artifacts(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        write_config(cfg)
        out = tmp_path / "fit"
        assert main(["fit", "--config", str(cfg), "--responses", str(resp_path),
                     "--out", str(out)]) == 0
        doc = json.loads((out / "fit.json").read_text())
        assert doc["schema_version"] == 1
        assert doc["convergence"]["status"] in ("converged", "max_iterations")
        assert (out / "diagnostics.csv").read_text().splitlines()[0] == \
            "iteration,batch_iw_elbo,disc_loss,lr_encoder,lr_disc"
        assert (out / "manifest.json").exists()

    def test_determinism_byte_identical(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        write_config(cfg)
        out1, out2 = tmp_path / "f1", tmp_path / "f2"
        main(["fit", "--config", str(cfg), "--responses", str(resp_path), "--out", str(out1)])
        main(["fit", "--config", str(cfg), "--responses", str(resp_path), "--out", str(out2)])
        assert (out1 / "fit.json").read_bytes() == (out2 / "fit.json").read_bytes()

    def test_flag_overrides_win(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        write_config(cfg, max_iterations=40)
        out = tmp_path / "fit"
        main(["fit", "--config", str(cfg), "--responses", str(resp_path),
              "--out", str(out), "--max-iterations", "7"])
        doc = json.loads((out / "fit.json").read_text())
        assert doc["convergence"]["iterations"] == 7
        assert doc["config"]["max_iterations"] == 7

    def test_zero_learning_rate_moves_nothing(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        doc = write_config(cfg, base_lr=0.0, disc_base_lr=0.0, max_iterations=15)
        out = tmp_path / "fit"
        assert main(["fit", "--config", str(cfg), "--responses", str(resp_path),
                     "--out", str(out)]) == 0
        fit_doc = json.loads((out / "fit.json").read_text())
        assert fit_doc["convergence"]["status"] in ("max_iterations", "converged")
        config = FitConfig.from_dict(doc)
        state, _, _ = init_state(read_responses_csv(resp_path), config)
        init_raw = state.params.loadings_raw.data
        np.testing.assert_array_equal(
            np.asarray(fit_doc["params"]["raw"]["loadings_raw"]), init_raw)

    def test_unreadable_csv_exits_2(self, tmp_path):
        cfg = tmp_path / "config.json"
        write_config(cfg)
        bad = tmp_path / "bad.csv"
        bad.write_text("item_1,item_2\n0,not_an_int\n")
        code = main(["fit", "--config", str(cfg), "--responses", str(bad),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_csv_exits_2(self, tmp_path):
        cfg = tmp_path / "config.json"
        write_config(cfg)
        code = main(["fit", "--config", str(cfg), "--responses",
                     str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_invalid_config_exits_2(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        write_config(cfg, estimator="VAE", R=9)
        code = main(["fit", "--config", str(cfg), "--responses", str(resp_path),
                     "--out", str(tmp_path / "o")])
        assert code == 2


class TestEval:
    def _fake_fit_doc(self, values, mask, categories, structure="simple"):
        params = params_from_values(values, mask, categories)
        return {"schema_version": 1, "estimator": "IWAE",
                "config": {"estimator": "IWAE", "n_factors": values.n_factors,
                           "loading_structure": structure, "seed": 0},
                "params": params.to_dict(),
                "networks": {"encoder": None, "discriminator": None,
                             "feature_missing_block": False},
                "trace": {}, "convergence": {"status": "converged", "iterations": 1}}

    def test_perfect_fit_zero_mse(self, dataset, tmp_path):
        _, truth = dataset
        fits = tmp_path / "fits"
        truths = tmp_path / "truths"
        fits.mkdir()
        truths.mkdir()
        doc = self._fake_fit_doc(truth.values, truth.loading_mask,
                                 truth.responses.categories)
        (fits / "fit_rep000.json").write_text(json.dumps(doc))
        from gradedvi.simlab import write_truth_json
        write_truth_json(truths / "truth_rep000.json", truth)
        out = tmp_path / "report.json"
        assert main(["eval", "--fits", str(fits), "--truths", str(truths),
                     "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["blocks"]["loadings"]["mse"] < 1e-12
        assert rep["blocks"]["intercepts"]["mse"] < 1e-12
        assert set(rep["blocks"]) == {"loadings", "intercepts", "correlations"}

    def test_bias_matches_injected_shift(self, dataset, tmp_path):
        _, truth = dataset
        shifted = GrmValues(
            loadings=truth.values.loadings + 0.1 * truth.loading_mask,
            intercepts=[a + 0.1 for a in truth.values.intercepts],
            factor_corr=truth.values.factor_corr)
        fits = tmp_path / "fits"
        truths = tmp_path / "truths"
        fits.mkdir()
        truths.mkdir()
        doc = self._fake_fit_doc(shifted, truth.loading_mask,
                                 truth.responses.categories)
        (fits / "fit_rep000.json").write_text(json.dumps(doc))
        from gradedvi.simlab import write_truth_json
        write_truth_json(truths / "truth_rep000.json", truth)
        out = tmp_path / "report.json"
        main(["eval", "--fits", str(fits), "--truths", str(truths), "--out", str(out)])
        rep = json.loads(out.read_text())
        assert rep["blocks"]["intercepts"]["bias"] == pytest.approx(0.1, abs=1e-9)
        # loadings bias averaged over the whole (masked) matrix
        frac_on = truth.loading_mask.mean()
        assert rep["blocks"]["loadings"]["bias"] == pytest.approx(0.1 * frac_on, abs=1e-9)

    def test_shape_mismatch_exits_2(self, dataset, tmp_path):
        _, truth = dataset
        other = simulate(SimDesign(n_respondents=10, n_items=4, n_factors=2,
                                   categories=3, structure="simple", seed=1))
        fits = tmp_path / "fits"
        truths = tmp_path / "truths"
        fits.mkdir()
        truths.mkdir()
        doc = self._fake_fit_doc(other.values, other.loading_mask,
                                 other.responses.categories)
        (fits / "fit_rep000.json").write_text(json.dumps(doc))
        from gradedvi.simlab import write_truth_json
        write_truth_json(truths / "truth_rep000.json", truth)
        code = main(["eval", "--fits", str(fits), "--truths", str(truths),
                     "--out", str(tmp_path / "r.json")])
        assert code == 2


@pytest.fixture(scope="module")
def big_fit(tmp_path_factory):
    root = tmp_path_factory.mktemp("big")
    truth = simulate(SimDesign(n_respondents=500, n_items=8, n_factors=1,
                               categories=3, structure="none", seed=6))
    resp_path = root / "responses.csv"
    write_responses_csv(resp_path, truth.responses)
    cfg = root / "config.json"
    cfg.write_text(json.dumps({"estimator": "IWAE", "n_factors": 1, "R": 2,
                               "batch_size": 100, "max_iterations": 5,
                               "window": 5, "patience": 2,
                               "encoder_hidden": [8], "seed": 11}))
    out = root / "fit"
    assert main(["fit", "--config", str(cfg), "--responses", str(resp_path),
                 "--out", str(out)]) == 0
    return resp_path, out / "fit.json"


class TestHeldout:
    def test_quarter_fraction_gives_125_of_500(self, big_fit, tmp_path, capsys):
        resp_path, fit_path = big_fit
        out = tmp_path / "heldout.json"
        assert main(["heldout", "--fit", str(fit_path), "--responses", str(resp_path),
                     "--fraction", "0.25", "--r-eval", "8", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["n_holdout"] == 125
        assert len(doc["holdout_ids"]) == 125

    def test_r_eval_one_flagged_high_variance(self, big_fit, tmp_path):
        resp_path, fit_path = big_fit
        out = tmp_path / "heldout.json"
        assert main(["heldout", "--fit", str(fit_path), "--responses", str(resp_path),
                     "--fraction", "0.25", "--r-eval", "1", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["high_variance"]

    def test_same_seed_shares_split(self, big_fit, tmp_path):
        resp_path, fit_path = big_fit
        out1, out2 = tmp_path / "h1.json", tmp_path / "h2.json"
        main(["heldout", "--fit", str(fit_path), "--responses", str(resp_path),
              "--fraction", "0.25", "--r-eval", "4", "--out", str(out1)])
        main(["heldout", "--fit", str(fit_path), "--responses", str(resp_path),
              "--fraction", "0.25", "--r-eval", "16", "--out", str(out2)])
        a = json.loads(out1.read_text())["holdout_ids"]
        b = json.loads(out2.read_text())["holdout_ids"]
        assert a == b

    def test_bad_fraction_exits_2(self, big_fit, tmp_path):
        resp_path, fit_path = big_fit
        code = main(["heldout", "--fit", str(fit_path), "--responses", str(resp_path),
                     "--fraction", "1.5", "--r-eval", "4"])
        assert code == 2


class TestScree:
    def test_two_factor_list_gives_two_rows(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        write_config(cfg, max_iterations=20, r_eval=8, holdout_fraction=0.25)
        out = tmp_path / "scree"
        assert main(["scree", "--responses", str(resp_path), "--config", str(cfg),
                     "--factors", "1,2", "--out", str(out)]) == 0
        lines = (out / "scree.csv").read_text().splitlines()
        assert lines[0] == "P,heldout_loglik"
        assert len(lines) == 3
        assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 2]
        assert (out / "manifest.json").exists()

    def test_empty_factor_list_exits_2(self, dataset, tmp_path):
        resp_path, _ = dataset
        cfg = tmp_path / "config.json"
        write_config(cfg)
        assert main(["scree", "--responses", str(resp_path), "--config", str(cfg),
                     "--factors", "", "--out", str(tmp_path / "s")]) == 2
