import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mixpost.cli import main
from mixpost.core import (Dataset, GammaNormalParams, SourceSpec, TobitParams,
                          load_dataset, save_dataset, save_multilead)
from mixpost.gamma_normal import predict_student_batch
from mixpost.simstudy import STUDY_K, STUDY_PARAMS, simulate_gamma_normal, simulate_tobit

SMALL_K = (1, 4, 6, 1)


@pytest.fixture(scope="module")
def gauss_csv(tmp_path_factory):
    d = simulate_gamma_normal(STUDY_PARAMS, SMALL_K, 80, np.random.default_rng(0))
    path = tmp_path_factory.mktemp("data") / "gauss.csv"
    save_dataset(d, path)
    return path


@pytest.fixture(scope="module")
def precip_csv(tmp_path_factory):
    d = simulate_tobit(TobitParams(STUDY_PARAMS, gamma_power=0.5), SMALL_K, 80,
                       np.random.default_rng(1))
    path = tmp_path_factory.mktemp("data") / "precip.csv"
    save_dataset(d, path)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_fit_gaussian(gauss_csv, tmp_path):
    assert main(["fit", "--data", str(gauss_csv), "--out-dir", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "params.json").read_text())
    assert d["model"] == "gamma_normal" and len(d["a"]) == 4
    assert [s["member_count"] for s in d["sources"]] == [4, 6, 1]
    assert read_csv(tmp_path / "trace.csv")[0][0] == "iteration"


def test_fit_precipitation_is_reproducible(precip_csv, tmp_path):
    args = ["fit", "--data", str(precip_csv), "--kind", "precip", "--seed", "3",
            "--sem-iterations", "30"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    d = json.loads((tmp_path / "a" / "params.json").read_text())
    assert d["model"] == "tobit" and 0 < d["gamma_power"] <= 1
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_predict_gaussian_matches_library(gauss_csv, tmp_path):
    main(["fit", "--data", str(gauss_csv), "--out-dir", str(tmp_path)])
    assert main(["predict", "--data", str(gauss_csv), "--params",
                 str(tmp_path / "params.json"), "--out-dir", str(tmp_path),
                 "--ecc-template", "all"]) == 0
    rows = read_csv(tmp_path / "predictive.csv")
    assert rows[0] == ["time", "location", "scale", "dof"]
    from mixpost.core import load_params
    params = load_params(tmp_path / "params.json")
    loc, scale, dof = predict_student_batch(params, load_dataset(gauss_csv))
    assert [float(r[1]) for r in rows[1:]] == loc.tolist()
    assert [float(r[2]) for r in rows[1:]] == scale.tolist()
    scen = read_csv(tmp_path / "scenarios" / "time_0.csv")
    assert len(scen) == 1 + 11


def test_predict_precipitation_samples_are_seeded(precip_csv, tmp_path):
    main(["fit", "--data", str(precip_csv), "--kind", "precip", "--sem-iterations", "20",
          "--out-dir", str(tmp_path)])
    args = ["predict", "--data", str(precip_csv), "--kind", "precip", "--params",
            str(tmp_path / "params.json"), "--samples", "1000", "--seed", "7",
            "--forecast-iterations", "300", "--forecast-burn-in", "50"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "samples.csv").read_bytes()
    assert a == (tmp_path / "b" / "samples.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "samples.csv")
    assert len(rows) == 1 + 80 * 1000 and all(float(r[2]) >= 0 for r in rows[1:])


def test_predict_missing_source_names_it(gauss_csv, tmp_path, capsys):
    main(["fit", "--data", str(gauss_csv), "--out-dir", str(tmp_path)])
    text = gauss_csv.read_text().splitlines()
    kept = [text[0]] + [l for l in text[1:] if l.split(",")[1] != "2"]
    bad = tmp_path / "missing.csv"
    bad.write_text("\n".join(kept) + "\n")
    code = main(["predict", "--data", str(bad), "--params", str(tmp_path / "params.json"),
                 "--out-dir", str(tmp_path / "p")])
    assert code == 1
    assert "source 2" in capsys.readouterr().err
    assert not (tmp_path / "p").exists()


def test_bad_input_exit_code_and_no_output(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,source_id,member_id,value\n0,0,1,x\n")
    assert main(["fit", "--data", str(bad), "--out-dir", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    assert main(["fit"]) == 1
    assert main(["nonsense"]) == 1


def test_numerical_failure_exit_code(tmp_path):
    # a constant precipitation record has no positive values to fit a power to
    d = Dataset([SourceSpec(1, 2)], np.arange(20), np.ones((20, 2)), np.zeros(20),
                "precipitation")
    path = tmp_path / "dry.csv"
    save_dataset(d, path)
    assert main(["fit", "--data", str(path), "--kind", "precip",
                 "--out-dir", str(tmp_path / "o")]) == 1
    # EM cannot start when every member is identical across cases
    d = Dataset([SourceSpec(1, 2)], np.arange(20), np.ones((20, 2)),
                np.random.default_rng(0).normal(size=20))
    save_dataset(d, path)
    assert main(["fit", "--data", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_config_file_and_flag_precedence(gauss_csv, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(gauss_csv), "max_iterations": 3,
                               "out_dir": str(tmp_path / "c")}))
    assert main(["fit", "--config", str(cfg)]) == 0
    assert len(read_csv(tmp_path / "c" / "trace.csv")) == 1 + 4
    assert main(["fit", "--config", str(cfg), "--max-iterations", "5"]) == 0
    assert len(read_csv(tmp_path / "c" / "trace.csv")) == 1 + 6
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["fit", "--config", str(cfg)]) == 1


def test_verify_perfect_forecasts_score_zero(gauss_csv, tmp_path):
    data = load_dataset(gauss_csv)
    fc = tmp_path / "samples.csv"
    with open(fc, "w") as fh:
        fh.write("time,draw_index,value\n")
        for t, y in zip(data.times, data.observations):
            for i in range(3):
                fh.write(f"{t},{i},{float(y)!r}\n")
    assert main(["verify", "--data", str(gauss_csv), "--forecasts", str(fc),
                 "--out-dir", str(tmp_path / "v")]) == 0
    rows = read_csv(tmp_path / "v" / "scores.csv")
    forecast = [r for r in rows if r[1] == "forecast"][0]
    assert float(forecast[2]) == 0.0
    assert (tmp_path / "v" / "hist_forecast.svg").read_text().startswith("<svg")
    assert {r[1] for r in rows[1:]} == {"forecast", "raw_1", "raw_2", "raw_3"}


def test_verify_multilead_and_determinism(tmp_path):
    rng = np.random.default_rng(2)
    ds = [simulate_gamma_normal(STUDY_PARAMS, SMALL_K, 60, rng, lead_time=h) for h in (1, 2)]
    data = tmp_path / "m.csv"
    save_multilead(ds, data)
    main(["fit", "--data", str(data), "--out-dir", str(tmp_path / "f")])
    assert (tmp_path / "f" / "params_lead2.json").exists()
    main(["predict", "--data", str(data), "--params", str(tmp_path / "f"),
          "--out-dir", str(tmp_path / "f"), "--ecc-template", "1"])
    assert read_csv(tmp_path / "f" / "scenarios" / "time_0.csv")[1][:2] == ["1", "1"]
    for name in ("a", "b"):
        assert main(["verify", "--data", str(data), "--forecasts", str(tmp_path / "f"),
                     "--seed", "4", "--out-dir", str(tmp_path / name)]) == 0
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
    leads = {r[0] for r in read_csv(tmp_path / "a" / "scores.csv")[1:]}
    assert leads == {"1", "2"}


def test_exchangeability_detects_biased_member(tmp_path):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 6))
    X[:, ::2] += 0.8       # even-indexed members come from a warmer model
    d = Dataset([SourceSpec(1, 6)], np.arange(200), X, rng.normal(size=200))
    path = tmp_path / "ex.csv"
    save_dataset(d, path)
    assert main(["exchangeability", "--data", str(path), "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "exchangeability.csv")
    assert rows[0] == ["source_id", "member_id", "p_value"]
    assert min(float(r[2]) for r in rows[1:]) < 0.01


def test_exchangeability_single_member_source_fails(gauss_csv, tmp_path):
    assert main(["exchangeability", "--data", str(gauss_csv), "--source", "3",
                 "--out-dir", str(tmp_path)]) == 1


def test_simstudy_command(tmp_path):
    args = ["simstudy", "--kind", "gaussian", "--replications", "2", "--n-train", "40",
            "--n-test", "20", "--seed", "1"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    assert {"estimates.csv", "crps.csv", "coverage.csv", "pvalues.csv", "manifest.json",
            "crps.svg"} <= set(a)
    # the manifest does not record the job count
    assert a == b


def test_console_entry_point(gauss_csv, tmp_path):
    out = subprocess.run([sys.executable, "-m", "mixpost", "fit", "--data", str(gauss_csv),
                          "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0 and (tmp_path / "params.json").exists()
