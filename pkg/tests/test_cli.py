import json
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from click.testing import CliRunner

from blendsa import cli, sweep
from blendsa.config import DEFAULT_B, DEFAULT_M, load_config
from blendsa.errors import NumericalError
from blendsa.tabular import ColumnSchema, ColumnTable, load_schema, read_csv, write_csv, write_schema


def invoke(*args, code=0):
    res = CliRunner().invoke(cli.main, [str(a) for a in args])
    assert res.exit_code == code, (res.exit_code, res.output, res.stderr if hasattr(res, "stderr") else "")
    return res


def read_back(path):
    """Every emitted CSV parses through read_csv with its emitted schema."""
    return read_csv(path, load_schema(f"{path}.schema.json"))


def write_config(path, **obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def scen(tmp_path_factory):
    d = tmp_path_factory.mktemp("scen")
    invoke("simulate", "--gen-only", "--n", 300, "--seed", 3, "--assignment", "IIM", "--out", d)
    return d


def _scen_config(scen, path, **extra):
    return write_config(path, data={"path": str(scen / "data.csv"), "schema": str(scen / "data.csv.schema.json")},
                        spec=str(scen / "spec.json"), seed=5, **extra)


# ---------------------------------------------------------------- simulate


def test_gen_only_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        invoke("simulate", "--gen-only", "--n", 1000, "--seed", 1, "--out", d)
    for name in ("data.csv", "latent.csv", "spec.json", "manifest.json", "data.csv.schema.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    t = read_back(a / "data.csv")
    assert t.n_rows == 1000
    lat = read_back(a / "latent.csv")
    obs = t["Y"].mask
    np.testing.assert_array_equal(t["Y"].values[obs], lat["Y"].values[obs])


def test_gen_only_durable_like(tmp_path):
    invoke("simulate", "--gen-only", "--durable-like", "--n", 400, "--seed", 2, "--out", tmp_path)
    t = read_back(tmp_path / "data.csv")
    assert t["CCS0"].kind == "categorical" and t.n_rows == 400


def test_simulate_bias_csv(tmp_path):
    invoke("simulate", "--scenario", 1, "--assignment", "III", "--delta-grid", "-2:2:0.1", "--reps", 2,
           "--n", 200, "--M", 1, "--seed", 7, "--out", tmp_path)
    t = read_back(tmp_path / "bias.csv")
    assert t.n_rows == 41 * 4
    np.testing.assert_allclose(np.unique(t["delta"].values), np.round(np.arange(-20, 21) / 10, 10))
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 7 and "numpy" in man["versions"] and len(man["config_sha256"]) == 64


def test_simulate_usage_errors(tmp_path):
    invoke("simulate", "--assignment", "XYZ", "--seed", 1, "--out", tmp_path, code=2)
    invoke("simulate", "--scenario", 3, "--seed", 1, "--out", tmp_path, code=2)
    invoke("simulate", "--out", tmp_path, code=2)  # seed is mandatory


# ---------------------------------------------------------------- analyze

SPEC = {
    "mechanisms": [
        {"name": "A", "variables": ["V"], "model": "~ X", "sensitivity": {"column": "V"}, "models": {"V": ["V ~ X"]}},
    ],
    "analysis": "Y ~ X + V",
    "assignment": "I",
}


def _complete_data(d, n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    v = rng.normal(size=n)
    y = 1 + x - 0.5 * v + rng.normal(size=n)
    t = ColumnTable.from_arrays({"X": x, "V": v, "Y": y}, {"X": ColumnSchema("binary")})
    write_csv(t, d / "d.csv")
    write_schema(t.schema, d / "d.schema.json")
    return t


def test_analyze_complete_data_is_ols(tmp_path):
    t = _complete_data(tmp_path)
    cfg = write_config(tmp_path / "c.json", data={"path": "d.csv", "schema": "d.schema.json"}, spec=SPEC,
                       seed=1, B=0, M=2, delta=[0.8], out="o")
    invoke("analyze", cfg)
    est = read_back(tmp_path / "o" / "estimates.csv")
    X = np.column_stack([np.ones(t.n_rows), t["X"].values, t["V"].values])
    ols = np.linalg.lstsq(X, t["Y"].values, rcond=None)[0]
    # values round-trip through text at full precision
    np.testing.assert_allclose(est["estimate"].values, ols, rtol=0, atol=1e-12)
    assert np.all(np.isnan(est["ci_lo"].values))


def test_analyze_defaults_and_rerun(tmp_path):
    _complete_data(tmp_path, n=40, seed=2)
    cfg = write_config(tmp_path / "c.json", data={"path": "d.csv", "schema": "d.schema.json"}, spec=SPEC, seed=3)
    rc = load_config(cfg)
    assert (rc.B, rc.M) == (DEFAULT_B, DEFAULT_M) == (300, 10)
    invoke("analyze", cfg, "--out", tmp_path / "a")
    invoke("analyze", cfg, "--out", tmp_path / "b", "--threads", 2)
    for name in ("estimates.csv", "weights.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    est = read_back(tmp_path / "a" / "estimates.csv")
    assert np.all(est["ci_lo"].values <= est["estimate"].values)
    assert np.all(est["estimate"].values <= est["ci_hi"].values)
    assert np.all(est["failed_replicates"].values == 0)


def test_config_errors_carry_json_pointer(tmp_path):
    _complete_data(tmp_path)
    base = {"data": {"path": "d.csv", "schema": "d.schema.json"}, "spec": SPEC}
    res = invoke("analyze", write_config(tmp_path / "a.json", **base, seed=-1), "--out", tmp_path, code=2)
    assert "/seed" in res.output
    res = invoke("analyze", write_config(tmp_path / "b.json", **base), "--out", tmp_path, code=2)
    assert "seed" in res.output  # seed is mandatory
    res = invoke("analyze", write_config(tmp_path / "c.json", **base, seed=1, M=0), "--out", tmp_path, code=2)
    assert "/M" in res.output
    bad = {**SPEC, "analysis": "Y ~ X + W"}
    res = invoke("analyze", write_config(tmp_path / "d.json", data=base["data"], spec=bad, seed=1),
                 "--out", tmp_path, code=2)
    assert "/spec" in res.output and "W" in res.output
    (tmp_path / "e.json").write_text("{not json", encoding="utf-8")
    invoke("analyze", tmp_path / "e.json", "--out", tmp_path, code=2)


def test_analyze_numerical_failure_exit_3(tmp_path, monkeypatch):
    _complete_data(tmp_path)
    cfg = write_config(tmp_path / "c.json", data={"path": "d.csv", "schema": "d.schema.json"}, spec=SPEC,
                       seed=1, B=0)

    def boom(*a, **k):
        raise NumericalError("synthetic")

    monkeypatch.setattr(cli, "run_blended", boom)
    res = invoke("analyze", cfg, "--out", tmp_path / "o", code=3)
    assert "synthetic" in res.output


# ---------------------------------------------------------------- sweep


def test_sweep_one_axis(scen, tmp_path):
    cfg = _scen_config(scen, tmp_path / "c.json", M=1, axes={"R3": "-2:2:0.1"})
    invoke("sweep", cfg, "--out", tmp_path / "o")
    t = read_back(tmp_path / "o" / "sweep.csv")
    assert t.n_rows == 41 * 4
    anchor = t["mar_anchor"].values == 1
    assert anchor.sum() == 4 and np.all(t["delta_R3"].values[anchor] == 0)
    assert not list((tmp_path / "o").glob("*.svg"))
    res = sweep.read_sweep(tmp_path / "o" / "sweep.csv")
    assert len(res.cells) == 41


def test_sweep_two_way_svg(scen, tmp_path):
    cfg = _scen_config(scen, tmp_path / "c.json", M=1, axes={"R2": [-1, 0, 1], "R3": "-0.5:0.5:0.25"})
    for d in ("a", "b"):
        invoke("sweep", cfg, "--out", tmp_path / d)
    t = read_back(tmp_path / "a" / "sweep.csv")
    assert t.n_rows == 15 * 4
    svgs = sorted(p.name for p in (tmp_path / "a").glob("*.svg"))
    assert svgs == [f"heatmap_{j}.svg" for j in range(4)]
    for name in svgs + ["sweep.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    root = ET.fromstring((tmp_path / "a" / svgs[0]).read_text())
    ns = "{http://www.w3.org/2000/svg}"
    cells = [r for r in root.iter(f"{ns}rect") if r.get("class") == "cell"]
    assert len(cells) == 15


def test_sweep_refuses_three_axes(tmp_path):
    invoke("simulate", "--gen-only", "--durable-like", "--n", 300, "--seed", 2, "--out", tmp_path)
    cfg = write_config(tmp_path / "c.json", data={"path": "data.csv", "schema": "data.csv.schema.json"},
                       spec="spec.json", seed=1, axes={"R1": "-2:2:0.1", "R2": "-2:2:0.1", "R5": "-2:2:0.1"})
    res = invoke("sweep", cfg, "--out", tmp_path / "o", code=2)
    assert str(41**3) in res.output and "--full-grid" in res.output
    assert not (tmp_path / "o" / "sweep.csv").exists()


def test_sweep_partial_exit_4(scen, tmp_path, monkeypatch):
    real = sweep.run_blended

    def flaky(t, s, delta, **kw):
        if np.asarray(delta)[2] > 0:
            raise NumericalError("synthetic failure")
        return real(t, s, delta, **kw)

    monkeypatch.setattr(sweep, "run_blended", flaky)
    cfg = _scen_config(scen, tmp_path / "c.json", M=1, axes={"R3": [-1, 0, 1]})
    invoke("sweep", cfg, "--out", tmp_path / "o", "--threads", 1, code=4)
    t = read_back(tmp_path / "o" / "sweep.csv")
    status = t["status"]
    failed = np.array([status.levels[v] == "failed" for v in status.values])
    np.testing.assert_array_equal(failed, t["delta_R3"].values > 0)
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert len(man["failed_cells"]) == 1 and "synthetic" in man["failed_cells"][0]["error"]


# ---------------------------------------------------------------- diagnose


def test_diagnose_mi_exact_shift(scen, tmp_path):
    cfg = _scen_config(scen, tmp_path / "c.json", M=2, assignment="IIM", mechanism="R3", grid="-1:1:0.5")
    invoke("diagnose", cfg, "--out", tmp_path / "o")
    t = read_back(tmp_path / "o" / "diagnose.csv")
    np.testing.assert_array_equal(t["expected_shift"].values, t["delta"].values)
    np.testing.assert_allclose(t["shift"].values, t["expected_shift"].values, rtol=0, atol=1e-12)
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["quantity"] == "mean"


def test_diagnose_ipw_binary_intercept_collapse(tmp_path):
    rng = np.random.default_rng(4)
    n = 500
    v = (rng.random(n) < 0.35).astype(float)
    v[rng.random(n) < 0.3] = np.nan
    t = ColumnTable.from_arrays({"V": v, "Y": rng.normal(size=n)}, {"V": ColumnSchema("binary")})
    write_csv(t, tmp_path / "d.csv")
    write_schema(t.schema, tmp_path / "d.schema.json")
    spec = {"mechanisms": [{"name": "A", "variables": ["V"], "model": "~ 1", "sensitivity": {"column": "V"},
                            "models": {"V": ["V ~ 1"]}}], "analysis": "Y ~ 1", "assignment": "I"}
    cfg = write_config(tmp_path / "c.json", data={"path": "d.csv", "schema": "d.schema.json"}, spec=spec,
                       seed=1, M=1, mechanism="A", grid=[-1, 0, 1])
    invoke("diagnose", cfg, "--out", tmp_path / "o")
    out = read_back(tmp_path / "o" / "diagnose.csv")
    obs = v[~np.isnan(v)]
    at0 = out["connecting"].values[out["delta"].values == 0][0]
    assert at0 == pytest.approx(obs.mean(), abs=1e-9)
    assert "expected_shift" not in out
    c = out["connecting"].values
    assert c[0] > c[1] > c[2]  # larger delta favors observing V = 1


def test_diagnose_rejects_decision_mechanism(scen, tmp_path):
    cfg = _scen_config(scen, tmp_path / "c.json", M=1, mechanism="R1")
    res = invoke("diagnose", cfg, "--out", tmp_path / "o", code=2)
    assert "COX_IPW" in res.output


# ---------------------------------------------------------------- tipping


def test_tipping_command(tmp_path):
    rng = np.random.default_rng(1)
    y = rng.normal(0.6, 1.0, 200)
    y[rng.random(200) < 0.5] = np.nan
    t = ColumnTable.from_arrays({"Y": y})
    write_csv(t, tmp_path / "d.csv")
    write_schema(t.schema, tmp_path / "d.schema.json")
    spec = {"mechanisms": [{"name": "A", "variables": ["Y"], "model": "~ 1", "sensitivity": {"column": "Y"},
                            "models": {"Y": ["Y ~ 1"]}}], "analysis": "Y ~ 1", "assignment": "M"}
    cfg = write_config(tmp_path / "c.json", data={"path": "d.csv", "schema": "d.schema.json"}, spec=spec,
                       seed=2, B=40, M=2, mechanism="A", coefficient="(Intercept)")
    res = invoke("tipping", cfg, "--out", tmp_path / "o")
    d = float(res.output.strip().splitlines()[-1])
    assert re.fullmatch(r"-?\d+(\.\d+)?", res.output.strip().splitlines()[-1])
    assert d < 0 and abs(round(d / 0.05) * 0.05 - d) < 1e-9
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["tipping_point"] == pytest.approx(d)
    probes = read_back(tmp_path / "o" / "tipping_probes.csv")
    assert probes.n_rows >= 3 and 0.0 in probes["delta"].values
