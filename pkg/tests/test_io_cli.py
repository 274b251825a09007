import csv
import io
import json
import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsdr import kernels
from bsdr.cli import main
from bsdr.config import load_config, parse_config
from bsdr.errors import BsdrError, DomainError, SchemaError
from bsdr.gridworld import GridSpec, enumerate_paths, make_trajectory
from bsdr.inference import Dataset
from bsdr.io import dumps_dataset, load_dataset, rows_to_csv, save_dataset, write_csv

SPEC = GridSpec(3, 3, (0, 0), [(2, 2)], 3, obstacles=[(1, 1)])
ACTS, STATES = enumerate_paths(SPEC)

SMALL_TOML = """
seed = 0

[grid]
width = 3
height = 3
start = [0, 0]
goals = [[2, 2]]
horizon = 3

[truth]
theta_r = [0.5, -1.0]

[truth.theta_b]
a0 = [2.0, 0.0]
a1 = [0.0, 4.0]

[simulate]
trajectories_per_agent = 25

[posterior]
theta_r = [[-1.0, 0.5], [-1.0, 0.0]]

[posterior.theta_b]
a0 = [[0.0, 2.0], [0.0, 4.0]]
a1 = [[0.0, 2.0], [0.0, 4.0]]

[fit]
max_iter = 50

[goal_inference]
candidates = [[2, 2], [0, 2]]
fractions = [0.0, 0.5, 1.0]

[experiment]
seeds = [0]
trajectories_per_agent = 12

[experiment.opt]
max_iter = 40
"""


@st.composite
def datasets(draw):
    n_agents = draw(st.integers(0, 3))
    trajs = {}
    for j in range(n_agents):
        ks = draw(st.lists(st.integers(0, len(ACTS) - 1), min_size=1, max_size=5))
        keep_actions = draw(st.booleans())
        trajs[f"agent-{j}"] = [make_trajectory(STATES[k], SPEC, ACTS[k] if keep_actions else None) for k in ks]
    return Dataset(SPEC, trajs)


class TestDatasetIO:
    @given(datasets())
    def test_round_trip(self, data):
        buf = dumps_dataset(data)
        assert buf == "" or buf.endswith("\n")
        path = _tmp_file(buf)
        assert load_dataset(path, SPEC) == data

    def test_empty_file(self, tmp_path, caplog):
        p = tmp_path / "d.jsonl"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            data = load_dataset(p, SPEC)
        assert len(data) == 0 and data.agents == []
        assert "empty" in caplog.text
        save_dataset(data, tmp_path / "e.jsonl")
        assert (tmp_path / "e.jsonl").read_bytes() == b""

    def test_one_record_one_line(self, tmp_path):
        data = Dataset(SPEC, {"a": [make_trajectory(STATES[3], SPEC, ACTS[3])]})
        save_dataset(data, tmp_path / "d.jsonl")
        text = (tmp_path / "d.jsonl").read_text()
        assert text.count("\n") == 1
        assert list(json.loads(text)) == ["actions", "agent_id", "states"]

    def test_wrong_start_names_step_zero(self, tmp_path):
        p = tmp_path / "d.jsonl"
        good = '{"agent_id":"a","states":[[0,0],[1,0],[2,0],[2,1]]}'
        p.write_text(good + "\n" + '{"agent_id":"a","states":[[1,0],[2,0],[2,1],[2,2]]}\n')
        with pytest.raises(SchemaError) as err:
            load_dataset(p, SPEC)
        assert err.value.line == 2 and err.value.step == 0
        assert str(err.value).startswith("line 2: step 0")

    @pytest.mark.parametrize("line, msg", [
        ("{not json", "invalid JSON"),
        ('["a"]', "JSON object"),
        ('{"agent_id":"a"}', "needs"),
        ('{"agent_id":"a","states":[[0,0]],"extra":1}', "unknown"),
        ('{"agent_id":3,"states":[[0,0]]}', "string"),
        ('{"agent_id":"a","states":[[0,0.5]]}', "integer pairs"),
        ('{"agent_id":"a","states":[[0,0],[1,0],[1,1],[1,2]]}', "step 2"),
        ('{"agent_id":"a","states":[[0,0],[1,0],[2,0],[2,1]],"actions":[3,3,0]}', "action"),
    ])
    def test_schema_errors_carry_line(self, tmp_path, line, msg):
        p = tmp_path / "d.jsonl"
        p.write_text("\n" + line + "\n")
        with pytest.raises(SchemaError, match=msg) as err:
            load_dataset(p, SPEC)
        assert err.value.line == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(BsdrError, match="not found"):
            load_dataset(tmp_path / "nope.jsonl", SPEC)

    def test_write_failure_has_path(self, tmp_path):
        with pytest.raises(BsdrError, match="nodir"):
            save_dataset(Dataset(SPEC, {}), tmp_path / "nodir" / "d.jsonl")


class TestCsv:
    def test_rfc4180_and_round_trip_floats(self, tmp_path):
        rows = [{"seed": 0, "name": 'a,"b"', "x": 0.1 + 0.2, "y": None}, {"seed": 1, "name": "c", "x": 1e-300}]
        text = rows_to_csv(rows)
        assert text.endswith("\r\n")
        back = list(csv.DictReader(io.StringIO(text)))
        assert back[0]["name"] == 'a,"b"' and back[0]["y"] == ""
        assert float(back[0]["x"]) == 0.1 + 0.2 and back[0]["x"] == repr(0.1 + 0.2)
        assert float(back[1]["x"]) == 1e-300
        write_csv(rows, tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_bytes() == text.encode()

    def test_empty(self):
        assert rows_to_csv([]) == "\r\n"


def _tmp_file(text):
    import tempfile
    f = tempfile.NamedTemporaryFile("w", suffix=".jsonl", delete=False)
    f.write(text)
    f.close()
    return f.name


class TestConfig:
    def test_loads(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(SMALL_TOML)
        cfg = load_config(p)
        assert cfg.spec == GridSpec(3, 3, (0, 0), [(2, 2)], 3)
        assert cfg.population() == {"a0": [2.0, 0.0], "a1": [0.0, 4.0]}
        axes, prior, cap = cfg.posterior()
        assert axes.shape == (2, 2, 2, 2, 2, 2) and prior.kind == "uniform_grid"
        ec = cfg.experiment("action_prediction", seed=5)
        assert ec.seeds == [5] and ec.opt.max_iter == 40

    def test_rejects_unknown_keys(self):
        with pytest.raises(DomainError, match="top-level"):
            parse_config({"grid": SPEC.to_dict(), "sede": 1})
        with pytest.raises(DomainError, match=r"\[fit\]"):
            parse_config({"grid": SPEC.to_dict(), "fit": {"max_iters": 3}}).fit()
        with pytest.raises(DomainError, match="grid"):
            parse_config({})

    def test_population_forms(self):
        base = {"grid": SPEC.to_dict(), "truth": {"theta_r": [0.0, 1.0]}}
        with pytest.raises(DomainError, match="exactly one"):
            parse_config(base).population()
        eq = {**base, "truth": {"theta_r": [0.0, 1.0], "population": {"kind": "equal", "n_agents": 2,
                                                                      "theta_b": [1.0, 0.0]}}}
        assert parse_config(eq).population() == {"a0": [1.0, 0.0], "a1": [1.0, 0.0]}
        het = {**base, "truth": {"theta_r": [0.0, 1.0], "population": {"kind": "heterogeneous", "n_agents": 4}}}
        assert len(parse_config(het).population()) == 4

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[grid\n")
        with pytest.raises(DomainError):
            load_config(p)

    def test_data_path_relative_to_config(self, tmp_path):
        cfg = parse_config({"grid": SPEC.to_dict(), "data": "d.jsonl"}, tmp_path)
        assert cfg.data_path() == tmp_path / "d.jsonl"
        assert str(cfg.data_path("x.jsonl")) == "x.jsonl"


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.toml").write_text(SMALL_TOML)
    return tmp_path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCli:
    def test_usage_errors(self, capsys, workdir):
        code, out, err = run(["bogus"], capsys)
        assert code == 2 and "usage" in err and out == ""
        code, _, err = run([], capsys)
        assert code == 2
        code, _, err = run(["simulate", "--out", workdir / "o"], capsys)
        assert code == 2 and "--config" in err
        code, _, err = run(["simulate", "--config", workdir / "c.toml"], capsys)
        assert code == 2 and "--out" in err
        code, _, _ = run(["experiment", "dance", "--config", workdir / "c.toml", "--out", workdir / "o"], capsys)
        assert code == 2

    def test_domain_errors(self, capsys, workdir):
        code, out, err = run(["fit", "--config", workdir / "c.toml", "--out", workdir / "o",
                              "--data", workdir / "missing.jsonl"], capsys)
        assert code == 1 and "not found" in err and out == ""
        (workdir / "bad.toml").write_text("[grid]\nwidth = 3\n")
        code, _, err = run(["simulate", "--config", workdir / "bad.toml", "--out", workdir / "o"], capsys)
        assert code == 1 and "height" in err

    def test_simulate_byte_identical(self, capsys, workdir):
        for d in ("o1", "o2"):
            assert run(["simulate", "--config", workdir / "c.toml", "--out", workdir / d], capsys)[0] == 0
        a = (workdir / "o1" / "dataset.jsonl").read_bytes()
        assert a == (workdir / "o2" / "dataset.jsonl").read_bytes()
        run(["simulate", "--config", workdir / "c.toml", "--out", workdir / "o3", "--seed", 9], capsys)
        assert a != (workdir / "o3" / "dataset.jsonl").read_bytes()
        assert len(a.splitlines()) == 50

    def test_pipeline_writes_only_inside_out(self, capsys, workdir):
        out = workdir / "o"
        cfg = workdir / "c.toml"
        assert run(["simulate", "--config", cfg, "--out", out], capsys)[0] == 0
        data = out / "dataset.jsonl"
        for cmd in ("posterior", "fit", "fit-appendix", "goal-infer"):
            code, stdout, err = run([cmd, "--config", cfg, "--out", out, "--data", data], capsys)
            assert code == 0, err
            assert stdout == ""
        assert run(["fit", "--config", cfg, "--out", out, "--data", data, "--nonneg-beta"], capsys)[0] == 0
        assert run(["experiment", "action_prediction", "--config", cfg, "--out", out], capsys)[0] == 0
        assert sorted(p.name for p in workdir.iterdir()) == ["c.toml", "o"]
        assert sorted(p.name for p in out.iterdir()) == [
            "action_prediction.csv", "action_prediction.json", "dataset.jsonl", "fit.json", "fit_appendix.json",
            "goal_posteriors.csv", "posterior.json", "posterior_marginals.csv"]
        fit = json.loads((out / "fit.json").read_text())
        assert fit["nonneg_beta"] and min(min(v) for v in fit["params"]["theta_b"].values()) >= 0
        app = json.loads((out / "fit_appendix.json").read_text())
        assert app["closed_form_max_abs_diff"] < 1e-12
        rows = list(csv.DictReader(open(out / "goal_posteriors.csv")))
        k0 = [r for r in rows if r["k"] == "0"]
        assert k0 and all(float(r["probability"]) == pytest.approx(0.5, abs=1e-12) for r in k0)
        marg = list(csv.DictReader(open(out / "posterior_marginals.csv")))
        assert {r["axis"] for r in marg} >= {"theta_r[0]", "theta_b[a1][1]"}

    def test_experiment_byte_identical(self, capsys, workdir):
        for d in ("e1", "e2"):
            assert run(["experiment", "action_prediction", "--config", workdir / "c.toml",
                        "--out", workdir / d], capsys)[0] == 0
        for name in ("action_prediction.json", "action_prediction.csv"):
            assert (workdir / "e1" / name).read_bytes() == (workdir / "e2" / name).read_bytes()
        rows = list(csv.DictReader(open(workdir / "e1" / "action_prediction.csv")))
        assert len(rows) == 5  # one per seed x model

    def test_oracle_check(self, capsys, workdir):
        assert run(["oracle-check"], capsys)[0] == 0
        code, _, _ = run(["oracle-check", "--config", workdir / "c.toml", "--out", workdir / "oc"], capsys)
        assert code == 0
        rep = json.loads((workdir / "oc" / "oracle_check.json").read_text())
        assert rep["passed"] and len(rep["instances"]) == 9

    def test_oracle_check_detects_mismatch(self, capsys, monkeypatch):
        orig = kernels.soft_backup
        monkeypatch.setattr(kernels, "soft_backup", lambda r, succ, h: orig(r, succ, h) + 1e-6)
        code, _, err = run(["oracle-check"], capsys)
        assert code == 1 and "mismatch" in err

    def test_oracle_check_skips_large_grid(self, capsys, caplog, workdir):
        toml = SMALL_TOML.replace("horizon = 3", "horizon = 12")
        (workdir / "big.toml").write_text(toml)
        with caplog.at_level(logging.WARNING):
            code, _, _ = run(["oracle-check", "--config", workdir / "big.toml", "--oracle-cap", 1000], capsys)
        assert code == 0 and "skipped" in caplog.text
