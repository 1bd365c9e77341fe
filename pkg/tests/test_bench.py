import csv
import json

import numpy as np
import pytest

from emvamp import bench, cli, serialize

SMALL = dict(M=32, N=64, kappas=(1.0, 10.0), trials=2, max_iters=15)


def small_spec(**kw):
    return bench.SweepSpec(**{**SMALL, **kw})


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            small_spec(trials=0)
        with pytest.raises(ValueError):
            small_spec(kappas=())
        with pytest.raises(ValueError):
            small_spec(algos=("amp",))
        with pytest.raises(ValueError):
            small_spec(aggregation="max")
        with pytest.raises(ValueError, match="unknown"):
            bench.SweepSpec.from_dict({"bogus": 1})

    def test_roundtrip_and_hash(self):
        spec = small_spec(vamp={"damping": 0.9})
        assert bench.SweepSpec.from_dict(spec.as_dict()) == spec
        assert spec.config_hash() == small_spec(vamp={"damping": 0.9}, workers=4).config_hash()
        assert spec.config_hash() != small_spec().config_hash()

    def test_vamp_config(self):
        spec = small_spec(vamp={"damping": 0.9})
        o = spec.vamp_config("oracle-vamp")
        assert not o.em_theta1 and not o.em_theta2 and o.damping == 0.9
        assert o.max_iters == 15
        assert spec.vamp_config("em-vamp", stop_tol=0.0).stop_tol == 0.0

    def test_seed_policy(self):
        s = bench.trial_seed(0, 1, 2)
        assert s == int(np.random.SeedSequence([0, 1, 2]).generate_state(1)[0])
        assert len({bench.trial_seed(0, k, t) for k in range(5) for t in range(50)}) == 250


class TestItersToWithin:
    def test_examples(self):
        assert bench.iters_to_within([0.0]) == 0
        assert bench.iters_to_within([]) == 0
        assert bench.iters_to_within([0.0, -10.0, -20.0, -20.5, -20.2]) == 2
        assert bench.iters_to_within([0.0, -30.0, -19.0, -20.0]) == 2
        assert bench.iters_to_within([0.0, -0.5]) == 0

    def test_nan_counts_as_outside(self):
        assert bench.iters_to_within([0.0, np.nan, -5.0]) == 2


class TestSweep:
    def test_rows_and_schema(self, tmp_path):
        res = bench.sweep_condition(small_spec())
        assert len(res.rows) == 4
        for row in res.rows:
            assert 0 <= row["diverged"] <= 2
            assert row["nmse_db_agg"] == row["nmse_db_median"]
        paths = bench.report(res, tmp_path)
        with open(paths["csv"]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == bench.SWEEP_COLUMNS
        assert len(rows) == 5
        assert bench.read_result(paths["json"]) == res
        prov = res.provenance
        assert prov["config_hash"] == small_spec().config_hash()
        assert len(prov["seeds"]) == 4 and prov["code_version"]

    def test_mean_aggregation(self):
        res = bench.sweep_condition(small_spec(aggregation="mean", kappas=(1.0,)))
        row = res.row(1.0, "em-vamp")
        assert row["nmse_db_agg"] == row["nmse_db_linear_mean"]

    def test_empty_result(self, tmp_path):
        paths = bench.report(bench.SweepResult(), tmp_path, stem="empty")
        with open(paths["csv"]) as fh:
            assert fh.read().strip() == ",".join(bench.SWEEP_COLUMNS)

    def test_identical_bytes(self, tmp_path):
        spec = small_spec(trials=1, base_seed=7)
        a = bench.report(bench.sweep_condition(spec), tmp_path / "a")
        b = bench.report(bench.sweep_condition(spec), tmp_path / "b")
        with open(a["csv"], "rb") as fa, open(b["csv"], "rb") as fb:
            assert fa.read() == fb.read()

    def test_workers_do_not_change_results(self):
        a = bench.sweep_condition(small_spec())
        b = bench.sweep_condition(small_spec(workers=2))
        assert a.rows == b.rows and a.trials == b.trials

    def test_failed_trial_recorded(self):
        # M=1 with kappa > 1 is an invalid matrix spec; the sweep keeps going
        res = bench.sweep_condition(small_spec(M=1, N=4, kappas=(1.0, 10.0)))
        assert "error" not in res.trials[0]
        assert all("error" in t for t in res.trials if t["kappa_index"] == 1)
        assert res.row(10.0, "em-vamp")["diverged"] == 2

    def test_bad_schema(self):
        with pytest.raises(ValueError):
            bench.SweepResult.from_dict({"schema": 99})

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("")
        with pytest.raises(OSError):
            bench.report(bench.SweepResult(), blocker / "sub")


class TestTrace:
    def test_curves(self, tmp_path):
        res = bench.trace_iterations(small_spec(), kappa_index=1)
        assert res.kappa == 10.0
        for algo in bench.ALGORITHMS:
            assert res.curves[algo].shape == (2, 16)
            assert res.median[algo].shape == (16,)
            assert np.all(res.iters_to_1db[algo] <= 16)
        paths = bench.report_trace(res, tmp_path)
        with open(paths["json"]) as fh:
            payload = json.load(fh)
        assert set(payload["median_iters_to_1db"]) == set(bench.ALGORITHMS)

    def test_zero_iterations(self):
        res = bench.trace_iterations(small_spec(max_iters=0))
        assert res.curves["em-vamp"].shape == (2, 1)
        assert np.all(res.iters_to_1db["em-vamp"] == 0)


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


class TestCli:
    def test_gen_matrix(self, tmp_path, capsys):
        out = tmp_path / "A.json"
        assert cli.main(["gen-matrix", "--m", "6", "--n", "9", "--cond", "5", "--out",
                         str(out)]) == 0
        A = serialize.matrix_from_dict(serialize.load(out))
        A.check()
        assert A.cond == pytest.approx(5.0, rel=1e-10)
        assert json.loads(capsys.readouterr().out)["M"] == 6

    def test_run(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"problem": {"M": 32, "N": 64}, "algo": "oracle-vamp",
                                          "vamp": {"max_iters": 4, "stop_tol": 0.0}})
        out = tmp_path / "t.csv"
        assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 5
        assert json.loads(capsys.readouterr().out)["iterations"] == 4

    def test_run_from_instance(self, tmp_path, capsys):
        from emvamp.problem import BgParams, MatrixSpec, synthesize
        inst = synthesize(MatrixSpec(16, 32, 2.0, seed=3), BgParams(0.2, 0.0, 1.0), 30.0)
        ipath = tmp_path / "i.json"
        serialize.dump(serialize.instance_to_dict(inst), ipath)
        cfg = write(tmp_path / "c.json", {"instance": str(ipath), "vamp": {"max_iters": 3}})
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "t.csv")]) == 0

    def test_verify_exit_codes(self, tmp_path, capsys):
        base = {"problem": {"M": 64, "N": 128, "cond": 4.0, "seed": 1}}
        assert cli.main(["verify", "--config", write(tmp_path / "a.json", base)]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["converged"] and rep["failures"] == {}
        strict = {**base, "tolerances": {"eta_gap": 0.0, "xhat_gap": -1.0}}
        assert cli.main(["verify", "--config", write(tmp_path / "b.json", strict)]) == 1
        assert "xhat_gap" in json.loads(capsys.readouterr().out)["failures"]

    def test_sweep_and_trace_with_env(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        cfg = write(tmp_path / "s.json", {**SMALL, "trials": 1, "kappas": [1.0]})
        assert cli.main(["sweep", "--config", cfg, "--seed", "3"]) == 0
        assert (tmp_path / "env" / "sweep.csv").exists()
        res = bench.read_result(tmp_path / "env" / "sweep.json")
        assert res.provenance["config"]["base_seed"] == 3
        capsys.readouterr()
        assert cli.main(["trace", "--config", cfg, "--out", str(tmp_path / "tr"),
                         "--workers", "1"]) == 0
        assert (tmp_path / "tr" / "trace_k0.csv").exists()

    def test_missing_config(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["run", "--config", str(tmp_path / "missing.json")])
