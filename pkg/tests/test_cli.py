import json
import os

import numpy as np
import pytest

from glabc.cli import main
from glabc.runner import RunConfig, Trace, run


def _write_cfg(tmp_path, cfg, name="cfg.json"):
    path = str(tmp_path / name)
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


BASE_CFG = {
    "model": {"name": "gauss1d", "eps": 0.1},
    "kernel": {"type": "rw", "scale": 0.3},
    "iterations": 2000,
    "burn_in": 200,
    "n_chains": 1,
    "seed": 7,
}


class TestRunCommand:
    def test_trace_and_manifest(self, tmp_path):
        cfg_path = _write_cfg(tmp_path, BASE_CFG)
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg_path, "--out", out]) == 0
        trace = Trace.load_csv(os.path.join(out, "chain_0.csv"))
        assert trace.n_iters == 2000
        assert 0.0 < trace.accepted.mean() < 1.0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["total_simulator_calls"] == trace.total_sims
        assert manifest["config"]["resolved_kernel"]["type"] == "rw"

    def test_byte_identical_reruns(self, tmp_path):
        cfg_path = _write_cfg(tmp_path, BASE_CFG)
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        main(["run", "--config", cfg_path, "--out", out1])
        main(["run", "--config", cfg_path, "--out", out2])
        t1 = open(os.path.join(out1, "chain_0.csv")).read()
        t2 = open(os.path.join(out2, "chain_0.csv")).read()
        assert t1 == t2

    def test_sims_accounting_isir(self, tmp_path):
        cfg = dict(BASE_CFG)
        cfg["kernel"] = {"type": "isir", "n_batch": 20, "proposal": "prior"}
        cfg["iterations"] = 1000
        cfg_path = _write_cfg(tmp_path, cfg)
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg_path, "--out", out]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["total_simulator_calls"] == 20 * 1000

    def test_multichain_parallel_matches_serial(self, tmp_path):
        cfg = dict(BASE_CFG)
        cfg["n_chains"] = 2
        cfg["iterations"] = 500
        cfg["burn_in"] = 0
        cfg_path = _write_cfg(tmp_path, cfg)
        out1, out2 = str(tmp_path / "s"), str(tmp_path / "p")
        main(["run", "--config", cfg_path, "--out", out1])
        main(["run", "--config", cfg_path, "--out", out2, "--threads", "2"])
        for c in range(2):
            a = open(os.path.join(out1, f"chain_{c}.csv")).read()
            b = open(os.path.join(out2, f"chain_{c}.csv")).read()
            assert a == b

    def test_config_error_exit_2(self, tmp_path):
        bad = dict(BASE_CFG)
        bad["iterations"] = 10
        bad["burn_in"] = 50
        cfg_path = _write_cfg(tmp_path, bad)
        assert main(["run", "--config", cfg_path, "--out", str(tmp_path)]) == 2
        assert main(["run", "--config", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path)]) == 2

    def test_unknown_model_exit_2(self, tmp_path):
        bad = dict(BASE_CFG)
        bad["model"] = {"name": "not_a_model"}
        cfg_path = _write_cfg(tmp_path, bad)
        assert main(["run", "--config", cfg_path, "--out", str(tmp_path)]) == 2

    def test_seed_flag_overrides(self, tmp_path):
        cfg_path = _write_cfg(tmp_path, BASE_CFG)
        out1, out2 = str(tmp_path / "x"), str(tmp_path / "y")
        main(["run", "--config", cfg_path, "--out", out1, "--seed", "99"])
        main(["run", "--config", cfg_path, "--out", out2])
        a = open(os.path.join(out1, "chain_0.csv")).read()
        b = open(os.path.join(out2, "chain_0.csv")).read()
        assert a != b


class TestTuneCommand:
    def test_constrained_tune_report(self, tmp_path):
        cfg = {
            "model": {"name": "gauss1d", "eps": 0.1},
            "kernel": {"type": "gl", "scale": 0.3, "proposal": "prior"},
            "seed": 3,
            "tune": {
                "dims": [{"name": "gamma", "lower": 0.1, "upper": 1.0}],
                "budget": 3, "rounds": 2, "shrink": 0.5,
                "cost_constraint": 3.0,
                "short_run": {"iterations": 300, "replications": 2},
            },
        }
        cfg_path = _write_cfg(tmp_path, cfg)
        out = str(tmp_path / "out")
        assert main(["tune", "--config", cfg_path, "--out", out]) == 0
        rows = list(open(os.path.join(out, "tune_report.csv")))
        assert len(rows) == 1 + 3 * 2
        header = rows[0].strip().split(",")
        gi, ni = header.index("gamma"), header.index("n_batch")
        ci = header.index("cesjd")
        best = json.load(open(os.path.join(out, "tune_best.json")))
        max_cesjd = -1.0
        for line in rows[1:]:
            vals = line.strip().split(",")
            g, n = float(vals[gi]), int(vals[ni])
            assert g * n + (1 - g) == pytest.approx(3.0)
            max_cesjd = max(max_cesjd, float(vals[ci]))
        assert best["cesjd"] == pytest.approx(max_cesjd)

    def test_deterministic_given_seed(self, tmp_path):
        cfg = {
            "model": {"name": "gauss1d", "eps": 0.1},
            "kernel": {"type": "rw"},
            "seed": 5,
            "tune": {
                "dims": [{"name": "scale", "lower": 0.05, "upper": 1.0}],
                "budget": 3, "rounds": 2,
                "short_run": {"iterations": 200, "replications": 1},
            },
        }
        cfg_path = _write_cfg(tmp_path, cfg)
        out1, out2 = str(tmp_path / "t1"), str(tmp_path / "t2")
        main(["tune", "--config", cfg_path, "--out", out1])
        main(["tune", "--config", cfg_path, "--out", out2])
        assert (json.load(open(os.path.join(out1, "tune_best.json")))
                == json.load(open(os.path.join(out2, "tune_best.json"))))


class TestReferenceAndBench:
    def test_reference_then_bench(self, tmp_path):
        ref_cfg = {
            "model": {"name": "gauss1d", "eps": 0.1},
            "seed": 11,
            "reference": {
                "method": "is", "n_prior": 200_000, "n_keep": 20_000,
                "box": [[-1.0, 1.0]], "grid_shape": [301],
                "filename": "g1.ref",
            },
        }
        cfg_path = _write_cfg(tmp_path, ref_cfg)
        out = str(tmp_path / "out")
        assert main(["reference", "--config", cfg_path, "--out", out]) == 0
        ref_path = os.path.join(out, "g1.ref")
        assert os.path.exists(ref_path)

        bench_cfg = {
            "model": {"name": "gauss1d", "eps": 0.1},
            "seed": 12,
            "bench": {
                "reference": ref_path,
                "checkpoints": [2000, 5000],
                "replicates": 2,
                "kernels": [
                    {"name": "rw", "kernel": {"type": "rw", "scale": 0.3}},
                    {"name": "isir5", "kernel": {"type": "isir", "n_batch": 5,
                                                 "proposal": "prior"}},
                ],
            },
        }
        bench_path = _write_cfg(tmp_path, bench_cfg, "bench.json")
        assert main(["bench", "--config", bench_path, "--out", out]) == 0
        rows = list(open(os.path.join(out, "bench_kl.csv")))
        header = rows[0].strip().split(",")
        assert header == ["method", "budget", "replicate", "kl"]
        data = [r.strip().split(",") for r in rows[1:]]
        assert len(data) == 2 * 2 * 2  # methods x checkpoints x replicates
        assert all(float(r[3]) >= 0 for r in data)

    def test_bench_without_reference_exit_2(self, tmp_path):
        cfg = {
            "model": {"name": "gauss1d"},
            "bench": {"reference": str(tmp_path / "none.ref"), "kernels": []},
        }
        cfg_path = _write_cfg(tmp_path, cfg)
        assert main(["bench", "--config", cfg_path, "--out", str(tmp_path)]) == 2


class TestDiagnoseAndGradBench:
    def test_diagnose_trace(self, tmp_path):
        cfg_path = _write_cfg(tmp_path, BASE_CFG)
        out = str(tmp_path / "out")
        main(["run", "--config", cfg_path, "--out", out])
        code = main(["diagnose", "--trace", os.path.join(out, "chain_0.csv"),
                     "--out", out])
        assert code == 0
        rows = list(open(os.path.join(out, "diagnostics.csv")))
        assert "ess_theta_0" in rows[0]
        assert len(rows) == 2

    def test_grad_bench_csv(self, tmp_path):
        cfg = {
            "model": {"name": "gauss1d", "eps": 0.1},
            "seed": 4,
            "grad_bench": {
                "grid": {"lo": -0.5, "hi": 0.5, "n": 3},
                "methods": ["crn_mean", "gaussian_crn"],
                "replications": 30,
                "n_seeds": 50,
                "d_theta": 0.05,
            },
        }
        cfg_path = _write_cfg(tmp_path, cfg)
        out = str(tmp_path / "out")
        assert main(["grad-bench", "--config", cfg_path, "--out", out]) == 0
        rows = [r.strip().split(",") for r in open(os.path.join(out, "grad_bench.csv"))]
        assert rows[0] == ["method", "theta", "mean", "sd", "lo2sigma",
                           "hi2sigma", "closed_form"]
        assert len(rows) == 1 + 2 * 3
        # closed form recorded alongside the estimates
        mid = [r for r in rows[1:] if float(r[1]) == 0.0]
        assert all(abs(float(r[6])) < 1e-12 for r in mid)


class TestExitCodes:
    def test_runtime_abort_exit_3(self, tmp_path, monkeypatch):
        import glabc.cli as cli
        monkeypatch.setattr(cli, "run",
                            lambda *a, **k: (_ for _ in ()).throw(
                                RuntimeError("simulator hard-failure rate")))
        cfg_path = _write_cfg(tmp_path, BASE_CFG)
        assert cli.main(["run", "--config", cfg_path, "--out", str(tmp_path)]) == 3

    def test_chain_aborts_on_failing_simulator(self):
        import numpy as np
        from glabc.model import AbcTarget, GaussianKernel, GaussianPrior, Simulator
        from glabc.runner import KernelPlan, run_chain
        from glabc.rng import make_stream

        class MostlyBroken(Simulator):
            def simulate(self, theta, stream):
                return self.simulate_gen(np.atleast_2d(theta), stream.generator())[0]

            def simulate_gen(self, thetas, gen):
                thetas = np.atleast_2d(thetas)
                out = gen.standard_normal((thetas.shape[0], 1))
                bad = gen.random(thetas.shape[0]) < 0.9
                out[bad] = np.nan
                self.failures += int(bad.sum())
                return out

        target = AbcTarget(prior=GaussianPrior([0.0], [1.0]),
                           simulator=MostlyBroken(), kernel=GaussianKernel(0.5),
                           observed=np.zeros(1), name="broken")
        plan = KernelPlan.from_config({"type": "rw", "scale": 0.3}, target)
        with pytest.raises(RuntimeError, match="hard-failure"):
            run_chain(target, plan, 5000, make_stream(0xBAD, 0))


class TestRunnerApi:
    def test_runconfig_validation(self):
        with pytest.raises(Exception):
            RunConfig.from_dict({"model": {"name": "gauss1d"}})

    def test_resolved_config_materializes_defaults(self):
        cfg = RunConfig.from_dict(dict(BASE_CFG))
        resolved = cfg.resolved()
        assert resolved["resolved_kernel"]["expected_cost_per_iter"] == 1.0
