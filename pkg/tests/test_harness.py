import csv
import json
import math

import numpy as np
import pytest

from benign_leaky.cli import main
from benign_leaky.errors import BenignLeakyError, ConfigurationError, ScaleGuardError
from benign_leaky.harness import (
    METRIC_KEYS,
    ExperimentConfig,
    auto_sigma,
    auto_step,
    cell_row,
    expand_cells,
    format_value,
    resolve_cell,
    run_cell,
    run_sweep,
    run_trial,
)
from benign_leaky.regime import recompute_theorem1_condition, recompute_theorem2_condition
from benign_leaky.rng import derive_seed

SMALL = {"seed": 7, "mixture": {"p": 64, "n": 6, "mu_norm_sq": 2.0}}


def first_cell(raw, override=False):
    cfg = ExperimentConfig(raw)
    i, c, r = next(expand_cells(cfg))
    return resolve_cell(i, c, r, cfg.seed, override)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults_and_validation(self):
        cfg = ExperimentConfig({})
        assert cfg.trials == 1 and cfg.sweep == []
        with pytest.raises(ConfigurationError):
            ExperimentConfig({"trials": 0})
        with pytest.raises(ConfigurationError):
            ExperimentConfig({"sweep": [{"path": "mixture/nope", "values": [1]}]})
        with pytest.raises(ConfigurationError):
            ExperimentConfig({"sweep": [{"path": "mixture/n", "values": []}]})

    def test_optional_leaf_path(self):
        cfg = ExperimentConfig({"sweep": [{"path": "mixture/mu_norm", "values": [1.0, 2.0]}]})
        cells = list(expand_cells(cfg))
        assert "mu_norm_sq" not in cells[0][2]["mixture"]
        assert resolve_cell(*cells[1], cfg.seed).mixture_spec(0).norm_mu == pytest.approx(2.0)

    def test_product_counts(self):
        assert len(list(expand_cells(ExperimentConfig({})))) == 1
        cfg = ExperimentConfig({"sweep": [{"path": "mixture/n", "values": [4, 5, 6]},
                                          {"path": "network/gamma", "values": [0.1, 0.2, 0.3]}]})
        cells = list(expand_cells(cfg))
        assert [c[0] for c in cells] == list(range(9))
        assert cells[4][1] == {"mixture/n": 5, "network/gamma": 0.2}
        assert cells[4][2]["mixture"]["n"] == 5

    def test_explicit_mu(self):
        cell = first_cell({"mixture": {"p": 3, "n": 2, "mu": [1.0, 2.0, 2.0]}})
        np.testing.assert_array_equal(cell.mixture_spec(0).mu, [1.0, 2.0, 2.0])

    def test_split_forms(self):
        assert first_cell({"network": {"m": 20, "q_plus": "19/20", "gamma": 0.8}}).split().j_plus == 19
        assert first_cell({"network": {"m": 4, "j_plus": 1, "gamma": 0.8}}).split().j_plus == 1

    def test_guardrails(self):
        with pytest.raises(ScaleGuardError):
            first_cell({"mixture": {"n": 513}})
        with pytest.raises(ScaleGuardError):
            first_cell({"mixture": {"p": 65537}})
        assert first_cell({"mixture": {"n": 513}}, override=True).raw["mixture"]["n"] == 513

    def test_digest_ignores_outputs(self):
        a = ExperimentConfig(SMALL)
        b = ExperimentConfig({**SMALL, "outputs": {"csv": "other.csv"}})
        assert a.digest() == b.digest()
        assert a.digest() != a.with_seed(8).digest()


class TestAutoParams:
    def test_step_and_init_satisfy_their_targets(self):
        n, mu2, rmin, rmax, gamma, m = 16, 64.0, 40.0, 50.0, 0.5, 4
        a = auto_step(n, mu2, rmax)
        assert a * (n * mu2 + rmax**2) <= 0.5 and 6 * a * rmax**2 <= 0.5
        s = auto_sigma(a, gamma, m, mu2, rmin, rmax)
        rho = s * math.sqrt(2 * m * (mu2 + rmax**2))
        assert rho * math.exp(rho) < a * gamma * rmin**2 * 0.5


class TestTrials:
    def test_regime_only_when_untrained(self):
        rec = run_trial(first_cell(SMALL), 0)
        assert rec["theorem1_condition"] in {"none", "i", "ii"}
        assert "final_loss" not in rec and "final_cos_plus" not in rec
        assert rec["seed"] == derive_seed(7, 0, 0)

    def test_deterministic(self):
        raw = {**SMALL, "train": {"T": 20}, "mc_samples": 2000, "trials": 2}
        a = run_cell(first_cell(raw))
        b = run_cell(first_cell(raw))
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        assert a.trials[0]["seed"] != a.trials[1]["seed"]

    def test_flags_recomputable(self):
        rec = run_trial(first_cell({**SMALL, "train": {"T": 0}}), 0)
        assert recompute_theorem1_condition(rec) == rec["theorem1_condition"]
        assert recompute_theorem2_condition(rec) == rec["theorem2_condition"]

    def test_interpolating_benign_cell(self):
        # p between max(n |mu|^2, n^3) = 512 and n |mu|^4 = 10368
        rec = run_trial(first_cell({"seed": 3, "mixture": {"p": 1024, "n": 8, "mu_norm_sq": 36.0},
                                    "train": {"T": 2000}, "mc_samples": 20000}), 0)
        assert rec["final_loss"] < 1 / 8
        assert rec["trained_mc_error"] < 0.05

    def test_stage_errors_recorded(self):
        # three samples in one dimension: the block Gram matrix has rank at most two
        rec = run_trial(first_cell({"mixture": {"p": 1, "n": 3, "mu": [1.0]}, "seed": 4}), 0)
        assert rec["limit_error"].startswith("DegenerateDataError")
        assert "limit_exact_error" not in rec

    def test_cell_fails_only_when_every_trial_fails(self, monkeypatch):
        import benign_leaky.harness as h
        cell = first_cell({**SMALL, "trials": 3})
        real = h.run_trial

        def flaky(c, t):
            if t == 1:
                raise BenignLeakyError("boom")
            return real(c, t)

        monkeypatch.setattr(h, "run_trial", flaky)
        res = run_cell(cell)
        assert len(res.trials) == 2 and res.errors[0]["trial"] == 1
        row = cell_row(res)
        assert row["trials_failed"] == 1 and "theta1_std" in row

        def broken(c, t):
            raise BenignLeakyError("boom")

        monkeypatch.setattr(h, "run_trial", broken)
        with pytest.raises(BenignLeakyError):
            run_cell(cell)


class TestFormatting:
    def test_values(self):
        assert format_value(0.1) == "0.10000000000000001"
        assert float(format_value(math.pi)) == math.pi
        assert format_value(True) == "true"
        assert format_value(None) == ""
        assert format_value(3) == "3"


SWEEP = {"seed": 11, "mixture": {"p": 48, "n": 5, "mu_norm_sq": 1.0},
         "train": {"T": 10},
         "sweep": [{"path": "mixture/mu_norm_sq", "values": [0.5, 2.0]},
                   {"path": "network/gamma", "values": [0.3, 0.6]}]}


class TestSweep:
    def test_rows_and_csv(self, tmp_path):
        rows = run_sweep(ExperimentConfig(SWEEP), tmp_path)
        assert len(rows) == 4
        table = read_csv(tmp_path / "sweep.csv")
        header = table[0]
        assert header[:3] == ["cell_index", "mixture/mu_norm_sq", "network/gamma"]
        assert set(METRIC_KEYS) <= set(header)
        assert [r[0] for r in table[1:]] == ["0", "1", "2", "3"]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert len(summary["cells"]) == 4

    def test_resume_identical(self, tmp_path):
        cfg = ExperimentConfig(SWEEP)
        run_sweep(cfg, tmp_path / "full")
        full = (tmp_path / "full" / "sweep.csv").read_text()
        # keep two completed cells plus a torn line, then resume
        part = tmp_path / "part"
        part.mkdir()
        lines = (tmp_path / "full" / "journal.jsonl").read_text().splitlines()
        (part / "journal.jsonl").write_text("\n".join(lines[:2]) + "\n" + lines[2][:40])
        run_sweep(cfg, part)
        assert (part / "sweep.csv").read_text() == full

    def test_stale_journal_ignored(self, tmp_path):
        run_sweep(ExperimentConfig(SWEEP), tmp_path)
        other = ExperimentConfig({**SWEEP, "seed": 12})
        rows = run_sweep(other, tmp_path)
        fresh = run_sweep(other, tmp_path / "fresh")
        assert json.dumps(rows) == json.dumps(fresh)

    def test_workers_match_serial(self, tmp_path):
        cfg = ExperimentConfig(SWEEP)
        run_sweep(cfg, tmp_path / "a")
        run_sweep(cfg, tmp_path / "b", workers=2)
        assert (tmp_path / "a" / "sweep.csv").read_text() == (tmp_path / "b" / "sweep.csv").read_text()

    def test_phase_sweep_tracks_kappa_shape(self, tmp_path):
        cfg = ExperimentConfig({"seed": 2, "mixture": {"p": 512, "n": 16},
                                "sweep": [{"path": "mixture/mu_norm_sq",
                                           "values": [2.0, 8.0, 32.0, 128.0]}]})
        rows = run_sweep(cfg, tmp_path)
        exact = [r["limit_exact_error"] for r in rows]
        shape = [r["kappa_sqrt_exponent"] for r in rows]
        assert all(a > b for a, b in zip(exact, exact[1:]))
        assert all(a > b for a, b in zip(shape, shape[1:]))


def write_cfg(tmp_path, raw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return str(path)


class TestCli:
    def test_verbs_write_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path, {**SMALL, "train": {"T": 5}})
        out = tmp_path / "o"
        for verb in ("generate", "check", "limit", "train", "error"):
            assert main([verb, "--config", cfg, "--out", str(out)]) == 0
        for name in ("dataset.csv", "spec.json", "regime.json", "limit.json", "certificate.csv",
                     "trace.csv", "train_summary.json", "error.json", "error.csv"):
            assert (out / name).exists(), name

    def test_seed_flag(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL)
        main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"])
        main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
        main(["generate", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "6"])
        a = (tmp_path / "a" / "dataset.csv").read_text()
        assert a == (tmp_path / "b" / "dataset.csv").read_text()
        assert a != (tmp_path / "c" / "dataset.csv").read_text()

    def test_verify_pass(self, tmp_path):
        cfg = write_cfg(tmp_path, {"seed": 1, "mixture": {"p": 1024, "n": 8, "mu_norm_sq": 400.0},
                                   "train": {"T": 300}})
        assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "verify.json").read_text())
        assert all(c["passed"] for c in rep["checks"])

    def test_verify_regime_failure_exit_2(self, tmp_path):
        cfg = write_cfg(tmp_path, {"seed": 1, "mixture": {"p": 64, "n": 8, "mu_norm_sq": 1.0}})
        assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 2

    def test_errors_exit_1(self, tmp_path, capsys):
        bad = write_cfg(tmp_path, {"sweep": [{"path": "no/such", "values": [1]}]})
        assert main(["sweep", "--config", bad, "--out", str(tmp_path)]) == 1
        big = write_cfg(tmp_path, {"mixture": {"n": 600}})
        assert main(["check", "--config", big, "--out", str(tmp_path)]) == 1
        assert "override-scale" in capsys.readouterr().err
        assert main(["check", "--config", str(tmp_path / "missing.json")]) == 1

    def test_sweep_verb(self, tmp_path):
        cfg = write_cfg(tmp_path, SWEEP)
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s"), "--workers", "2"]) == 0
        assert len(read_csv(tmp_path / "s" / "sweep.csv")) == 5
