import csv
import json

import numpy as np
import pytest

from xxzloc import cli
from xxzloc.cli import (ConfigError, MissingArtifacts, config_hash, connected_pairs, emit_report, main,
                        resolve_config)
from xxzloc.lattice import Region, rho


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_resolve(self):
        cfg = resolve_config({}, experiment="fracmom", env={})
        assert cfg.region == Region.chain(8) and cfg.model.delta == 8.0 and cfg.workers == 1
        assert cfg.run["r_list"] == [1, 2, 3]

    def test_hash_stable_and_sensitive(self):
        a = resolve_config({"seed": 3}, experiment="event", env={})
        b = resolve_config({"seed": 3}, experiment="event", env={})
        c = resolve_config({"seed": 4}, experiment="event", env={})
        assert a.config_hash == b.config_hash != c.config_hash

    def test_hash_ignores_workers_and_out(self):
        a = resolve_config({"workers": 1, "out": "x"}, experiment="event", env={})
        b = resolve_config({"workers": 4, "out": "y"}, experiment="event", env={})
        assert a.config_hash == b.config_hash

    def test_git_blob_hash(self):
        import hashlib
        body = b'{"a":1}'
        assert config_hash({"a": 1}) == hashlib.sha1(b"blob 7\0" + body).hexdigest()

    def test_precedence(self):
        env = {"XXZLOC_WORKERS": "3", "XXZLOC_OUT": "env_dir"}
        cfg = resolve_config({"workers": 2, "out": "file_dir"}, experiment="event", env=env)
        assert cfg.workers == 3 and str(cfg.out) == "env_dir"
        cfg = resolve_config({"workers": 2}, experiment="event", workers=5, out="flag_dir", env=env)
        assert cfg.workers == 5 and str(cfg.out) == "flag_dir"

    @pytest.mark.parametrize("raw, match", [
        ({"model": {"delta": 0.5}}, "delta > 1"),
        ({"bogus": 1}, "unknown key"),
        ({"run": {"nope": 1}}, "unknown key"),
        ({"region": {"L": "eight"}}, "integer"),
        ({"region": {"L": 4, "sites": [1, 2]}}, "either"),
        ({"probe": {"s": 1.5}}, "fractional exponent"),
        ({"seed": -1}, "seed"),
        ({"run": {"A": [99]}}, "run.A"),
        ({"experiment": "ct"}, "not 'fracmom'"),
        ({"distribution": {"id": "custom_density", "xs": [0.0, 0.5], "ps": [1.0, 1.0]}}, "distribution"),
    ])
    def test_schema_errors(self, raw, match):
        with pytest.raises(ConfigError, match=match):
            resolve_config(raw, experiment="fracmom", env={})

    def test_ct_requires_certificate_regime(self):
        with pytest.raises(ConfigError, match="delta0"):
            resolve_config({"model": {"delta": 3.0}}, experiment="ct", env={})

    def test_wegner_window_checked(self):
        with pytest.raises(ConfigError, match="escapes"):
            resolve_config({"model": {"delta": 2.0}, "run": {"center": 0.86}}, experiment="wegner", env={})


class TestExitCodes:
    def test_bad_delta_exit_2(self, tmp_path, capsys):
        assert main(["spectrum", "--config", write(tmp_path, "[model]\ndelta = 0.5\n")]) == 2
        assert "delta > 1" in capsys.readouterr().err

    def test_bad_toml_exit_2(self, tmp_path):
        assert main(["spectrum", "--config", write(tmp_path, "[model\n")]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["spectrum", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_resource_guard_exit_3(self, tmp_path, monkeypatch):
        called = []
        monkeypatch.setitem(cli.RUNNERS, "spectrum", lambda cfg: called.append(1))
        assert main(["spectrum", "--config", write(tmp_path, "[region]\nL = 17\n"),
                     "--out", str(tmp_path / "o")]) == 3
        assert not called and not (tmp_path / "o").exists()

    def test_block_guard_exit_3(self, tmp_path):
        text = "max_block_dim = 100\n[region]\nL = 10\n"
        assert main(["spectrum", "--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 3

    def test_identities_dense_guard_exit_3(self, tmp_path):
        assert main(["identities", "--config", write(tmp_path, "[region]\nL = 13\n"),
                     "--out", str(tmp_path / "o")]) == 3

    def test_numerical_failure_exit_4(self, tmp_path, monkeypatch, capsys):
        def boom(cfg):
            raise np.linalg.LinAlgError("singular block")
        monkeypatch.setitem(cli.RUNNERS, "spectrum", boom)
        assert main(["spectrum", "--out", str(tmp_path / "o")]) == 4
        assert "singular block" in capsys.readouterr().err

    def test_report_missing_artifacts(self, tmp_path):
        with pytest.raises(MissingArtifacts):
            emit_report(tmp_path)
        assert main(["report", str(tmp_path)]) == 2


class TestRuns:
    def test_fracmom_round_trip_bit_exact(self, tmp_path):
        cfg = write(tmp_path, "[region]\nL = 6\n[model]\nlam = 10.0\n[run]\nr_list = [1, 2]\nn_samples = 8\n")
        assert main(["fracmom", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
        man = tmp_path / "a" / "manifest.json"
        assert main(["fracmom", "--config", str(man), "--out", str(tmp_path / "b"), "--quiet",
                     "--workers", "2"]) == 0
        a = (tmp_path / "a" / "results.csv").read_bytes()
        assert a == (tmp_path / "b" / "results.csv").read_bytes()
        m = json.loads(man.read_text())
        assert m["config_hash"] == json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
        assert set(m) >= {"tool_version", "wall_time", "stage_timings", "flagged_total", "config"}
        assert list(rows(tmp_path / "a" / "results.csv")[0]) == cli.MC_COLUMNS

    def test_fracmom_infinite_rho_row(self, tmp_path):
        text = "[region]\nsites = [0, 1, 2, 6, 7]\n[run]\nA = [1]\nr_list = [1, 4]\nn_samples = 4\n"
        assert main(["fracmom", "--config", write(tmp_path, text), "--out", str(tmp_path / "o"), "--quiet"]) == 0
        r = rows(tmp_path / "o" / "results.csv")
        assert float(r[1]["mean"]) == 0.0 and r[1]["flagged"] == "0"

    def test_identities_default_grid(self, tmp_path):
        text = "[region]\nL = 5\n[run]\nn_draws = 1\ndeltas = [2.0]\n"
        assert main(["identities", "--config", write(tmp_path, text), "--out", str(tmp_path / "o"),
                     "--quiet"]) == 0
        summary = (tmp_path / "o" / "summary.txt").read_text()
        assert " 0 failures" in summary

    def test_decay_report_table(self, tmp_path):
        text = "[region]\nL = 10\n[model]\nlam = 10.0\n[run]\nr_list = [1, 2, 3]\nn_samples = 20\n"
        main(["dynloc", "--config", write(tmp_path, text), "--out", str(tmp_path / "o"), "--quiet"])
        s = (tmp_path / "o" / "summary.txt").read_text()
        assert "rate m =" in s and "CI" in s and "R^2" in s
        data = (tmp_path / "o" / "theta.dat").read_text().splitlines()
        assert data[0].startswith("#") and len(data[1].split()) == 2
        summ = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summ["decay"][0]["fit"]["rate"] > 0

    @pytest.mark.parametrize("exp, text", [
        ("spectrum", "[region]\nL = 5\n[run]\nn_samples = 3\n"),
        ("ct", "[region]\nL = 5\n[run]\nn_pairs = 2\nn_energies = 1\n"),
        ("quasiloc", "[region]\nL = 4\n[run]\nr_list = [0, 1]\n"),
        ("wegner", "[region]\nL = 4\n[run]\nn_samples = 20\n"),
        ("event", "[region]\nL = 5\n[run]\nN_list = [1, 2]\nn_samples = 50\n"),
        ("evolution", "[region]\nL = 4\n[run]\nr_max = 2\n"),
    ])
    def test_every_experiment_runs(self, tmp_path, exp, text):
        assert main([exp, "--config", write(tmp_path, text), "--out", str(tmp_path / "o"), "--quiet"]) == 0
        r = rows(tmp_path / "o" / "results.csv")
        assert r and list(r[0]) == cli.COLUMNS[exp]
        assert (tmp_path / "o" / "summary.txt").is_file()
        assert main(["report", str(tmp_path / "o")]) == 0

    def test_help_documents_columns(self, capsys):
        with pytest.raises(SystemExit):
            main(["ct", "--help"])
        out = capsys.readouterr().out
        assert "CSV columns: k, E, A, B, rho, measured, bound, passed, flag" in out


def test_connected_pairs_distances():
    lam = Region.chain(6)
    pairs = connected_pairs(lam, 3)
    assert pairs
    for A, B, r in pairs:
        assert A.issubset(B) and A.is_connected() and B.is_connected()
        assert rho(lam, A, B) + 1 == r and 1 <= r <= 3
