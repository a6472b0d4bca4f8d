"""Batch experiment runner.

A run is described by one TOML file (or the ``config`` block of a previous
run's ``manifest.json``) with top-level keys and the sections ``[region]``,
``[model]``, ``[probe]``, ``[distribution]`` and ``[run]``.  Flags override
the file; ``XXZLOC_WORKERS`` and ``XXZLOC_OUT`` override the file but not
the flags.  Every run writes ``results.csv`` (the numbers), ``manifest.json``
(metadata), ``summary.txt``/``summary.json`` and gnuplot ``.dat`` files.

Exit codes: 0 success, 2 invalid configuration or missing artifacts,
3 resource guard, 4 numerical failure during compute.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .disorder import (DistributionSpec, dynloc_expectation, event_probability, frac_moment_scan, sample_omega,
                       wegner_scan)
from .identities import (MAX_DENSE_SITES, default_geometries, random_disconnected_geometries, run_battery,
                         run_decoupling_battery)
from .lattice import INFINITE, PreconditionError, Region, RegionError, deform_region, rho
from .operators import (ModelParams, ParamError, build_hamiltonian, diagonalize, energy_interval)
from .probes import (InsufficientSamples, ProbeParams, SectorSolver, ct_certificate, evolution_decay_check,
                     f_estimator, fit_decay)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXPERIMENTS = ("identities", "spectrum", "ct", "quasiloc", "fracmom", "wegner", "event", "dynloc", "evolution")
EXIT_OK, EXIT_CONFIG, EXIT_RESOURCE, EXIT_NUMERIC = 0, 2, 3, 4
U64 = 2 ** 64

MC_COLUMNS = ["estimand_id", "r", "mean", "stderr", "n", "flagged", "seed"]
COLUMNS = {
    "identities": ["identity_id", "residual", "tol", "n_cases", "passed", "info", "notes"],
    "spectrum": ["sample", "delta", "e0", "min_positive", "k", "count", "bound", "passed"],
    "ct": ["k", "E", "A", "B", "rho", "measured", "bound", "passed", "flag"],
    "quasiloc": ["estimand_id", "r", "value", "theta", "j", "n_theta", "flagged"],
    "fracmom": MC_COLUMNS,
    "wegner": MC_COLUMNS,
    "event": MC_COLUMNS,
    "dynloc": MC_COLUMNS,
    "evolution": ["A", "B", "r", "t", "measured", "bound", "passed"],
}
COLUMN_HELP = {
    "identities": "one row per identity id: largest residual over all cases, tolerance, case count, pass flag",
    "spectrum": "per realization and k: ground energy, smallest eigenvalue above 1e-10, count in Ihat_<=k, "
                "bound k|L|^(2k)+1",
    "ct": "per (k, E, A, B): rho(A,B), measured ||P-^A Rhat P+^B||, bound C0 exp(-m0 rho), pass flag, solve flag",
    "quasiloc": "f estimator per r for one realization (theta, j = maximiser)",
    "fracmom": "estimand_id=fracmom.<dressing>, r = distance, mean of the s-th moment with stderr",
    "wegner": "estimand_id=wegner.lam=<lambda>, r = window width, probability of spectrum in the window",
    "event": "estimand_id=event.k=<k>, r = N, probability of a low-field N-site k-cluster configuration",
    "dynloc": "estimand_id=theta (r = distance) and count_I_le_k (r = -1, mean eigenvalue count)",
    "evolution": "per connected A ⊆ B and t: ||P-^A e^{itH} P+^B|| against (|t|/delta)^r/r!",
}

TOP_KEYS = {"experiment", "seed", "workers", "max_sites", "max_block_dim", "out",
            "region", "model", "probe", "distribution", "run"}
SECTION_KEYS = {
    "region": {"L", "start", "sites"},
    "model": {"delta", "lam", "delta0", "lambda0"},
    "probe": {"k", "E", "s", "tol", "flavor"},
    "distribution": {"id", "xs", "ps"},
}
# experiment -> {key: default}; a list default means "list of numbers"
RUN_DEFAULTS = {
    "identities": {"n_disconnected": 0, "disconnected_span": 12, "deltas": [1.5, 2.0, 5.0, 10.0], "n_draws": 2,
                   "lambdas": [0.5, 1.0, 3.0, 10.0], "k_list": [1, 2], "tol": 1e-10, "trace": True,
                   "decoupling_cases": 0, "decoupling_sites": 12, "decoupling_tol": 1e-9},
    "spectrum": {"n_samples": 20, "deltas": None, "k_max": 2},
    "ct": {"k_list": [0, 1, 2], "n_pairs": 5, "n_energies": 2, "e_min": -1.0, "energies": None,
           "n_random_K": 20},
    "quasiloc": {"r_list": [0, 1, 2, 3], "scope": "subintervals", "stream": 0},
    "fracmom": {"A": None, "r_list": [1, 2, 3], "n_samples": 50, "dressing": "plain", "N": None},
    "wegner": {"K": None, "center": 1.2, "widths": [0.01, 0.02, 0.04], "lambdas": [2.0, 4.0], "n_samples": 200},
    "event": {"N_list": [1, 2, 3, 4], "n_samples": 2000, "batch": 4096},
    "dynloc": {"A": None, "r_list": [1, 2, 3], "n_samples": 30},
    "evolution": {"t_list": [0.5, 1.0, 2.0], "r_max": 6, "stream": 0},
}
DEFAULTS = {
    "seed": 0, "workers": 1, "max_sites": 16, "max_block_dim": 12870,
    "region": {"L": 8, "start": 0},
    "model": {"delta": 8.0, "lam": 1.0},
    "probe": {"k": 1, "E": 0.4, "s": 0.3, "tol": 1e-12, "flavor": "plain_H"},
    "distribution": {"id": "uniform01"},
}


class ConfigError(ValueError):
    """Schema or value error in an experiment configuration (exit 2)."""


class ResourceError(RuntimeError):
    """Run would exceed a configured size limit (exit 3)."""


class MissingArtifacts(FileNotFoundError):
    """Report requested for a directory without run artifacts (exit 2)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved configuration; ``resolved`` is what the manifest hashes."""

    experiment: str
    region: Region
    model: ModelParams
    probe: ProbeParams
    dist: DistributionSpec
    run: dict
    seed: int
    workers: int
    out: Path
    resolved: dict = field(repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.resolved)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(resolved: dict) -> str:
    """Git blob hash (sha1 of ``blob <len>\\0`` + content) of the canonical JSON config."""
    body = canonical_json(resolved).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def load_config_file(path) -> dict:
    """TOML config, or the ``config`` block of a run manifest (``.json``)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a JSON object")
        return data.get("config", data)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: invalid TOML: {exc}") from None


def _int(x, name, lo=None, hi=None) -> int:
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {x!r}")
    x = int(x)
    if (lo is not None and x < lo) or (hi is not None and x > hi):
        raise ConfigError(f"{name}={x} out of range [{lo}, {hi}]")
    return x


def _float(x, name) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{name} must be a number, got {x!r}")
    x = float(x)
    if not math.isfinite(x):
        raise ConfigError(f"{name} must be finite")
    return x


def _list(x, name, conv) -> list:
    if not isinstance(x, (list, tuple)):
        raise ConfigError(f"{name} must be a list, got {x!r}")
    return [conv(v, f"{name}[{i}]") for i, v in enumerate(x)]


def _conv_like(default, value, name):
    """Coerce ``value`` to the type of ``default`` (ints, floats, bools, strings, numeric lists)."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        return _int(value, name)
    if isinstance(default, float):
        return _float(value, name)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if isinstance(default, list):
        conv = _int if default and all(isinstance(v, int) for v in default) else _float
        return _list(value, name, conv)
    return value


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _resolve_run(experiment: str, run: dict) -> dict:
    defaults = RUN_DEFAULTS[experiment]
    _check_keys(run, set(defaults), "[run]")
    out = {}
    for key, dflt in defaults.items():
        if key not in run or run[key] is None:
            out[key] = dflt
            continue
        v = run[key]
        if key in ("A", "K"):
            out[key] = _list(v, f"run.{key}", _int)
        elif key in ("energies", "deltas"):
            out[key] = _list(v, f"run.{key}", _float)
        elif key == "N":
            out[key] = _int(v, "run.N", 0)
        else:
            out[key] = _conv_like(dflt, v, f"run.{key}")
    return out


def resolve_config(raw: dict, *, experiment: str | None = None, seed=None, workers=None, out=None,
                   env: dict | None = None) -> ExperimentConfig:
    """Validate a raw config mapping and apply the file < environment < flag precedence.

    Raises
    ------
    ConfigError
        On unknown keys, wrong types or inadmissible parameter values.
    """
    env = os.environ if env is None else env
    raw = dict(raw or {})
    _check_keys(raw, TOP_KEYS, "config")
    exp = raw.get("experiment", experiment)
    if experiment is not None and exp != experiment:
        raise ConfigError(f"config is for experiment {exp!r}, not {experiment!r}")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}, got {exp!r}")

    sections = {}
    for name, allowed in SECTION_KEYS.items():
        sec = raw.get(name, {})
        _check_keys(sec, allowed, f"[{name}]")
        sections[name] = sec

    # region
    reg = sections["region"]
    if "sites" in reg:
        if "L" in reg or "start" in reg:
            raise ConfigError("[region] takes either sites or L/start, not both")
        sites = sorted(set(_list(reg["sites"], "region.sites", _int)))
        if not sites:
            raise ConfigError("region.sites must be non-empty")
        region_cfg = {"sites": sites}
    else:
        L = _int(reg.get("L", DEFAULTS["region"]["L"]), "region.L", 1)
        start = _int(reg.get("start", 0), "region.start")
        sites = list(range(start, start + L))
        region_cfg = {"L": L, "start": start}
    region = Region(sites)

    # model
    m = sections["model"]
    model_cfg = {"delta": _float(m.get("delta", DEFAULTS["model"]["delta"]), "model.delta"),
                 "lam": _float(m.get("lam", DEFAULTS["model"]["lam"]), "model.lam")}
    for key in ("delta0", "lambda0"):
        if key in m:
            model_cfg[key] = _float(m[key], f"model.{key}")
    try:
        model = ModelParams(**model_cfg)
    except ParamError as exc:
        raise ConfigError(f"[model]: {exc}") from None

    # probe
    p = {**DEFAULTS["probe"], **sections["probe"]}
    probe_cfg = {"k": _int(p["k"], "probe.k", 0), "E": _float(p["E"], "probe.E"), "s": _float(p["s"], "probe.s"),
                 "tol": _float(p["tol"], "probe.tol"), "flavor": str(p["flavor"])}
    try:
        probe = ProbeParams(**probe_cfg)
    except PreconditionError as exc:
        raise ConfigError(f"[probe]: {exc}") from None

    # distribution
    d = sections["distribution"]
    try:
        if d.get("id", "uniform01") == "uniform01":
            if set(d) - {"id"}:
                raise ConfigError("uniform01 takes no xs/ps")
            dist = DistributionSpec()
        else:
            dist = DistributionSpec(str(d["id"]), _list(d.get("xs", []), "distribution.xs", _float),
                                    _list(d.get("ps", []), "distribution.ps", _float))
    except (ParamError, PreconditionError) as exc:
        raise ConfigError(f"[distribution]: {exc}") from None

    run_cfg = _resolve_run(exp, raw.get("run", {}))

    s = seed if seed is not None else raw.get("seed", DEFAULTS["seed"])
    s = _int(s, "seed", 0, U64 - 1)
    w = workers if workers is not None else env.get("XXZLOC_WORKERS", raw.get("workers", DEFAULTS["workers"]))
    if isinstance(w, str):
        if not w.strip().isdigit():
            raise ConfigError(f"XXZLOC_WORKERS must be a positive integer, got {w!r}")
        w = int(w)
    w = _int(w, "workers", 1)
    max_sites = _int(raw.get("max_sites", DEFAULTS["max_sites"]), "max_sites", 1)
    max_block = _int(raw.get("max_block_dim", DEFAULTS["max_block_dim"]), "max_block_dim", 1)

    resolved = {"experiment": exp, "seed": s, "max_sites": max_sites, "max_block_dim": max_block,
                "region": region_cfg, "model": model_cfg, "probe": probe_cfg, "distribution": dist.to_dict(),
                "run": run_cfg}
    o = out if out is not None else env.get("XXZLOC_OUT", raw.get("out"))
    if o is None:
        o = os.path.join("xxzloc-runs", f"{exp}-{config_hash(resolved)[:10]}")
    cfg = ExperimentConfig(exp, region, model, probe, dist, run_cfg, s, w, Path(o), resolved)
    _validate_experiment(cfg)
    return cfg


def _subset(cfg: ExperimentConfig, sites, name: str) -> Region:
    try:
        return cfg.region.require_subset(sites, name)
    except (RegionError, PreconditionError) as exc:
        raise ConfigError(f"run.{name}: {exc}") from None


def default_A(region: Region) -> list[int]:
    """Middle site of the region."""
    return [region.sites[len(region) // 2]]


def _validate_experiment(cfg: ExperimentConfig) -> None:
    run, exp = cfg.run, cfg.experiment
    for key in ("n_samples", "n_pairs", "n_energies", "n_draws"):
        if key in run and run[key] < 1:
            raise ConfigError(f"run.{key} must be >= 1")
    if "r_list" in run and any(r < 0 for r in run["r_list"]):
        raise ConfigError("run.r_list entries must be >= 0")
    if exp in ("fracmom", "dynloc"):
        A = _subset(cfg, run["A"] if run["A"] is not None else default_A(cfg.region), "A")
        if not A or not A.is_connected():
            raise ConfigError("run.A must be a non-empty connected set")
        if exp == "fracmom" and run["dressing"] not in ("plain", "hs_Q"):
            raise ConfigError("run.dressing must be plain or hs_Q")
    if exp == "ct":
        try:
            cfg.model.require_certificate_regime()
        except ParamError as exc:
            raise ConfigError(f"[model]: {exc}") from None
        if any(k < 0 for k in run["k_list"]):
            raise ConfigError("run.k_list entries must be >= 0")
        for k in run["k_list"]:
            band = energy_interval("I_le_k", k, cfg.model.delta)
            if run["energies"] is not None and not all(band.contains(E) for E in run["energies"]):
                raise ConfigError(f"run.energies must lie in I_<=k = (-inf, {band.hi}) for k={k}")
            if run["energies"] is None and not run["e_min"] < band.hi:
                raise ConfigError(f"run.e_min must be below {band.hi}")
    if exp == "wegner":
        K = _subset(cfg, run["K"] if run["K"] is not None else cfg.region.sites, "K")
        if not K:
            raise ConfigError("run.K must be non-empty")
        band = energy_interval("I_k", cfg.probe.k, cfg.model.delta)
        for w in run["widths"]:
            if w <= 0:
                raise ConfigError("run.widths must be positive")
            if not (run["center"] - w / 2 >= band.lo and run["center"] + w / 2 <= band.hi):
                raise ConfigError(f"window of width {w} around {run['center']} escapes "
                                  f"I_k = [{band.lo:.6g}, {band.hi:.6g}) for k={cfg.probe.k}")
        for lam in run["lambdas"]:
            if lam < 0:
                raise ConfigError("run.lambdas must be >= 0")
    if exp == "event":
        if cfg.probe.k < 1:
            raise ConfigError("probe.k must be >= 1 for event probabilities")
        if any(not 1 <= N <= len(cfg.region) for N in run["N_list"]):
            raise ConfigError(f"run.N_list entries must lie in [1, {len(cfg.region)}]")
    if exp == "identities":
        for dl in run["deltas"]:
            if dl <= 1:
                raise ConfigError(f"run.deltas: anisotropy must satisfy delta > 1 (Ising phase), got {dl}")
    if exp == "spectrum" and run["deltas"] is not None:
        for dl in run["deltas"]:
            if dl <= 1:
                raise ConfigError(f"run.deltas: anisotropy must satisfy delta > 1 (Ising phase), got {dl}")
    if exp == "evolution" and (not run["t_list"] or run["r_max"] < 1):
        raise ConfigError("run.t_list must be non-empty and run.r_max >= 1")


def resource_guard(cfg: ExperimentConfig) -> None:
    """Raise :class:`ResourceError` before any allocation the limits forbid."""
    lim = cfg.resolved["max_sites"]
    sizes = [len(cfg.region)]
    if cfg.experiment == "identities" and cfg.run["decoupling_cases"] > 0:
        sizes.append(cfg.run["decoupling_sites"])
    n = max(sizes)
    if n > lim:
        raise ResourceError(f"|Lambda| = {n} exceeds max_sites = {lim}")
    block = math.comb(n, n // 2)
    if block > cfg.resolved["max_block_dim"]:
        raise ResourceError(f"peak sector dimension C({n},{n // 2}) = {block} exceeds "
                            f"max_block_dim = {cfg.resolved['max_block_dim']}")
    if cfg.experiment == "identities" and n > MAX_DENSE_SITES:
        raise ResourceError(f"identity checks use dense blocks and are limited to |Lambda| <= {MAX_DENSE_SITES}")


# ---------------------------------------------------------------------------
# experiments; each returns (rows, flagged_total)


def _fmt_region(reg) -> str:
    return " ".join(str(s) for s in (reg.sites if isinstance(reg, Region) else reg))


def _fmt_rho(r):
    return "inf" if r is INFINITE else int(r)


def _run_identities(cfg: ExperimentConfig):
    run = cfg.run
    geoms = default_geometries(len(cfg.region), cfg.region.sites[0])
    if run["n_disconnected"]:
        geoms += random_disconnected_geometries(run["n_disconnected"], len(cfg.region), run["disconnected_span"],
                                                seed=cfg.seed + 1)
    reports = run_battery(geoms, run["deltas"], run["n_draws"], cfg.seed, lambdas=run["lambdas"],
                          k_list=run["k_list"], tol=run["tol"], trace=run["trace"])
    if run["decoupling_cases"]:
        reports += run_decoupling_battery(Region.chain(run["decoupling_sites"]), run["decoupling_cases"], cfg.seed,
                                          run["decoupling_tol"])
    rows = [[r.identity_id, r.max_residual, r.tol, r.n_cases, int(r.passed), int(r.info), r.notes] for r in reports]
    return rows, 0


def _run_spectrum(cfg: ExperimentConfig):
    lam, run = cfg.region, cfg.run
    deltas = run["deltas"] or [cfg.model.delta]
    rows = []
    for i in range(run["n_samples"]):
        om = sample_omega(lam, cfg.dist, cfg.seed, i)
        for dl in deltas:
            p = ModelParams(dl, cfg.model.lam)
            ev = diagonalize(build_hamiltonian(lam, p, om, "H")).all_values
            e0 = float(ev.min())
            pos = ev[ev > 1e-10]
            min_pos = float(pos.min()) if pos.size else math.inf
            gap_ok = abs(e0) < 1e-12 and min_pos >= p.gap - 1e-10
            for k in range(1, run["k_max"] + 1):
                count = int(np.count_nonzero(energy_interval("Ihat_le_k", k, dl).contains(ev)))
                bound = k * len(lam) ** (2 * k) + 1
                rows.append([i, dl, e0, min_pos, k, count, bound, int(gap_ok and count <= bound)])
    return rows, 0


def _random_interval(rng, sites, min_len=1):
    a = int(rng.integers(0, len(sites) - min_len + 1))
    b = int(rng.integers(a + min_len, len(sites) + 1))
    return sites[a:b]


def random_pair(lam: Region, rng: np.random.Generator) -> tuple[Region, Region]:
    """Connected ``A`` inside a connected ``B`` (runs of consecutive sites of ``lam``)."""
    B = _random_interval(rng, lam.sites)
    A = _random_interval(rng, B)
    return Region(A), Region(B)


def _run_ct(cfg: ExperimentConfig):
    lam, run, p = cfg.region, cfg.run, cfg.model
    rng = np.random.default_rng([cfg.seed, 1])
    pairs = [random_pair(lam, rng) for _ in range(run["n_pairs"])]
    om = sample_omega(lam, cfg.dist, cfg.seed, 0)
    rows, flagged = [], 0
    for k in run["k_list"]:
        hi = energy_interval("I_le_k", k, p.delta).hi
        energies = run["energies"] or sorted(rng.uniform(run["e_min"], hi, run["n_energies"]).tolist())
        H = build_hamiltonian(lam, p, om, "Hhat", k=k)
        for E in energies:
            solver = SectorSolver(H, E)
            for A, B in pairs:
                c = ct_certificate(lam, p, k, E, A, B, om, hamiltonian=H, solver=solver, tol=cfg.probe.tol,
                                   n_random_K=run["n_random_K"], seed=cfg.seed)
                flagged += c.flag != "NONE"
                rows.append([k, E, _fmt_region(A), _fmt_region(B), _fmt_rho(c.rho), c.measured, c.bound,
                             int(c.passed), c.flag])
    return rows, flagged


def _run_quasiloc(cfg: ExperimentConfig):
    om = sample_omega(cfg.region, cfg.dist, cfg.seed, cfg.run["stream"])
    rows, flagged = [], 0
    for r in cfg.run["r_list"]:
        f = f_estimator(cfg.region, cfg.model, om, cfg.probe.k, cfg.probe.E, r, cfg.run["scope"])
        flagged += f.flagged
        rows.append(["f", r, f.value, _fmt_region(f.theta) if f.theta is not None else "",
                     "" if f.j is None else f.j, f.n_theta, f.flagged])
    return rows, flagged


def _mc_rows(estimand, keys, ests):
    return [[estimand, key, e.mean, e.standard_error, e.n_samples, e.flagged_sample_count, e.seed]
            for key, e in zip(keys, ests)]


def _run_fracmom(cfg: ExperimentConfig):
    run = cfg.run
    A = run["A"] if run["A"] is not None else default_A(cfg.region)
    _, ests = frac_moment_scan(cfg.region, cfg.model, A, run["r_list"], run["n_samples"], cfg.seed, E=cfg.probe.E,
                               s=cfg.probe.s, k=cfg.probe.k, dressing=run["dressing"], N=run["N"], dist=cfg.dist,
                               workers=cfg.workers, fit=False)
    return _mc_rows(f"fracmom.{run['dressing']}", run["r_list"], ests), sum(e.flagged_sample_count for e in ests)


def _run_wegner(cfg: ExperimentConfig):
    run = cfg.run
    K = run["K"] if run["K"] is not None else cfg.region.sites
    tab = wegner_scan(cfg.region, K, cfg.probe.k, run["center"], run["widths"], run["lambdas"], run["n_samples"],
                      cfg.seed, delta=cfg.model.delta, dist=cfg.dist, workers=cfg.workers)
    rows = []
    for lam in tab.lambdas:
        rows += _mc_rows(f"wegner.lam={lam:g}", tab.widths, [tab.estimates[(w, lam)] for w in tab.widths])
    return rows, 0


def _run_event(cfg: ExperimentConfig):
    run, k = cfg.run, cfg.probe.k
    ests = [event_probability(cfg.region, k, N, cfg.model, run["n_samples"], cfg.seed, dist=cfg.dist,
                              batch=run["batch"]) for N in run["N_list"]]
    return _mc_rows(f"event.k={k}", run["N_list"], ests), 0


def _run_dynloc(cfg: ExperimentConfig):
    run = cfg.run
    A = run["A"] if run["A"] is not None else default_A(cfg.region)
    _, ests, count = dynloc_expectation(cfg.region, cfg.model, A, run["r_list"], run["n_samples"], cfg.seed,
                                        k=cfg.probe.k, dist=cfg.dist, workers=cfg.workers, fit=False)
    return _mc_rows("theta", run["r_list"], ests) + _mc_rows("count_I_le_k", [-1], [count]), 0


def connected_pairs(lam: Region, r_max: int) -> list[tuple[Region, Region, int]]:
    """Every connected ``A ⊆ B`` (runs of ``lam``) with ``1 <= dist(A, B^c) <= r_max``."""
    s, out = lam.sites, []
    for a0 in range(len(s)):
        for a1 in range(a0 + 1, len(s) + 1):
            for b0 in range(a0 + 1):
                for b1 in range(a1, len(s) + 1):
                    A, B = Region(s[a0:a1]), Region(s[b0:b1])
                    r = rho(lam, A, B)
                    if r is INFINITE:
                        continue
                    if 1 <= r + 1 <= r_max:
                        out.append((A, B, r + 1))
    return out


def _run_evolution(cfg: ExperimentConfig):
    lam, run = cfg.region, cfg.run
    om = sample_omega(lam, cfg.dist, cfg.seed, run["stream"])
    dec = diagonalize(build_hamiltonian(lam, cfg.model, om, "H"))
    rows = []
    for A, B, r in connected_pairs(lam, run["r_max"]):
        rep = evolution_decay_check(lam, cfg.model, om, A, B, run["t_list"], decomposition=dec, tol=cfg.probe.tol)
        for t, measured, bound, passed in rep.rows:
            rows.append([_fmt_region(A), _fmt_region(B), r, t, measured, bound, int(passed)])
    return rows, 0


RUNNERS: dict[str, Callable] = {
    "identities": _run_identities, "spectrum": _run_spectrum, "ct": _run_ct, "quasiloc": _run_quasiloc,
    "fracmom": _run_fracmom, "wegner": _run_wegner, "event": _run_event, "dynloc": _run_dynloc,
    "evolution": _run_evolution,
}


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, log=print) -> dict:
    """Guard, compute, write ``results.csv`` and ``manifest.json``, then render the report.

    Returns the manifest.  Raises :class:`ResourceError` before compute, and
    lets numerical errors from the compute stage propagate.
    """
    t0 = time.perf_counter()
    timings = {}
    resource_guard(cfg)
    timings["plan"] = time.perf_counter() - t0
    log(f"[xxzloc] {cfg.experiment}: |Lambda|={len(cfg.region)} seed={cfg.seed} workers={cfg.workers} "
        f"hash={cfg.config_hash[:10]}")
    t1 = time.perf_counter()
    rows, flagged = RUNNERS[cfg.experiment](cfg)
    timings["compute"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    cfg.out.mkdir(parents=True, exist_ok=True)
    csv_path = cfg.out / "results.csv"
    write_csv(csv_path, COLUMNS[cfg.experiment], rows)
    timings["write"] = time.perf_counter() - t2
    manifest = {
        "tool": "xxzloc", "tool_version": __version__, "experiment": cfg.experiment,
        "config_hash": cfg.config_hash, "config": cfg.resolved,
        "model_params": asdict(cfg.model), "probe_params": asdict(cfg.probe), "distribution": cfg.dist.to_dict(),
        "workers": cfg.workers, "wall_time": time.perf_counter() - t0, "stage_timings": timings,
        "flagged_total": int(flagged), "n_rows": len(rows),
        "artifacts": {"results.csv": _sha256(csv_path)},
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    text = emit_report(cfg.out)
    log(text.rstrip("\n"))
    return manifest


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _dat(path: Path, pairs, header: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for x, y in pairs:
            fh.write(f"{x!r} {y!r}\n")


def _decay_summary(rows, estimand) -> dict:
    sel = [r for r in rows if r["estimand_id"] == estimand and int(r["r"]) >= 0]
    samples = [(int(r["r"]), float(r["mean"])) for r in sel]
    se = [float(r["stderr"]) for r in sel]
    out = {"estimand": estimand, "points": samples}
    try:
        prof = fit_decay(samples, floor=0.0, stderr=se if any(se) else None)
    except InsufficientSamples as exc:
        out["fit"] = None
        out["note"] = str(exc)
        return out
    out["fit"] = {"rate": prof.rate, "rate_ci": list(prof.rate_ci) if prof.rate_ci else None,
                  "r_squared": prof.r_squared, "prefactor": prof.prefactor, "window": list(prof.fit_window),
                  "n_used": prof.n_used}
    return out


def _fmt_fit(d: dict) -> str:
    f = d.get("fit")
    if f is None:
        return f"{d['estimand']}: no fit ({d.get('note', 'insufficient samples')})"
    ci = f["rate_ci"]
    ci_s = f"[{ci[0]:.4g}, {ci[1]:.4g}]" if ci else "n/a"
    return (f"{d['estimand']}: rate m = {f['rate']:.4g}  95% CI {ci_s}  R^2 = {f['r_squared']:.4f}  "
            f"window r in {f['window']}")


def emit_report(out_dir) -> str:
    """Render ``summary.txt``, ``summary.json`` and ``.dat`` files from a run directory.

    Raises
    ------
    MissingArtifacts
        If ``results.csv`` or ``manifest.json`` is absent.
    """
    d = Path(out_dir)
    missing = [n for n in ("results.csv", "manifest.json") if not (d / n).is_file()]
    if missing:
        raise MissingArtifacts(f"missing artifacts in {d}: {', '.join(missing)}")
    man = json.loads((d / "manifest.json").read_text())
    rows = _read_rows(d / "results.csv")
    exp = man["experiment"]
    lines = [f"experiment {exp}  config {man['config_hash'][:10]}  seed {man['config']['seed']}  "
             f"wall {man['wall_time']:.2f}s  flagged {man['flagged_total']}"]
    summary: dict = {"experiment": exp, "config_hash": man["config_hash"]}

    if exp in ("identities", "spectrum", "ct", "evolution"):
        n_pass = sum(int(r["passed"]) for r in rows)
        summary.update(passed=n_pass, total=len(rows), failures=len(rows) - n_pass)
        lines.append(f"{n_pass}/{len(rows)} passed, {len(rows) - n_pass} failures")
    if exp == "identities":
        for r in rows:
            status = "pass" if int(r["passed"]) else "FAIL"
            lines.append(f"  {r['identity_id']:<24} {float(r['residual']):.3e}  tol {float(r['tol']):.1e}  "
                         f"cases {r['n_cases']:>5}  {status}")
    elif exp == "spectrum":
        e0 = max(abs(float(r["e0"])) for r in rows)
        mp = min(float(r["min_positive"]) for r in rows)
        ratio = max(int(r["count"]) / int(r["bound"]) for r in rows)
        summary.update(max_abs_e0=e0, min_positive=mp, max_count_over_bound=ratio)
        lines.append(f"max |E0| = {e0:.3e}  min positive eigenvalue = {mp:.6g}  max count/bound = {ratio:.3g}")
    elif exp == "ct":
        ratio = max(float(r["measured"]) / float(r["bound"]) if float(r["bound"]) > 0 else 0.0 for r in rows)
        summary["max_measured_over_bound"] = ratio
        lines.append(f"max measured/bound = {ratio:.4g}")
        finite = [r for r in rows if r["rho"] != "inf"]
        _dat(d / "ct_measured.dat", [(int(r["rho"]), float(r["measured"])) for r in finite], "rho measured")
        _dat(d / "ct_bound.dat", sorted({(int(r["rho"]), float(r["bound"])) for r in finite}), "rho bound")
    elif exp == "evolution":
        ratio = max(float(r["measured"]) / float(r["bound"]) for r in rows) if rows else 0.0
        summary["max_measured_over_bound"] = ratio
        lines.append(f"max measured/bound = {ratio:.4g}")
        for t in sorted({float(r["t"]) for r in rows}):
            sel = [r for r in rows if float(r["t"]) == t]
            worst = {}
            for r in sel:
                worst[int(r["r"])] = max(worst.get(int(r["r"]), 0.0), float(r["measured"]))
            _dat(d / f"evolution_t{t:g}_measured.dat", sorted(worst.items()), "r max_measured")
            _dat(d / f"evolution_t{t:g}_bound.dat",
                 sorted({(int(r["r"]), float(r["bound"])) for r in sel}), "r bound")
    elif exp == "quasiloc":
        pts = [(int(r["r"]), float(r["value"])) for r in rows]
        _dat(d / "f.dat", pts, "r f")
        fit = _decay_summary([{"estimand_id": "f", "r": r, "mean": v, "stderr": 0.0} for r, v in pts], "f")
        summary["decay"] = [fit]
        lines.append(_fmt_fit(fit))
    elif exp in ("fracmom", "dynloc"):
        fits = []
        for est in dict.fromkeys(r["estimand_id"] for r in rows):
            if est == "count_I_le_k":
                c = next(r for r in rows if r["estimand_id"] == est)
                summary["count_I_le_k"] = {"mean": float(c["mean"]), "stderr": float(c["stderr"])}
                lines.append(f"mean eigenvalue count in I_<=k = {float(c['mean']):.4g} +- {float(c['stderr']):.2g}")
                continue
            sel = [r for r in rows if r["estimand_id"] == est]
            _dat(d / f"{est}.dat", [(int(r["r"]), float(r["mean"])) for r in sel], "r mean")
            fits.append(_decay_summary(rows, est))
            lines.append(_fmt_fit(fits[-1]))
            for r in sel:
                lines.append(f"  r={r['r']:>3}  mean {float(r['mean']):.6g}  +- {float(r['stderr']):.3g}  "
                             f"n {r['n']}  flagged {r['flagged']}")
        summary["decay"] = fits
    elif exp == "wegner":
        from scipy import stats
        res = {}
        for est in dict.fromkeys(r["estimand_id"] for r in rows):
            sel = [r for r in rows if r["estimand_id"] == est]
            w = [float(r["r"]) for r in sel]
            m = [float(r["mean"]) for r in sel]
            _dat(d / f"{est}.dat", list(zip(w, m)), "width probability")
            fit = stats.linregress(w, m) if len(w) >= 2 else None
            res[est] = {"slope": float(fit.slope) if fit else None,
                        "r_squared": float(fit.rvalue ** 2) if fit else None}
            lines.append(f"{est}: slope {res[est]['slope']:.4g}  R^2 {res[est]['r_squared']:.4f}  "
                         + "  ".join(f"P({x:g})={y:.4g}" for x, y in zip(w, m)))
        keys = list(res)
        if len(keys) >= 2 and res[keys[0]]["slope"]:
            ratio = res[keys[-1]]["slope"] / res[keys[0]]["slope"]
            summary["slope_ratio"] = ratio
            lines.append(f"slope ratio {keys[-1]} / {keys[0]} = {ratio:.4g}")
        summary["lines"] = res
    elif exp == "event":
        pts = [(int(r["r"]), float(r["mean"])) for r in rows]
        logs = [math.log(p) if p > 0 else -math.inf for _, p in pts]
        mono = all(b < a for a, b in zip(logs, logs[1:]))
        summary.update(log_probability=dict(zip([n for n, _ in pts], logs)), monotone_decreasing=mono)
        _dat(d / "event_logp.dat", [(n, lp) for (n, _), lp in zip(pts, logs) if math.isfinite(lp)], "N log_p")
        for (n, p), r in zip(pts, rows):
            lines.append(f"  N={n:>3}  P = {p:.6g} +- {float(r['stderr']):.3g}")
        lines.append(f"log-probability strictly decreasing in N: {mono}")

    text = "\n".join(lines) + "\n"
    (d / "summary.txt").write_text(text)
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    return text


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xxzloc", description="Exact-diagonalization experiments for the random "
                                 "XXZ chain. Each subcommand reads an optional TOML config (or a previous "
                                 "manifest.json) and writes results.csv, manifest.json, summary.txt, "
                                 "summary.json and .dat files to the output directory.",
                                 epilog="exit codes: 0 ok, 2 invalid config / missing artifacts, "
                                        "3 resource guard, 4 numerical failure")
    ap.add_argument("--version", action="version", version=f"xxzloc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for exp in EXPERIMENTS:
        keys = ", ".join(f"{k}={v!r}" for k, v in RUN_DEFAULTS[exp].items())
        sp = sub.add_parser(exp, help=COLUMN_HELP[exp].split(":")[0],
                            formatter_class=argparse.RawDescriptionHelpFormatter,
                            epilog=f"CSV columns: {', '.join(COLUMNS[exp])}\n  {COLUMN_HELP[exp]}\n"
                                   f"[run] keys and defaults: {keys}")
        sp.add_argument("--config", metavar="PATH", help="TOML config or manifest.json of an earlier run")
        sp.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides config)")
        sp.add_argument("--workers", type=int, metavar="N", help="worker processes (overrides XXZLOC_WORKERS)")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides XXZLOC_OUT)")
        sp.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    rp = sub.add_parser("report", help="re-render summary files from an existing run directory")
    rp.add_argument("dir", metavar="DIR")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    err = lambda msg: print(f"xxzloc: error: {msg}", file=sys.stderr)  # noqa: E731
    if args.command == "report":
        try:
            print(emit_report(args.dir), end="")
        except MissingArtifacts as exc:
            err(exc)
            return EXIT_CONFIG
        return EXIT_OK
    try:
        raw = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(raw, experiment=args.command, seed=args.seed, workers=args.workers, out=args.out)
    except ConfigError as exc:
        err(exc)
        return EXIT_CONFIG
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        run_experiment(cfg, log=log)
    except ResourceError as exc:
        err(f"resource guard: {exc}")
        return EXIT_RESOURCE
    except (PreconditionError, ParamError, RegionError, np.linalg.LinAlgError, FloatingPointError,
            ArithmeticError) as exc:
        err(f"numerical failure in {cfg.experiment}: {type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
