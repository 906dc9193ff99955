"""Monte Carlo evaluation: MAPE, experiment driver and report files.

Seed splitting
--------------
Replicate r of an experiment with master seed m uses

* process noise (the load fluctuations):   SeedSequence([m, 0, r])
* measurement noise:                       SeedSequence([m, 1, r])

The measurement-noise draw does not depend on the noise level; each level
rescales the same standard-normal draw.  Every noise level therefore sees
the same load trajectory and the same noise *shape* (common random
numbers), so differences between levels come from the level alone.
Results never depend on the worker count: each replicate is seeded on its
own and records are sorted before they are written.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyComparableSet, NumericalError, OutputExistsError, SchemaError
from .network import NetworkModel, load_network
from .powerflow import ParameterIndex
from .simulation import (
    LoadDynamics,
    NoiseSpec,
    add_measurement_noise,
    default_dynamics,
    equilibrium,
    load_dynamics,
    simulate,
)
from .stage2 import PipelineOptions, run_pipeline

log = logging.getLogger(__name__)

BUNDLED_FEEDERS = ("feeder4", "feeder13")
RESULTS_HEADER = ["method", "noise", "replicate", "stage", "metric", "value"]
TIMING_HEADER = ["noise", "replicate", "seconds"]
METHOD = "ou"


def mape(true, est, return_excluded: bool = False):
    """Mean absolute percentage error, in percent.

    Entries whose true value is exactly zero are left out of the average;
    with ``return_excluded`` their count is returned alongside.

    >>> mape([2.0, 4.0], [1.0, 5.0])
    37.5
    """
    true = np.asarray(true, dtype=float)
    est = np.asarray(est, dtype=float)
    if true.shape != est.shape:
        raise ValueError(f"shape mismatch: {true.shape} vs {est.shape}")
    keep = true != 0
    if not np.any(keep):
        raise EmptyComparableSet("every true value is zero; MAPE is undefined")
    value = float(100.0 * np.mean(np.abs(true[keep] - est[keep]) / np.abs(true[keep])))
    if return_excluded:
        return value, int(np.count_nonzero(~keep))
    return value


def feeder_path(name_or_path: str) -> Path:
    """A feeder file path, or the name of a bundled feeder ("feeder4", "feeder13")."""
    if name_or_path in BUNDLED_FEEDERS:
        return Path(str(resources.files("feederid") / "data" / f"{name_or_path}.json"))
    return Path(name_or_path)


def load_feeder(name_or_path: str) -> NetworkModel:
    return load_network(feeder_path(name_or_path))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment.

    ``noise_levels`` are relative measurement-noise standard deviations (see
    ``NoiseSpec``); 0 means noiseless.  When ``dynamics`` is None the loads
    come from ``default_dynamics(net, dynamics_seed, process_sigma)``.
    ``stage2`` holds overrides for ``PipelineOptions``.
    """

    feeder: str = "feeder4"
    dynamics: str | None = None
    dynamics_seed: int = 1
    process_sigma: float = 1.0
    samples: int = 3600
    dt: float = 0.02
    lag: int = 1
    noise_levels: tuple = (1e-6, 1e-5, 1e-4, 1e-3)
    noise_power: str = "additive"
    replicates: int = 20
    master_seed: int = 0
    substeps: int = 10
    stage2: dict = field(default_factory=dict)
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "noise_levels", tuple(float(s) for s in self.noise_levels))
        object.__setattr__(self, "stage2", dict(self.stage2))
        if self.replicates < 1:
            raise SchemaError("replicates must be at least 1", field="replicates")
        if not self.noise_levels:
            raise SchemaError("at least one noise level is required", field="noise_levels")
        if any(not math.isfinite(s) or s < 0 for s in self.noise_levels):
            raise SchemaError("noise levels must be finite and non-negative", field="noise_levels")
        if self.samples < 3:
            raise SchemaError("samples must be at least 3", field="samples")
        if not self.dt > 0:
            raise SchemaError("dt must be positive", field="dt")
        if self.lag < 1 or self.lag >= self.samples:
            raise SchemaError("lag must be in [1, samples)", field="lag")
        if self.workers < 1:
            raise SchemaError("workers must be at least 1", field="workers")
        if self.noise_power not in ("additive", "recompute"):
            raise SchemaError("noise_power must be 'additive' or 'recompute'", field="noise_power")
        known = {f.name for f in fields(PipelineOptions)} - {"lag"}
        unknown = set(self.stage2) - known
        if unknown:
            raise SchemaError(f"unknown stage-2 options {sorted(unknown)}", field="stage2")

    def pipeline_options(self) -> PipelineOptions:
        return PipelineOptions(lag=self.lag, **self.stage2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise SchemaError("experiment config must be an object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SchemaError(f"unknown config fields {sorted(unknown)}", field=sorted(unknown)[0])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SchemaError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON: {exc.msg}", line=exc.lineno) from None
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class RunRecord:
    noise: float
    replicate: int
    stage: str
    metric: str
    value: float
    method: str = METHOD

    def key(self):
        return (self.method, self.noise, self.replicate, self.stage, self.metric)


@dataclass
class EvaluationReport:
    """Raw per-run records plus per-level summaries.

    ``records`` carry the deterministic results; ``timings`` holds
    (noise, replicate, seconds) per pipeline run; ``failures`` lists
    (noise, replicate, error message).
    """

    config: ExperimentConfig | None = None
    records: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def values(self, noise: float, stage: str, metric: str) -> np.ndarray:
        return np.array([r.value for r in self.records
                         if r.noise == noise and r.stage == stage and r.metric == metric])

    @property
    def noise_levels(self) -> list:
        if self.config is not None:
            return list(self.config.noise_levels)
        return sorted({r.noise for r in self.records})

    def summary(self) -> dict:
        """Distribution statistics per noise level, stage and metric."""
        levels = []
        for s in self.noise_levels:
            entry = {"noise": s, "failures": sum(1 for f in self.failures if f[0] == s), "stages": {}}
            for stage in ("stage1", "stage2"):
                block = {}
                for metric in ("mape_G", "mape_B"):
                    block[metric] = describe(self.values(s, stage, metric))
                entry["stages"][stage] = block
            t = np.array([sec for n, _, sec in self.timings if n == s])
            entry["seconds"] = describe(t)
            levels.append(entry)
        return {
            "replicates": None if self.config is None else self.config.replicates,
            "total_failures": len(self.failures),
            "levels": levels,
        }

    def median(self, noise: float, stage: str = "stage2", metric: str = "mape_B") -> float:
        v = self.values(noise, stage, metric)
        return float(np.median(v)) if v.size else float("nan")


def describe(v) -> dict:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(med), "q1": float(q1),
            "q3": float(q3), "min": float(v.min()), "max": float(v.max())}


def _dynamics(config: ExperimentConfig, net: NetworkModel) -> LoadDynamics:
    if config.dynamics is not None:
        return load_dynamics(config.dynamics, net)
    return default_dynamics(net, seed=config.dynamics_seed, sigma=config.process_sigma)


def run_replicate(config: ExperimentConfig, replicate: int):
    """Simulate once, then add noise and estimate at every level.

    Returns (records, timings, failures) for this replicate.
    """
    net = load_feeder(config.feeder)
    dyn = _dynamics(config, net)
    op = equilibrium(net, dyn)
    index = ParameterIndex(net, connected_only=True)
    truth = index.true_theta()
    n = len(index)
    opts = config.pipeline_options()
    m = config.master_seed
    records, timings, failures = [], [], []
    try:
        clean = simulate(net, dyn, op, config.dt, config.samples,
                         seed=np.random.SeedSequence([m, 0, replicate]), substeps=config.substeps)
    except NumericalError as exc:
        msg = f"simulation: {type(exc).__name__}: {exc}"
        return records, timings, [(s, replicate, msg) for s in config.noise_levels]

    for s in config.noise_levels:
        series = add_measurement_noise(clean, NoiseSpec(std=s, tve_bound=float("inf"), power=config.noise_power),
                                       seed=np.random.SeedSequence([m, 1, replicate]), net=net)
        t0 = time.perf_counter()
        try:
            est = run_pipeline(net, series, opts)
        except NumericalError as exc:
            failures.append((s, replicate, f"{type(exc).__name__}: {exc}"))
            continue
        timings.append((s, replicate, time.perf_counter() - t0))
        for stage, theta in (("stage1", est.initial), ("stage2", est.refined)):
            for name, sl in (("G", slice(0, n)), ("B", slice(n, 2 * n))):
                value, excluded = mape(truth[sl], theta[sl], return_excluded=True)
                records.append(RunRecord(s, replicate, stage, f"mape_{name}", value))
                records.append(RunRecord(s, replicate, stage, f"excluded_{name}", float(excluded)))
        res = est.refinement
        records.append(RunRecord(s, replicate, "stage2", "iterations", float(res.iterations)))
        records.append(RunRecord(s, replicate, "stage2", "mismatch_norm", float(res.mismatch_norm)))
        records.append(RunRecord(s, replicate, "stage2", "converged", float(res.converged)))
    return records, timings, failures


def _run_replicate_args(args):
    cfg, rep = args
    return run_replicate(ExperimentConfig.from_dict(cfg), rep)


def run_experiment(config: ExperimentConfig) -> EvaluationReport:
    """All noise levels x replicates, optionally across worker processes."""
    load_feeder(config.feeder)  # fail early on a bad feeder file
    report = EvaluationReport(config)
    jobs = [(config.to_dict(), r) for r in range(config.replicates)]
    if config.workers > 1 and config.replicates > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_replicate_args, jobs))
    else:
        results = [run_replicate(config, r) for r in range(config.replicates)]
    for records, timings, failures in results:
        report.records.extend(records)
        report.timings.extend(timings)
        report.failures.extend(failures)
    report.records.sort(key=RunRecord.key)
    report.timings.sort(key=lambda t: t[:2])
    report.failures.sort(key=lambda f: f[:2])
    for s, r, msg in report.failures:
        log.warning("noise %g replicate %d failed: %s", s, r, msg)
    return report


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_outputs(report: EvaluationReport, out_dir, force: bool = False) -> list[Path]:
    """Write the report files into ``out_dir`` and return their paths.

    Files: config.json (if the report has a config), results.csv (long
    format), summary.json, timing.csv, failures.csv and one
    levels/noise_<k>.csv per noise level with one row per replicate.
    Refuses a non-empty existing directory unless ``force``.
    """
    out = Path(out_dir)
    if out.exists() and not out.is_dir():
        raise OutputExistsError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise OutputExistsError(f"{out} is not empty; pass force=True (--force) to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if report.config is not None:
        report.config.save(out / "config.json")
        written.append(out / "config.json")

    path = out / "results.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in sorted(report.records, key=RunRecord.key):
            w.writerow([r.method, _fmt(r.noise), r.replicate, r.stage, r.metric, _fmt(r.value)])
    written.append(path)

    path = out / "timing.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for s, r, sec in report.timings:
            w.writerow([_fmt(s), r, f"{sec:.6f}"])
    written.append(path)

    path = out / "failures.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["noise", "replicate", "error"])
        for s, r, msg in report.failures:
            w.writerow([_fmt(s), r, msg])
    written.append(path)

    path = out / "summary.json"
    path.write_text(json.dumps(report.summary(), indent=2) + "\n")
    written.append(path)

    levels = report.noise_levels
    if levels:
        (out / "levels").mkdir(exist_ok=True)
    cols = [(st, m) for st in ("stage1", "stage2") for m in ("mape_G", "mape_B")]
    for k, s in enumerate(levels):
        path = out / "levels" / f"noise_{k}.csv"
        table = {}
        for r in report.records:
            if r.noise == s and (r.stage, r.metric) in cols:
                table.setdefault(r.replicate, {})[(r.stage, r.metric)] = r.value
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["noise", "replicate"] + [f"{st}_{m}" for st, m in cols])
            for rep in sorted(table):
                w.writerow([_fmt(s), rep] + [_fmt(table[rep][c]) if c in table[rep] else "" for c in cols])
        written.append(path)
    return written
