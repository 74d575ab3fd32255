"""Batch experiment harness: seeded sweeps over SINR targets and uncertainty
sizes, per-trial records, aggregation, and CSV export.

Channel draws are paired: every method and every SINR target sees the same
channel and estimate realization of a given trial, so success rates and
powers are directly comparable across methods.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import zf as zfmod
from .descent import DescentConfig, SolveStatus, solve_general
from .model import (
    QoSSpec,
    ScenarioInstance,
    build_pcsi_directions,
    build_rci,
    build_zf,
    complex_normal,
    generate_rayleigh_channels,
    uplink_error_variance,
)
from .quadform import mc_probability

__all__ = [
    "METHODS",
    "ExperimentConfig",
    "TrialRecord",
    "SummaryRow",
    "EmptyIntersection",
    "run_sweep",
    "run_trial",
    "aggregate",
    "export_records",
    "export_summary",
    "read_records",
]

METHODS = ("PCSI-General", "RCI-General", "ZF-General",
           "ZF-CoordDescent", "ZF-CoordUpdate")

RECORD_HEADER = ("method,gamma_db,sigma_e2,trial,feasible_start,success,"
                 "total_power,cycles,bisection_steps,integral_evals,runtime_ms")
SUMMARY_HEADER = ("method,gamma_db,sigma_e2,success_pct,avg_power_common,"
                  "median_cycles,median_bisections")


class EmptyIntersection(Exception):
    """No trial succeeded for every method at every operating point."""


# The records file must be byte-identical across reruns of the same seeded
# config, so the runtime column carries a deterministic nominal cost (one
# weight per evaluation kind, calibrated to observed magnitudes) rather than
# wall-clock time.  Wall time stays on the in-memory SolveReport.
QUADRATURE_EVAL_MS = 1.5
RESIDUE_EVAL_MS = 0.03


def _nominal_cost_ms(report, n_users: int) -> float:
    if report.per_user_prob_approx is None:
        return QUADRATURE_EVAL_MS * report.integral_evals
    return (RESIDUE_EVAL_MS * report.integral_evals
            + QUADRATURE_EVAL_MS * n_users)


@dataclass(frozen=True)
class ExperimentConfig:
    n_tx: int
    n_users: int
    n_trials: int
    seed: int
    methods: tuple
    sigma2: float = 0.01
    sigma2_bs: float = 0.01
    training: dict = None
    sigma_e2: tuple = None
    gamma_db: tuple = tuple(float(g) for g in range(11))
    epsilon: float = 0.05
    delta_min: float = 1e-3
    quad_tol: float = 1e-8
    i_max: int = 50
    eta_multiple: float = -1.3
    mc_certify_samples: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "gamma_db", tuple(float(g) for g in self.gamma_db))
        if self.sigma_e2 is not None:
            object.__setattr__(self, "sigma_e2",
                               tuple(float(s) for s in self.sigma_e2))
        if not self.methods:
            raise ValueError("methods must be non-empty")
        for name in self.methods:
            if name not in METHODS:
                raise ValueError(f"unknown method {name!r}")
        if (self.training is None) == (self.sigma_e2 is None):
            raise ValueError("specify exactly one of 'training' and 'sigma_e2'")
        if self.training is not None:
            extra = set(self.training) - {"L_ut", "P_ut"}
            if extra:
                raise ValueError(f"unknown training keys {sorted(extra)}")
        if self.n_trials < 1 or self.n_tx < 1 or self.n_users < 1:
            raise ValueError("counts must be positive")
        if not (0 < self.epsilon < 1):
            raise ValueError("epsilon must lie in (0, 1)")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in dc_fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**raw)

    def error_variances(self) -> tuple:
        if self.sigma_e2 is not None:
            return self.sigma_e2
        return (uplink_error_variance(self.sigma2_bs,
                                      int(self.training["L_ut"]),
                                      float(self.training["P_ut"])),)

    def descent_config(self) -> DescentConfig:
        return DescentConfig(delta_min=self.delta_min, quad_tol=self.quad_tol)


@dataclass(frozen=True)
class TrialRecord:
    method: str
    gamma_db: float
    sigma_e2: float
    trial: int
    feasible_start: bool
    success: bool
    total_power: float
    cycles: int
    bisection_steps: int
    integral_evals: int
    runtime_ms: float


@dataclass(frozen=True)
class SummaryRow:
    method: str
    gamma_db: float
    sigma_e2: float
    success_pct: float
    avg_power_common: float
    median_cycles: float
    median_bisections: float


def _run_method(method: str, instance: ScenarioInstance, est, qos: QoSSpec,
                config: ExperimentConfig):
    dconf = config.descent_config()
    if method == "PCSI-General":
        bf = build_pcsi_directions(est, qos, config.sigma2)
        return bf, solve_general(instance, bf, qos, dconf)
    if method == "RCI-General":
        bf = build_rci(est, config.n_users * config.sigma2)
        return bf, solve_general(instance, bf, qos, dconf)
    bf = build_zf(est)
    if method == "ZF-General":
        return bf, solve_general(instance, bf, qos, dconf)
    try:
        if method == "ZF-CoordDescent":
            return bf, zfmod.solve_zf_coord_descent(
                instance, bf, qos, dconf, eta_multiple=config.eta_multiple)
        if method == "ZF-CoordUpdate":
            return bf, zfmod.solve_zf_coord_update(
                instance, bf, qos, i_max=config.i_max,
                eta_multiple=config.eta_multiple, quad_tol=config.quad_tol)
    except zfmod.ApproximationInapplicable:
        # surrogate target undefined at this uncertainty; exact solver instead
        return bf, solve_general(instance, bf, qos, dconf)
    raise ValueError(f"unknown method {method!r}")


def run_trial(config: ExperimentConfig, trial: int) -> list:
    """All records of one trial: one per (uncertainty, method, SINR target)."""
    k, nt = config.n_users, config.n_tx
    h = generate_rayleigh_channels(
        nt, k, np.random.default_rng([config.seed, 0, trial]))
    noise = np.full(k, config.sigma2)
    records = []
    for j, se2 in enumerate(config.error_variances()):
        rng = np.random.default_rng([config.seed, 1, trial, j])
        est = h + np.sqrt(se2) * complex_normal(rng, k, nt)
        cov = np.broadcast_to(se2 * np.eye(nt), (k, nt, nt)).copy()
        instance = ScenarioInstance(true_channels=h, est_channels=est,
                                    error_cov=cov, noise_var=noise)
        for m_idx, method in enumerate(config.methods):
            for g_idx, gdb in enumerate(config.gamma_db):
                qos = QoSSpec.from_db(gdb, config.epsilon, k)
                try:
                    bf, report = _run_method(method, instance, est, qos, config)
                except Exception:
                    # e.g. Diverged direction solves; a failed solve is a
                    # failed trial, never a failed sweep
                    records.append(TrialRecord(
                        method=method, gamma_db=gdb, sigma_e2=se2, trial=trial,
                        feasible_start=False, success=False, total_power=0.0,
                        cycles=0, bisection_steps=0, integral_evals=0,
                        runtime_ms=0.0))
                    continue
                runtime_ms = _nominal_cost_ms(report, k)
                feasible_start = report.status is not SolveStatus.INFEASIBLE_START_NOT_FOUND
                success = bool(feasible_start and np.all(
                    report.per_user_prob_exact >= 1.0 - qos.epsilon))
                if success and config.mc_certify_samples > 0:
                    for u in range(k):
                        mc = mc_probability(
                            instance, bf, report.powers, qos, u,
                            config.mc_certify_samples,
                            [config.seed, 2, trial, j, m_idx, g_idx, u])
                        if 1.0 - mc.value > config.epsilon + 4.0 * mc.abs_error_bound:
                            success = False
                            break
                records.append(TrialRecord(
                    method=method, gamma_db=gdb, sigma_e2=se2, trial=trial,
                    feasible_start=feasible_start, success=success,
                    total_power=report.total_power, cycles=report.cycles,
                    bisection_steps=report.bisection_steps,
                    integral_evals=report.integral_evals,
                    runtime_ms=runtime_ms))
    return records


def run_sweep(config: ExperimentConfig, n_threads: int = 1) -> list:
    """Run every trial; records come back in (trial, uncertainty, method,
    gamma) order regardless of worker scheduling."""
    if n_threads <= 1:
        per_trial = [run_trial(config, t) for t in range(config.n_trials)]
    else:
        with ProcessPoolExecutor(max_workers=n_threads) as pool:
            per_trial = list(pool.map(run_trial, [config] * config.n_trials,
                                      range(config.n_trials), chunksize=1))
    return [rec for trial_recs in per_trial for rec in trial_recs]


def _group_key(rec: TrialRecord):
    return (rec.method, rec.gamma_db, rec.sigma_e2)


def aggregate(records: list, common_subset: bool = False) -> list:
    """Per-(method, gamma, uncertainty) success rates and workload medians.

    With ``common_subset`` the average power is taken over the trials in
    which every method succeeded at every operating point (the paired
    protocol); otherwise over each group's own successful trials.
    """
    if not records:
        raise ValueError("no records to aggregate")
    groups = {}
    for rec in records:
        groups.setdefault(_group_key(rec), []).append(rec)

    common_trials = None
    if common_subset:
        trial_ok = {}
        for rec in records:
            trial_ok.setdefault(rec.trial, True)
            trial_ok[rec.trial] &= rec.success
        common_trials = {t for t, ok in trial_ok.items() if ok}
        if not common_trials:
            raise EmptyIntersection("no trial succeeded everywhere")

    def method_rank(name):
        return METHODS.index(name) if name in METHODS else len(METHODS)

    rows = []
    for key in sorted(groups, key=lambda k: (method_rank(k[0]),) + k[1:]):
        recs = groups[key]
        successes = [r for r in recs if r.success]
        if common_subset:
            pool = [r for r in recs if r.trial in common_trials]
        else:
            pool = successes
        avg_power = float(np.mean([r.total_power for r in pool])) if pool else float("nan")
        rows.append(SummaryRow(
            method=key[0], gamma_db=key[1], sigma_e2=key[2],
            success_pct=100.0 * len(successes) / len(recs),
            avg_power_common=avg_power,
            median_cycles=float(np.median([r.cycles for r in successes])) if successes else float("nan"),
            median_bisections=float(np.median([r.bisection_steps for r in successes])) if successes else float("nan"),
        ))
    return rows


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def export_records(records: list, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(RECORD_HEADER + "\n")
        for rec in records:
            fh.write(",".join(_fmt(getattr(rec, f.name))
                              for f in dc_fields(TrialRecord)) + "\n")


def read_records(path) -> list:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORD_HEADER.split(","):
            raise ValueError(f"unexpected record header in {path}")
        for row in reader:
            records.append(TrialRecord(
                method=row["method"], gamma_db=float(row["gamma_db"]),
                sigma_e2=float(row["sigma_e2"]), trial=int(row["trial"]),
                feasible_start=row["feasible_start"] == "1",
                success=row["success"] == "1",
                total_power=float(row["total_power"]), cycles=int(row["cycles"]),
                bisection_steps=int(row["bisection_steps"]),
                integral_evals=int(row["integral_evals"]),
                runtime_ms=float(row["runtime_ms"])))
    return records


def export_summary(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for row in rows:
            fh.write(",".join(_fmt(getattr(row, f.name))
                              for f in dc_fields(SummaryRow)) + "\n")
