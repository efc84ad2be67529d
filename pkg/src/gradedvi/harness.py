"""Simulation studies: parameter recovery, test calibration, misspecification.

Replications are embarrassingly parallel.  Every replication derives its
random state from SeedSequence((base_seed, cell_index, replication)), so
per-replication records are identical whether a study runs serially or
across processes, and aggregates are always recomputable from the raw
records.

Study kinds:

* recovery: simulate from a known generating model, refit, and report
  per-parameter bias and mean squared error across replications.  Factor
  models are identified only up to column sign flips of the loading
  matrix, so fitted solutions are sign-aligned to the generating values
  (correlations flipped accordingly) before computing recovery metrics.
* uniform_calibration: real-valued shifted-uniform two-sample design with
  a controlled effect size; checks type I error and power of the
  approximate test against the closed-form prediction.  KNN uses the
  Euclidean metric here.
* misspecification: generate from a model with a doublet factor, fit
  correctly and incorrectly specified models, and record exact/approximate
  rejection rates, relative fit indices, and permutation importances.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import c2st, grm
from .estimator import FitConfig, fit, iw_elbo_dataset
from .grm import GRMSampler
from .modelspec import ModelSpec, zero_factor

logger = logging.getLogger(__name__)


def derive_seed(base_seed: int, *components: int) -> np.random.SeedSequence:
    """Deterministic per-replication seed from (base_seed, cell, replication)."""
    return np.random.SeedSequence((int(base_seed),) + tuple(int(c) for c in components))


@dataclass
class StudyReport:
    """Raw per-replication records plus aggregates recomputed from them."""

    kind: str
    config: dict
    records: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "records": self.records,
            "aggregates": self.aggregates,
        }


def _run_tasks(worker, tasks, jobs: int):
    """Run tasks serially or across processes; order of results is by task."""
    if jobs <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks, chunksize=1))


# ----- sign alignment ---------------------------------------------------------


def align_factor_signs(loadings, sigma, reference):
    """Flip factor signs so fitted loadings align with reference loadings.

    Returns (aligned_loadings, aligned_sigma, flips).  A factor flips when
    the inner product of its fitted and reference loading columns is
    negative; the correlation matrix transforms as D Sigma D.
    """
    loadings = np.asarray(loadings, dtype=float)
    reference = np.asarray(reference, dtype=float)
    P = loadings.shape[1]
    flips = np.ones(P)
    for p in range(P):
        if np.dot(loadings[:, p], reference[:, p]) < 0.0:
            flips[p] = -1.0
    aligned = loadings * flips[None, :]
    aligned_sigma = np.asarray(sigma) * np.outer(flips, flips)
    return aligned, aligned_sigma, flips


# ----- recovery study ----------------------------------------------------------


@dataclass
class RecoveryConfig:
    generator: GRMSampler
    sample_sizes: tuple = (1000, 5000)
    iw_samples: tuple = (1, 5)
    replications: int = 50
    base_seed: int = 0
    fit_options: dict = field(default_factory=dict)
    refit_flagged: bool = True
    flag_se_multiple: float = 5.0

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.sample_sizes or not self.iw_samples:
            raise ValueError("the (N, R) grid must be nonempty")

    def cells(self):
        return [
            (i, n, r)
            for i, (n, r) in enumerate(
                (n, r) for n in self.sample_sizes for r in self.iw_samples
            )
        ]


def _fit_config(options: dict, iw_samples: int, seed) -> FitConfig:
    opts = dict(options)
    opts["iw_samples"] = iw_samples
    opts["seed"] = seed
    return FitConfig(**opts)


def _recovery_task(args):
    config, cell_idx, n, r, rep, refit_round = args
    gen = config.generator
    spec = gen.spec
    root = derive_seed(config.base_seed, cell_idx, rep, refit_round)
    data_seed, fit_seed, eval_seed = root.spawn(3)
    X = gen.sample(n, np.random.default_rng(data_seed))
    record = {
        "cell": cell_idx, "n": n, "r": r, "replication": rep,
        "refit_round": refit_round, "failed": False,
    }
    try:
        result = fit(X, spec, _fit_config(config.fit_options, r, fit_seed))
    except Exception as exc:  # fit failures are recorded, not fatal
        logger.warning("replication (cell=%d, rep=%d) failed: %s", cell_idx, rep, exc)
        record["failed"] = True
        record["error"] = str(exc)
        return record
    mean_elbo, per_obs = iw_elbo_dataset(result, X, iw_samples=max(r, 5), rng=eval_seed)
    loadings, sigma, _ = align_factor_signs(
        result.loadings(), result.correlation(), gen.loadings
    )
    record.update(
        elbo_mean=mean_elbo,
        elbo_se=float(np.std(per_obs) / np.sqrt(per_obs.size)),
        loadings=loadings.tolist(),
        intercepts=result.intercepts().tolist(),
        sigma=sigma.tolist(),
        steps=result.steps,
        converged=result.converged,
        seconds=result.seconds,
    )
    return record


def run_recovery(config: RecoveryConfig, jobs: int = 1) -> StudyReport:
    """Parameter recovery across the (N, R) grid."""
    tasks = [
        (config, cell_idx, n, r, rep, 0)
        for cell_idx, n, r in config.cells()
        for rep in range(config.replications)
    ]
    records = _run_tasks(_recovery_task, tasks, jobs)

    if config.refit_flagged:
        records = _refit_flagged(config, records, jobs)

    report = StudyReport(
        kind="recovery", config=_recovery_config_dict(config), records=records
    )
    report.aggregates = aggregate_recovery(config, records)
    return report


def _refit_flagged(config: RecoveryConfig, records, jobs):
    """Refit replications whose final IW-ELBO sits far below the cell median."""
    refits = []
    for cell_idx, n, r in config.cells():
        cell = [
            rec for rec in records
            if rec["cell"] == cell_idx and not rec.get("failed", False)
        ]
        if not cell:
            continue
        median = float(np.median([rec["elbo_mean"] for rec in cell]))
        for rec in cell:
            gap = median - rec["elbo_mean"]
            if gap > config.flag_se_multiple * rec["elbo_se"]:
                refits.append((config, cell_idx, n, r, rec["replication"], 1))
    if not refits:
        return records
    logger.info("refitting %d flagged replication(s)", len(refits))
    replacements = {
        (rec["cell"], rec["replication"]): rec
        for rec in _run_tasks(_recovery_task, refits, jobs)
        if not rec.get("failed", False)
    }
    out = []
    for rec in records:
        key = (rec["cell"], rec["replication"])
        if key in replacements:
            new = replacements[key]
            new["flagged"] = True
            out.append(new)
        else:
            out.append(rec)
    return out


def aggregate_recovery(config: RecoveryConfig, records) -> list:
    """Per-cell, per-parameter bias and MSE recomputed from raw records."""
    gen = config.generator
    spec = gen.spec
    pattern = spec.nonzero_pattern()
    imask = spec.intercept_mask
    true_load = np.asarray(gen.loadings)[pattern]
    true_int = np.asarray(gen.intercepts)[imask]
    P = spec.n_factors
    low = np.tril_indices(P, k=-1)
    true_corr = np.asarray(gen.sigma)[low]

    aggregates = []
    for cell_idx, n, r in config.cells():
        cell = [
            rec for rec in records
            if rec["cell"] == cell_idx and not rec.get("failed", False)
        ]
        if not cell:
            aggregates.append({"cell": cell_idx, "n": n, "r": r, "replications": 0})
            continue
        loads = np.array([np.asarray(rec["loadings"])[pattern] for rec in cell])
        ints = np.array([np.asarray(rec["intercepts"])[imask] for rec in cell])
        corrs = np.array([np.asarray(rec["sigma"])[low] for rec in cell])
        aggregates.append(
            {
                "cell": cell_idx,
                "n": n,
                "r": r,
                "replications": len(cell),
                "bias_loadings": (loads - true_load).mean(axis=0).tolist(),
                "mse_loadings": ((loads - true_load) ** 2).mean(axis=0).tolist(),
                "bias_intercepts": (ints - true_int).mean(axis=0).tolist(),
                "mse_intercepts": ((ints - true_int) ** 2).mean(axis=0).tolist(),
                "bias_correlations": (corrs - true_corr).mean(axis=0).tolist(),
                "mse_correlations": ((corrs - true_corr) ** 2).mean(axis=0).tolist(),
                "mean_seconds": float(np.mean([rec["seconds"] for rec in cell])),
                "mean_steps": float(np.mean([rec["steps"] for rec in cell])),
                "n_flagged": int(sum(rec.get("flagged", False) for rec in cell)),
                "n_failed": int(
                    sum(
                        1
                        for rec in records
                        if rec["cell"] == cell_idx and rec.get("failed", False)
                    )
                ),
            }
        )
    return aggregates


def _recovery_config_dict(config: RecoveryConfig) -> dict:
    from .modelspec import to_json_dict

    return {
        "sample_sizes": list(config.sample_sizes),
        "iw_samples": list(config.iw_samples),
        "replications": config.replications,
        "base_seed": config.base_seed,
        "fit_options": dict(config.fit_options),
        "refit_flagged": config.refit_flagged,
        "flag_se_multiple": config.flag_se_multiple,
        "generator": {
            "spec": to_json_dict(config.generator.spec),
            "intercepts": np.asarray(config.generator.intercepts).tolist(),
            "loadings": np.asarray(config.generator.loadings).tolist(),
            "sigma": np.asarray(config.generator.sigma).tolist(),
        },
    }


# ----- uniform calibration study -------------------------------------------------


@dataclass
class CalibrationConfig:
    shift: float = 0.05
    delta: float = 0.025
    alpha: float = 0.05
    sample_sizes: tuple = (250, 1000, 2500)
    replications: int = 100
    classifiers: tuple = ("knn", "nn")
    base_seed: int = 0

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.sample_sizes or not self.classifiers:
            raise ValueError("the grid must be nonempty")

    @property
    def effect_size(self) -> float:
        """Large-sample accuracy above 1/2 is shift/2; epsilon is the excess."""
        return max(0.0, self.shift / 2.0 - self.delta)

    def cells(self):
        return [
            (i, n, clf)
            for i, (n, clf) in enumerate(
                (n, c) for n in self.sample_sizes for c in self.classifiers
            )
        ]


def _calibration_task(args):
    config, cell_idx, n, classifier, rep = args
    root = derive_seed(config.base_seed, cell_idx, rep)
    data_seed, test_seed = root.spawn(2)
    rng = np.random.default_rng(data_seed)
    real = rng.uniform(0.0, 1.0, size=(n, 1))
    synthetic = rng.uniform(config.shift, 1.0 + config.shift, size=(n, 1))
    outcome = c2st.c2st_from_samples(
        real, synthetic, classifier=classifier, delta=config.delta,
        seed=test_seed, metric="euclidean",
    )
    return {
        "cell": cell_idx, "n": n, "classifier": classifier, "replication": rep,
        "acc": outcome.acc, "p_value": outcome.p_value,
        "reject": bool(outcome.p_value < config.alpha),
    }


def run_uniform_calibration(config: CalibrationConfig, jobs: int = 1) -> StudyReport:
    """Type I error / power study on shifted uniforms with known effect size."""
    tasks = [
        (config, cell_idx, n, clf, rep)
        for cell_idx, n, clf in config.cells()
        for rep in range(config.replications)
    ]
    records = _run_tasks(_calibration_task, tasks, jobs)
    report = StudyReport(
        kind="uniform_calibration", config=asdict(config), records=records
    )
    report.aggregates = aggregate_calibration(config, records)
    return report


def aggregate_calibration(config: CalibrationConfig, records) -> list:
    aggregates = []
    for cell_idx, n, clf in config.cells():
        cell = [rec for rec in records if rec["cell"] == cell_idx]
        if not cell:
            aggregates.append({"cell": cell_idx, "n": n, "classifier": clf, "replications": 0})
            continue
        aggregates.append(
            {
                "cell": cell_idx,
                "n": n,
                "classifier": clf,
                "replications": len(cell),
                "rejection_rate": float(np.mean([rec["reject"] for rec in cell])),
                "mean_acc": float(np.mean([rec["acc"] for rec in cell])),
                "predicted_power": c2st.power(
                    config.alpha, n, config.delta, config.effect_size
                ),
            }
        )
    return aggregates


# ----- misspecification study -----------------------------------------------------


@dataclass
class MisspecConfig:
    generator: GRMSampler
    fitted_specs: dict
    sample_sizes: tuple = (5000,)
    replications: int = 50
    classifiers: tuple = ("nn",)
    delta: float = 0.025
    alpha: float = 0.05
    pi_reps: int = 5
    compute_rfi: bool = True
    compute_pi: bool = True
    base_seed: int = 0
    fit_options: dict = field(default_factory=dict)
    iw_samples: int = 5

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.sample_sizes or not self.fitted_specs:
            raise ValueError("the grid must be nonempty")

    def cells(self):
        return [(i, n) for i, n in enumerate(self.sample_sizes)]


def _misspec_task(args):
    config, cell_idx, n, rep = args
    gen = config.generator
    root = derive_seed(config.base_seed, cell_idx, rep)
    data_seed, base_c2st_seed, model_root = root.spawn(3)
    X = gen.sample(n, np.random.default_rng(data_seed))
    cats = gen.spec.item_categories
    baseline_model = grm.BaselineModel(grm.zero_factor_mle(X, cats), cats)
    m_base = zero_factor(cats).n_free_parameters

    baseline_acc = {}
    if config.compute_rfi:
        for ci, clf in enumerate(config.classifiers):
            outcome = c2st.run_c2st(
                baseline_model, X, classifier=clf, delta=0.0,
                seed=derive_seed(config.base_seed, cell_idx, rep, 1000 + ci),
            )
            baseline_acc[clf] = outcome.acc

    out = []
    for mi, (name, spec) in enumerate(sorted(config.fitted_specs.items())):
        fit_seed = derive_seed(config.base_seed, cell_idx, rep, 2000 + mi)
        record = {
            "cell": cell_idx, "n": n, "replication": rep, "fitted": name,
            "failed": False,
        }
        try:
            result = fit(X, spec, _fit_config(config.fit_options, config.iw_samples, fit_seed))
        except Exception as exc:
            logger.warning("fit %s (cell=%d, rep=%d) failed: %s", name, cell_idx, rep, exc)
            record["failed"] = True
            record["error"] = str(exc)
            out.append(record)
            continue
        record.update(steps=result.steps, converged=result.converged, seconds=result.seconds)
        m_prop = spec.n_free_parameters
        for ci, clf in enumerate(config.classifiers):
            test_seed = derive_seed(config.base_seed, cell_idx, rep, 3000 + 10 * mi + ci)
            outcome = c2st.run_c2st(result, X, classifier=clf, delta=0.0, seed=test_seed)
            entry = dict(record)
            entry["classifier"] = clf
            entry["acc"] = outcome.acc
            entry["p_exact"] = outcome.p_value
            entry["p_approx"] = c2st.approx_pvalue(outcome.acc, outcome.n_test, config.delta)
            entry["reject_exact"] = bool(entry["p_exact"] < config.alpha)
            entry["reject_approx"] = bool(entry["p_approx"] < config.alpha)
            if config.compute_rfi and clf in baseline_acc:
                entry["acc_base"] = baseline_acc[clf]
                entry["m_prop"] = m_prop
                entry["m_base"] = m_base
                try:
                    entry["rfi"] = c2st.rfi(outcome.acc, baseline_acc[clf], m_prop, m_base)
                except ZeroDivisionError:
                    entry["rfi"] = None
            if config.compute_pi:
                pi_seed = derive_seed(config.base_seed, cell_idx, rep, 4000 + 10 * mi + ci)
                imp = c2st.permutation_importance(
                    outcome.handle, outcome.test_patterns, outcome.labels,
                    reps=config.pi_reps, rng=np.random.default_rng(pi_seed),
                )
                entry["pi"] = imp.tolist()
            out.append(entry)
    return out


def run_misspecification(config: MisspecConfig, jobs: int = 1) -> StudyReport:
    """Correct vs under/overspecified fits, tested with exact and approximate C2STs."""
    tasks = [
        (config, cell_idx, n, rep)
        for cell_idx, n in config.cells()
        for rep in range(config.replications)
    ]
    nested = _run_tasks(_misspec_task, tasks, jobs)
    records = [rec for group in nested for rec in group]
    report = StudyReport(
        kind="misspecification", config=_misspec_config_dict(config), records=records
    )
    report.aggregates = aggregate_misspecification(config, records)
    return report


def aggregate_misspecification(config: MisspecConfig, records) -> list:
    aggregates = []
    for cell_idx, n in config.cells():
        for name in sorted(config.fitted_specs):
            for clf in config.classifiers:
                cell = [
                    rec for rec in records
                    if rec["cell"] == cell_idx
                    and rec["fitted"] == name
                    and rec.get("classifier") == clf
                    and not rec.get("failed", False)
                ]
                if not cell:
                    aggregates.append(
                        {"cell": cell_idx, "n": n, "fitted": name, "classifier": clf,
                         "replications": 0}
                    )
                    continue
                agg = {
                    "cell": cell_idx,
                    "n": n,
                    "fitted": name,
                    "classifier": clf,
                    "replications": len(cell),
                    "rejection_exact": float(np.mean([r["reject_exact"] for r in cell])),
                    "rejection_approx": float(np.mean([r["reject_approx"] for r in cell])),
                    "mean_acc": float(np.mean([r["acc"] for r in cell])),
                }
                rfis = [r["rfi"] for r in cell if r.get("rfi") is not None]
                if rfis:
                    agg["median_rfi"] = float(np.median(rfis))
                if config.compute_pi:
                    agg["mean_pi"] = np.mean([r["pi"] for r in cell], axis=0).tolist()
                aggregates.append(agg)
    return aggregates


def _misspec_config_dict(config: MisspecConfig) -> dict:
    from .modelspec import to_json_dict

    return {
        "sample_sizes": list(config.sample_sizes),
        "replications": config.replications,
        "classifiers": list(config.classifiers),
        "delta": config.delta,
        "alpha": config.alpha,
        "pi_reps": config.pi_reps,
        "compute_rfi": config.compute_rfi,
        "compute_pi": config.compute_pi,
        "base_seed": config.base_seed,
        "iw_samples": config.iw_samples,
        "fit_options": dict(config.fit_options),
        "generator": {
            "spec": to_json_dict(config.generator.spec),
            "intercepts": np.asarray(config.generator.intercepts).tolist(),
            "loadings": np.asarray(config.generator.loadings).tolist(),
            "sigma": np.asarray(config.generator.sigma).tolist(),
        },
        "fitted_specs": {k: to_json_dict(v) for k, v in config.fitted_specs.items()},
    }
