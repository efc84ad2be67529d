"""Command-line interface.

Subcommands: ``fit`` (estimate a model), ``simulate`` (sample synthetic
responses from a spec plus parameters), ``gof c2st|rfi|pi`` (fit
assessment for a saved fit), and ``experiment`` (simulation studies).

Every run writes a manifest.json into its output directory recording the
resolved configuration and seeds, sufficient to re-run the command.  Exit
codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from . import __version__, c2st
from . import io as gio
from .estimator import FitConfig, NumericalDivergenceError, fit as run_fit
from .harness import (
    CalibrationConfig,
    MisspecConfig,
    RecoveryConfig,
    run_misspecification,
    run_recovery,
    run_uniform_calibration,
)
from .grm import GRMSampler
from .modelspec import SpecError, from_json_dict


@click.group()
@click.version_option(__version__)
def cli():
    """Graded response model estimation and classifier-based fit assessment."""


# ----- fit -----------------------------------------------------------------------


@cli.command("fit")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--iw-samples", default=5, show_default=True, help="Importance samples R.")
@click.option("--mc-samples", default=1, show_default=True, help="Monte Carlo samples S.")
@click.option("--lr", default=0.005, show_default=True)
@click.option("--batch", default=128, show_default=True)
@click.option("--max-steps", default=10000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--hidden", default=None, help="Comma-separated hidden layer widths.")
@click.option("--one-based", is_flag=True, help="Input codes are 1..K instead of 0..K-1.")
@click.option("--out", default=None, help="Output directory.")
def fit_command(data_path, spec_path, iw_samples, mc_samples, lr, batch, max_steps,
                seed, hidden, one_based, out):
    """Fit a confirmatory graded response model to response data."""
    started = gio.now_iso()
    spec = gio.load_model_spec(spec_path)
    X = gio.load_responses(data_path, spec, one_based=one_based)
    config = FitConfig(
        iw_samples=iw_samples,
        mc_samples=mc_samples,
        learning_rate=lr,
        batch_size=batch,
        max_steps=max_steps,
        seed=seed,
        hidden=_parse_hidden(hidden),
    )
    result = run_fit(X, spec, config)
    out_dir = gio.default_output_dir("fit", out)
    paths = gio.save_fit_result(result, out_dir)
    gio.write_manifest(
        out_dir, "fit",
        {
            "data": data_path, "spec": spec_path, "iw_samples": iw_samples,
            "mc_samples": mc_samples, "lr": lr, "batch": batch,
            "max_steps": max_steps, "hidden": hidden, "one_based": one_based,
        },
        seed, paths, started,
    )
    click.echo(json.dumps({
        "out": out_dir,
        "steps": result.steps,
        "converged": result.converged,
        "seconds": round(result.seconds, 3),
        "final_iw_elbo": float(np.mean(result.elbo_trace[-min(100, result.steps):]))
        if result.steps else None,
    }, sort_keys=True))


def _parse_hidden(text):
    if text is None or text == "":
        return None
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise click.UsageError(f"--hidden expects comma-separated integers, got {text!r}") from exc


# ----- simulate ------------------------------------------------------------------


@cli.command("simulate")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--params", "params_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_rows", required=True, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None)
def simulate_command(spec_path, params_path, n_rows, seed, out):
    """Sample synthetic responses from a spec plus generating parameters."""
    started = gio.now_iso()
    spec = gio.load_model_spec(spec_path)
    sampler = gio.load_generating_params(params_path, spec)
    X = sampler.sample(n_rows, np.random.default_rng(seed))
    out_dir = gio.default_output_dir("simulate", out)
    import os

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "responses.csv")
    gio.save_responses(path, X)
    gio.write_manifest(
        out_dir, "simulate",
        {"spec": spec_path, "params": params_path, "n": n_rows},
        seed, {"responses": path}, started,
    )
    click.echo(json.dumps({"out": out_dir, "rows": int(X.shape[0]), "items": int(X.shape[1])},
                          sort_keys=True))


# ----- goodness of fit -------------------------------------------------------------


@cli.group("gof")
def gof_group():
    """Classifier two-sample fit assessment for a saved fit."""


def _gof_common(model, data, one_based):
    result = gio.load_fit_result(model)
    X = gio.load_responses(data, result.spec, one_based=one_based)
    return result, X


def _emit_report(command, report, out, config, seed, started, probs=None):
    text = json.dumps(report, sort_keys=True, indent=1)
    click.echo(text)
    if out:
        import os

        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, "gof.json")
        gio.atomic_write_text(path, text + "\n")
        outputs = {"gof": path}
        if probs is not None:
            probs_path = os.path.join(out, "probabilities.csv")
            lines = ["index,label,probability"]
            lines += [f"{i},{int(l)},{float(p)!r}" for i, (l, p) in enumerate(zip(*probs))]
            gio.atomic_write_text(probs_path, "\n".join(lines) + "\n")
            outputs["probabilities"] = probs_path
        gio.write_manifest(out, command, config, seed, outputs, started)


@gof_group.command("c2st")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", type=click.Choice(["knn", "nn"]), default="knn", show_default=True)
@click.option("--delta", default=0.0, show_default=True,
              help="Tolerated accuracy above 1/2; 0 runs the exact test.")
@click.option("--seed", default=0, show_default=True)
@click.option("--knn-train-fraction", default=None, type=float,
              help="Subsample the KNN training rows (large-N escape hatch).")
@click.option("--one-based", is_flag=True)
@click.option("--save-probs", is_flag=True, help="Also write per-observation probabilities.")
@click.option("--out", default=None)
def gof_c2st(model, data, classifier, delta, seed, knn_train_fraction, one_based,
             save_probs, out):
    """Exact (delta=0) or approximate classifier two-sample test."""
    started = gio.now_iso()
    result, X = _gof_common(model, data, one_based)
    outcome = c2st.run_c2st(
        result, X, classifier=classifier, delta=delta, seed=seed,
        knn_train_fraction=knn_train_fraction,
    )
    report = {
        "accuracy": outcome.acc,
        "p_value": outcome.p_value,
        "delta": outcome.delta,
        "n_test": outcome.n_test,
        "classifier": classifier,
        "hyperparameters": outcome.handle.hyperparameters,
    }
    probs = (outcome.labels, outcome.probs) if save_probs else None
    _emit_report("gof c2st", report, out,
                 {"model": model, "data": data, "classifier": classifier, "delta": delta},
                 seed, started, probs)


@gof_group.command("rfi")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", type=click.Choice(["knn", "nn"]), default="knn", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--knn-train-fraction", default=None, type=float)
@click.option("--one-based", is_flag=True)
@click.option("--out", default=None)
def gof_rfi(model, data, classifier, seed, knn_train_fraction, one_based, out):
    """Relative fit index against the zero-factor baseline."""
    started = gio.now_iso()
    result, X = _gof_common(model, data, one_based)
    outcome = c2st.run_rfi(
        result, result.spec, X, classifier=classifier, seed=seed,
        knn_train_fraction=knn_train_fraction,
    )
    report = {
        "rfi": outcome.rfi,
        "accuracy_proposed": outcome.acc_prop,
        "accuracy_baseline": outcome.acc_base,
        "m_proposed": outcome.m_prop,
        "m_baseline": outcome.m_base,
        "classifier": classifier,
    }
    _emit_report("gof rfi", report, out,
                 {"model": model, "data": data, "classifier": classifier},
                 seed, started)


@gof_group.command("pi")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", type=click.Choice(["knn", "nn"]), default="nn", show_default=True)
@click.option("--reps", default=5, show_default=True, help="Shuffles per item (T).")
@click.option("--delta", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--one-based", is_flag=True)
@click.option("--out", default=None)
def gof_pi(model, data, classifier, reps, delta, seed, one_based, out):
    """Permutation-importance item diagnostics for a C2ST classifier."""
    started = gio.now_iso()
    result, X = _gof_common(model, data, one_based)
    test_seed, pi_seed = np.random.SeedSequence(seed).spawn(2)
    outcome = c2st.run_c2st(result, X, classifier=classifier, delta=delta, seed=test_seed)
    importances = c2st.permutation_importance(
        outcome.handle, outcome.test_patterns, outcome.labels, reps=reps,
        rng=np.random.default_rng(pi_seed),
    )
    report = {
        "accuracy": outcome.acc,
        "p_value": outcome.p_value,
        "delta": outcome.delta,
        "classifier": classifier,
        "reps": reps,
        "importances": importances.tolist(),
    }
    _emit_report("gof pi", report, out,
                 {"model": model, "data": data, "classifier": classifier, "reps": reps,
                  "delta": delta},
                 seed, started)


# ----- experiments ------------------------------------------------------------------


@cli.command("experiment")
@click.option("--study", required=True,
              type=click.Choice(["recovery", "uniform_calibration", "misspecification"]))
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None)
@click.option("--jobs", default=1, show_default=True)
def experiment_command(study, config_path, out, jobs):
    """Run a simulation study from a JSON configuration."""
    started = gio.now_iso()
    with open(config_path) as fh:
        doc = json.load(fh)
    if study == "recovery":
        config = _recovery_from_json(doc)
        report = run_recovery(config, jobs=jobs)
    elif study == "uniform_calibration":
        config = CalibrationConfig(**_tupled(doc, ("sample_sizes", "classifiers")))
        report = run_uniform_calibration(config, jobs=jobs)
    else:
        config = _misspec_from_json(doc)
        report = run_misspecification(config, jobs=jobs)
    out_dir = gio.default_output_dir(f"experiment-{study}", out)
    paths = gio.save_study_report(report, out_dir)
    gio.write_manifest(out_dir, f"experiment --study {study}", doc,
                       doc.get("base_seed", 0), paths, started)
    click.echo(json.dumps({"out": out_dir, "records": len(report.records)}, sort_keys=True))


def _tupled(doc: dict, keys) -> dict:
    out = dict(doc)
    for key in keys:
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def _sampler_from_json(doc: dict) -> GRMSampler:
    spec = from_json_dict(doc["spec"])
    return GRMSampler(
        spec=spec,
        intercepts=np.asarray(doc["intercepts"], dtype=float),
        loadings=np.asarray(doc["loadings"], dtype=float),
        sigma=np.asarray(doc.get("sigma", doc.get("correlations", np.eye(spec.n_factors))),
                         dtype=float),
    )


def _recovery_from_json(doc: dict) -> RecoveryConfig:
    doc = _tupled(doc, ("sample_sizes", "iw_samples"))
    generator = _sampler_from_json(doc.pop("generator"))
    return RecoveryConfig(generator=generator, **doc)


def _misspec_from_json(doc: dict) -> MisspecConfig:
    doc = _tupled(doc, ("sample_sizes", "classifiers"))
    generator = _sampler_from_json(doc.pop("generator"))
    fitted = {name: from_json_dict(d) for name, d in doc.pop("fitted_specs").items()}
    return MisspecConfig(generator=generator, fitted_specs=fitted, **doc)


# ----- entry point -------------------------------------------------------------------


def main(argv=None) -> int:
    """Entry point with the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except NumericalDivergenceError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    except (SpecError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
