"""File formats and run manifests.

Response matrices are CSVs of integer category codes, one respondent per
row, with an optional header row (auto-detected when non-numeric).  Codes
are 0-based in files; a one-based flag rebases 1..K survey exports on
load.  Model specs and all results are JSON; matrices inside results are
nested lists.  Files are written atomically (temp file + rename) and
floats serialize via repr, so save -> load -> save reproduces identical
bytes.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .encoder import InferenceNet
from .estimator import FitResult
from .grm import GRMSampler, ItemParams
from .modelspec import ModelSpec, SpecError, from_json_dict, to_json_dict

RESULTS_FILE = "results.json"
TRACE_FILE = "trace.csv"
MANIFEST_FILE = "manifest.json"

#: Environment variable holding the default output root directory.
OUTPUT_ROOT_ENV = "GRADEDVI_OUTPUT_ROOT"


def atomic_write_text(path: str, text: str) -> None:
    """Write text via a temp file and rename so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ----- response matrices --------------------------------------------------------


def load_responses(
    path: str, spec: ModelSpec | None = None, one_based: bool = False
) -> np.ndarray:
    """Read an integer response CSV, validating against a spec if given."""
    rows: list[list[int]] = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            if lineno == 1 and not _all_ints(row):
                continue  # header row
            if not _all_ints(row):
                bad = next(c for c in row if not _is_int(c))
                raise ValueError(f"{path}:{lineno}: non-integer cell {bad!r}")
            parsed = [int(c) for c in row]
            if width is None:
                width = len(parsed)
            elif len(parsed) != width:
                raise ValueError(
                    f"{path}:{lineno}: ragged row ({len(parsed)} cells, expected {width})"
                )
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    X = np.array(rows, dtype=int)
    if one_based:
        X = X - 1
    if np.any(X < 0):
        raise ValueError(
            f"{path}: negative category code (did you forget --one-based?)"
        )
    if spec is not None:
        spec.validate_responses(X)
    return X


def _is_int(cell: str) -> bool:
    try:
        int(cell)
        return True
    except ValueError:
        return False


def _all_ints(row) -> bool:
    return all(_is_int(c) for c in row)


def save_responses(path: str, X: np.ndarray) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(X, dtype=int):
        writer.writerow([int(v) for v in row])
    atomic_write_text(path, buf.getvalue())


# ----- model specs and generating parameters -------------------------------------


def load_model_spec(path: str) -> ModelSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    try:
        return from_json_dict(doc)
    except SpecError as exc:
        raise SpecError(f"{path}: {exc}") from exc


def load_generating_params(path: str, spec: ModelSpec) -> GRMSampler:
    """Read a parameter JSON with materialized values for simulation.

    Expected keys: "intercepts" (J x (Kmax-1), strictly increasing in the
    valid range), "loadings" (J x P), "correlations" (P x P).
    """
    with open(path) as fh:
        doc = json.load(fh)
    try:
        intercepts = np.asarray(doc["intercepts"], dtype=float)
        loadings = np.asarray(doc["loadings"], dtype=float)
    except KeyError as exc:
        raise SpecError(f"{path}: missing key {exc}") from exc
    sigma = np.asarray(doc.get("correlations", np.eye(spec.n_factors)), dtype=float)
    J, P = spec.n_items, spec.n_factors
    if loadings.shape != (J, P):
        raise SpecError(f"{path}: loadings must be {J} x {P}, got {loadings.shape}")
    if intercepts.shape[0] != J:
        raise SpecError(f"{path}: intercepts must have {J} rows")
    if sigma.shape != (P, P):
        raise SpecError(f"{path}: correlations must be {P} x {P}")
    return GRMSampler(spec=spec, intercepts=intercepts, loadings=loadings, sigma=sigma)


# ----- fit results ----------------------------------------------------------------


def fit_result_to_dict(result: FitResult) -> dict:
    return {
        "version": __version__,
        "spec": to_json_dict(result.spec),
        "parameters": {
            "intercept_raw": result.items.intercept_raw.tolist(),
            "loadings_free": result.items.loadings_free.tolist(),
            "theta": result.theta.tolist(),
        },
        "estimates": {
            "intercepts": result.intercepts().tolist(),
            "loadings": result.loadings().tolist(),
            "correlations": result.correlation().tolist(),
        },
        "inference_net": result.net.to_dict(),
        "diagnostics": {
            "steps": result.steps,
            "converged": result.converged,
            "seconds": result.seconds,
            "skipped_steps": result.skipped_steps,
            "n_model_parameters": result.n_model_parameters,
            "n_total_parameters": result.n_total_parameters,
        },
    }


def fit_result_from_dict(doc: dict, elbo_trace: np.ndarray | None = None) -> FitResult:
    spec = from_json_dict(doc["spec"])
    items = ItemParams(
        np.asarray(doc["parameters"]["intercept_raw"], dtype=float),
        np.asarray(doc["parameters"]["loadings_free"], dtype=float),
    )
    diag = doc["diagnostics"]
    return FitResult(
        spec=spec,
        items=items,
        theta=np.asarray(doc["parameters"]["theta"], dtype=float),
        net=InferenceNet.from_dict(doc["inference_net"]),
        elbo_trace=elbo_trace if elbo_trace is not None else np.zeros(0),
        steps=int(diag["steps"]),
        converged=bool(diag["converged"]),
        seconds=float(diag["seconds"]),
        n_model_parameters=int(diag["n_model_parameters"]),
        n_total_parameters=int(diag["n_total_parameters"]),
        skipped_steps=int(diag["skipped_steps"]),
    )


def save_fit_result(result: FitResult, out_dir: str) -> dict:
    """Write results.json and trace.csv; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(out_dir, RESULTS_FILE)
    trace_path = os.path.join(out_dir, TRACE_FILE)
    atomic_write_text(results_path, dump_json(fit_result_to_dict(result)))
    lines = ["step,iw_elbo"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(result.elbo_trace)]
    atomic_write_text(trace_path, "\n".join(lines) + "\n")
    return {"results": results_path, "trace": trace_path}


def load_fit_result(path: str) -> FitResult:
    """Load a fit from a results.json path or its directory."""
    if os.path.isdir(path):
        path = os.path.join(path, RESULTS_FILE)
    with open(path) as fh:
        doc = json.load(fh)
    trace = None
    trace_path = os.path.join(os.path.dirname(path), TRACE_FILE)
    if os.path.exists(trace_path):
        with open(trace_path) as fh:
            values = [float(line.split(",")[1]) for line in fh.read().splitlines()[1:] if line]
        trace = np.array(values)
    return fit_result_from_dict(doc, elbo_trace=trace)


# ----- manifests -------------------------------------------------------------------


def write_manifest(
    out_dir: str,
    command: str,
    config: dict,
    seed,
    outputs: dict,
    started_at: str,
    finished_at: str | None = None,
) -> str:
    """A manifest records everything needed to re-run the command."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started_at": started_at,
        "finished_at": finished_at or now_iso(),
        "outputs": {k: os.path.basename(v) for k, v in outputs.items()},
    }
    path = os.path.join(out_dir, MANIFEST_FILE)
    atomic_write_text(path, dump_json(manifest))
    return path


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def default_output_dir(command: str, out: str | None) -> str:
    """Resolve --out, falling back to $GRADEDVI_OUTPUT_ROOT/<command>-<stamp>."""
    if out:
        return out
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return os.path.join(root, f"{command}-{stamp}")


# ----- study reports ----------------------------------------------------------------


def save_study_report(report, out_dir: str) -> dict:
    """Write StudyReport JSON plus a long-format CSV of scalar record fields."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    atomic_write_text(json_path, dump_json(report.to_dict()))

    csv_path = os.path.join(out_dir, "records.csv")
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record", "key", "metric", "value"])
    for i, rec in enumerate(report.records):
        key = "|".join(
            str(rec.get(k)) for k in ("cell", "n", "r", "fitted", "classifier", "replication")
            if k in rec
        )
        for name, value in rec.items():
            if isinstance(value, bool):
                writer.writerow([i, key, name, int(value)])
            elif isinstance(value, (int, float, np.integer, np.floating)):
                writer.writerow([i, key, name, repr(float(value))])
            elif isinstance(value, list) and value and isinstance(value[0], (int, float)):
                for j, v in enumerate(value):
                    writer.writerow([i, key, f"{name}_{j}", repr(float(v))])
    atomic_write_text(csv_path, buf.getvalue())
    return {"report": json_path, "records": csv_path}
