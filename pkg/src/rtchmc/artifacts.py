import csv
import json
import math
import os
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .logger import get_logger
from .models import ChainRecord, CovReport

SCHEMA_RESOURCE = "diagnostics.schema.json"

logger = get_logger()


def get_output_dir() -> Path:
    """Get the base directory for run artifacts."""
    # Use RTCHMC_OUTPUT_DIR if set, otherwise ./runs
    output_home = os.environ.get("RTCHMC_OUTPUT_DIR")
    if output_home:
        return Path(output_home)
    return Path.cwd() / "runs"


def run_stem(name: str, sampler: str, tag: Optional[str] = None) -> str:
    stem = f"{name}-{sampler}"
    if tag:
        stem += f"-{tag}"
    return stem.replace("/", "_").replace(" ", "_")


def _may_write(path: Path, force: bool) -> bool:
    if path.exists() and not force:
        logger.warning(f"{path} exists, not overwriting (use --force)")
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    return True


def jsonable(value: Any) -> Any:
    """Recursively convert numpy values; non-finite floats become None."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def save_json(data: Dict[str, Any], path: Path, force: bool = False) -> Optional[Path]:
    if not _may_write(path, force):
        return None
    try:
        path.write_text(json.dumps(jsonable(data), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise RuntimeError(f"Failed to write {path}: {e}")
    return path


def save_matrix(matrix: np.ndarray, path: Path, force: bool = False) -> Optional[Path]:
    """One row per line, comma separated, full float precision, no header."""
    if not _may_write(path, force):
        return None
    try:
        np.savetxt(path, np.atleast_2d(matrix), fmt="%.17g", delimiter=",")
    except OSError as e:
        raise RuntimeError(f"Failed to write {path}: {e}")
    return path


def save_chain(record: ChainRecord, path: Path, force: bool = False) -> Optional[Path]:
    return save_matrix(record.samples, path, force)


def load_chain(path: Path, skip_header: bool = False) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1 if skip_header else 0)


def save_table(
    rows: List[Dict[str, Any]], path: Path, force: bool = False
) -> Optional[Path]:
    if not rows:
        return None
    if not _may_write(path, force):
        return None
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: jsonable(v) for k, v in row.items()})
    return path


def chain_metadata(
    record: ChainRecord, settings: Dict[str, Any], **extra: Any
) -> Dict[str, Any]:
    return {
        "sampler": record.sampler,
        "settings": settings,
        "n_samples": record.n_samples,
        "acceptance_rate": record.acceptance_rate,
        "rev_failures": record.rev_failures,
        "shake_failures": record.shake_failures,
        "grad_evals": record.grad_evals,
        "wall_time": record.wall_time,
        "reversibility_metric": "joint infinity norm over (x, v)",
        **extra,
    }


def save_run(
    record: ChainRecord,
    meta: Dict[str, Any],
    diagnostics: Dict[str, Any],
    output_dir: Path,
    stem: str,
    force: bool = False,
) -> List[Path]:
    """Write <stem>.csv, <stem>.meta.json and <stem>.diagnostics.json."""
    written = [
        save_chain(record, output_dir / f"{stem}.csv", force),
        save_json(meta, output_dir / f"{stem}.meta.json", force),
        save_json(diagnostics, output_dir / f"{stem}.diagnostics.json", force),
    ]
    return [path for path in written if path is not None]


def save_report(
    report: CovReport, output_dir: Path, stem: str, force: bool = False
) -> List[Path]:
    """Covariance report as <stem>.covest.json plus one CSV per matrix."""
    matrices = {
        "posterior_mean": report.mean,
        "posterior_sd": report.sd,
        "inverse_mean": report.inverse_mean,
        "inverse_sd": report.inverse_sd,
        "map": report.map_estimate,
    }
    written = [
        save_matrix(matrix, output_dir / f"{stem}.{name}.csv", force)
        for name, matrix in matrices.items()
        if matrix is not None
    ]
    summary = {
        "p": int(report.mean.shape[0]),
        "n_samples": report.n_samples,
        "acceptance_rate": report.acceptance_rate,
        "max_constraint_violation": report.max_constraint_violation,
        "min_d": report.min_d,
        "metrics": report.metrics,
        "files": {
            name: f"{stem}.{name}.csv"
            for name, matrix in matrices.items()
            if matrix is not None
        },
    }
    written.append(save_json(summary, output_dir / f"{stem}.covest.json", force))
    return [path for path in written if path is not None]


def load_schema() -> Dict[str, Any]:
    """The published JSON schema of diagnostics files."""
    text = resources.files("rtchmc").joinpath("schemas", SCHEMA_RESOURCE).read_text()
    return json.loads(text)
