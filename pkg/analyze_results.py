import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

import baselines
import envs
from config import TRAIN_DEFAULTS
from discorl import success_flags
from errors import DomainError, SynergyLabError
from synergy import SynergyModel, TaskPolicy

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-8

# Published explained-variance figures on the 20-DoF hand tasks; quoted, never computed here
REFERENCE_FIGURES = (
    "PCA on independently learned policies: 62.8% (b = 6), 50.8% (b = 4) and 41.5% (b = 3) "
    "on the first hand task set, slightly higher on the second.",
    "Jointly learned synergies with a linear decoder: 100% at every b.",
)


def principal_angles(U, V):
    """Canonical angles (radians, ascending) between the column spans of U and V"""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.shape[0] != V.shape[0]:
        raise DomainError(f"Bases live in different spaces: {U.shape[0]} vs {V.shape[0]}")
    for name, basis in (("U", U), ("V", V)):
        error = np.linalg.norm(basis.T @ basis - np.eye(basis.shape[1]))
        if error > ORTHONORMAL_TOL:
            raise DomainError(f"{name} does not have orthonormal columns (|B^T B - I| = {error:.3e})")
    cosines = np.linalg.svd(U.T @ V, compute_uv=False)
    return np.sort(np.arccos(np.clip(cosines, 0.0, 1.0)))


# ------------------------------------------------------------- exports

def git_blob_sha1(data):
    """Content hash as computed by `git hash-object`"""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def format_cell(value):
    """CSV text for one value: '' for missing, shortest round-trip repr for floats"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    logger.info(f"✓ Exported {len(rows)} rows to: {path}")
    return path


def json_ready(obj):
    """Plain JSON types; NaN and infinities become null"""
    if isinstance(obj, dict):
        return {str(k): json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_ready(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, doc):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(json_ready(doc), f, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False)
        f.write('\n')
    return path


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


# -------------------------------------------------------- success table

@dataclass
class Cell:
    status: str
    eval_return: object = None
    reference_return: object = None

    @property
    def mark(self):
        return {"pass": "✓", "fail": "✗"}.get(self.status, self.status)


@dataclass
class SuccessRow:
    method: str
    task_set: str
    run_dir: str
    cells: dict = field(default_factory=dict)
    explained_variance: object = None


@dataclass
class SuccessTable:
    tasks: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def header(self):
        columns = ["method", "task_set"]
        for task in self.tasks:
            columns += [f"{task}_status", f"{task}_return", f"{task}_reference"]
        return columns + ["explained_variance"]

    def csv_rows(self):
        out = []
        for row in self.rows:
            values = [row.method, row.task_set]
            for task in self.tasks:
                cell = row.cells.get(task)
                if cell is None:
                    values += ["", None, None]
                else:
                    values += [cell.status, cell.eval_return, cell.reference_return]
            out.append(values + [row.explained_variance])
        return out


def _set_key(identity):
    return json.dumps(identity, sort_keys=True)


def _set_label(identity):
    label = identity.get("set_id", "?")
    if identity.get("orthogonal"):
        label += "-orth"
    if identity.get("engagement_on"):
        label += "-eng"
    return label


def read_hashed_results(run_dir):
    """results.json of a run, accepted only when it matches the hash in the run's manifest.json"""
    manifest = read_json(os.path.join(run_dir, "manifest.json"))
    with open(os.path.join(run_dir, "results.json"), 'rb') as f:
        data = f.read()
    expected = manifest.get("files", {}).get("results.json")
    if expected is None:
        raise ValueError("results.json is not listed in manifest.json")
    if expected != git_blob_sha1(data):
        raise ValueError("results.json does not match its manifest hash")
    return json.loads(data.decode('utf-8'))


def build_success_table(run_dirs, fraction=TRAIN_DEFAULTS['success_fraction']):
    """Collect hashed results.json / references.json from run dirs into one table"""
    table = SuccessTable()
    loaded = []
    references = {}
    for run_dir in run_dirs:
        try:
            results = read_hashed_results(run_dir)
            loaded.append((run_dir, results))
        except (OSError, ValueError) as e:
            logger.error(f"  ✗ Skipping {run_dir}: {e}")
            table.failures.append({"run_dir": run_dir, "error": str(e)})
            continue
        ref_path = os.path.join(run_dir, "references.json")
        if os.path.exists(ref_path):
            refs = read_json(ref_path)
            references.setdefault(_set_key(refs["task_set"]), {}).update(refs["returns"])

    for run_dir, results in loaded:
        identity = results.get("task_set", {})
        row = SuccessRow(results.get("method", "?"), _set_label(identity), os.path.basename(os.path.normpath(run_dir)),
                         explained_variance=results.get("explained_variance"))
        shared = references.get(_set_key(identity), {})
        for entry in results.get("tasks", []):
            name = entry["name"]
            if name not in table.tasks:
                table.tasks.append(name)
            reference = entry.get("reference_return")
            if reference is None:
                reference = shared.get(name)
            if reference is None:
                status = "no-ref"
            else:
                status = "pass" if success_flags([entry["eval_return"]], [reference], fraction)[0] else "fail"
            row.cells[name] = Cell(status, entry.get("eval_return"), reference)
        table.rows.append(row)
    return table


def _fmt(value, digits=3):
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def render_markdown(table):
    lines = ["# Success table", ""]
    if not table.rows:
        lines += ["No runs.", ""]
    else:
        lines.append("| method | task set | " + " | ".join(table.tasks) + " | explained variance |")
        lines.append("|" + "---|" * (len(table.tasks) + 3))
        for row in table.rows:
            cells = []
            for task in table.tasks:
                cell = row.cells.get(task)
                cells.append("" if cell is None else
                             f"{cell.mark} ({_fmt(cell.eval_return)} / {_fmt(cell.reference_return)})")
            lines.append(f"| {row.method} | {row.task_set} | " + " | ".join(cells) +
                         f" | {_fmt(row.explained_variance, 4)} |")
        lines += ["", "Cells: mark (eval return / reference return). A task passes at "
                      f"{int(round(TRAIN_DEFAULTS['success_fraction'] * 100))}% of its full-dimensional "
                      "reference; 'no-ref' marks tasks without a reference run.", ""]
    lines += ["## Published reference figures (not reproduced)", ""]
    lines += [f"- {figure}" for figure in REFERENCE_FIGURES]
    lines.append("")
    if table.failures:
        lines += ["## Unreadable run directories", ""]
        lines += [f"- {f['run_dir']}: {f['error']}" for f in table.failures]
        lines.append("")
    return "\n".join(lines)


def report(run_dirs, out_dir):
    """Write success_table.csv and report.md for the given run directories"""
    table = build_success_table(run_dirs)
    write_csv(os.path.join(out_dir, "success_table.csv"), table.header(), table.csv_rows())
    with open(os.path.join(out_dir, "report.md"), 'w', encoding='utf-8', newline='\n') as f:
        f.write(render_markdown(table))
    logger.info(f"Report over {len(run_dirs)} run dirs: {len(table.rows)} rows, {len(table.tasks)} task columns")
    return table


# --------------------------------------------------------------- analysis

def analyze_run(run_dir, episodes=1, seed=0):
    """Subspace and explained-variance analysis of a train-discosyn run"""
    task_set = envs.load_task_set(os.path.join(run_dir, "task_set.json"))
    model = SynergyModel.load(os.path.join(run_dir, "synergy.json"))
    policy = TaskPolicy.load(os.path.join(run_dir, "policy.json"))
    z, a = baselines.eval_pairs(policy, model, task_set.tasks, episodes, seed)
    oracle = envs.oracle_subspace(task_set.tasks)
    analysis = {"task_set": task_set.identity(), "b": model.b, "form": model.form,
                "oracle_dim": oracle.shape[1], "explained_variance": baselines.explained_variance(model, (z, a))}
    if model.form == "linear":
        angles = principal_angles(model.rowspace(), oracle)
        analysis["principal_angles"] = angles.tolist()
        analysis["max_principal_angle"] = float(angles.max()) if angles.size else None
    try:
        pca = baselines.pca_fit(a, model.b)
        analysis["pca_explained_variance"] = baselines.explained_variance(pca, a)
        analysis["pca_explained_ratio"] = pca.explained_ratio
    except SynergyLabError as e:
        logger.warning(f"PCA comparison skipped: {e}")
        analysis["pca_explained_variance"] = None
    logger.info(f"Analysis of {run_dir}: explained variance {analysis['explained_variance']}, "
                f"max principal angle {analysis.get('max_principal_angle')}")
    return analysis
