"""Reading and writing datasets, embeddings, traces, density grids and fitted models."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionOutOfRange,
    EmptyFile,
    InputError,
    IoFailure,
    MalformedCsv,
    ModelFormatError,
    SingletonVariable,
)
from .inference import VariationalPosterior
from .kernel import KernelParams
from .model import (
    MISSING,
    CategoricalDataset,
    ModelConfig,
    as_rng,
    default_truth_kernels,
    forward_simulate,
)
from .training import FittedModel, TraceRecord, TrainTrace

DEFAULT_MISSING = ("", "NA")
MODEL_FORMAT = "catlgp-model"
MODEL_VERSION = 1


def fmt(v) -> str:
    """12 significant digits (Python's correctly rounded, half-even formatting)."""
    return format(float(v), ".12g")


def round12(v: float) -> float:
    return float(fmt(v)) if math.isfinite(v) else v


# --------------------------------------------------------------------------
# atomic file output


def atomic_write(path, data) -> Path:
    """Write ``data`` (str or bytes) to a temp file next to ``path``, then rename."""
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err
    return path


# --------------------------------------------------------------------------
# schema and CSV datasets


@dataclass(frozen=True)
class Variable:
    name: str
    labels: tuple

    @property
    def cardinality(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Schema:
    variables: tuple

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise InputError("variable names must be unique")
        for v in self.variables:
            if len(set(v.labels)) != len(v.labels):
                raise InputError(f"duplicate labels in variable {v.name!r}")
            if len(v.labels) < 2:
                raise SingletonVariable(v.name)

    @property
    def names(self):
        return [v.name for v in self.variables]

    @property
    def cardinalities(self):
        return tuple(v.cardinality for v in self.variables)


def load_csv(path, missing_token=DEFAULT_MISSING):
    """Read a categorical CSV with a header row.

    Labels of each column are sorted lexicographically to define the category
    indices. ``missing_token`` may be a string or a collection of strings.

    Returns:
        ``(Schema, CategoricalDataset)``
    """
    missing = {missing_token} if isinstance(missing_token, str) else set(missing_token)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    except UnicodeDecodeError as err:
        raise MalformedCsv(f"not UTF-8: {err}") from err

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyFile(f"{path} is empty") from None
    except csv.Error as err:
        raise MalformedCsv(str(err), line=1) from err
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise MalformedCsv("duplicate column names", line=1)

    rows = []
    try:
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedCsv(f"expected {len(header)} fields, got {len(row)}", line=reader.line_num)
            rows.append((reader.line_num, [c.strip() for c in row]))
    except csv.Error as err:
        raise MalformedCsv(str(err), line=reader.line_num) from err
    if not rows:
        raise EmptyFile(f"{path} has a header but no data rows")

    variables = []
    for j, name in enumerate(header):
        labels = sorted({r[j] for _, r in rows if r[j] not in missing})
        if len(labels) < 2:
            raise SingletonVariable(name)
        variables.append(Variable(name, tuple(labels)))
    schema = Schema(tuple(variables))

    lookup = [{lab: i for i, lab in enumerate(v.labels)} for v in variables]
    values = np.full((len(rows), len(header)), MISSING, dtype=np.int64)
    for i, (line, row) in enumerate(rows):
        for j, cell in enumerate(row):
            if cell not in missing:
                values[i, j] = lookup[j][cell]
        if (values[i] == MISSING).all():
            raise MalformedCsv("row has no observed values", line=line)
    return schema, CategoricalDataset(values, schema.cardinalities)


def dataset_to_csv(schema: Schema, data: CategoricalDataset, missing_token: str = "NA") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(schema.names)
    for row in data.values:
        w.writerow([missing_token if v == MISSING else var.labels[v]
                    for v, var in zip(row, schema.variables)])
    return buf.getvalue()


def write_csv(path, schema: Schema, data: CategoricalDataset, missing_token: str = "NA") -> Path:
    return atomic_write(path, dataset_to_csv(schema, data, missing_token))


def index_labels(k: int):
    """Labels ``0..k-1`` zero-padded so lexicographic order equals numeric order."""
    width = len(str(k - 1))
    return tuple(str(i).zfill(width) for i in range(k))


def generic_schema(cardinalities, prefix="y"):
    return Schema(tuple(Variable(f"{prefix}{d + 1}", index_labels(k))
                        for d, k in enumerate(cardinalities)))


# --------------------------------------------------------------------------
# synthetic cohort with the clinical-table schema

_YES_NO = ("no", "yes")
_TABLE1 = [
    ("admitted_for_covid", _YES_NO),
    ("symptoms_at_diagnosis", _YES_NO),
    ("admitted_to_icu", _YES_NO),
    ("abo_blood_type", ("A", "AB", "B", "O")),
    ("race", ("asian", "black", "other", "white")),
    ("employment_status", ("employed", "unemployed")),
    ("employer_type", ("education", "healthcare", "none", "other", "service")),
    ("insurance", ("private", "public")),
    ("marital_status", ("married", "single")),
    ("primary_language", ("english", "other", "spanish")),
    ("known_sick_contact", _YES_NO),
    ("known_sick_contact_type", ("community", "household", "none", "work")),
]
_TABLE1_GROUPS = [
    ("comorbidity", 7),
    ("pregnancy_complication", 9),
    ("thermodynamic_symptom", 2),
    ("lower_respiratory_symptom", 2),
    ("heent_symptom", 4),
    ("gi_symptom", 3),
    ("hemodynamic_symptom", 1),
    ("cardiovascular_symptom", 1),
    ("musculoskeletal_symptom", 1),
]

# latent clusters of the cohort generator (2-D)
TABLE1_CLUSTER_MEANS = np.array([[-2.0, -1.0], [2.0, -1.0], [0.0, 2.0]])
TABLE1_CLUSTER_STD = 0.6
TABLE1_SIGNAL_VARIANCE = 3.0
TABLE1_ARD = 0.5


def table1_schema() -> Schema:
    variables = [Variable(n, labs) for n, labs in _TABLE1]
    for stem, count in _TABLE1_GROUPS:
        names = [stem] if count == 1 else [f"{stem}_{i + 1}" for i in range(count)]
        variables.extend(Variable(n, _YES_NO) for n in names)
    return Schema(tuple(variables))


def generate_table1_like(n: int, rng, return_truth: bool = False, max_redraws: int = 50):
    """Synthetic cohort with the clinical-table cardinality profile (42 variables).

    Latents come from a three-component 2-D Gaussian mixture and the data
    from a forward simulation of the model. A column that misses some of its
    categories is redrawn (up to ``max_redraws`` times, then the absent
    categories are written into random rows) so the file's inferred schema
    always equals :func:`table1_schema`.

    Returns:
        ``(Schema, CategoricalDataset)``, plus ``(X, cluster_labels)`` when
        ``return_truth`` is set.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    rng = as_rng(rng)
    schema = table1_schema()
    labels = rng.integers(0, len(TABLE1_CLUSTER_MEANS), size=n)
    X = TABLE1_CLUSTER_MEANS[labels] + TABLE1_CLUSTER_STD * rng.standard_normal((n, 2))
    kernels = default_truth_kernels(1, 2, TABLE1_SIGNAL_VARIANCE, TABLE1_ARD)
    values = np.empty((n, len(schema.variables)), dtype=np.int64)
    for d, k in enumerate(schema.cardinalities):
        for _ in range(max_redraws):
            _, col = forward_simulate(X, kernels, [k], rng)
            if n < k or len(np.unique(col.values)) == k:
                break
        col = col.values[:, 0].copy()
        if n >= k:
            absent = np.setdiff1d(np.arange(k), col)
            if absent.size:
                col[rng.choice(n, size=absent.size, replace=False)] = absent
        values[:, d] = col
    data = CategoricalDataset(values, schema.cardinalities)
    return (schema, data, X, labels) if return_truth else (schema, data)


# --------------------------------------------------------------------------
# density over the latent space


@dataclass
class DensityGrid:
    """Values on cell centres; ``values[i, j]`` is at ``(xs[j], ys[i])``."""

    dims: tuple
    x_range: tuple
    y_range: tuple
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def xs(self):
        lo, hi = self.x_range
        nx = self.values.shape[1]
        return lo + (np.arange(nx) + 0.5) * (hi - lo) / nx

    @property
    def ys(self):
        lo, hi = self.y_range
        ny = self.values.shape[0]
        return lo + (np.arange(ny) + 0.5) * (hi - lo) / ny

    @property
    def cell_area(self):
        ny, nx = self.values.shape
        return (self.x_range[1] - self.x_range[0]) / nx * (self.y_range[1] - self.y_range[0]) / ny

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_area)


def _mixture_density_grid(means, variances, dims, x_range, y_range, resolution):
    nx, ny = resolution
    i, j = dims
    grid = DensityGrid((i, j), tuple(map(float, x_range)), tuple(map(float, y_range)), np.zeros((ny, nx)))
    xs, ys = grid.xs, grid.ys

    mx, my = means[:, i], means[:, j]
    vx, vy = variances[:, i], variances[:, j]
    px = np.exp(-0.5 * (xs[None, :] - mx[:, None]) ** 2 / vx[:, None]) / np.sqrt(2 * np.pi * vx[:, None])
    py = np.exp(-0.5 * (ys[None, :] - my[:, None]) ** 2 / vy[:, None]) / np.sqrt(2 * np.pi * vy[:, None])
    grid.values = (py.T @ px) / means.shape[0]
    return grid


def latent_density(model: FittedModel, dims=(0, 1), resolution=(100, 100), x_range=None,
                   y_range=None, n_sd: float = 4.0) -> DensityGrid:
    """Average of the q(x_n) densities over two latent dimensions.

    Ranges default to the union of ``mean +- n_sd * sd`` over all observations.
    """
    post = model.posterior
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2 or any(not 0 <= d < post.latent_dim for d in dims) or dims[0] == dims[1]:
        raise DimensionOutOfRange(f"need two distinct dimensions in [0, {post.latent_dim}), got {dims}")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    m, v = post.x_means, post.x_vars
    sd = np.sqrt(v)

    def auto(d):
        return float((m[:, d] - n_sd * sd[:, d]).min()), float((m[:, d] + n_sd * sd[:, d]).max())

    return _mixture_density_grid(m, v, dims, x_range or auto(dims[0]), y_range or auto(dims[1]),
                                 resolution)


# --------------------------------------------------------------------------
# exports


def embeddings_csv(model: FittedModel, labels=None, ids=None, label_name: str = "label") -> str:
    post = model.posterior
    n, q = post.x_means.shape
    if labels is not None and len(labels) != n:
        raise InputError(f"{len(labels)} labels for {n} observations")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["id"] + [f"m_{j + 1}" for j in range(q)] + [f"s2_{j + 1}" for j in range(q)]
    if labels is not None:
        header.append(label_name)
    w.writerow(header)
    var = post.x_vars
    for i in range(n):
        row = [str(ids[i]) if ids is not None else str(i)]
        row += [fmt(x) for x in post.x_means[i]] + [fmt(x) for x in var[i]]
        if labels is not None:
            row.append(str(labels[i]))
        w.writerow(row)
    return buf.getvalue()


def export_embeddings(model: FittedModel, path, labels=None, ids=None, label_name: str = "label") -> Path:
    return atomic_write(path, embeddings_csv(model, labels, ids, label_name))


@dataclass
class Embeddings:
    ids: list
    means: np.ndarray
    variances: np.ndarray
    labels: list | None


def read_embeddings(path, label_column: str = "label") -> Embeddings:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    if not rows:
        raise EmptyFile(f"{path} is empty")
    header = rows[0]
    mcols = [i for i, h in enumerate(header) if h.startswith("m_")]
    vcols = [i for i, h in enumerate(header) if h.startswith("s2_")]
    if not mcols or len(mcols) != len(vcols):
        raise MalformedCsv("embeddings header needs matching m_* and s2_* columns", line=1)
    lcol = header.index(label_column) if label_column in header else None
    body = rows[1:]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise MalformedCsv(f"expected {len(header)} fields, got {len(r)}", line=lineno)
    try:
        means = np.array([[float(r[i]) for i in mcols] for r in body]).reshape(len(body), len(mcols))
        var = np.array([[float(r[i]) for i in vcols] for r in body]).reshape(len(body), len(vcols))
    except ValueError as err:
        raise MalformedCsv(f"non-numeric embedding value: {err}") from err
    labels = [r[lcol] for r in body] if lcol is not None else None
    return Embeddings([r[0] for r in body], means, var, labels)


def trace_jsonl(trace: TrainTrace, timing: bool = False) -> str:
    lines = []
    for rec in trace.records:
        d = {k: (round12(v) if isinstance(v, float) else v) for k, v in rec.as_dict(timing).items()}
        lines.append(json.dumps(d, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def export_trace(trace: TrainTrace, path, timing: bool = False) -> Path:
    """JSON-lines, one record per iteration. Wall-clock times only with ``timing``."""
    return atomic_write(path, trace_jsonl(trace, timing))


def density_csv(grid: DensityGrid) -> str:
    ny, nx = grid.values.shape
    lines = [
        f"# dims: {grid.dims[0]},{grid.dims[1]}",
        f"# x_range: {fmt(grid.x_range[0])},{fmt(grid.x_range[1])}",
        f"# y_range: {fmt(grid.y_range[0])},{fmt(grid.y_range[1])}",
        f"# nx: {nx}",
        f"# ny: {ny}",
        "# rows run over y (increasing), columns over x (increasing); values are densities",
    ]
    lines += [",".join(fmt(v) for v in row) for row in grid.values]
    return "\n".join(lines) + "\n"


def export_density(grid: DensityGrid, path) -> Path:
    return atomic_write(path, density_csv(grid))


def read_density(path) -> DensityGrid:
    meta, rows = {}, []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].partition(":")
                    meta[key.strip()] = val.strip()
                    continue
                try:
                    rows.append([float(c) for c in line.split(",")])
                except ValueError as err:
                    raise MalformedCsv(str(err), line=lineno) from err
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    try:
        dims = tuple(int(s) for s in meta["dims"].split(","))
        xr = tuple(float(s) for s in meta["x_range"].split(","))
        yr = tuple(float(s) for s in meta["y_range"].split(","))
        nx, ny = int(meta["nx"]), int(meta["ny"])
    except (KeyError, ValueError) as err:
        raise MalformedCsv(f"bad density header: {err}") from err
    values = np.array(rows)
    if values.shape != (ny, nx):
        raise MalformedCsv(f"density grid is {values.shape}, header says {(ny, nx)}")
    return DensityGrid(dims, xr, yr, values)


# --------------------------------------------------------------------------
# model files


def model_to_json(model: FittedModel) -> str:
    post = model.posterior
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "cardinalities": list(post.cardinalities),
        "posterior": {
            "x_means": post.x_means.tolist(),
            "x_log_vars": post.x_log_vars.tolist(),
            "inducing_inputs": post.inducing_inputs.tolist(),
            "u_means": post.u_means.tolist(),
            "u_chol_raw": post.u_chol_raw.tolist(),
        },
        "kernels": [
            {"log_signal_variance": k.log_signal_variance, "log_ard_weights": k.log_ard_weights.tolist()}
            for k in model.kernels
        ],
        "trace": [r.as_dict(timing=False) for r in model.trace.records],
        "converged": model.trace.converged,
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def save_model(model: FittedModel, path) -> Path:
    return atomic_write(path, model_to_json(model))


def load_model(path) -> FittedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"{path} is not a model file: {err}") from err
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path} is not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"{path} has model format version {doc.get('version')}, expected {MODEL_VERSION}"
        )
    try:
        p = doc["posterior"]
        post = VariationalPosterior(
            np.array(p["x_means"], dtype=np.float64),
            np.array(p["x_log_vars"], dtype=np.float64),
            np.array(p["inducing_inputs"], dtype=np.float64),
            np.array(p["u_means"], dtype=np.float64),
            np.array(p["u_chol_raw"], dtype=np.float64),
            tuple(doc["cardinalities"]),
        )
        kernels = [KernelParams(k["log_signal_variance"], k["log_ard_weights"]) for k in doc["kernels"]]
        config = ModelConfig(**doc["config"])
        records = [TraceRecord(wall_clock=math.nan, **r) for r in doc["trace"]]
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"{path}: malformed model file ({err})") from err
    trace = TrainTrace(records, np.stack([k.ard_weights for k in kernels]), doc.get("converged", False))
    return FittedModel(post, kernels, config, trace)
