"""Data ingestion, chain persistence, and config loading.

Chain archives are directories of per-parameter CSV files plus a manifest
holding everything needed to re-run the job. Floats are serialized with 17
significant digits so write-then-read round trips are exact, and re-running
with the same seed and config reproduces the archive byte for byte. Volatile
run metadata (wall time, timestamp) lives in a separate run_info.json that is
not part of the archive's identity.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__

FLOAT_FMT = "%.17g"


class ValidationError(ValueError):
    """Raised when an input file or configuration fails its checks."""


# ---------------------------------------------------------------------------
# Chain archives


@dataclass
class ChainArchive:
    """Retained MCMC draws plus the manifest that reproduces them.

    draws maps parameter names to (n_draws, dim) arrays; integer-valued
    parameters (cluster labels) keep integer dtype. The manifest echoes the
    model id, config, seed/stream, iteration plan, dims, and software version.
    """

    model: str
    manifest: dict
    draws: dict[str, np.ndarray]
    log_joint: np.ndarray
    wall_time: float | None = None

    @property
    def n_draws(self) -> int:
        return int(self.log_joint.shape[0])

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def dims(self) -> dict:
        return self.manifest["dims"]

    def reshaped(self, name: str, *trailing: int) -> np.ndarray:
        return self.draws[name].reshape(self.n_draws, *trailing)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = dict(self.manifest)
        manifest["model"] = self.model
        manifest["version"] = __version__
        manifest["n_draws"] = self.n_draws
        manifest["params"] = {
            name: {
                "rows": int(arr.shape[0]),
                "cols": int(arr.shape[1]),
                "dtype": "int" if np.issubdtype(arr.dtype, np.integer) else "float",
            }
            for name, arr in self.draws.items()
        }
        (out / "manifest.json").write_text(
            json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n"
        )
        for name, arr in self.draws.items():
            fmt = "%d" if np.issubdtype(arr.dtype, np.integer) else FLOAT_FMT
            np.savetxt(out / f"{name}.csv", arr, fmt=fmt, delimiter=",")
        np.savetxt(out / "log_joint.csv", self.log_joint, fmt=FLOAT_FMT, delimiter=",")
        run_info = {"wall_time_s": self.wall_time, "written_at": time.time()}
        (out / "run_info.json").write_text(json.dumps(run_info, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, archive_dir) -> "ChainArchive":
        path = Path(archive_dir)
        manifest = json.loads((path / "manifest.json").read_text())
        draws = {}
        for name, meta in manifest["params"].items():
            dtype = np.int64 if meta["dtype"] == "int" else np.float64
            arr = np.loadtxt(path / f"{name}.csv", delimiter=",", dtype=dtype, ndmin=2)
            if arr.shape != (meta["rows"], meta["cols"]):
                raise ValidationError(
                    f"{name}.csv has shape {arr.shape}, manifest declares "
                    f"({meta['rows']}, {meta['cols']})"
                )
            draws[name] = arr
        log_joint = np.loadtxt(path / "log_joint.csv", delimiter=",", ndmin=1)
        if log_joint.shape[0] != manifest["n_draws"]:
            raise ValidationError(
                f"log_joint.csv has {log_joint.shape[0]} rows, manifest declares "
                f"{manifest['n_draws']}"
            )
        wall_time = None
        run_info_path = path / "run_info.json"
        if run_info_path.exists():
            wall_time = json.loads(run_info_path.read_text()).get("wall_time_s")
        return cls(
            model=manifest["model"],
            manifest=manifest,
            draws=draws,
            log_joint=log_joint,
            wall_time=wall_time,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# OTU count matrices

NORMALIZATIONS = ("rel_freq", "avg_library", "none")


@dataclass
class OtuTable:
    """Count matrix (rows = OTUs, columns = subjects) with its normalization."""

    counts: np.ndarray
    values: np.ndarray
    otu_ids: list[str]
    subject_ids: list[str]
    library_sizes: np.ndarray
    normalize: str
    log_transform: bool


def load_otu_csv(path, normalize: str = "avg_library", log_transform: bool = False) -> OtuTable:
    """Read an OTU count CSV (header row of subject ids, first column OTU ids).

    rel_freq divides each column by its library size, avg_library additionally
    rescales by the mean library size, none keeps raw counts. With
    log_transform, zeros are replaced by half the smallest positive value
    before taking logs.
    """
    if normalize not in NORMALIZATIONS:
        raise ValidationError(f"normalize must be one of {NORMALIZATIONS}, got {normalize!r}")
    rows = list(csv.reader(Path(path).open(newline="")))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ValidationError(f"{path}: expected a header row plus at least one OTU row")
    subject_ids = [c.strip() for c in rows[0][1:]]
    width = len(rows[0])
    otu_ids = []
    counts = np.empty((len(rows) - 1, len(subject_ids)), dtype=np.int64)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ValidationError(f"{path}: row {r} has {len(row)} fields, expected {width}")
        otu_ids.append(row[0].strip())
        for c, cell in enumerate(row[1:]):
            try:
                value = int(cell)
            except ValueError:
                raise ValidationError(
                    f"{path}: non-integer count {cell!r} at OTU {row[0].strip()!r}, "
                    f"subject {subject_ids[c]!r}"
                ) from None
            if value < 0:
                raise ValidationError(
                    f"{path}: negative count at OTU {row[0].strip()!r}, "
                    f"subject {subject_ids[c]!r}"
                )
            counts[r - 2, c] = value
    library = counts.sum(axis=0)
    if np.any(library == 0):
        bad = subject_ids[int(np.flatnonzero(library == 0)[0])]
        raise ValidationError(f"{path}: subject {bad!r} has zero library size")
    if normalize == "none":
        values = counts.astype(float)
    else:
        values = counts / library[None, :]
        if normalize == "avg_library":
            values = values * library.mean()
    if log_transform:
        positive = values[values > 0]
        floor = 0.5 * positive.min()
        values = np.log(np.where(values > 0, values, floor))
    return OtuTable(
        counts=counts,
        values=values,
        otu_ids=otu_ids,
        subject_ids=subject_ids,
        library_sizes=library,
        normalize=normalize,
        log_transform=log_transform,
    )


# ---------------------------------------------------------------------------
# Long-format protein tables


@dataclass
class ProteinTable:
    """Dense protein-by-subject matrix parsed from long format.

    t holds 1-based time indices per subject; corners caches the subjects at
    (z, t) = (0, 1), (0, T), (1, 1), (1, T) when present. When any corner is
    missing, slope-difference summaries are unavailable and warnings says why.
    """

    y: np.ndarray
    protein_ids: list[str]
    subject_ids: list[str]
    z: np.ndarray
    t: np.ndarray
    n_times: int
    corners: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def shape(self):
        return self.y.shape


def load_protein_csv(path) -> ProteinTable:
    """Read a long-format CSV with columns protein_id, subject_id, y, z, t."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"protein_id", "subject_id", "y", "z", "t"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError(
                f"{path}: header must include columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        records = list(reader)
    if not records:
        raise ValidationError(f"{path}: no data rows")

    protein_ids, subject_ids = [], []
    protein_pos, subject_pos = {}, {}
    subject_z, subject_t = {}, {}
    seen = set()
    cells = []
    for lineno, rec in enumerate(records, start=2):
        pid, sid = rec["protein_id"].strip(), rec["subject_id"].strip()
        try:
            y = float(rec["y"])
            z = int(rec["z"])
            t = int(rec["t"])
        except ValueError:
            raise ValidationError(f"{path}: line {lineno}: malformed y/z/t fields") from None
        if z not in (0, 1):
            raise ValidationError(f"{path}: line {lineno}: z must be 0 or 1, got {z}")
        if t < 1:
            raise ValidationError(f"{path}: line {lineno}: t must be a positive index, got {t}")
        if (pid, sid) in seen:
            raise ValidationError(f"{path}: duplicate record for ({pid}, {sid})")
        seen.add((pid, sid))
        if pid not in protein_pos:
            protein_pos[pid] = len(protein_ids)
            protein_ids.append(pid)
        if sid not in subject_pos:
            subject_pos[sid] = len(subject_ids)
            subject_ids.append(sid)
            subject_z[sid], subject_t[sid] = z, t
        elif (subject_z[sid], subject_t[sid]) != (z, t):
            raise ValidationError(f"{path}: subject {sid!r} has inconsistent (z, t) records")
        cells.append((protein_pos[pid], subject_pos[sid], y))

    I, J = len(protein_ids), len(subject_ids)
    if len(cells) != I * J:
        missing = sorted(
            (protein_ids[i], subject_ids[j])
            for i in range(I)
            for j in range(J)
            if (protein_ids[i], subject_ids[j]) not in seen
        )
        raise ValidationError(
            f"{path}: {len(missing)} missing (protein, subject) cells, e.g. {missing[:5]}"
        )
    y = np.empty((I, J))
    for i, j, value in cells:
        y[i, j] = value
    z = np.array([subject_z[s] for s in subject_ids], dtype=np.int64)
    t = np.array([subject_t[s] for s in subject_ids], dtype=np.int64)
    unique_t = np.unique(t)
    n_times = int(unique_t.size)

    corners, warnings = {}, []
    t_first, t_last = int(unique_t[0]), int(unique_t[-1])
    for cond in (0, 1):
        for name, tval in (("first", t_first), ("last", t_last)):
            hits = np.flatnonzero((z == cond) & (t == tval))
            if hits.size:
                corners[(cond, name)] = int(hits[0])
            else:
                warnings.append(
                    f"no subject with z={cond} at t={tval}; "
                    "slope-difference summaries disabled"
                )
    return ProteinTable(
        y=y,
        protein_ids=protein_ids,
        subject_ids=subject_ids,
        z=z,
        t=t,
        n_times=n_times,
        corners=corners,
        warnings=warnings,
    )


def load_matrix_csv(path):
    """Read a real-valued matrix CSV (header row of column ids, first column
    row ids). Returns (values, row_ids, col_ids)."""
    rows = list(csv.reader(Path(path).open(newline="")))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ValidationError(f"{path}: expected a header row plus at least one data row")
    col_ids = [c.strip() for c in rows[0][1:]]
    width = len(rows[0])
    row_ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ValidationError(f"{path}: row {r} has {len(row)} fields, expected {width}")
        row_ids.append(row[0].strip())
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise ValidationError(f"{path}: non-numeric value in row {r}") from None
    return np.asarray(values), row_ids, col_ids


def write_matrix_csv(path, values: np.ndarray, row_ids, col_ids) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *col_ids])
        for rid, row in zip(row_ids, values):
            writer.writerow([rid, *(FLOAT_FMT % v for v in row)])


def load_chain_archives(path) -> list[ChainArchive]:
    """Load a single archive directory or every chain_* subdirectory."""
    p = Path(path)
    if (p / "manifest.json").exists():
        return [ChainArchive.load(p)]
    subs = sorted(d for d in p.iterdir() if d.is_dir() and (d / "manifest.json").exists())
    if not subs:
        raise ValidationError(f"{path}: no manifest.json found (not a chain archive)")
    return [ChainArchive.load(d) for d in subs]


def pool_archives(archives: list[ChainArchive]) -> ChainArchive:
    """Concatenate retained draws across chains of the same job."""
    first = archives[0]
    if len(archives) == 1:
        return first
    for other in archives[1:]:
        if other.model != first.model or other.dims != first.dims:
            raise ValidationError("cannot pool archives from different models or dims")
    draws = {
        name: np.concatenate([a.draws[name] for a in archives], axis=0)
        for name in first.draws
    }
    manifest = dict(first.manifest)
    manifest["pooled_streams"] = [a.manifest.get("stream") for a in archives]
    return ChainArchive(
        model=first.model,
        manifest=manifest,
        draws=draws,
        log_joint=np.concatenate([a.log_joint for a in archives]),
        wall_time=None,
    )


# ---------------------------------------------------------------------------
# Config files


def load_config(path) -> dict:
    """Load a TOML or JSON config file into a flat dict."""
    p = Path(path)
    text = p.read_bytes()
    if p.suffix.lower() == ".json":
        return json.loads(text)
    if p.suffix.lower() == ".toml":
        return tomllib.loads(text.decode())
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return tomllib.loads(text.decode())
