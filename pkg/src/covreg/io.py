"""Dataset CSV parsing/writing, posterior archive persistence, and run
manifests.

Dataset files are comma-delimited with a header row: predictor columns named
x1..xq followed by response columns with arbitrary names.  Empty fields or
the literal NaN mark missing response entries.  Archives are stored as a
single .npz with the JSON manifest embedded.
"""

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import DataFormatError
from .gibbs import PosteriorArchive
from .model import Dataset

ARCHIVE_FORMAT_VERSION = 1


def load_dataset(path) -> Dataset:
    """Read a dataset CSV.

    Predictor columns must be a contiguous leading block named x1, x2, ...;
    everything after is a response column.  Empty cells and NaN in response
    columns are treated as missing.  Malformed rows raise DataFormatError
    with the offending line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        q = 0
        while q < len(header) and header[q] == f"x{q + 1}":
            q += 1
        if q == 0:
            raise DataFormatError(
                f"{path}: header must start with predictor columns x1, x2, ..."
            )
        resp_names = header[q:]
        if not resp_names:
            raise DataFormatError(f"{path}: no response columns after predictors")
        seen = set()
        for name in resp_names:
            if name in seen:
                warnings.warn(
                    f"{path}: duplicate response column {name!r}; keeping both",
                    stacklevel=2,
                )
            seen.add(name)

        xs_rows, y_rows, obs_rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                xrow = [float(c) for c in row[:q]]
            except ValueError as err:
                raise DataFormatError(f"{path}:{lineno}: bad predictor: {err}") from None
            if not all(np.isfinite(xrow)):
                raise DataFormatError(f"{path}:{lineno}: non-finite predictor")
            yrow, orow = [], []
            for c in row[q:]:
                c = c.strip()
                if c == "" or c.lower() == "nan":
                    yrow.append(np.nan)
                    orow.append(False)
                    continue
                try:
                    v = float(c)
                except ValueError:
                    raise DataFormatError(
                        f"{path}:{lineno}: bad response value {c!r}"
                    ) from None
                if not np.isfinite(v):
                    yrow.append(np.nan)
                    orow.append(False)
                else:
                    yrow.append(v)
                    orow.append(True)
            xs_rows.append(xrow)
            y_rows.append(yrow)
            obs_rows.append(orow)
    if not xs_rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(xs=np.array(xs_rows), y=np.array(y_rows),
                   observed=np.array(obs_rows))


def save_dataset(path, data: Dataset, response_names=None):
    """Write a dataset CSV in the format accepted by load_dataset."""
    q = data.xs.shape[1]
    if response_names is None:
        response_names = [f"y{j + 1}" for j in range(data.p)]
    if len(response_names) != data.p:
        raise ValueError("response_names length must equal p")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{c + 1}" for c in range(q)] + list(response_names))
        for i in range(data.n):
            row = [repr(float(v)) for v in data.xs[i]]
            for j in range(data.p):
                row.append(repr(float(data.y[i, j]))
                           if data.observed[i, j] else "")
            writer.writerow(row)


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance for one archive: settings echo, input digest, timings."""

    settings: dict
    input_sha256: str | None = None
    tool_version: str = __version__
    format_version: int = ARCHIVE_FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "tool_version": self.tool_version,
            "input_sha256": self.input_sha256,
            "settings": self.settings,
            "extra": self.extra,
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save_archive(path, archive: PosteriorArchive,
                 manifest: RunManifest | None = None):
    """Persist a posterior archive as .npz with the manifest embedded."""
    payload = dict(archive.manifest)
    if manifest is not None:
        payload = {**manifest.to_dict(), "chain": payload}
    else:
        payload = {"format_version": ARCHIVE_FORMAT_VERSION,
                   "tool_version": __version__, "chain": payload}
    arrays = {
        "sigmas": archive.sigmas,
        "manifest_json": np.frombuffer(
            json.dumps(_jsonable(payload)).encode(), dtype=np.uint8
        ),
    }
    if archive.mus is not None:
        arrays["mus"] = archive.mus
    for name, trace in archive.traces.items():
        arrays[f"trace_{name}"] = trace
    np.savez_compressed(path, **arrays)


def load_archive(path) -> PosteriorArchive:
    """Load an archive written by save_archive, checking the format version."""
    with np.load(path) as npz:
        try:
            raw = bytes(npz["manifest_json"].tobytes())
            payload = json.loads(raw.decode())
        except KeyError:
            raise DataFormatError(f"{path}: missing embedded manifest") from None
        version = payload.get("format_version")
        if version != ARCHIVE_FORMAT_VERSION:
            raise DataFormatError(
                f"{path}: archive format {version!r} unsupported "
                f"(expected {ARCHIVE_FORMAT_VERSION})"
            )
        sigmas = npz["sigmas"]
        mus = npz["mus"] if "mus" in npz.files else None
        traces = {
            name[len("trace_"):]: npz[name]
            for name in npz.files if name.startswith("trace_")
        }
    return PosteriorArchive(sigmas=sigmas, mus=mus, traces=traces,
                            manifest=payload)


def write_series_csv(path, trajectory_sigmas: np.ndarray, xs: np.ndarray,
                     lower: np.ndarray | None = None,
                     upper: np.ndarray | None = None):
    """Write covariance elements as long-form CSV.

    Columns: x, element_i, element_j, mean, lo, hi.  One row per
    (element_i, element_j, x) with i <= j, sorted by (element_i, element_j, x).
    """
    n, p, _ = trajectory_sigmas.shape
    x = np.asarray(xs, float).reshape(n, -1)[:, 0]
    order = np.argsort(x, kind="stable")
    with_bands = lower is not None and upper is not None
    cols = ["x", "element_i", "element_j", "mean"]
    if with_bands:
        cols += ["lo", "hi"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(p):
            for j in range(i, p):
                for t in order:
                    row = [repr(float(x[t])), i + 1, j + 1,
                           repr(float(trajectory_sigmas[t, i, j]))]
                    if with_bands:
                        row += [repr(float(lower[t, i, j])),
                                repr(float(upper[t, i, j]))]
                    writer.writerow(row)


def read_series_csv(path):
    """Read a long-form series CSV back into arrays (i, j, x, mean)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise DataFormatError(f"{path}: empty series file")
    i = np.array([int(r["element_i"]) for r in rows])
    j = np.array([int(r["element_j"]) for r in rows])
    x = np.array([float(r["x"]) for r in rows])
    v = np.array([float(r["mean"]) for r in rows])
    return i, j, x, v
