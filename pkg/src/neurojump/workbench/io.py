"""CSV ingestion, forecast files, JSON helpers and file hashing."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..density import HorizonParams, jump_from_array
from ..errors import IngestionError, NeuroJumpError, PersistenceError

DAILY_SCHEMA = (("date_index", int), ("daily_return", float))
INTRADAY_SCHEMA = (("day", int), ("step", int), ("return", float))
FORECAST_MAGIC = "# neurojump-forecasts"
FORECAST_VERSION = 1
FORECAST_HEADER = ("t", "asset", "horizon", "model", "measure", "family", "mu", "sigma", "lam",
                   "j0", "j1", "j2", "j3", "j4", "realized")


def ingest_csv(path, schema, time_column=None, known_extra=()):
    """Read a headered CSV into typed numpy columns.

    Parameters
    ----------
    path : path-like
    schema : sequence of (name, type)
        Required columns; ``type`` is ``int`` or ``float``.
    time_column : str, optional
        Column that must be strictly increasing.
    known_extra : sequence of str
        Optional columns that are ignored without a warning.

    Returns
    -------
    dict of str to ndarray

    Raises
    ------
    IngestionError
        Missing file or columns, unparsable or non-finite values, duplicate or
        out-of-order timestamps.  Messages carry 1-based file line numbers.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [name for name, _ in schema if name not in header]
        if missing:
            raise IngestionError(f"{path}: schema mismatch, missing column(s) {', '.join(missing)}")
        extra = [h for h in header if h not in dict(schema) and h not in known_extra]
        if extra:
            warnings.warn(f"{path}: ignoring unknown column(s) {', '.join(extra)}", stacklevel=2)
        pos = [(name, typ, header.index(name)) for name, typ in schema]
        cols = {name: [] for name, _ in schema}
        bad = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [(name, typ(float(row[i])) if typ is int else typ(row[i])) for name, typ, i in pos]
            except (ValueError, IndexError):
                bad.append(line)
                continue
            if any(isinstance(v, float) and not math.isfinite(v) for _, v in vals):
                bad.append(line)
                continue
            for name, v in vals:
                cols[name].append(v)
    if bad:
        shown = ", ".join(str(b) for b in bad[:10])
        raise IngestionError(f"{path}: non-finite or malformed required fields on line(s) {shown}")
    out = {name: np.array(v, dtype=typ) for (name, typ), v in zip(schema, cols.values())}
    if time_column is not None:
        t = out[time_column]
        d = np.diff(t)
        if np.any(d == 0):
            raise IngestionError(f"{path}: duplicate timestamp on line {int(np.flatnonzero(d == 0)[0]) + 3}")
        if np.any(d < 0):
            raise IngestionError(f"{path}: out-of-order timestamp on line {int(np.flatnonzero(d < 0)[0]) + 3}")
    return out


def read_intraday(path, days):
    """Intraday file as a (day x step) matrix aligned to ``days``."""
    cols = ingest_csv(path, INTRADAY_SCHEMA)
    lookup = {int(d): i for i, d in enumerate(days)}
    steps = int(cols["step"].max()) + 1
    out = np.full((len(days), steps), np.nan)
    for d, s, v in zip(cols["day"], cols["step"], cols["return"]):
        i = lookup.get(int(d))
        if i is not None:
            out[i, s] = v
    if np.isnan(out).any():
        raise IngestionError(f"{path}: incomplete intraday grid for the daily index")
    return out


# ---------------------------------------------------------------------------
# Forecast files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForecastRow:
    t: int
    asset: int
    horizon: str
    model: str
    measure: str  # "P" or "Q"
    params: HorizonParams
    realized: float = math.nan

    def key(self):
        return (self.t, self.asset, self.horizon, self.model, self.measure)


def write_forecasts(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"{FORECAST_MAGIC} v{FORECAST_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(FORECAST_HEADER)
        for r in rows:
            jump = list(r.params.jump.to_array())
            jump += [math.nan] * (5 - len(jump))
            w.writerow([r.t, r.asset, r.horizon, r.model, r.measure, r.params.family, repr(r.params.mu),
                        repr(r.params.sigma), repr(r.params.lam)] + [repr(float(v)) for v in jump]
                       + [repr(float(r.realized))])


def read_forecasts(path):
    """Parse a forecast file; params are re-validated on load."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"forecast file not found: {path}")
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith(FORECAST_MAGIC):
            raise PersistenceError(f"{path}: not a forecast file")
        version = first[len(FORECAST_MAGIC):].strip()
        if version != f"v{FORECAST_VERSION}":
            raise PersistenceError(f"{path}: unsupported forecast format {version!r}")
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != FORECAST_HEADER:
            raise PersistenceError(f"{path}: unexpected header")
        rows, seen = [], set()
        for line, rec in enumerate(reader, start=3):
            try:
                family = rec[5]
                width = 5 if family == "gmm" else 3
                params = HorizonParams(float(rec[6]), float(rec[7]), float(rec[8]),
                                       jump_from_array(family, [float(v) for v in rec[9:9 + width]]), rec[2])
                row = ForecastRow(int(rec[0]), int(rec[1]), rec[2], rec[3], rec[4], params, float(rec[14]))
            except (IndexError, ValueError, NeuroJumpError) as exc:
                raise IngestionError(f"{path}: bad forecast on line {line}: {exc}") from exc
            if row.measure not in ("P", "Q"):
                raise IngestionError(f"{path}: bad measure tag on line {line}")
            if row.key() in seen:
                raise IngestionError(f"{path}: duplicate forecast key on line {line}")
            seen.add(row.key())
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"file not found: {path}")
    return json.loads(path.read_text())


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
