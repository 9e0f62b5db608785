"""Patient clinical CSV ingestion and feature-table CSV output.

Missing values are ``None`` on :class:`PatientRecord` and NaN inside a
:class:`FeatureMatrix`; parsed numbers are always finite, so NaN is never
ambiguous with data.
"""
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PATIENT_COLUMNS = [
    "PatientID", "CenterID", "Gender", "Age", "Weight", "Tobacco", "Alcohol",
    "Performance_status", "HPV_status", "Surgery", "Chemotherapy", "RFS", "Relapse",
]
_BINARY = ("Tobacco", "Alcohol", "HPV_status", "Surgery")


class TableError(ValueError):
    pass


class UnknownGenderError(TableError):
    pass


class NonNumericError(TableError):
    pass


class DuplicatePatientError(TableError):
    pass


class SchemaError(TableError):
    pass


@dataclass
class PatientRecord:
    patient_id: str
    center_id: int
    gender: str
    age: float
    weight: float
    tobacco: Optional[int] = None
    alcohol: Optional[int] = None
    performance_status: Optional[int] = None
    hpv_status: Optional[int] = None
    surgery: Optional[int] = None
    chemotherapy: int = 0
    rfs: Optional[float] = None
    relapse: Optional[int] = None


@dataclass
class FeatureMatrix:
    columns: list
    values: np.ndarray
    target: Optional[np.ndarray] = None
    events: Optional[np.ndarray] = None
    row_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, len(self.columns))
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.shape != (self.values.shape[0],):
                raise ValueError("target length does not match rows")
            if np.isnan(self.target).any():
                raise ValueError("target contains missing values")
        if self.events is not None:
            self.events = np.asarray(self.events, dtype=np.float64)

    @property
    def missing(self):
        return np.isnan(self.values)

    @property
    def n_rows(self):
        return self.values.shape[0]

    def column(self, name):
        return self.values[:, self.columns.index(name)]

    def subset(self, rows):
        rows = np.asarray(rows)
        return FeatureMatrix(
            list(self.columns),
            self.values[rows],
            None if self.target is None else self.target[rows],
            None if self.events is None else self.events[rows],
            [self.row_ids[i] for i in rows] if self.row_ids else [],
        )


def _number(tok, col, line):
    try:
        val = float(tok)
    except ValueError:
        raise NonNumericError(f"line {line}: non-numeric value {tok!r} in column {col}") from None
    if not math.isfinite(val):
        raise NonNumericError(f"line {line}: non-finite value {tok!r} in column {col}")
    return val


def _int_field(tok, col, line, allowed=None, optional=True):
    if tok == "":
        if optional:
            return None
        raise TableError(f"line {line}: column {col} must not be empty")
    val = _number(tok, col, line)
    if val != int(val):
        raise NonNumericError(f"line {line}: column {col} expects an integer, got {tok!r}")
    val = int(val)
    if allowed is not None and val not in allowed:
        raise TableError(f"line {line}: column {col} value {val} not in {sorted(allowed)}")
    return val


def read_patient_csv(data):
    """Parse the clinical table.  ``RFS`` and ``Relapse`` columns may be
    absent (test split) or left empty."""
    text = data.decode("utf-8-sig") if isinstance(data, (bytes, bytearray)) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError("empty file: header row required")
    header = [h.strip() for h in rows[0]]
    if header not in (PATIENT_COLUMNS, PATIENT_COLUMNS[:-1], PATIENT_COLUMNS[:-2]):
        raise SchemaError(f"unexpected header {header}; expected {','.join(PATIENT_COLUMNS)}")
    records, seen = [], set()
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SchemaError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        cell = dict(zip(header, (c.strip() for c in row)))
        pid = cell["PatientID"]
        if not pid:
            raise TableError(f"line {line}: empty PatientID")
        if pid in seen:
            raise DuplicatePatientError(f"line {line}: duplicate patient_id {pid!r}")
        seen.add(pid)
        gender = cell["Gender"].upper()
        if gender not in ("M", "F"):
            raise UnknownGenderError(f"line {line}: unknown gender token {cell['Gender']!r}")
        age = _number(cell["Age"], "Age", line)
        weight = _number(cell["Weight"], "Weight", line)
        if age <= 0 or weight <= 0:
            raise TableError(f"line {line}: age and weight must be positive")
        rec = PatientRecord(
            patient_id=pid,
            center_id=_int_field(cell["CenterID"], "CenterID", line, optional=False),
            gender=gender,
            age=age,
            weight=weight,
            tobacco=_int_field(cell["Tobacco"], "Tobacco", line, {0, 1}),
            alcohol=_int_field(cell["Alcohol"], "Alcohol", line, {0, 1}),
            performance_status=_int_field(cell["Performance_status"], "Performance_status", line),
            hpv_status=_int_field(cell["HPV_status"], "HPV_status", line, {0, 1}),
            surgery=_int_field(cell["Surgery"], "Surgery", line, {0, 1}),
            chemotherapy=_int_field(cell["Chemotherapy"], "Chemotherapy", line, {0, 1}, optional=False),
        )
        if cell.get("RFS", ""):
            rec.rfs = _number(cell["RFS"], "RFS", line)
            if rec.rfs < 0:
                raise TableError(f"line {line}: RFS must be >= 0")
        if cell.get("Relapse", ""):
            rec.relapse = _int_field(cell["Relapse"], "Relapse", line, {0, 1})
        records.append(rec)
    return records


def format_number(x):
    """Shortest decimal text that round-trips; integral values without '.0'."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def write_patient_csv(records):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(PATIENT_COLUMNS)
    for r in records:
        w.writerow([
            r.patient_id, r.center_id, r.gender, format_number(r.age), format_number(r.weight),
            format_number(r.tobacco), format_number(r.alcohol), format_number(r.performance_status),
            format_number(r.hpv_status), format_number(r.surgery), format_number(r.chemotherapy),
            format_number(r.rfs), format_number(r.relapse),
        ])
    return out.getvalue().encode("utf-8")


def write_feature_csv(m, target_name="RFS", event_name="Relapse", id_name=None):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    header = list(m.columns)
    if id_name:
        header = [id_name] + header
    if m.target is not None:
        header.append(target_name)
    if m.events is not None:
        header.append(event_name)
    w.writerow(header)
    for i in range(m.n_rows):
        row = [format_number(v) for v in m.values[i]]
        if id_name:
            row = [m.row_ids[i]] + row
        if m.target is not None:
            row.append(format_number(m.target[i]))
        if m.events is not None:
            row.append(format_number(m.events[i]))
        w.writerow(row)
    return out.getvalue().encode("utf-8")


def read_feature_csv(data, target_name="RFS", event_name="Relapse", id_name=None):
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError("empty feature file")
    header = rows[0]
    body = [r for r in rows[1:] if r]
    ids = []
    if id_name:
        if header[0] != id_name:
            raise SchemaError(f"first column must be {id_name}")
        ids = [r[0] for r in body]
        header, body = header[1:], [r[1:] for r in body]
    cols = list(header)
    t_idx = cols.index(target_name) if target_name in cols else None
    e_idx = cols.index(event_name) if event_name in cols else None
    keep = [i for i in range(len(cols)) if i not in (t_idx, e_idx)]

    def val(tok, col, line):
        return math.nan if tok == "" else _number(tok, col, line)

    values = np.array([[val(r[i], cols[i], n) for i in keep] for n, r in enumerate(body, start=2)], dtype=np.float64)
    target = None if t_idx is None else np.array([_number(r[t_idx], target_name, n) for n, r in enumerate(body, 2)])
    events = None if e_idx is None else np.array([val(r[e_idx], event_name, n) for n, r in enumerate(body, 2)])
    return FeatureMatrix([cols[i] for i in keep], values.reshape(len(body), len(keep)), target, events, ids)
