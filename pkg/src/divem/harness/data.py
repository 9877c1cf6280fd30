"""Model serialization and CSV datasets.

Models are JSON objects with a ``family`` tag; matrices are row-major
nested lists.  Datasets are numeric CSV files with an optional header:

* ``mixture``: one observation per row.
* ``hmm`` and ``kalman``: a leading integer sequence-id column; rows with
  the same id form one sequence, in file order.  Ids must be contiguous.
* ``dirichlet``: one document per row, nonnegative integer word counts.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..dirichlet import DirichletModel
from ..errors import ParseError
from ..expfam import spec_from_dict, spec_to_dict
from ..hmm import HmmModel
from ..kalman import KalmanModel
from ..mixture import MixtureModel

__all__ = [
    "FAMILIES",
    "Dataset",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "write_dataset",
    "ingest_csv",
]

FAMILIES = ("mixture", "hmm", "kalman", "dirichlet")
SEQUENCE_FAMILIES = ("hmm", "kalman")


def _list(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model) -> dict:
    if isinstance(model, MixtureModel):
        return {
            "family": "mixture",
            "emission": spec_to_dict(model.spec),
            "weights": _list(model.weights),
            "components": _list(model.components),
        }
    if isinstance(model, HmmModel):
        return {
            "family": "hmm",
            "emission": spec_to_dict(model.spec),
            "transient_count": model.s,
            "initial": _list(model.initial),
            "transitions": _list(model.transitions),
            "emissions": _list(model.emissions),
        }
    if isinstance(model, KalmanModel):
        return {
            "family": "kalman",
            "pi1": _list(model.pi1),
            "V": _list(model.V),
            "A": _list(model.A),
            "C": _list(model.C),
            "Q": _list(model.Qn),
            "R": _list(model.Rn),
        }
    if isinstance(model, DirichletModel):
        return {"family": "dirichlet", "alpha": _list(model.alpha)}
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(d: dict):
    try:
        fam = d["family"]
        if fam == "mixture":
            return MixtureModel(spec_from_dict(d["emission"]), d["weights"], d["components"])
        if fam == "hmm":
            return HmmModel(
                spec_from_dict(d["emission"]),
                d["initial"],
                d["transitions"],
                d["emissions"],
                int(d["transient_count"]),
            )
        if fam == "kalman":
            arr = {k: np.array(d[k], dtype=float) for k in ("pi1", "V", "A", "C", "Q", "R")}
            return KalmanModel(arr["pi1"], arr["V"], arr["A"], arr["C"], arr["Q"], arr["R"])
        if fam == "dirichlet":
            return DirichletModel(d["alpha"])
    except KeyError as exc:
        raise ParseError(f"model is missing field {exc.args[0]!r}") from None
    raise ParseError(f"unknown model family {d.get('family')!r}")


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return model_from_dict(d)


@dataclass
class Dataset:
    """``data`` is an ``(N, dim)`` array or, for sequence families, a list of them."""

    family: str
    data: object
    dim: int

    def __len__(self) -> int:
        return len(self.data)

    def describe(self) -> str:
        if self.family in SEQUENCE_FAMILIES:
            lens = [len(x) for x in self.data]
            return (
                f"{self.family}: {len(lens)} sequences, dim {self.dim}, "
                f"lengths {min(lens)}..{max(lens)}"
            )
        unit = "documents" if self.family == "dirichlet" else "observations"
        return f"{self.family}: {len(self.data)} {unit}, dim {self.dim}"


def _fmt(x: float) -> str:
    # repr round-trips exactly; integers print without a trailing ".0"
    return str(int(x)) if float(x).is_integer() and abs(x) < 2**53 else repr(float(x))


def write_dataset(family: str, data, path, header: bool = True) -> None:
    """Write ``data`` in the CSV layout of ``family``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if family in SEQUENCE_FAMILIES:
            dim = next((np.shape(x)[-1] for x in data if len(x)), 0)
            if header:
                w.writerow(["seq"] + [f"x{j}" for j in range(dim)])
            for i, seq in enumerate(data):
                for row in np.asarray(seq, dtype=float).reshape(-1, dim):
                    w.writerow([str(i)] + [_fmt(v) for v in row])
        else:
            X = np.asarray(data, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if header:
                w.writerow([f"x{j}" for j in range(X.shape[1])])
            for row in X:
                w.writerow([_fmt(v) for v in row])


def _parse_float(cell: str, line: int, col: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"line {line}, column {col}: {cell!r} is not a number") from None
    if not math.isfinite(v):
        raise ParseError(f"line {line}, column {col}: {cell!r} is not finite")
    return v


def _is_header(row: List[str]) -> bool:
    for cell in row:
        try:
            float(cell)
        except ValueError:
            return True
    return False


def ingest_csv(path, family: str, dim: Optional[int] = None) -> Dataset:
    """Read a dataset in the layout of ``family``.

    A first row containing any non-numeric cell is treated as a header.
    Ragged rows and bad cells raise :class:`ParseError` naming the line
    and (1-based) column.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    with open(path, newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if rows and _is_header(rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(rows[0][1])
    values = np.empty((len(rows), width))
    for r, (line, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"line {line}: expected {width} columns, found {len(row)}")
        for c, cell in enumerate(row):
            values[r, c] = _parse_float(cell.strip(), line, c + 1)

    if family in SEQUENCE_FAMILIES:
        if width < 2:
            raise ParseError(f"line {rows[0][0]}: need a sequence id and at least one value")
        ids = values[:, 0]
        for (line, _), v in zip(rows, ids):
            if v != int(v):
                raise ParseError(f"line {line}, column 1: sequence id {v} is not an integer")
        seqs: List[np.ndarray] = []
        seen = set()
        start = 0
        for r in range(1, len(ids) + 1):
            if r == len(ids) or ids[r] != ids[start]:
                sid = ids[start]
                if sid in seen:
                    raise ParseError(f"line {rows[start][0]}: sequence id {int(sid)} is not contiguous")
                seen.add(sid)
                seqs.append(values[start:r, 1:].copy())
                start = r
        data_dim = width - 1
        ds = Dataset(family, seqs, data_dim)
    else:
        if family == "dirichlet":
            for (line, row), vals in zip(rows, values):
                bad = np.flatnonzero((vals < 0) | (vals != np.round(vals)))
                if bad.size:
                    raise ParseError(f"line {line}, column {bad[0] + 1}: counts must be nonnegative integers")
                if vals.sum() < 1:
                    raise ParseError(f"line {line}: document has no words")
        data_dim = width
        ds = Dataset(family, values, data_dim)
    if dim is not None and data_dim != dim:
        raise ParseError(f"{path}: data has dimension {data_dim}, expected {dim}")
    return ds


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
