"""Columnar tables with explicit missingness masks, a small formula DSL, and
sub-mechanism indicator derivation.

Missing cells are tracked by a boolean mask per column (True = observed).
Continuous and binary columns hold float64 values (NaN in masked slots);
categorical columns hold integer codes into ``levels`` (-1 in masked slots).
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormulaError, MissingValueError, ParseError

KINDS = ("continuous", "binary", "categorical")


@dataclass(frozen=True)
class ColumnSchema:
    kind: str
    levels: tuple[str, ...] = ()
    baseline: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParseError(f"unknown column kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise ParseError("categorical column needs at least one level")
            if len(set(self.levels)) != len(self.levels):
                raise ParseError("duplicate categorical levels")
            if self.baseline is None:
                raise ParseError("categorical column must declare a baseline level")
            if self.baseline not in self.levels:
                raise ParseError(f"baseline {self.baseline!r} is not a declared level")

    def to_dict(self, name):
        d = {"name": name, "kind": self.kind}
        if self.kind == "categorical":
            d["levels"] = list(self.levels)
            d["baseline"] = self.baseline
        return d


def parse_schema(obj) -> dict[str, ColumnSchema]:
    """Build a schema mapping from its JSON form.

    Accepts ``{"columns": [{"name": ..., "kind": ..., "levels": [...], "baseline": ...}]}``
    or the bare list.
    """
    if isinstance(obj, Mapping):
        obj = obj.get("columns")
    if not isinstance(obj, list):
        raise ParseError("schema must be a list of column declarations")
    out = {}
    for entry in obj:
        name = entry.get("name")
        if not name:
            raise ParseError("schema entry without a name")
        if name in out:
            raise ParseError(f"column {name!r} declared twice")
        out[name] = ColumnSchema(
            kind=entry.get("kind"),
            levels=tuple(str(v) for v in entry.get("levels", ())),
            baseline=None if entry.get("baseline") is None else str(entry["baseline"]),
        )
    return out


def schema_to_json(schema: Mapping[str, ColumnSchema]) -> dict:
    return {"columns": [s.to_dict(name) for name, s in schema.items()]}


def load_schema(path) -> dict[str, ColumnSchema]:
    with open(path, encoding="utf-8") as fh:
        return parse_schema(json.load(fh))


@dataclass(frozen=True, eq=False)
class Column:
    kind: str
    values: np.ndarray
    mask: np.ndarray
    levels: tuple[str, ...] = ()
    baseline: str | None = None

    def __post_init__(self):
        ColumnSchema(self.kind, self.levels, self.baseline)  # validates kind/levels
        mask = np.asarray(self.mask, dtype=bool)
        if self.kind == "categorical":
            values = np.asarray(self.values, dtype=np.int64)
            values = np.where(mask, values, -1)
            bad = mask & ((values < 0) | (values >= len(self.levels)))
        else:
            values = np.asarray(self.values, dtype=np.float64)
            values = np.where(mask, values, np.nan)
            if self.kind == "binary":
                bad = mask & ~((values == 0.0) | (values == 1.0))
            else:
                bad = mask & ~np.isfinite(values)
        if values.ndim != 1 or mask.shape != values.shape:
            raise ValueError("values and mask must be equal-length 1-d arrays")
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"invalid {self.kind} value at row {i}")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    def __len__(self):
        return self.values.shape[0]

    @property
    def schema(self) -> ColumnSchema:
        return ColumnSchema(self.kind, self.levels, self.baseline)

    @property
    def baseline_code(self) -> int:
        return self.levels.index(self.baseline)

    def replace(self, values, mask) -> "Column":
        return Column(self.kind, values, mask, self.levels, self.baseline)

    def take(self, idx) -> "Column":
        return Column(self.kind, self.values[idx], self.mask[idx], self.levels, self.baseline)


class ColumnTable:
    """Immutable mapping of column name to :class:`Column`, all of one length."""

    def __init__(self, columns: Mapping[str, Column]):
        columns = dict(columns)
        lengths = {len(c) for c in columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"columns have unequal lengths {sorted(lengths)}")
        self._columns = columns
        self.n_rows = lengths.pop() if lengths else 0

    @classmethod
    def from_arrays(cls, data: Mapping[str, object], schema: Mapping[str, ColumnSchema] | None = None):
        """Build a table from arrays where NaN (or None) marks a missing cell.

        Categorical arrays may hold level strings or integer codes.
        """
        schema = dict(schema or {})
        cols = {}
        for name, arr in data.items():
            spec = schema.get(name, ColumnSchema("continuous"))
            if spec.kind == "categorical":
                raw = list(arr)
                codes = np.full(len(raw), -1, dtype=np.int64)
                mask = np.zeros(len(raw), dtype=bool)
                for i, v in enumerate(raw):
                    if v is None or (isinstance(v, float) and math.isnan(v)):
                        continue
                    if isinstance(v, (int, np.integer)):
                        codes[i] = int(v)
                    else:
                        codes[i] = spec.levels.index(str(v))
                    mask[i] = True
                cols[name] = Column("categorical", codes, mask, spec.levels, spec.baseline)
            else:
                vals = np.array(arr, dtype=np.float64)
                cols[name] = Column(spec.kind, vals, ~np.isnan(vals))
        return cls(cols)

    def __getitem__(self, name) -> Column:
        try:
            return self._columns[name]
        except KeyError:
            raise KeyError(f"no column named {name!r}") from None

    def __contains__(self, name):
        return name in self._columns

    def __iter__(self):
        return iter(self._columns)

    @property
    def names(self) -> list[str]:
        return list(self._columns)

    @property
    def columns(self) -> dict[str, Column]:
        return dict(self._columns)

    @property
    def schema(self) -> dict[str, ColumnSchema]:
        return {name: c.schema for name, c in self._columns.items()}

    def with_column(self, name, column: Column) -> "ColumnTable":
        if len(column) != self.n_rows and self._columns:
            raise ValueError("new column length does not match table")
        cols = dict(self._columns)
        cols[name] = column
        return ColumnTable(cols)

    def take(self, idx) -> "ColumnTable":
        idx = np.asarray(idx)
        return ColumnTable({name: c.take(idx) for name, c in self._columns.items()})

    def equals(self, other: "ColumnTable") -> bool:
        if self.names != other.names or self.n_rows != other.n_rows:
            return False
        for name in self.names:
            a, b = self[name], other[name]
            if a.schema != b.schema or not np.array_equal(a.mask, b.mask):
                return False
            if not np.array_equal(a.values[a.mask], b.values[b.mask]):
                return False
        return True


# --------------------------------------------------------------------------
# CSV

def read_csv(path, schema: Mapping[str, ColumnSchema]) -> ColumnTable:
    """Read a CSV file whose header names the columns; empty fields are missing."""
    schema = dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file: header row is mandatory") from None
        except csv.Error as exc:
            raise ParseError(f"malformed CSV: {exc}", row=1) from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names in header", row=1)
        for name in header:
            if name not in schema:
                raise ParseError("column not declared in schema", row=1, column=name)
        for name in schema:
            if name not in header:
                raise ParseError("schema column absent from file", column=name)
        cells: list[list[str]] = [[] for _ in header]
        try:
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"expected {len(header)} fields, found {len(row)}", row=lineno
                    )
                for j, v in enumerate(row):
                    cells[j].append(v.strip())
        except csv.Error as exc:
            raise ParseError(f"malformed CSV: {exc}", row=reader.line_num) from None

    cols = {}
    for name, raw in zip(header, cells):
        cols[name] = _parse_column(name, raw, schema[name])
    return ColumnTable(cols)


def _parse_column(name, raw: list[str], spec: ColumnSchema) -> Column:
    n = len(raw)
    mask = np.array([v != "" for v in raw], dtype=bool)
    if spec.kind == "categorical":
        lookup = {lvl: i for i, lvl in enumerate(spec.levels)}
        codes = np.full(n, -1, dtype=np.int64)
        for i, v in enumerate(raw):
            if v == "":
                continue
            if v not in lookup:
                raise ParseError(f"unknown level {v!r}", row=i + 2, column=name)
            codes[i] = lookup[v]
        return Column("categorical", codes, mask, spec.levels, spec.baseline)

    values = np.full(n, np.nan)
    for i, v in enumerate(raw):
        if v == "":
            continue
        try:
            x = float(v)
        except ValueError:
            raise ParseError(f"non-numeric value {v!r}", row=i + 2, column=name) from None
        if spec.kind == "binary" and x not in (0.0, 1.0):
            raise ParseError(f"binary column holds {v!r}", row=i + 2, column=name)
        if not math.isfinite(x):
            raise ParseError(f"non-finite value {v!r}", row=i + 2, column=name)
        values[i] = x
    return Column(spec.kind, values, mask)


def format_cell(col: Column, i: int) -> str:
    if not col.mask[i]:
        return ""
    if col.kind == "categorical":
        return col.levels[col.values[i]]
    if col.kind == "binary":
        return "1" if col.values[i] == 1.0 else "0"
    return format(float(col.values[i]), ".17g")


def write_csv(table: ColumnTable, path) -> None:
    """Write ``table``; continuous values use 17 significant digits so reads round-trip."""
    names = table.names
    cols = [table[n] for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(table.n_rows):
            w.writerow([format_cell(c, i) for c in cols])


def write_schema(schema: Mapping[str, ColumnSchema], path) -> None:
    Path(path).write_text(json.dumps(schema_to_json(schema), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Formula DSL: main effects and two-way interactions only.

@dataclass(frozen=True)
class Term:
    factors: tuple[str, ...]

    @property
    def label(self):
        return ":".join(self.factors)


@dataclass(frozen=True)
class Formula:
    response: str | None
    terms: tuple[Term, ...]
    intercept: bool = True

    @property
    def variables(self) -> list[str]:
        seen = []
        for t in self.terms:
            for f in t.factors:
                if f not in seen:
                    seen.append(f)
        return seen

    def __str__(self):
        rhs = [t.label for t in self.terms]
        if not self.intercept:
            rhs.append("-1")
        lhs = f"{self.response} " if self.response else ""
        return f"{lhs}~ {' + '.join(rhs) if rhs else '1'}"


_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def parse_formula(text: str | Formula) -> Formula:
    """Parse ``"Y ~ X + Z1 + X:Z1"``; ``- 1`` or a ``0`` term drops the intercept."""
    if isinstance(text, Formula):
        return text
    if "~" not in text:
        raise FormulaError(f"formula {text!r} lacks '~'")
    lhs, rhs = text.split("~", 1)
    lhs = lhs.strip()
    if lhs and not _NAME.match(lhs):
        raise FormulaError(f"bad response name {lhs!r}")
    intercept = True
    terms: list[Term] = []
    tokens = re.split(r"\s*([+-])\s*", rhs.strip())
    sign = "+"
    for tok in tokens:
        if tok in ("+", "-"):
            sign = tok
            continue
        if tok == "":
            continue
        if tok in ("0", "1"):
            if tok == "0" or sign == "-":
                intercept = False
            continue
        if sign == "-":
            raise FormulaError(f"cannot subtract term {tok!r}")
        factors = tuple(p.strip() for p in tok.split(":"))
        if len(factors) > 2:
            raise FormulaError(f"only two-way interactions are supported: {tok!r}")
        for f in factors:
            if not _NAME.match(f):
                raise FormulaError(f"bad variable name {f!r}")
        if len(factors) == 2 and factors[0] == factors[1]:
            raise FormulaError(f"self-interaction {tok!r}")
        term = Term(factors)
        if term in terms:
            raise FormulaError(f"duplicate term {tok!r}")
        terms.append(term)
    return Formula(lhs or None, tuple(terms), intercept)


def _select(rows, n) -> np.ndarray:
    if rows is None:
        return np.arange(n)
    rows = np.asarray(rows)
    if rows.dtype == bool:
        if rows.shape != (n,):
            raise ValueError("boolean row filter has wrong length")
        return np.flatnonzero(rows)
    return rows.astype(np.int64)


def _check_observed(col: Column, name, idx):
    ok = col.mask[idx]
    if not ok.all():
        raise MissingValueError(name, int(idx[np.argmin(ok)]))


def _encode(table: ColumnTable, name, idx) -> tuple[list[np.ndarray], list[str]]:
    if name not in table:
        raise FormulaError(f"formula references unknown column {name!r}")
    col = table[name]
    _check_observed(col, name, idx)
    if col.kind == "categorical":
        vals = col.values[idx]
        out, names = [], []
        for code, lvl in enumerate(col.levels):
            if lvl == col.baseline:
                continue
            out.append((vals == code).astype(np.float64))
            names.append(f"{name}[{lvl}]")
        return out, names
    return [col.values[idx]], [name]


def design_matrix(table: ColumnTable, formula, rows=None) -> tuple[np.ndarray, list[str]]:
    """Dense predictor matrix for ``formula`` on the selected rows.

    ``rows`` may be None (all), a boolean mask, or an index array.
    """
    formula = parse_formula(formula)
    idx = _select(rows, table.n_rows)
    blocks: list[np.ndarray] = []
    names: list[str] = []
    if formula.intercept:
        blocks.append(np.ones(idx.size))
        names.append("(Intercept)")
    cache = {}
    for term in formula.terms:
        for f in term.factors:
            if f not in cache:
                cache[f] = _encode(table, f, idx)
        if len(term.factors) == 1:
            cols, labels = cache[term.factors[0]]
            blocks.extend(cols)
            names.extend(labels)
        else:
            (ca, la), (cb, lb) = cache[term.factors[0]], cache[term.factors[1]]
            for a, na in zip(ca, la):
                for b, nb in zip(cb, lb):
                    blocks.append(a * b)
                    names.append(f"{na}:{nb}")
    if blocks:
        X = np.column_stack(blocks)
    else:
        X = np.empty((idx.size, 0))
    return X, names


def response_vector(table: ColumnTable, formula, rows=None) -> np.ndarray:
    formula = parse_formula(formula)
    if formula.response is None:
        raise FormulaError(f"formula {formula} has no response")
    idx = _select(rows, table.n_rows)
    col = table[formula.response]
    _check_observed(col, formula.response, idx)
    return col.values[idx]


def available(table: ColumnTable, names: Iterable[str], rows=None) -> np.ndarray:
    """Boolean vector over selected rows: every named column observed."""
    idx = _select(rows, table.n_rows)
    ok = np.ones(idx.size, dtype=bool)
    for name in names:
        ok &= table[name].mask[idx]
    return ok


# --------------------------------------------------------------------------
# Sub-mechanism indicators

@dataclass(frozen=True, eq=False)
class SubMechanismIndicators:
    R: np.ndarray  # K x n bool
    R_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=bool))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "R_bar", np.logical_and.accumulate(R, axis=0))


def derive_indicators(table: ColumnTable, modularization) -> SubMechanismIndicators:
    """R[k][i] = 1 iff every column of group k is observed for subject i, or,
    for decision mechanisms, iff the group's indicator column equals 1.

    ``modularization`` is anything with a ``mechanisms`` sequence whose items
    carry ``variables`` and ``indicator`` attributes.
    """
    mechs: Sequence = getattr(modularization, "mechanisms", modularization)
    n = table.n_rows
    R = np.zeros((len(mechs), n), dtype=bool)
    reach = np.ones(n, dtype=bool)
    for k, m in enumerate(mechs):
        if m.variables:
            R[k] = available(table, m.variables)
        else:
            col = table[m.indicator]
            if col.kind == "categorical":
                raise ParseError("indicator column must be binary", column=m.indicator)
            missing = reach & ~col.mask
            if missing.any():
                raise MissingValueError(m.indicator, int(np.flatnonzero(missing)[0]))
            R[k] = col.mask & (np.nan_to_num(col.values) == 1.0)
        reach &= R[k]
    return SubMechanismIndicators(R)
