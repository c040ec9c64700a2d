"""Columns with roles, CSV ingestion and node-level factor grouping."""
from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    """Bad input data or role declaration."""


class Role(enum.Enum):
    RESPONSE = "r"
    TREATMENT = "t"
    EVENT = "d"
    ORDINAL = "n"
    CATEGORICAL = "c"
    EXCLUDED = "x"


PREDICTOR_ROLES = (Role.ORDINAL, Role.CATEGORICAL)


@dataclass(frozen=True, eq=False)
class Column:
    """One variable.

    Ordinal, response and event columns hold floats in ``values``; categorical
    and treatment columns hold integer codes into ``levels`` (-1 where
    missing).
    """

    name: str
    role: Role
    values: np.ndarray
    missing: np.ndarray
    levels: tuple | None = None

    @property
    def is_categorical(self):
        return self.role in (Role.CATEGORICAL, Role.TREATMENT)

    def labels(self):
        """Cell values as python objects (str for categorical, float otherwise, None if missing)."""
        if self.is_categorical:
            return [None if c < 0 else self.levels[c] for c in self.values]
        return [None if m else float(v) for v, m in zip(self.values, self.missing)]


@dataclass(frozen=True)
class FactorGrouping:
    """Grouped values of one predictor over a row subset.

    ``codes[i]`` indexes ``labels``. Ordinal variables produce the groups
    ``<= mean`` and ``> mean``; a trailing ``"NA"`` group is present iff any
    value is missing.
    """

    codes: np.ndarray
    labels: tuple
    sizes: np.ndarray
    cut: float | None = None

    @property
    def degenerate(self):
        return int((self.sizes > 0).sum()) < 2


def group_ordinal_at_mean(column, rows=None):
    if column.role is not Role.ORDINAL:
        raise DataError(f"column {column.name!r} is not ordinal")
    rows = np.arange(len(column.values)) if rows is None else np.asarray(rows)
    x = column.values[rows]
    miss = column.missing[rows]
    if miss.all():
        codes = np.zeros(len(rows), dtype=np.int64)
        return FactorGrouping(codes, ("NA",), np.array([len(rows)]), None)
    cut = float(x[~miss].mean())
    codes = np.where(x <= cut, 0, 1)
    labels = (f"<={cut:.6g}", f">{cut:.6g}")
    if miss.any():
        codes = np.where(miss, 2, codes)
        labels += ("NA",)
    sizes = np.bincount(codes, minlength=len(labels))
    return FactorGrouping(codes.astype(np.int64), labels, sizes, cut)


def group_categorical(column, rows=None):
    rows = np.arange(len(column.values)) if rows is None else np.asarray(rows)
    c = column.values[rows]
    k = len(column.levels)
    codes = np.where(c < 0, k, c)
    labels = tuple(column.levels)
    if (c < 0).any():
        labels += ("NA",)
    sizes = np.bincount(codes, minlength=len(labels))
    return FactorGrouping(codes.astype(np.int64), labels, sizes, None)


@dataclass(eq=False)
class Dataset:
    columns: list
    source: str = "<memory>"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {len(c.values) for c in self.columns}
        if len(sizes) > 1:
            raise DataError("columns have different lengths")
        self.n_rows = sizes.pop() if sizes else 0
        roles = [c.role for c in self.columns]
        for role, label in ((Role.RESPONSE, "response"), (Role.TREATMENT, "treatment")):
            if roles.count(role) != 1:
                raise DataError(f"{self.source}: need exactly one {label} column, found {roles.count(role)}")
        if roles.count(Role.EVENT) > 1:
            raise DataError(f"{self.source}: at most one event-indicator column allowed")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"{self.source}: duplicate column names")
        for col in self.columns:
            if col.role in (Role.RESPONSE, Role.TREATMENT, Role.EVENT) and col.missing.any():
                i = int(np.flatnonzero(col.missing)[0])
                raise DataError(f"{self.source}: missing value in {col.role.name.lower()} column {col.name!r} (row {i + 1})")
        if self.event is not None and not np.isin(self.event.values, (0.0, 1.0)).all():
            raise DataError(f"{self.source}: event column {self.event.name!r} must be 0/1")
        if len(self.treatment.levels) < 2 or len(np.unique(self.treatment.values)) < 2:
            raise DataError(f"{self.source}: treatment column {self.treatment.name!r} needs at least 2 levels")

    # -- roles -------------------------------------------------------------
    def _one(self, role):
        for c in self.columns:
            if c.role is role:
                return c
        return None

    @property
    def response(self):
        return self._one(Role.RESPONSE)

    @property
    def treatment(self):
        return self._one(Role.TREATMENT)

    @property
    def event(self):
        return self._one(Role.EVENT)

    @property
    def censored(self):
        return self.event is not None

    @cached_property
    def predictors(self):
        return [c for c in self.columns if c.role in PREDICTOR_ROLES]

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def y(self):
        return self.response.values

    @property
    def z(self):
        return self.treatment.values

    @property
    def delta(self):
        return None if self.event is None else self.event.values

    @property
    def n_treatments(self):
        return len(self.treatment.levels)

    # -- compiled predictor block -----------------------------------------
    @cached_property
    def design(self):
        """Predictor block laid out for the selection kernels."""
        return Design.build(self.predictors)

    def take(self, rows):
        """New dataset made of ``rows`` (copies; used for resampling)."""
        rows = np.asarray(rows)
        cols = [Column(c.name, c.role, c.values[rows], c.missing[rows], c.levels) for c in self.columns]
        return Dataset(cols, self.source, dict(self.meta))

    # -- construction ------------------------------------------------------
    @classmethod
    def from_arrays(cls, y, z, ordinal=None, categorical=None, event=None,
                    treatment_levels=None, names=("y", "z", "delta"), meta=None):
        """Build a dataset from arrays.

        ``ordinal`` maps names to float arrays (NaN = missing); ``categorical``
        maps names to sequences of labels or integer codes (None / -1 =
        missing). Both are inserted in the mapping's order, ordinal first.
        """
        y = np.asarray(y, dtype=float)
        cols = [Column(names[0], Role.RESPONSE, y, np.zeros(len(y), bool))]
        zl = list(z)
        if treatment_levels is None:
            treatment_levels = _first_appearance([str(v) for v in zl])
        tl = tuple(str(v) for v in treatment_levels)
        index = {v: i for i, v in enumerate(tl)}
        zc = np.array([index[str(v)] for v in zl], dtype=np.int64)
        cols.append(Column(names[1], Role.TREATMENT, zc, np.zeros(len(zc), bool), tl))
        if event is not None:
            ev = np.asarray(event, dtype=float)
            cols.append(Column(names[2], Role.EVENT, ev, np.zeros(len(ev), bool)))
        for name, x in (ordinal or {}).items():
            x = np.asarray(x, dtype=float)
            miss = np.isnan(x)
            cols.append(Column(name, Role.ORDINAL, np.where(miss, 0.0, x), miss))
        for name, x in (categorical or {}).items():
            cols.append(_categorical_from_values(name, x))
        return cls(cols, "<memory>", dict(meta or {}))


def _categorical_from_values(name, x):
    arr = np.asarray(x)
    if arr.dtype.kind in "iu":
        miss = arr < 0
        k = int(arr.max()) + 1 if (~miss).any() else 0
        levels = tuple(str(i) for i in range(k))
        return Column(name, Role.CATEGORICAL, np.where(miss, -1, arr).astype(np.int64), miss, levels)
    labels = [None if v is None else str(v) for v in x]
    levels = tuple(_first_appearance([v for v in labels if v is not None]))
    index = {v: i for i, v in enumerate(levels)}
    codes = np.array([-1 if v is None else index[v] for v in labels], dtype=np.int64)
    return Column(name, Role.CATEGORICAL, codes, codes < 0, levels)


def _first_appearance(values):
    seen = {}
    for v in values:
        seen.setdefault(v, None)
    return list(seen)


@dataclass
class Design:
    """Predictors split into an ordinal float block (NaN = missing) and a
    categorical code block (missing coded as ``n_levels``), remembering
    each predictor's position in dataset order."""

    names: list
    is_ordinal: np.ndarray
    ord_pos: np.ndarray
    cat_pos: np.ndarray
    x_ord: np.ndarray
    x_cat: np.ndarray
    cat_levels: list
    n_groups: int

    @classmethod
    def build(cls, predictors):
        is_ord = np.array([c.role is Role.ORDINAL for c in predictors], dtype=bool)
        n = len(predictors[0].values) if predictors else 0
        ords = [c for c in predictors if c.role is Role.ORDINAL]
        cats = [c for c in predictors if c.role is Role.CATEGORICAL]
        x_ord = np.empty((n, len(ords)))
        for j, c in enumerate(ords):
            x_ord[:, j] = np.where(c.missing, np.nan, c.values)
        x_cat = np.empty((n, len(cats)), dtype=np.int64)
        for j, c in enumerate(cats):
            x_cat[:, j] = np.where(c.values < 0, len(c.levels), c.values)
        levels = [c.levels for c in cats]
        n_groups = max([3] + [len(lv) + 1 for lv in levels])
        return cls([c.name for c in predictors], is_ord, np.flatnonzero(is_ord),
                   np.flatnonzero(~is_ord), x_ord, x_cat, levels, n_groups)

    def node_codes(self, rows):
        """Grouped codes for every predictor on ``rows``.

        Returns ``(codes, cuts)``: an (n_rows, M) integer matrix and the
        per-predictor mean used to split ordinal variables (NaN for
        categorical ones).
        """
        m = len(self.names)
        codes = np.empty((len(rows), m), dtype=np.int64)
        cuts = np.full(m, np.nan)
        if len(self.ord_pos):
            x = self.x_ord[rows]
            miss = np.isnan(x)
            cnt = (~miss).sum(axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = np.where(cnt > 0, np.nansum(x, axis=0) / np.maximum(cnt, 1), np.nan)
            grp = np.where(x <= mean[None, :], 0, 1)
            codes[:, self.ord_pos] = np.where(miss, 2, grp)
            cuts[self.ord_pos] = mean
        if len(self.cat_pos):
            codes[:, self.cat_pos] = self.x_cat[rows]
        return codes, cuts


# ---------------------------------------------------------------------------
# files


def read_roles(path):
    roles = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected '<name> <code>'")
            name, code = parts
            try:
                roles[name] = Role(code.lower())
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown role code {code!r} for column {name!r}") from None
    return roles


def read_columns(data_path, roles, roles_path=None, treatment_reference=None, require_all=True):
    """Parse the columns of a CSV file that have a (non-excluded) role.

    With ``require_all`` every header must have a role and every role must
    name a header; otherwise unknown headers are skipped and absent columns
    are ignored (used when routing new cases through a fitted tree).
    """
    src = os.fspath(data_path)
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{src}: empty file") from None
        rows = [r for r in reader if r]
    if require_all:
        where = roles_path or "roles"
        unknown = [name for name in roles if name not in header]
        if unknown:
            raise DataError(f"{where}: column {unknown[0]!r} not in data file {src}")
        for h in header:
            if h not in roles:
                raise DataError(f"{where}: no role given for column {h!r}")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{src}: row {i + 2} has {len(r)} fields, expected {len(header)}")
    cols = []
    for j, name in enumerate(header):
        role = roles.get(name, Role.EXCLUDED)
        if role is Role.EXCLUDED:
            continue
        cells = [r[j].strip() for r in rows]
        cols.append(_parse_column(src, name, role, cells, treatment_reference))
    return cols


def load_csv(data_path, roles_path=None, roles=None, treatment_reference=None):
    """Read a headed CSV file and its roles file into a :class:`Dataset`.

    Cells equal to ``NA`` or empty are missing. Treatment levels are ordered by
    first appearance unless ``treatment_reference`` names the level to put
    first.
    """
    if roles is None:
        if roles_path is None:
            raise DataError("a roles file is required")
        roles = read_roles(roles_path)
    cols = read_columns(data_path, roles, roles_path, treatment_reference)
    return Dataset(cols, os.fspath(data_path))


def _parse_column(src, name, role, cells, reference=None):
    miss = np.array([c in MISSING_TOKENS for c in cells], dtype=bool)
    if role in (Role.CATEGORICAL, Role.TREATMENT):
        levels = _first_appearance([c for c, m in zip(cells, miss) if not m])
        if role is Role.TREATMENT and reference is not None:
            if reference not in levels:
                raise DataError(f"{src}: reference level {reference!r} not found in {name!r}")
            levels.remove(reference)
            levels.insert(0, reference)
        index = {v: i for i, v in enumerate(levels)}
        codes = np.array([-1 if m else index[c] for c, m in zip(cells, miss)], dtype=np.int64)
        return Column(name, role, codes, miss, tuple(levels))
    vals = np.zeros(len(cells))
    for i, (c, m) in enumerate(zip(cells, miss)):
        if m:
            continue
        try:
            vals[i] = float(c)
        except ValueError:
            raise DataError(f"{src}: non-numeric value {c!r} in column {name!r} (row {i + 2})") from None
        if not np.isfinite(vals[i]):
            raise DataError(f"{src}: non-finite value {c!r} in column {name!r} (row {i + 2})")
    return Column(name, role, vals, miss)


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(dataset, path=None):
    """Write ``dataset`` as CSV (missing cells as ``NA``); returns the text if ``path`` is None."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([c.name for c in dataset.columns])
    cols = [c.labels() for c in dataset.columns]
    for i in range(dataset.n_rows):
        w.writerow([_fmt(col[i]) for col in cols])
    text = buf.getvalue()
    if path is None:
        return text
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


def write_roles(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for c in dataset.columns:
            fh.write(f"{c.name} {c.role.value}\n")


def gbsg2_paths():
    """Paths of the bundled German Breast Cancer Study Group 2 data and roles files."""
    here = os.path.join(os.path.dirname(__file__), "data")
    return os.path.join(here, "gbsg2.csv"), os.path.join(here, "gbsg2.roles")


def load_gbsg2():
    return load_csv(*gbsg2_paths())
