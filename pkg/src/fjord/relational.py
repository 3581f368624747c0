"""Columnar tables, CSV round-tripping, hash join and join-size histograms."""

from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

KINDS = ("int64", "float32", "string", "float32-array")
ARRAY_SEP = ";"


@dataclass(frozen=True)
class DataType:
    kind: str
    dim: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown data type kind {self.kind!r}")
        if self.kind != "float32-array" and self.dim != 1:
            raise ValueError(f"{self.kind} columns have dim 1")
        if self.dim < 1:
            raise ValueError("dim must be positive")

    @property
    def slots(self) -> int:
        """Value slots one row of this type occupies."""
        return self.dim

    def to_json(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}

    @classmethod
    def from_json(cls, obj: dict | str) -> "DataType":
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["kind"], int(obj.get("dim", 1)))


INT64 = DataType("int64")
FLOAT32 = DataType("float32")
STRING = DataType("string")


def float_array(dim: int) -> DataType:
    return DataType("float32-array", dim)


def _coerce(values, dtype: DataType) -> np.ndarray:
    if dtype.kind == "int64":
        arr = np.asarray(values, dtype=np.int64)
    elif dtype.kind == "float32":
        arr = np.asarray(values, dtype=np.float32)
    elif dtype.kind == "string":
        arr = np.asarray(values, dtype=object)
    else:
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim == 1 and arr.shape[0] == 0:
            arr = arr.reshape(0, dtype.dim)
        if arr.ndim != 2 or arr.shape[1] != dtype.dim:
            raise ValueError(f"array column needs shape (rows, {dtype.dim}), got {arr.shape}")
    if dtype.kind != "float32-array" and arr.ndim != 1:
        raise ValueError(f"{dtype.kind} column must be one-dimensional")
    return arr


@dataclass(frozen=True)
class Column:
    """A named, typed column. ``lineage`` is the base table it came from."""

    name: str
    dtype: DataType
    values: np.ndarray = field(repr=False)
    lineage: str = ""

    def __post_init__(self) -> None:
        arr = _coerce(self.values, self.dtype)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def take(self, idx: np.ndarray) -> "Column":
        return Column(self.name, self.dtype, self.values[idx], self.lineage)


@dataclass(frozen=True)
class Table:
    """Immutable columnar relation. All columns share ``row_count``."""

    name: str
    columns: tuple[Column, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in {self.name}: {names}")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise ValueError(f"ragged columns in table {self.name}")

    @classmethod
    def from_arrays(
        cls, name: str, data: dict[str, tuple[DataType, Sequence]], lineage: str | None = None
    ) -> "Table":
        src = name if lineage is None else lineage
        return cls(name, tuple(Column(k, dt, v, src) for k, (dt, v) in data.items()))

    @property
    def row_count(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    @property
    def schema(self) -> list[tuple[str, DataType]]:
        return [(c.name, c.dtype) for c in self.columns]

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(f"table {self.name} has no column {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def take(self, idx: np.ndarray) -> "Table":
        return Table(self.name, tuple(c.take(idx) for c in self.columns))

    def select(self, names: Iterable[str]) -> "Table":
        return Table(self.name, tuple(self.column(n) for n in names))


# --------------------------------------------------------------------- CSV


def _format(values: np.ndarray, dtype: DataType) -> list[str]:
    if dtype.kind == "float32-array":
        cells = values.astype(np.float32).astype(str)
        return [ARRAY_SEP.join(row) for row in cells]
    if dtype.kind == "string":
        return [str(v) for v in values]
    return list(values.astype(str))


def _parse(cells: list[str], dtype: DataType) -> np.ndarray:
    if dtype.kind == "int64":
        return np.array([int(c) for c in cells], dtype=np.int64)
    if dtype.kind == "float32":
        return np.array(cells, dtype=np.float32) if cells else np.empty(0, np.float32)
    if dtype.kind == "string":
        return np.array(cells, dtype=object)
    rows = [c.split(ARRAY_SEP) for c in cells]
    for r in rows:
        if len(r) != dtype.dim:
            raise ValueError(f"array cell has {len(r)} values, expected {dtype.dim}")
    return np.array(rows, dtype=np.float32).reshape(len(rows), dtype.dim)


def load_csv(path: str | Path, schema: Sequence[tuple[str, DataType]], name: str | None = None) -> Table:
    """Read an RFC-4180 style CSV with a header row matching ``schema``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        expected = [n for n, _ in schema]
        if header != expected:
            raise ValueError(f"{path}: header {header} does not match schema {expected}")
        rows = list(reader)
    for i, r in enumerate(rows):
        if len(r) != len(schema):
            raise ValueError(f"{path}: row {i + 1} has {len(r)} fields, expected {len(schema)}")
    table_name = name or path.stem
    cols = []
    for j, (cname, dtype) in enumerate(schema):
        cols.append(Column(cname, dtype, _parse([r[j] for r in rows], dtype), table_name))
    return Table(table_name, tuple(cols))


def write_csv(table: Table, path: str | Path) -> None:
    """Write ``table`` in canonical form: shortest float32 repr, '\\n' line ends."""
    formatted = [_format(c.values, c.dtype) for c in table.columns]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.column_names)
        writer.writerows(zip(*formatted))


# --------------------------------------------------------------- hash join


def _join_codes(left: Column, right: Column) -> tuple[np.ndarray, np.ndarray]:
    if left.dtype != right.dtype:
        raise TypeError(f"join keys {left.name} and {right.name} have different types")
    if left.dtype.kind == "float32-array":
        raise TypeError("array columns cannot be join keys")
    if left.dtype.kind == "int64":
        return left.values, right.values
    both = np.concatenate([left.values, right.values])
    _, codes = np.unique(both.astype(str) if left.dtype.kind == "string" else both, return_inverse=True)
    codes = codes.astype(np.int64)
    return codes[: len(left)], codes[len(left):]


def join_indices(left_keys: Column, right_keys: Column) -> tuple[np.ndarray, np.ndarray]:
    """Row-index pairs of the equi-join, ordered by (left row, right row)."""
    lk, rk = _join_codes(left_keys, right_keys)
    return kernels.hash_join_pairs(lk, rk)


def hash_join(
    left: Table, right: Table, left_key: str, right_key: str, threads: int = 1, name: str | None = None
) -> Table:
    """Inner equi-join. The smaller input is the build side (ties build the left).

    Output columns are the left columns followed by the right columns minus
    the right key. Rows follow left row order, then build-side match order.
    """
    lcol, rcol = left.column(left_key), right.column(right_key)
    li, ri = join_indices(lcol, rcol)
    taken: list[tuple[Column, np.ndarray]] = [(c, li) for c in left.columns]
    taken += [(c, ri) for c in right.columns if c.name != right_key]
    clash = {c.name for c in left.columns} & {c.name for c in right.columns if c.name != right_key}
    if clash:
        raise ValueError(f"column name clash in join: {sorted(clash)}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(lambda ci: ci[0].take(ci[1]), taken))
    else:
        cols = [c.take(idx) for c, idx in taken]
    return Table(name or f"({left.name}*{right.name})", tuple(cols))


# -------------------------------------------------------------- histograms


@dataclass(frozen=True)
class Histogram:
    """Equi-depth histogram. Bucket b covers the closed range [lows[b], highs[b]]."""

    column: str
    lows: np.ndarray
    highs: np.ndarray
    counts: np.ndarray
    distinct: np.ndarray
    total_distinct: int
    row_count: int
    integral: bool

    @property
    def bucket_count(self) -> int:
        return int(self.counts.shape[0])


def _numeric_keys(col: Column) -> tuple[np.ndarray, bool]:
    if col.dtype.kind == "int64":
        return col.values.astype(np.int64), True
    if col.dtype.kind == "float32":
        return col.values.astype(np.float64), False
    if col.dtype.kind == "string":
        # stable 63-bit hash so histograms of two string columns share a domain
        hashed = [
            int.from_bytes(hashlib.blake2b(str(v).encode(), digest_size=8).digest(), "little") >> 1
            for v in col.values
        ]
        return np.array(hashed, dtype=np.int64), True
    raise TypeError("array columns have no histogram")


def build_histogram(col: Column, buckets: int = 100) -> Histogram:
    """Equi-depth histogram with exact distinct counts.

    Chunks start with sizes differing by at most one; a boundary that would
    split a run of equal values moves to the end of that run, and emptied
    buckets are dropped.
    """
    if buckets < 1:
        raise ValueError("bucket count must be positive")
    vals, integral = _numeric_keys(col)
    v = np.sort(vals, kind="stable")
    n = v.shape[0]
    empty = np.empty(0, dtype=v.dtype)
    if n == 0:
        z = np.empty(0, dtype=np.int64)
        return Histogram(col.name, empty, empty, z, z, 0, 0, integral)
    sizes = np.full(min(buckets, n), n // min(buckets, n), dtype=np.int64)
    sizes[: n % min(buckets, n)] += 1
    cuts = list(np.cumsum(sizes)[:-1])
    bounds = [0]
    for p in cuts:
        p = int(p)
        if p <= bounds[-1]:
            continue
        if v[p - 1] == v[p]:
            p = int(np.searchsorted(v, v[p], side="right"))
        if bounds[-1] < p < n:
            bounds.append(p)
    bounds.append(n)
    starts = np.array(bounds[:-1])
    ends = np.array(bounds[1:])
    changes = np.concatenate([[1], (v[1:] != v[:-1]).astype(np.int64)])
    run_starts = np.cumsum(changes)
    distinct = run_starts[ends - 1] - run_starts[starts] + 1
    return Histogram(
        column=col.name,
        lows=v[starts],
        highs=v[ends - 1],
        counts=(ends - starts).astype(np.int64),
        distinct=distinct.astype(np.int64),
        total_distinct=int(run_starts[-1]),
        row_count=n,
        integral=integral,
    )


def _overlap_fraction(lo, hi, olo, ohi, distinct, integral: bool) -> np.ndarray:
    if integral:
        return (ohi - olo + 1) / (hi - lo + 1)
    width = hi - lo
    frac = np.where(width > 0, (ohi - olo) / np.where(width > 0, width, 1.0), 1.0)
    # a single shared point still carries one value's share of the bucket
    return np.maximum(frac, 1.0 / distinct)


def estimate_join_cardinality(left: Histogram, right: Histogram) -> float:
    """Sum over overlapping bucket pairs of |L|*|R| / max(V(L), V(R)).

    Counts and distinct values of each bucket are scaled by the fraction of
    the bucket's range that overlaps, assuming uniform spread within buckets.
    """
    if left.bucket_count == 0 or right.bucket_count == 0:
        return 0.0
    lo_l, hi_l = left.lows[:, None].astype(np.float64), left.highs[:, None].astype(np.float64)
    lo_r, hi_r = right.lows[None, :].astype(np.float64), right.highs[None, :].astype(np.float64)
    olo = np.maximum(lo_l, lo_r)
    ohi = np.minimum(hi_l, hi_r)
    hit = olo <= ohi
    if not hit.any():
        return 0.0
    integral = left.integral and right.integral
    fl = _overlap_fraction(lo_l, hi_l, olo, ohi, left.distinct[:, None], integral)
    fr = _overlap_fraction(lo_r, hi_r, olo, ohi, right.distinct[None, :], integral)
    cl = fl * left.counts[:, None]
    cr = fr * right.counts[None, :]
    vl = np.maximum(fl * left.distinct[:, None], 1.0)
    vr = np.maximum(fr * right.distinct[None, :], 1.0)
    est = np.where(hit, cl * cr / np.maximum(vl, vr), 0.0)
    return float(est.sum())
