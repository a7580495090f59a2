"""Crossed-design datasets, stacked data views, and CSV ingestion.

Observations are cross-classified by two grouping factors with m and m'
levels.  We keep the convention m >= m' throughout: it decides which
grouping is eliminated blockwise by the sparse solvers, so ingestion
relabels the groupings if needed to enforce it.

The fitting algorithms never touch raw cells directly; they work off
row-stacks over one grouping and block-diagonal arrangements of the other,
which ``build_views`` precomputes once per dataset.
"""

import csv
import weakref
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataError, ParseError, ShapeMismatchError

__all__ = [
    "Cell",
    "CrossedDataset",
    "StackedViews",
    "build_views",
    "get_views",
    "ingest_csv",
    "export_csv",
]


@dataclass(frozen=True)
class Cell:
    """Data for one (i, i') cell: response plus the three design matrices."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Zp: np.ndarray

    @property
    def n(self):
        return self.y.shape[0]


@dataclass(frozen=True)
class CrossedDataset:
    """Responses and design matrices for every non-empty cell.

    ``cells`` maps (i, iprime) with 0-based indices to a Cell; absent keys
    mean the cell holds no observations.  All cells share the fixed and
    random effect dimensions p, q and q'.
    """

    m: int
    mprime: int
    p: int
    q: int
    qprime: int
    cells: dict = field(default_factory=dict)
    label_maps: dict | None = None

    def __post_init__(self):
        if not (self.m >= self.mprime >= 1):
            raise ShapeMismatchError(
                f"grouping sizes must satisfy m >= m' >= 1, got m={self.m}, m'={self.mprime}"
            )
        total = 0
        cells = {}
        for key, cell in self.cells.items():
            i, ip = key
            if not (0 <= i < self.m and 0 <= ip < self.mprime):
                raise ShapeMismatchError(f"cell index {key} out of range")
            if not isinstance(cell, Cell):
                cell = Cell(*cell)
            y = np.asarray(cell.y, dtype=float).reshape(-1)
            X = np.atleast_2d(np.asarray(cell.X, dtype=float))
            Z = np.atleast_2d(np.asarray(cell.Z, dtype=float))
            Zp = np.atleast_2d(np.asarray(cell.Zp, dtype=float))
            n = y.shape[0]
            if n == 0:
                continue  # empty cells are represented by absence
            for name, mat, ncol in (("X", X, self.p), ("Z", Z, self.q), ("Z'", Zp, self.qprime)):
                if mat.shape != (n, ncol):
                    raise ShapeMismatchError(
                        f"cell {key}: {name} has shape {mat.shape}, expected ({n}, {ncol})"
                    )
            cells[(i, ip)] = Cell(y, X, Z, Zp)
            total += n
        if total < 1:
            raise ShapeMismatchError("dataset holds no observations")
        object.__setattr__(self, "cells", cells)

    @property
    def n_total(self):
        return sum(c.n for c in self.cells.values())

    def n_cell(self, i, ip):
        cell = self.cells.get((i, ip))
        return 0 if cell is None else cell.n

    def sorted_items(self):
        """Cells in deterministic (i ascending, then i' ascending) order."""
        return sorted(self.cells.items())


@dataclass(frozen=True)
class StackedViews:
    """Precomputed stacks and block-diagonal arrangements of a dataset.

    Per first-grouping level i: ``y_i[i]`` stacks the cell responses over
    i', ``X_i``/``Z_i`` likewise, and ``Zp_bd_i[i]`` places each Z'
    sub-block in block column i' of an n_i. x (m'q') matrix (zero block
    columns where the cell is empty).  Per second-grouping level i':
    ``y_ip``/``X_ip``/``Zp_ip`` stack over i, and ``Z_ip`` carries the
    matching Z sub-blocks for residual computations.  ``cells_in_i`` and
    ``cells_in_ip`` record (other-index, start, stop) row spans inside the
    respective stacks.
    """

    m: int
    mprime: int
    p: int
    q: int
    qprime: int
    n_i: np.ndarray
    n_ip: np.ndarray
    n_total: int
    y: np.ndarray
    X: np.ndarray
    y_i: list
    X_i: list
    Z_i: list
    Zp_bd_i: list
    cells_in_i: list
    y_ip: list
    X_ip: list
    Zp_ip: list
    Z_ip: list
    cells_in_ip: list
    row_group_ip: list  # per i': first-grouping index of each stacked row
    # Gram blocks reused every iteration by the variance updates and the
    # lower-bound evaluation
    XtX: np.ndarray  # (p, p)
    ZtZ_i: np.ndarray  # (m, q, q)
    ZtX_i: np.ndarray  # (m, q, p)
    ZtZp_i: np.ndarray  # (m, q, m'q'), cellwise Z'Zp in block columns
    ZptZp_ip: np.ndarray  # (m', q', q')
    ZptX_ip: np.ndarray  # (m', q', p)


def build_views(ds):
    """Assemble all stacked views of a dataset in deterministic cell order."""
    m, mp = ds.m, ds.mprime
    p, q, qp = ds.p, ds.q, ds.qprime

    y_i, X_i, Z_i, Zp_bd_i, cells_in_i = [], [], [], [], []
    n_i = np.zeros(m, dtype=int)
    for i in range(m):
        present = [(ip, ds.cells[(i, ip)]) for ip in range(mp) if (i, ip) in ds.cells]
        rows = sum(c.n for _, c in present)
        n_i[i] = rows
        y_blk = np.zeros(rows)
        X_blk = np.zeros((rows, p))
        Z_blk = np.zeros((rows, q))
        Zp_blk = np.zeros((rows, mp * qp))
        spans = []
        at = 0
        for ip, c in present:
            sl = slice(at, at + c.n)
            y_blk[sl] = c.y
            X_blk[sl] = c.X
            Z_blk[sl] = c.Z
            Zp_blk[sl, ip * qp : (ip + 1) * qp] = c.Zp
            spans.append((ip, at, at + c.n))
            at += c.n
        y_i.append(y_blk)
        X_i.append(X_blk)
        Z_i.append(Z_blk)
        Zp_bd_i.append(Zp_blk)
        cells_in_i.append(spans)

    y_ip, X_ip, Zp_ip, Z_ip, cells_in_ip, row_group_ip = [], [], [], [], [], []
    n_ip = np.zeros(mp, dtype=int)
    for ip in range(mp):
        present = [(i, ds.cells[(i, ip)]) for i in range(m) if (i, ip) in ds.cells]
        rows = sum(c.n for _, c in present)
        n_ip[ip] = rows
        y_blk = np.zeros(rows)
        X_blk = np.zeros((rows, p))
        Zp_blk = np.zeros((rows, qp))
        Z_blk = np.zeros((rows, q))
        groups = np.zeros(rows, dtype=int)
        spans = []
        at = 0
        for i, c in present:
            sl = slice(at, at + c.n)
            y_blk[sl] = c.y
            X_blk[sl] = c.X
            Zp_blk[sl] = c.Zp
            Z_blk[sl] = c.Z
            groups[sl] = i
            spans.append((i, at, at + c.n))
            at += c.n
        y_ip.append(y_blk)
        X_ip.append(X_blk)
        Zp_ip.append(Zp_blk)
        Z_ip.append(Z_blk)
        cells_in_ip.append(spans)
        row_group_ip.append(groups)

    n_total = int(n_i.sum())
    if n_total != int(n_ip.sum()):
        raise ShapeMismatchError("row stack totals disagree")  # pragma: no cover

    X_all = np.vstack(X_i) if m else np.zeros((0, p))
    return StackedViews(
        m=m,
        mprime=mp,
        p=p,
        q=q,
        qprime=qp,
        n_i=n_i,
        n_ip=n_ip,
        n_total=n_total,
        y=np.concatenate(y_i) if m else np.zeros(0),
        X=X_all,
        y_i=y_i,
        X_i=X_i,
        Z_i=Z_i,
        Zp_bd_i=Zp_bd_i,
        cells_in_i=cells_in_i,
        y_ip=y_ip,
        X_ip=X_ip,
        Zp_ip=Zp_ip,
        Z_ip=Z_ip,
        cells_in_ip=cells_in_ip,
        row_group_ip=row_group_ip,
        XtX=X_all.T @ X_all,
        ZtZ_i=np.stack([Z_i[i].T @ Z_i[i] for i in range(m)]),
        ZtX_i=np.stack([Z_i[i].T @ X_i[i] for i in range(m)]),
        ZtZp_i=np.stack([Z_i[i].T @ Zp_bd_i[i] for i in range(m)]),
        ZptZp_ip=np.stack([Zp_ip[ip].T @ Zp_ip[ip] for ip in range(mp)]),
        ZptX_ip=np.stack([Zp_ip[ip].T @ X_ip[ip] for ip in range(mp)]),
    )


_VIEWS_CACHE = {}


def get_views(ds):
    """Memoised ``build_views``; keyed by dataset identity.

    Stacked views are pure functions of the dataset (which is immutable by
    convention), so repeated variance updates and bound evaluations can
    share one set.
    """
    key = id(ds)
    hit = _VIEWS_CACHE.get(key)
    if hit is not None and hit[0]() is ds:
        return hit[1]
    views = build_views(ds)
    for stale in [k for k, (ref, _) in _VIEWS_CACHE.items() if ref() is None]:
        del _VIEWS_CACHE[stale]
    _VIEWS_CACHE[key] = (weakref.ref(ds), views)
    return views


CSV_GROUP_COLUMNS = ("i", "iprime")


def _parse_header(header):
    cols = [h.strip() for h in header]
    if len(cols) < 4 or cols[0] != "i" or cols[1] != "iprime" or cols[2] != "y":
        raise ParseError("header must start with i,iprime,y")
    p = sum(1 for c in cols if c.startswith("x"))
    q = sum(1 for c in cols if c.startswith("z") and not c.startswith("zp"))
    qp = sum(1 for c in cols if c.startswith("zp"))
    expect = (
        ["i", "iprime", "y"]
        + [f"x{j + 1}" for j in range(p)]
        + [f"z{j + 1}" for j in range(q)]
        + [f"zp{j + 1}" for j in range(qp)]
    )
    if cols != expect or min(p, q, qp) < 1:
        raise ParseError(f"unexpected header {cols}; expected {expect}")
    return p, q, qp


def ingest_csv(path):
    """Read a crossed-design CSV into a CrossedDataset.

    Columns are ``i,iprime,y,x1..xp,z1..zq,zp1..zpq'``; group labels may be
    arbitrary strings.  Labels are mapped to contiguous indices in order of
    first appearance, and the groupings are swapped if necessary so that
    the larger one becomes i (ties keep the input labeling).  The label
    maps used are recorded on the returned dataset.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataError(f"{path} is empty") from None
        p, q, qp = _parse_header(header)
        width = 3 + p + q + qp
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"line {lineno}: expected {width} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: non-numeric field ({exc})") from None
            rows.append((row[0], row[1], vals))
    if not rows:
        raise EmptyDataError(f"{path} holds no observation rows")

    labels_a, labels_b = [], []
    seen_a, seen_b = {}, {}
    for a, b, _ in rows:
        if a not in seen_a:
            seen_a[a] = len(labels_a)
            labels_a.append(a)
        if b not in seen_b:
            seen_b[b] = len(labels_b)
            labels_b.append(b)

    swapped = len(labels_a) < len(labels_b)
    if swapped:
        seen_i, seen_ip = seen_b, seen_a
        labels_i, labels_ip = labels_b, labels_a
    else:
        seen_i, seen_ip = seen_a, seen_b
        labels_i, labels_ip = labels_a, labels_b

    buckets = {}
    for a, b, vals in rows:
        key = (seen_i[b], seen_ip[a]) if swapped else (seen_i[a], seen_ip[b])
        buckets.setdefault(key, []).append(vals)

    cells = {}
    for key, recs in buckets.items():
        arr = np.asarray(recs, dtype=float)
        cells[key] = Cell(
            y=arr[:, 0],
            X=arr[:, 1 : 1 + p],
            Z=arr[:, 1 + p : 1 + p + q],
            Zp=arr[:, 1 + p + q :],
        )

    label_maps = {
        "i": list(labels_i),
        "iprime": list(labels_ip),
        "swapped": swapped,
        "tie": len(labels_i) == len(labels_ip),
    }
    return CrossedDataset(
        m=len(labels_i),
        mprime=len(labels_ip),
        p=p,
        q=q,
        qprime=qp,
        cells=cells,
        label_maps=label_maps,
    )


def export_csv(ds, path):
    """Write a dataset back to the ingestion CSV schema.

    Rows come out in deterministic cell order; original group labels are
    used when the dataset carries label maps.
    """
    maps = ds.label_maps or {}
    labels_i = maps.get("i", [str(i + 1) for i in range(ds.m)])
    labels_ip = maps.get("iprime", [str(ip + 1) for ip in range(ds.mprime)])
    swapped = maps.get("swapped", False)
    header = (
        ["i", "iprime", "y"]
        + [f"x{j + 1}" for j in range(ds.p)]
        + [f"z{j + 1}" for j in range(ds.q)]
        + [f"zp{j + 1}" for j in range(ds.qprime)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for (i, ip), cell in ds.sorted_items():
            la, lb = labels_i[i], labels_ip[ip]
            if swapped:
                la, lb = lb, la
            for r in range(cell.n):
                writer.writerow(
                    [la, lb, repr(float(cell.y[r]))]
                    + [repr(float(v)) for v in cell.X[r]]
                    + [repr(float(v)) for v in cell.Z[r]]
                    + [repr(float(v)) for v in cell.Zp[r]]
                )


def dataset_descriptor(ds):
    """JSON-serialisable summary of dimensions and label maps."""
    return {
        "m": ds.m,
        "mprime": ds.mprime,
        "p": ds.p,
        "q": ds.q,
        "qprime": ds.qprime,
        "n_total": ds.n_total,
        "n_cells": len(ds.cells),
        "label_maps": ds.label_maps,
    }
