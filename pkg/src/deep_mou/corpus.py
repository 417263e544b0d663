"""Document-term count matrices: validated sparse storage and file formats.

Two on-disk formats are supported:

* triplet files: UTF-8, comma-separated ``doc,term,count`` rows with an
  optional ``#dims n T`` header (0-based indices, counts >= 1);
* dense CSV, optionally with a class label in the first column (the
  distribution format of the CNAE datasets).

Label files hold one integer per line.  Matrices are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

__all__ = [
    "CorpusFormatError",
    "SparseDocTermMatrix",
    "load_triplets",
    "write_triplets",
    "load_dense_csv",
    "read_labels",
    "write_labels",
]


class CorpusFormatError(ValueError):
    """Malformed corpus file; message carries the offending line number."""


@dataclass(frozen=True)
class SparseDocTermMatrix:
    """n_docs x n_terms nonnegative integer counts stored as sorted triplets.

    ``rows``/``cols``/``counts`` are parallel arrays ordered by
    (doc, term), which doubles as a CSR layout via :attr:`indptr`.
    Documents with zero total are allowed; they simply have no entries.
    """

    n_docs: int
    n_terms: int
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray
    doc_totals: np.ndarray = field(default=None)
    indptr: np.ndarray = field(default=None)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if not (rows.shape == cols.shape == counts.shape) or rows.ndim != 1:
            raise ValueError("rows, cols, counts must be parallel 1-D arrays")
        if self.n_docs < 0 or self.n_terms < 0:
            raise ValueError("negative dimensions")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n_docs:
                raise ValueError("doc index out of range")
            if cols.min() < 0 or cols.max() >= self.n_terms:
                raise ValueError("term index out of range")
            if counts.min() < 1:
                raise ValueError("sparse entries must have count >= 1")
        order = np.lexsort((cols, rows))
        rows, cols, counts = rows[order], cols[order], counts[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if np.any(dup):
                k = int(np.nonzero(dup)[0][0])
                raise ValueError(f"duplicate (doc, term) pair ({rows[k]}, {cols[k]})")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "counts", counts)
        totals = np.bincount(rows, weights=counts, minlength=self.n_docs).astype(np.int64)
        object.__setattr__(self, "doc_totals", totals)
        indptr = np.zeros(self.n_docs + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.n_docs), out=indptr[1:])
        object.__setattr__(self, "indptr", indptr)
        for arr in (self.rows, self.cols, self.counts, self.doc_totals, self.indptr):
            arr.setflags(write=False)

    @classmethod
    def from_dense(cls, dense) -> "SparseDocTermMatrix":
        arr = np.asarray(dense)
        if arr.ndim != 2:
            raise ValueError("expected a 2-D array")
        r, c = np.nonzero(arr)
        return cls(arr.shape[0], arr.shape[1], r, c, arr[r, c])

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_docs, self.n_terms), dtype=np.int64)
        out[self.rows, self.cols] = self.counts
        return out

    def document(self, d: int) -> np.ndarray:
        """Dense count vector of one document."""
        out = np.zeros(self.n_terms, dtype=np.int64)
        sl = slice(self.indptr[d], self.indptr[d + 1])
        out[self.cols[sl]] = self.counts[sl]
        return out

    def entry_indices_for_docs(self, docs) -> np.ndarray:
        """Positions in the entry arrays belonging to the given documents."""
        docs = np.asarray(docs, dtype=np.int64)
        if docs.size == 0:
            return np.empty(0, dtype=np.int64)
        starts = self.indptr[docs]
        lens = self.indptr[docs + 1] - starts
        offsets = np.concatenate(([0], np.cumsum(lens)))
        total = int(offsets[-1])
        if total == 0:
            return np.empty(0, dtype=np.int64)
        return np.repeat(starts - offsets[:-1], lens) + np.arange(total, dtype=np.int64)

    def sparsity(self) -> float:
        """Fraction of zero cells, 1 - nnz / (n * T)."""
        cells = self.n_docs * self.n_terms
        if cells == 0:
            return 0.0
        return 1.0 - self.nnz / cells

    def zero_total_docs(self) -> np.ndarray:
        return np.nonzero(self.doc_totals == 0)[0]

    def to_scipy_csr(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (self.counts.astype(np.float64), self.cols, self.indptr),
            shape=(self.n_docs, self.n_terms),
        )


def _parse_dims_header(line: str, lineno: int) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 3 or parts[0] != "#dims":
        raise CorpusFormatError(f"line {lineno}: malformed header {line!r}")
    try:
        n, t = int(parts[1]), int(parts[2])
    except ValueError:
        raise CorpusFormatError(f"line {lineno}: non-integer dimensions in header") from None
    if n < 0 or t < 0:
        raise CorpusFormatError(f"line {lineno}: negative dimensions in header")
    return n, t


def load_triplets(path) -> SparseDocTermMatrix:
    """Read a ``doc,term,count`` triplet file into a validated matrix.

    Dimensions come from a ``#dims n T`` header when present, otherwise
    from max index + 1.  Malformed lines, counts < 1, out-of-range
    indices, and duplicate pairs raise :class:`CorpusFormatError` with
    the 1-based line number.
    """
    dims = None
    rows, cols, counts = [], [], []
    seen: set[tuple[int, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if dims is None and not rows:
                    dims = _parse_dims_header(line, lineno)
                    continue
                raise CorpusFormatError(f"line {lineno}: unexpected comment {line!r}")
            parts = line.split(",")
            if len(parts) != 3:
                raise CorpusFormatError(f"line {lineno}: expected 'doc,term,count', got {line!r}")
            try:
                d, t, c = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise CorpusFormatError(f"line {lineno}: non-integer field in {line!r}") from None
            if d < 0 or t < 0:
                raise CorpusFormatError(f"line {lineno}: negative index in {line!r}")
            if c <= 0:
                raise CorpusFormatError(f"line {lineno}: count must be >= 1, got {c}")
            if dims is not None and (d >= dims[0] or t >= dims[1]):
                raise CorpusFormatError(f"line {lineno}: index ({d}, {t}) outside declared dims {dims}")
            if (d, t) in seen:
                raise CorpusFormatError(f"line {lineno}: duplicate (doc, term) pair ({d}, {t})")
            seen.add((d, t))
            rows.append(d)
            cols.append(t)
            counts.append(c)
    if dims is None:
        n = max(rows) + 1 if rows else 0
        t = max(cols) + 1 if cols else 0
        dims = (n, t)
    return SparseDocTermMatrix(dims[0], dims[1], np.array(rows, dtype=np.int64),
                               np.array(cols, dtype=np.int64), np.array(counts, dtype=np.int64))


def write_triplets(X: SparseDocTermMatrix, path) -> None:
    """Write a matrix in the triplet format, always with a dims header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dims {X.n_docs} {X.n_terms}\n")
        for d, t, c in zip(X.rows, X.cols, X.counts):
            fh.write(f"{d},{t},{c}\n")


def load_dense_csv(path, label_column: bool = False):
    """Read a rectangular integer CSV, optionally with a leading label column.

    Returns ``(matrix, labels)`` where ``labels`` is ``None`` unless
    ``label_column`` is set; labels are re-indexed densely to ``0..k-1``
    preserving first-occurrence order.  Ragged rows and non-integer
    fields raise :class:`CorpusFormatError`.
    """
    raw_labels: list[int] = []
    rows, cols, counts = [], [], []
    width = None
    n = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if label_column and width < 2:
                    raise CorpusFormatError(f"line {lineno}: no count columns after the label")
            elif len(parts) != width:
                raise CorpusFormatError(f"line {lineno}: ragged row ({len(parts)} fields, expected {width})")
            try:
                values = [int(p) for p in parts]
            except ValueError:
                raise CorpusFormatError(f"line {lineno}: non-integer field in row") from None
            if label_column:
                raw_labels.append(values[0])
                values = values[1:]
            for t, c in enumerate(values):
                if c < 0:
                    raise CorpusFormatError(f"line {lineno}: negative count {c}")
                if c > 0:
                    rows.append(n)
                    cols.append(t)
                    counts.append(c)
            n += 1
    n_terms = (width - (1 if label_column else 0)) if width is not None else 0
    X = SparseDocTermMatrix(n, n_terms, np.array(rows, dtype=np.int64),
                            np.array(cols, dtype=np.int64), np.array(counts, dtype=np.int64))
    if not label_column:
        return X, None
    remap: dict[int, int] = {}
    labels = np.empty(n, dtype=np.int64)
    for d, lab in enumerate(raw_labels):
        if lab not in remap:
            remap[lab] = len(remap)
        labels[d] = remap[lab]
    return X, labels


def read_labels(path) -> np.ndarray:
    """One integer label per line."""
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise CorpusFormatError(f"line {lineno}: non-integer label {line!r}") from None
    return np.array(labels, dtype=np.int64)


def write_labels(labels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in np.asarray(labels, dtype=np.int64):
            fh.write(f"{int(lab)}\n")
