"""Marginalized Multinomial-Dirichlet document log-densities.

The two-layer model never materializes the latent term-probability
vectors: integrating them out leaves, for a document with counts ``x``
(total ``N``) and a component with concentration ``a`` (total ``A``),

    ln p(x | a) = [ln G(N+1) - sum_t ln G(x_t+1)]            (coefficient)
                  + ln G(A) - ln G(N+A)
                  + sum_{t: x_t>0} [ln G(x_t + a_t) - ln G(a_t)]

with ``G`` the Gamma function.  The coefficient bracket does not depend
on the component, so callers that only compare components (cluster
assignment, allocation conditionals, MH ratios) omit it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import gammaln

__all__ = [
    "ComponentConcentration",
    "log_dirmult",
    "log_dirmult_batch",
    "log_dirmult_components",
    "log_dirmult_gathered",
    "log_multinomial_coefficients",
]

# counts at or below this take the rising-factorial recurrence
# sum_{m<x} ln(a+m) instead of two gammaln calls per entry
_MAX_RISING_COUNT = 32


class ComponentConcentration:
    """Composite Dirichlet concentration of one component pair.

    Holds ``a`` (positive, length T) and its cached total plus log-gamma
    transforms so that one sweep can evaluate many documents against the
    same component without recomputing them.
    """

    __slots__ = ("a", "a_sum", "_lgam_a", "_lgam_a_sum")

    def __init__(self, a, a_sum: float | None = None):
        arr = np.asarray(a, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("concentration must be a nonempty 1-D vector")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise ValueError("concentration entries must be finite and > 0")
        total = float(arr.sum())
        if a_sum is not None and abs(float(a_sum) - total) > 1e-12 * max(1.0, abs(total)):
            raise ValueError("cached a_sum inconsistent with a")
        self.a = arr
        self.a_sum = total
        self._lgam_a = None
        self._lgam_a_sum = None

    @classmethod
    def from_rates(cls, beta_row, alpha_row) -> "ComponentConcentration":
        """Concentration ``beta * (1 + alpha)`` of one (cluster, hidden-group) pair."""
        return cls(np.asarray(beta_row, dtype=np.float64) * (1.0 + np.asarray(alpha_row, dtype=np.float64)))

    @property
    def n_terms(self) -> int:
        return self.a.size

    def lgam_a(self) -> np.ndarray:
        if self._lgam_a is None:
            self._lgam_a = gammaln(self.a)
        return self._lgam_a

    def lgam_a_sum(self) -> float:
        if self._lgam_a_sum is None:
            self._lgam_a_sum = float(gammaln(self.a_sum))
        return self._lgam_a_sum


def _entry_log_terms(counts: np.ndarray, a_at_cols: np.ndarray, lgam_a_at_cols=None) -> np.ndarray:
    """ln G(x + a) - ln G(a) for each sparse entry.

    Small integer counts use the rising-factorial recurrence; anything
    larger falls back to gammaln.
    """
    if counts.size == 0:
        return np.zeros(0, dtype=np.float64)
    cmax = int(counts.max())
    if cmax <= _MAX_RISING_COUNT:
        out = np.log(a_at_cols)
        for m in range(1, cmax):
            mask = counts > m
            out[mask] += np.log(a_at_cols[mask] + m)
        return out
    if lgam_a_at_cols is None:
        lgam_a_at_cols = gammaln(a_at_cols)
    return gammaln(counts + a_at_cols) - lgam_a_at_cols


def log_dirmult(x, conc: ComponentConcentration, include_coefficient: bool = False) -> float:
    """Log-density of one document's dense count vector under one component.

    The term sum runs only over the document's nonzero entries; an empty
    document has log-density 0 for every component.
    """
    counts = np.asarray(x)
    if counts.ndim != 1 or counts.size != conc.n_terms:
        raise ValueError(f"document length {counts.shape} does not match T={conc.n_terms}")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    nz = np.nonzero(counts)[0]
    xs = counts[nz].astype(np.float64)
    total = float(xs.sum())
    val = conc.lgam_a_sum() - float(gammaln(total + conc.a_sum))
    if nz.size:
        val += float(np.sum(gammaln(xs + conc.a[nz]) - conc.lgam_a()[nz]))
    if include_coefficient:
        val += float(gammaln(total + 1.0) - np.sum(gammaln(xs + 1.0)))
    return val


def _column_range(X, conc: ComponentConcentration, d0: int, d1: int) -> np.ndarray:
    e0, e1 = int(X.indptr[d0]), int(X.indptr[d1])
    cols = X.cols[e0:e1]
    data = X.counts[e0:e1]
    terms = _entry_log_terms(data, conc.a[cols], None if data.size == 0 else conc.lgam_a()[cols])
    per_doc = np.bincount(X.rows[e0:e1] - d0, weights=terms, minlength=d1 - d0)
    return conc.lgam_a_sum() - gammaln(X.doc_totals[d0:d1] + conc.a_sum) + per_doc


def log_dirmult_components(X, concs, threads: int = 1) -> np.ndarray:
    """Coefficient-free log-density of every document under every concentration.

    Output column c corresponds to ``concs[c]``.  Threading splits the
    documents into contiguous chunks writing disjoint slices, so results
    are identical for any thread count.
    """
    n = X.n_docs
    for c in concs:
        if c.n_terms != X.n_terms:
            raise ValueError("concentration length does not match the corpus vocabulary")
        c.lgam_a()
        c.lgam_a_sum()
    out = np.empty((n, len(concs)), dtype=np.float64)
    if threads <= 1 or n < 2 * threads:
        for ci, c in enumerate(concs):
            out[:, ci] = _column_range(X, c, 0, n)
        return out
    bounds = np.linspace(0, n, threads + 1).astype(int)

    def work(lo: int, hi: int) -> None:
        for ci, c in enumerate(concs):
            out[lo:hi, ci] = _column_range(X, c, lo, hi)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, int(lo), int(hi))
                   for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        for f in futures:
            f.result()
    return out


def log_dirmult_batch(X, params, threads: int = 1) -> np.ndarray:
    """n x (k1*k2) matrix of coefficient-free log-densities.

    Column ``i * k2 + j`` holds the density under the concentration
    ``beta[i] * (1 + alpha[j])``; each concentration and its log-gamma
    cache is built once and reused for all documents.
    """
    concs = [ComponentConcentration.from_rates(params.beta[i], params.alpha[j])
             for i in range(params.k1) for j in range(params.k2)]
    return log_dirmult_components(X, concs, threads=threads)


def log_dirmult_gathered(entry_counts, entry_cols, entry_doc, doc_totals, conc: ComponentConcentration) -> np.ndarray:
    """Per-document log-densities from pre-gathered sparse entries.

    ``entry_doc`` holds local document indices in ``[0, len(doc_totals))``;
    used by the MH blocks, which evaluate one proposed component against
    just the documents currently assigned to it.
    """
    totals = np.asarray(doc_totals, dtype=np.float64)
    terms = _entry_log_terms(np.asarray(entry_counts), conc.a[entry_cols])
    per_doc = np.bincount(np.asarray(entry_doc), weights=terms, minlength=totals.size)
    return conc.lgam_a_sum() - gammaln(totals + conc.a_sum) + per_doc


def log_multinomial_coefficients(X) -> np.ndarray:
    """ln multinomial coefficient of every document; constant across components."""
    entry_terms = gammaln(X.counts + 1.0)
    per_doc = np.bincount(X.rows, weights=entry_terms, minlength=X.n_docs)
    return gammaln(X.doc_totals + 1.0) - per_doc
