"""Two-layer mixture of Dirichlet-Multinomials fitted by Metropolis-within-Gibbs.

Each document picks a hidden group j with weights ``pi2``, then an
observed cluster i with the column-stochastic conditional weights
``pi1_given_j``; its counts follow the marginalized
Multinomial-Dirichlet with concentration ``beta[i] * (1 + alpha[j])``.
Perturbations ``alpha`` live in (-1, 1) and rates ``beta`` in (0, 1000],
both under flat priors; mixture weights carry Dirichlet(delta) priors.

A sweep updates, in fixed order: z2, z1, pi2, pi1, alpha (reflected
uniform random walk, one row per block), beta (log-scale random walk
with Jacobian correction).  The reported clusters are the k1 top-layer
labels; k2 only adds within-cluster flexibility, and with k2 = 1 alpha
is pinned to zero for identifiability, reducing the model to a Bayesian
mixture of Dirichlet-Multinomials.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from .dirmult import (
    ComponentConcentration,
    _entry_log_terms,
    log_dirmult_batch,
    log_dirmult_gathered,
    log_multinomial_coefficients,
)
from .metrics import Partition, contingency_table
from .numerics import RngStream, log_sum_exp_rows, sample_categorical_rows, sample_dirichlet

__all__ = [
    "ALPHA_BOUND",
    "BETA_MAX",
    "DeepMouParams",
    "LatentAllocations",
    "SamplerConfig",
    "ChainState",
    "ChainTrace",
    "init_state",
    "sample_pi2",
    "sample_pi1",
    "z2_log_weights",
    "z1_log_weights",
    "sample_z2",
    "sample_z1",
    "mh_update_alpha",
    "mh_update_beta",
    "mh_update_scales",
    "aux_gibbs_update",
    "sample_table_counts",
    "log_posterior",
    "run_chain",
    "posterior_assignment",
    "assignment_from_log_densities",
    "consensus_partition",
    "match_labels",
    "posterior_mean_params",
    "write_chain_jsonl",
    "read_chain_jsonl",
    "write_log_posterior_csv",
]

ALPHA_BOUND = 1.0
BETA_MAX = 1000.0
_WEIGHT_TOL = 1e-12


@dataclass
class DeepMouParams:
    """One full parameter state of the two-layer model."""

    pi2: np.ndarray           # (k2,)
    pi1_given_j: np.ndarray   # (k1, k2), column j sums to 1
    alpha: np.ndarray         # (k2, T), entries strictly inside (-1, 1)
    beta: np.ndarray          # (k1, T), entries in (0, 1000]

    def __post_init__(self):
        self.pi2 = np.asarray(self.pi2, dtype=np.float64)
        self.pi1_given_j = np.asarray(self.pi1_given_j, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)

    @property
    def k1(self) -> int:
        return self.pi1_given_j.shape[0]

    @property
    def k2(self) -> int:
        return self.pi2.shape[0]

    @property
    def n_terms(self) -> int:
        return self.beta.shape[1]

    def validate(self) -> None:
        if self.pi1_given_j.shape[1] != self.k2 or self.alpha.shape != (self.k2, self.n_terms):
            raise ValueError("parameter shapes are inconsistent")
        if abs(self.pi2.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("pi2 does not sum to 1")
        col_err = np.abs(self.pi1_given_j.sum(axis=0) - 1.0)
        if np.any(col_err > _WEIGHT_TOL):
            raise ValueError("a pi1 column does not sum to 1")
        if np.any(np.abs(self.alpha) >= ALPHA_BOUND):
            raise ValueError("alpha entries must lie strictly inside (-1, 1)")
        if np.any(self.beta <= 0.0) or np.any(self.beta > BETA_MAX):
            raise ValueError(f"beta entries must lie in (0, {BETA_MAX}]")

    def in_support(self) -> bool:
        return (np.all(np.abs(self.alpha) < ALPHA_BOUND)
                and np.all(self.beta > 0.0) and np.all(self.beta <= BETA_MAX))

    def copy(self) -> "DeepMouParams":
        return DeepMouParams(self.pi2.copy(), self.pi1_given_j.copy(),
                             self.alpha.copy(), self.beta.copy())


@dataclass
class LatentAllocations:
    """Per-document top-layer (z1) and hidden-layer (z2) labels."""

    z1: np.ndarray
    z2: np.ndarray

    def __post_init__(self):
        self.z1 = np.asarray(self.z1, dtype=np.int64)
        self.z2 = np.asarray(self.z2, dtype=np.int64)
        if self.z1.shape != self.z2.shape or self.z1.ndim != 1:
            raise ValueError("z1 and z2 must be parallel 1-D arrays")

    def copy(self) -> "LatentAllocations":
        return LatentAllocations(self.z1.copy(), self.z2.copy())


@dataclass(frozen=True)
class SamplerConfig:
    """Chain settings; defaults follow the desk-scale experiment protocol.

    ``alpha_block``/``beta_block`` set the MH coordinate-block size; 0
    means one block per row.  ``aux_gibbs`` adds an exact
    auxiliary-variable Gibbs draw of the rate and perturbation rows to
    every sweep (see :func:`aux_gibbs_update`); without it the
    random-walk updates alone move too slowly to crystallize onto the
    dominant mode within a few thousand sweeps.  ``scale_step`` sizes a
    1-D multiplicative move of each row (0 disables it), which lets the
    weakly-identified concentration totals traverse.

    Mode-finding happens entirely inside burn-in: the first
    ``alpha_warmup`` sweeps (-1 picks min(burn_in / 2, 800), 0 disables
    both mechanisms) are split across ``start_probes`` short chains
    from fresh random initializations with alpha pinned at zero, the
    best by log-posterior is kept, and the hidden layer is then
    released with retries until it demonstrably forms.  Kept states
    always come from the homogeneous exact kernel.
    """

    iterations: int = 5000
    burn_in: int = 2000
    delta: float = 1.0
    alpha_step: float = 0.05
    beta_step_rel: float = 0.1
    seed: int = 0
    thin: int = 1
    threads: int = 1
    alpha_block: int = 0
    beta_block: int = 0
    aux_gibbs: bool = True
    scale_step: float = 0.3
    alpha_warmup: int = -1
    start_probes: int = 4

    @property
    def parallel_docs(self) -> bool:
        return self.threads > 1

    def validate(self) -> None:
        if self.burn_in < 0 or self.burn_in >= self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.delta <= 0.0:
            raise ValueError("delta must be > 0")
        if self.alpha_step <= 0.0 or self.beta_step_rel <= 0.0:
            raise ValueError("MH step sizes must be > 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.alpha_block < 0 or self.beta_block < 0:
            raise ValueError("block sizes must be >= 0 (0 = whole row)")
        if self.scale_step < 0.0:
            raise ValueError("scale_step must be >= 0 (0 disables scale moves)")
        if self.alpha_warmup >= 0 and self.alpha_warmup > self.burn_in:
            raise ValueError("alpha_warmup cannot exceed burn_in")
        if self.start_probes < 1:
            raise ValueError("start_probes must be >= 1")

    def resolved_alpha_warmup(self) -> int:
        if self.alpha_warmup < 0:
            return min(self.burn_in // 2, 800)
        return self.alpha_warmup


@dataclass(frozen=True)
class ChainState:
    """One kept state: parameters, allocations, log-posterior, MH tallies."""

    iteration: int
    params: DeepMouParams
    alloc: LatentAllocations
    log_posterior: float
    accept_alpha: np.ndarray    # cumulative acceptances per alpha row
    accept_beta: np.ndarray     # cumulative acceptances per beta row


@dataclass
class ChainTrace:
    """Post-burn-in, thinned states in sweep order."""

    states: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def pivot_index(self) -> int:
        """Index of the kept state with maximum log-posterior (first on ties)."""
        if not self.states:
            raise ValueError("empty chain trace")
        lps = np.array([s.log_posterior for s in self.states])
        return int(np.argmax(lps))


def init_state(X, k1: int, k2: int, cfg: SamplerConfig, rng: RngStream):
    """Random allocations, uniform weights, zero alpha, count-seeded beta.

    beta row i is T * (c + 0.5) / (sum(c) + 0.5 T) over the term totals c
    of the documents initially assigned to cluster i, clipped into
    (0, 1000]; an all-uniform corpus therefore starts every rate at 1.
    """
    n = X.n_docs
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    if k1 > n or k2 > n:
        raise ValueError(f"k1={k1}, k2={k2} must not exceed n_docs={n}")
    z1 = rng.gen.integers(0, k1, size=n)
    z2 = rng.gen.integers(0, k2, size=n)
    T = X.n_terms
    beta = np.empty((k1, T), dtype=np.float64)
    entry_z1 = z1[X.rows]
    for i in range(k1):
        sel = entry_z1 == i
        c = np.bincount(X.cols[sel], weights=X.counts[sel], minlength=T)
        beta[i] = T * (c + 0.5) / (c.sum() + 0.5 * T)
    beta = np.minimum(beta, BETA_MAX)
    params = DeepMouParams(
        pi2=np.full(k2, 1.0 / k2),
        pi1_given_j=np.full((k1, k2), 1.0 / k1),
        alpha=np.zeros((k2, T)),
        beta=beta,
    )
    return params, LatentAllocations(z1, z2)


def sample_pi2(z2, k2: int, delta: float, rng: RngStream) -> np.ndarray:
    """Dirichlet draw from the hidden-layer weight conditional."""
    counts = np.bincount(np.asarray(z2, dtype=np.int64), minlength=k2).astype(np.float64)
    return sample_dirichlet(counts + delta, rng)


def sample_pi1(z1, z2, k1: int, k2: int, delta: float, rng: RngStream) -> np.ndarray:
    """Column-stochastic draw from the conditional-weight conditionals.

    Column j is Dirichlet over the (i, j) co-assignment counts plus
    delta; empty hidden groups fall back to the Dirichlet(delta) prior.
    """
    table = np.zeros((k1, k2), dtype=np.float64)
    np.add.at(table, (np.asarray(z1, dtype=np.int64), np.asarray(z2, dtype=np.int64)), 1.0)
    out = np.empty((k1, k2), dtype=np.float64)
    for j in range(k2):
        out[:, j] = sample_dirichlet(table[:, j] + delta, rng)
    return out


def _log_weight_base(params: DeepMouParams):
    with np.errstate(divide="ignore"):
        return np.log(params.pi2), np.log(params.pi1_given_j)


def z2_log_weights(X, params: DeepMouParams, z1, log_dens=None, threads: int = 1) -> np.ndarray:
    """Unnormalized per-document log-weights of the hidden-layer conditional."""
    if log_dens is None:
        log_dens = log_dirmult_batch(X, params, threads=threads)
    n, k1, k2 = X.n_docs, params.k1, params.k2
    z1 = np.asarray(z1, dtype=np.int64)
    dens = log_dens.reshape(n, k1, k2)[np.arange(n), z1, :]
    log_pi2, log_pi1 = _log_weight_base(params)
    return log_pi2[None, :] + log_pi1[z1, :] + dens


def z1_log_weights(X, params: DeepMouParams, z2, log_dens=None, threads: int = 1) -> np.ndarray:
    """Unnormalized per-document log-weights of the top-layer conditional."""
    if log_dens is None:
        log_dens = log_dirmult_batch(X, params, threads=threads)
    n, k1, k2 = X.n_docs, params.k1, params.k2
    z2 = np.asarray(z2, dtype=np.int64)
    dens = log_dens.reshape(n, k1, k2)[np.arange(n), :, z2]
    _, log_pi1 = _log_weight_base(params)
    return log_pi1[:, z2].T + dens


def sample_z2(X, params: DeepMouParams, z1, rng: RngStream, log_dens=None, threads: int = 1) -> np.ndarray:
    """Draw every document's hidden-layer label from its full conditional."""
    return sample_categorical_rows(z2_log_weights(X, params, z1, log_dens, threads), rng)


def sample_z1(X, params: DeepMouParams, z2, rng: RngStream, log_dens=None, threads: int = 1) -> np.ndarray:
    """Draw every document's top-layer label from its full conditional."""
    return sample_categorical_rows(z1_log_weights(X, params, z2, log_dens, threads), rng)


class _CellGroups:
    """Documents and pre-gathered sparse entries per (i, j) cell."""

    def __init__(self, X, z1, z2, k1: int, k2: int):
        self.docs = [[None] * k2 for _ in range(k1)]
        self.entry_counts = [[None] * k2 for _ in range(k1)]
        self.entry_cols = [[None] * k2 for _ in range(k1)]
        self.entry_doc = [[None] * k2 for _ in range(k1)]
        self.totals = [[None] * k2 for _ in range(k1)]
        cell = np.asarray(z1) * k2 + np.asarray(z2)
        order = np.argsort(cell, kind="stable")
        boundaries = np.searchsorted(cell[order], np.arange(k1 * k2 + 1))
        for i in range(k1):
            for j in range(k2):
                c = i * k2 + j
                docs = order[boundaries[c]:boundaries[c + 1]]
                self.docs[i][j] = docs
                sel = X.entry_indices_for_docs(docs)
                self.entry_counts[i][j] = X.counts[sel]
                self.entry_cols[i][j] = X.cols[sel]
                lens = X.indptr[docs + 1] - X.indptr[docs]
                self.entry_doc[i][j] = np.repeat(np.arange(docs.size), lens)
                self.totals[i][j] = X.doc_totals[docs]

    def cell_log_dens(self, i: int, j: int, conc: ComponentConcentration) -> np.ndarray:
        return log_dirmult_gathered(self.entry_counts[i][j], self.entry_cols[i][j],
                                    self.entry_doc[i][j], self.totals[i][j], conc)


def _reflect(x: np.ndarray, bound: float) -> np.ndarray:
    # fold a real vector into [-bound, bound] (triangle wave), then nudge
    # exact endpoints inward so concentrations stay strictly positive
    width = 2.0 * bound
    t = np.mod(x + bound, 2.0 * width)
    y = np.where(t <= width, t, 2.0 * width - t) - bound
    return np.clip(y, np.nextafter(-bound, 0.0), np.nextafter(bound, 0.0))


def _current_log_dens(X, params: DeepMouParams, z1, z2, groups: _CellGroups | None = None) -> np.ndarray:
    if groups is None:
        groups = _CellGroups(X, z1, z2, params.k1, params.k2)
    out = np.empty(X.n_docs, dtype=np.float64)
    for i in range(params.k1):
        for j in range(params.k2):
            docs = groups.docs[i][j]
            if docs.size:
                conc = ComponentConcentration.from_rates(params.beta[i], params.alpha[j])
                out[docs] = groups.cell_log_dens(i, j, conc)
    return out


def _row_blocks(n_terms: int, block_size: int) -> list[tuple[int, int]]:
    if block_size <= 0 or block_size >= n_terms:
        return [(0, n_terms)]
    edges = list(range(0, n_terms, block_size)) + [n_terms]
    return list(zip(edges[:-1], edges[1:]))


class _RowCellState:
    """Incremental per-cell bookkeeping for one blocked MH row update.

    Tracks the cell's concentration total and the log-gamma terms that
    depend on it, so a coordinate block's log-density change costs only
    the entries inside the block plus a handful of gammaln calls on the
    distinct document lengths.
    """

    def __init__(self, groups: _CellGroups, i: int, j: int, a_vec: np.ndarray):
        self.docs = groups.docs[i][j]
        self.n_docs = int(self.docs.size)
        cols = groups.entry_cols[i][j]
        order = np.argsort(cols, kind="stable")
        self.cols = cols[order]
        self.counts = groups.entry_counts[i][j][order]
        self.uniq_totals, self.uniq_mult = (np.unique(groups.totals[i][j], return_counts=True)
                                            if self.n_docs else (np.empty(0), np.empty(0)))
        self.A = float(a_vec.sum())
        self.lgam_A = float(gammaln(self.A)) if self.n_docs else 0.0
        self.lgam_uA = gammaln(self.uniq_totals + self.A)
        self._pending = None

    def block_delta(self, lo: int, hi: int, a_cur_fn, a_new_fn) -> float:
        """Log-density change of this cell when coords [lo, hi) move."""
        e0, e1 = np.searchsorted(self.cols, (lo, hi))
        cols_b = self.cols[e0:e1]
        counts_b = self.counts[e0:e1]
        a_cur = a_cur_fn(cols_b, lo, hi)
        a_new = a_new_fn(cols_b, lo, hi)
        d_entries = float(np.sum(_entry_log_terms(counts_b, a_new[cols_b - lo])
                                 - _entry_log_terms(counts_b, a_cur[cols_b - lo])))
        dA = float(a_new.sum() - a_cur.sum())
        if self.n_docs == 0:
            self._pending = (self.A + dA, 0.0, self.lgam_uA)
            return 0.0
        new_A = self.A + dA
        lgam_new_A = float(gammaln(new_A))
        lgam_new_uA = gammaln(self.uniq_totals + new_A)
        self._pending = (new_A, lgam_new_A, lgam_new_uA)
        return (self.n_docs * (lgam_new_A - self.lgam_A)
                - float(np.dot(self.uniq_mult, lgam_new_uA - self.lgam_uA))
                + d_entries)

    def commit(self) -> None:
        self.A, self.lgam_A, self.lgam_uA = self._pending
        self._pending = None


def _blocked_row_update(groups: _CellGroups, cells: list[tuple[int, int]], row: np.ndarray,
                        candidate: np.ndarray, blocks: list[tuple[int, int]],
                        us: np.ndarray, a_of, extra_log_ratio, cur_ld: np.ndarray,
                        conc_of) -> tuple[np.ndarray, int]:
    """Metropolis-within-Gibbs over coordinate blocks of one parameter row.

    ``a_of(row, lo, hi, cell)`` builds the cell concentration slice for a
    candidate row; ``extra_log_ratio(lo, hi)`` supplies a proposal
    correction (the log-scale Jacobian) or ``-inf`` to veto a block.
    Earlier accepted blocks feed into later ones through the tracked
    concentration totals, which is exactly the blockwise conditional.
    """
    states = [_RowCellState(groups, i, j, a_of(row, 0, len(row), (i, j)))
              for (i, j) in cells]
    new_row = row.copy()
    accepted = 0
    any_accept = False
    for b, (lo, hi) in enumerate(blocks):
        extra = extra_log_ratio(lo, hi)
        if extra == -np.inf:
            continue
        delta = extra
        for cell, st in zip(cells, states):
            delta += st.block_delta(
                lo, hi,
                lambda cols, l, h, c=cell: a_of(new_row, l, h, c),
                lambda cols, l, h, c=cell: a_of(candidate, l, h, c),
            )
        if np.log(us[b]) < delta:
            accepted += 1
            any_accept = True
            new_row[lo:hi] = candidate[lo:hi]
            for st in states:
                st.commit()
    if any_accept:
        for cell, st in zip(cells, states):
            if st.n_docs:
                i, j = cell
                conc = conc_of(new_row, cell)
                cur_ld[st.docs] = groups.cell_log_dens(i, j, conc)
    return new_row, accepted


def mh_update_alpha(X, params: DeepMouParams, z1, z2, cfg: SamplerConfig, rng: RngStream,
                    groups: _CellGroups | None = None, cur_ld: np.ndarray | None = None):
    """Reflected-random-walk proposals for the perturbation rows.

    Each alpha row is perturbed coordinate-wise by
    Uniform(-alpha_step, alpha_step) and reflected at +-1 (a symmetric
    proposal, so the flat prior drops out); coordinate blocks of
    ``cfg.alpha_block`` (default: the whole row) are accepted with
    probability min(1, exp(Delta)), Delta summing the log-density
    changes of the documents currently in hidden group j.  Returns the
    updated alpha and per-row counts of accepted blocks; ``cur_ld`` is
    updated in place for accepted moves when supplied.
    """
    k1, k2, T = params.k1, params.k2, params.n_terms
    if groups is None:
        groups = _CellGroups(X, z1, z2, k1, k2)
    if cur_ld is None:
        cur_ld = _current_log_dens(X, params, z1, z2, groups)
    blocks = _row_blocks(T, cfg.alpha_block)
    alpha_new = params.alpha.copy()
    accepts = np.zeros(k2, dtype=np.int64)
    for j in range(k2):
        step = rng.gen.uniform(-cfg.alpha_step, cfg.alpha_step, size=T)
        us = rng.gen.random(len(blocks))
        candidate = _reflect(params.alpha[j] + step, ALPHA_BOUND)

        def a_of(row, lo, hi, cell):
            i, _ = cell
            return params.beta[i, lo:hi] * (1.0 + row[lo:hi])

        def conc_of(row, cell):
            i, _ = cell
            return ComponentConcentration.from_rates(params.beta[i], row)

        alpha_new[j], acc = _blocked_row_update(
            groups, [(i, j) for i in range(k1)], params.alpha[j], candidate, blocks, us,
            a_of, lambda lo, hi: 0.0, cur_ld, conc_of)
        accepts[j] = acc
    return alpha_new, accepts


def mh_update_beta(X, params: DeepMouParams, z1, z2, cfg: SamplerConfig, rng: RngStream,
                   groups: _CellGroups | None = None, cur_ld: np.ndarray | None = None):
    """Log-scale random-walk proposals for the rate rows.

    Each beta row moves coordinate-wise by
    Uniform(-beta_step_rel, beta_step_rel) on the log scale; a block's
    acceptance exponent is the log-density change over the documents in
    cluster i plus the Jacobian sum(ln beta' - ln beta) of the block.
    Blocks proposing any rate above the prior bound are rejected
    outright, keeping the chain inside (0, 1000].
    """
    k1, k2, T = params.k1, params.k2, params.n_terms
    if groups is None:
        groups = _CellGroups(X, z1, z2, k1, k2)
    if cur_ld is None:
        cur_ld = _current_log_dens(X, params, z1, z2, groups)
    blocks = _row_blocks(T, cfg.beta_block)
    beta_new = params.beta.copy()
    accepts = np.zeros(k1, dtype=np.int64)
    for i in range(k1):
        step = rng.gen.uniform(-cfg.beta_step_rel, cfg.beta_step_rel, size=T)
        us = rng.gen.random(len(blocks))
        candidate = params.beta[i] * np.exp(step)

        def a_of(row, lo, hi, cell):
            _, j = cell
            return row[lo:hi] * (1.0 + params.alpha[j, lo:hi])

        def conc_of(row, cell):
            _, j = cell
            return ComponentConcentration.from_rates(row, params.alpha[j])

        def jacobian_or_veto(lo, hi):
            if np.any(candidate[lo:hi] > BETA_MAX):
                return -np.inf
            return float(step[lo:hi].sum())

        beta_new[i], acc = _blocked_row_update(
            groups, [(i, j) for j in range(k2)], params.beta[i], candidate, blocks, us,
            a_of, jacobian_or_veto, cur_ld, conc_of)
        accepts[i] = acc
    return beta_new, accepts


def mh_update_scales(X, params: DeepMouParams, z1, z2, cfg: SamplerConfig, rng: RngStream,
                     groups: _CellGroups | None = None, cur_ld: np.ndarray | None = None):
    """One multiplicative whole-row move per rate and perturbation row.

    Each beta row proposes beta * exp(eps) with a single shared
    eps ~ Uniform(-scale_step, scale_step) and Jacobian T * eps; each
    (1 + alpha) row proposes the analogous common rescaling inside its
    (0, 2) support.  These 1-D moves let the weakly-identified
    concentration totals traverse in a few sweeps where coordinate-wise
    walks would take thousands.  Returns updated (alpha, beta).
    """
    k1, k2, T = params.k1, params.k2, params.n_terms
    if groups is None:
        groups = _CellGroups(X, z1, z2, k1, k2)
    if cur_ld is None:
        cur_ld = _current_log_dens(X, params, z1, z2, groups)
    beta_new = params.beta.copy()
    for i in range(k1):
        eps = rng.gen.uniform(-cfg.scale_step, cfg.scale_step)
        u = rng.gen.random()
        prop = beta_new[i] * np.exp(eps)
        if np.any(prop > BETA_MAX):
            continue
        delta = T * eps
        new_vals = []
        for j in range(k2):
            docs = groups.docs[i][j]
            if docs.size == 0:
                continue
            conc = ComponentConcentration.from_rates(prop, params.alpha[j])
            vals = groups.cell_log_dens(i, j, conc)
            delta += float(vals.sum() - cur_ld[docs].sum())
            new_vals.append((docs, vals))
        if np.log(u) < delta:
            beta_new[i] = prop
            for docs, vals in new_vals:
                cur_ld[docs] = vals
    alpha_new = params.alpha.copy()
    if k2 > 1:
        for j in range(k2):
            eps = rng.gen.uniform(-cfg.scale_step, cfg.scale_step)
            u = rng.gen.random()
            h = (1.0 + alpha_new[j]) * np.exp(eps)
            if np.any(h >= 2.0):
                continue
            delta = T * eps
            new_vals = []
            for i in range(k1):
                docs = groups.docs[i][j]
                if docs.size == 0:
                    continue
                conc = ComponentConcentration.from_rates(beta_new[i], h - 1.0)
                vals = groups.cell_log_dens(i, j, conc)
                delta += float(vals.sum() - cur_ld[docs].sum())
                new_vals.append((docs, vals))
            if np.log(u) < delta:
                alpha_new[j] = h - 1.0
                for docs, vals in new_vals:
                    cur_ld[docs] = vals
    return alpha_new, beta_new


def _truncated_gamma(shape: np.ndarray, rate: np.ndarray, hi: float, rng: RngStream) -> np.ndarray:
    """Draw Gamma(shape, rate) variates restricted to (0, hi].

    Inverse-CDF sampling; when the restricted mass underflows (or the
    rate is zero, the empty-cell prior fallback) the density on the
    interval is effectively a power law x^(shape-1), which is sampled
    directly.  That branch is exact for rate 0 and otherwise only
    reachable when the unrestricted mass beyond the bound exceeds the
    restricted part by ~1e300.
    """
    from scipy.special import gammainc, gammaincinv

    shape = np.asarray(shape, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    u = rng.gen.random(shape.shape)
    out = np.empty(shape.shape, dtype=np.float64)
    cap = np.zeros(shape.shape, dtype=np.float64)
    positive = rate > 0.0
    cap[positive] = gammainc(shape[positive], rate[positive] * hi)
    regular = positive & (cap > 1e-300)
    out[regular] = gammaincinv(shape[regular], u[regular] * cap[regular]) / rate[regular]
    rest = ~regular
    if np.any(rest):
        out[rest] = hi * u[rest] ** (1.0 / shape[rest])
    tiny = np.finfo(np.float64).tiny
    return np.clip(out, tiny, hi)


def sample_table_counts(counts: np.ndarray, conc_at_entries: np.ndarray, rng: RngStream) -> np.ndarray:
    """Chinese-restaurant table counts for each sparse entry.

    Entry with count x and concentration a gets m = sum over
    l = 0..x-1 of Bernoulli(a / (a + l)); the l = 0 seat is always
    occupied.  These are the auxiliary counts that turn the rising
    factorials of the marginalized document density into independent
    power terms of the concentration.
    """
    m = np.ones(counts.shape, dtype=np.float64)
    cmax = int(counts.max()) if counts.size else 0
    for l in range(1, cmax):
        mask = counts > l
        a = conc_at_entries[mask]
        m[mask] += rng.gen.random(a.shape) < a / (a + l)
    return m


def aux_gibbs_update(X, params: DeepMouParams, z1, z2, cfg: SamplerConfig, rng: RngStream):
    """Exact conditional draw of all rate and perturbation rows.

    Augments each document with a Beta(A, N_d) variable (for the
    Gamma-ratio of its cell's concentration total A) and each sparse
    entry with Chinese-restaurant table counts; given those, every
    beta[i, t] and every 1 + alpha[j, t] is conditionally a truncated
    Gamma and is drawn exactly.  One such draw per sweep supplies
    full-conditional-scale moves that the random-walk updates cannot,
    which is what lets chains leave the symmetric initial state and
    find the dominant mode.  With k2 = 1 alpha stays pinned at zero.

    Returns ``(alpha_new, beta_new)``.
    """
    k1, k2, T = params.k1, params.k2, params.n_terms
    z1 = np.asarray(z1, dtype=np.int64)
    z2 = np.asarray(z2, dtype=np.int64)
    entry_i = z1[X.rows]
    entry_j = z2[X.rows]
    one_plus_alpha = 1.0 + params.alpha
    conc_entries = params.beta[entry_i, X.cols] * one_plus_alpha[entry_j, X.cols]
    tables = sample_table_counts(X.counts, conc_entries, rng)

    # per-document Beta auxiliaries for the Gamma(A)/Gamma(N+A) ratios
    cell_totals = params.beta @ one_plus_alpha.T          # (k1, k2) concentration sums
    occupied = X.doc_totals > 0
    a_doc = cell_totals[z1[occupied], z2[occupied]]
    w = rng.gen.beta(a_doc, X.doc_totals[occupied].astype(np.float64))
    log_w = np.log(np.maximum(w, 1e-290))
    cell_of_doc = z1[occupied] * k2 + z2[occupied]
    neg_w = -np.bincount(cell_of_doc, weights=log_w, minlength=k1 * k2).reshape(k1, k2)

    # table totals per (cluster, hidden group, term)
    flat = (entry_i * k2 + entry_j) * T + X.cols
    table_tot = np.bincount(flat, weights=tables, minlength=k1 * k2 * T).reshape(k1, k2, T)

    beta_shape = 1.0 + table_tot.sum(axis=1)
    beta_rate = neg_w @ one_plus_alpha                    # (k1, T)
    beta_new = _truncated_gamma(beta_shape, beta_rate, BETA_MAX, rng)

    if k2 == 1:
        return params.alpha.copy(), beta_new

    alpha_shape = 1.0 + table_tot.sum(axis=0)
    alpha_rate = neg_w.T @ beta_new                       # (k2, T), conditioned on new rates
    bound = 2.0
    h = _truncated_gamma(alpha_shape, alpha_rate, bound, rng)
    alpha_new = np.clip(h - 1.0, np.nextafter(-ALPHA_BOUND, 0.0), np.nextafter(ALPHA_BOUND, 0.0))
    return alpha_new, beta_new


def _allocation_log_prob(params: DeepMouParams, z1, z2) -> float:
    log_pi2, log_pi1 = _log_weight_base(params)
    return float(log_pi2[z2].sum() + log_pi1[z1, z2].sum())


def _weight_prior_log_kernel(params: DeepMouParams, delta: float) -> float:
    # Dirichlet(delta) kernels without normalizing constants; exactly 0
    # under the flat delta = 1 setting
    if delta == 1.0:
        return 0.0
    with np.errstate(divide="ignore"):
        return float((delta - 1.0) * (np.log(params.pi2).sum() + np.log(params.pi1_given_j).sum()))


def log_posterior(X, params: DeepMouParams, z1, z2, cfg: SamplerConfig,
                  cur_ld: np.ndarray | None = None, coeff_total: float | None = None) -> float:
    """Joint log-posterior of a full state, up to an additive constant.

    Sums the complete-data log-likelihood (multinomial coefficients
    included), the allocation log-probabilities, and the Dirichlet(delta)
    weight-prior kernels; the flat alpha/beta priors contribute zero
    inside their support and -inf outside.
    """
    if not params.in_support():
        return -np.inf
    z1 = np.asarray(z1, dtype=np.int64)
    z2 = np.asarray(z2, dtype=np.int64)
    if cur_ld is None:
        cur_ld = _current_log_dens(X, params, z1, z2)
    if coeff_total is None:
        coeff_total = float(log_multinomial_coefficients(X).sum())
    return (coeff_total + float(cur_ld.sum())
            + _allocation_log_prob(params, z1, z2)
            + _weight_prior_log_kernel(params, cfg.delta))


class _AlphaSchedule:
    """Burn-in warm-up controller for the hidden layer.

    Alpha stays pinned at zero for the first ``alpha_warmup`` sweeps so
    the top layer can sort under the flat model, then the hidden layer
    is released.  Whether a release "catches" is stochastic, so during
    burn-in the log-posterior is monitored: a caught hidden layer lifts
    it by hundreds of nats within the probe window, while a dud release
    leaves it flat, in which case alpha is re-pinned briefly and
    released again.  After burn-in the kernel is left homogeneous
    (alpha always updated), so kept states come from the exact sampler
    regardless of what the warm-up did.
    """

    PROBE = 150      # sweeps a release gets before the gain check
    REPIN = 50       # pinned sweeps between release attempts
    WINDOW = 20      # log-posterior averaging window
    LP_GAIN = 50.0   # nats of improvement that count as "formed"

    def __init__(self, cfg: SamplerConfig, k2: int, n_docs: int):
        self.active = k2 > 1 and n_docs > 0 and cfg.resolved_alpha_warmup() > 0
        self.burn_in = cfg.burn_in
        self.pinned_until = cfg.resolved_alpha_warmup() if self.active else 0
        self.released_at = None
        self.baseline = None
        self.latched = not self.active
        self.lp_recent: list = []

    def pinned(self, it: int) -> bool:
        if self.latched or it > self.burn_in:
            return False
        return it <= self.pinned_until

    def observe(self, it: int, lp: float) -> None:
        self.lp_recent.append(lp)
        if len(self.lp_recent) > self.WINDOW:
            self.lp_recent.pop(0)
        if self.latched or it > self.burn_in:
            return
        if it == self.pinned_until:
            self.released_at = it
            self.baseline = float(np.mean(self.lp_recent))
            return
        if self.released_at is not None and it - self.released_at == self.PROBE:
            gain = float(np.mean(self.lp_recent)) - self.baseline
            if gain >= self.LP_GAIN:
                self.latched = True
            elif it + self.REPIN + self.PROBE < self.burn_in:
                self.pinned_until = it + self.REPIN
                self.released_at = None
            else:
                self.latched = True   # out of burn-in budget; stay released


def run_chain(X, k1: int, k2: int, cfg: SamplerConfig) -> ChainTrace:
    """Run one Metropolis-within-Gibbs chain and return the kept states.

    Sweeps update z2, z1, pi2, pi1, alpha, beta in that fixed order
    (the alpha and beta stages comprise the random-walk proposals plus,
    when enabled, the scale moves and the exact auxiliary-variable
    draw); the first ``burn_in`` sweeps are discarded and the rest
    thinned.  Output is deterministic in the seed for any thread count:
    threading only splits density evaluations, never the draw order.
    With k2 = 1 the alpha updates are skipped and alpha stays pinned at
    zero.
    """
    cfg.validate()
    zero_docs = X.zero_total_docs()
    if zero_docs.size:
        warnings.warn(
            f"{zero_docs.size} document(s) with zero total counts carry no clustering "
            f"information: {zero_docs.tolist()[:20]}", stacklevel=2)
    rng = RngStream(cfg.seed)
    params, alloc = init_state(X, k1, k2, cfg, rng)
    coeff_total = float(log_multinomial_coefficients(X).sum())
    n = X.n_docs
    accept_alpha = np.zeros(k2, dtype=np.int64)
    accept_beta = np.zeros(k1, dtype=np.int64)
    schedule = _AlphaSchedule(cfg, k2, n)
    warmup = cfg.resolved_alpha_warmup()
    probe_len = warmup // cfg.start_probes
    probing = n > 0 and cfg.start_probes > 1 and probe_len >= 20
    reinit_at = {probe_len * p + 1 for p in range(1, cfg.start_probes)} if probing else set()
    restore_at = probe_len * cfg.start_probes + 1 if probing else -1
    best_probe = None
    seg_lps: list = []
    trace = ChainTrace()
    for it in range(1, cfg.iterations + 1):
        if probing and (it in reinit_at or it == restore_at):
            score = float(np.mean(seg_lps[-10:])) if seg_lps else -np.inf
            if best_probe is None or score > best_probe[0]:
                best_probe = (score, params.copy(), alloc.copy())
            seg_lps = []
            if it == restore_at:
                params, alloc = best_probe[1], best_probe[2]
            else:
                params, alloc = init_state(X, k1, k2, cfg, rng)
        update_alpha = k2 > 1 and not schedule.pinned(it)
        if not update_alpha and np.any(params.alpha != 0.0):
            params.alpha = np.zeros_like(params.alpha)   # re-pin resets the hidden layer
        dens = log_dirmult_batch(X, params, threads=cfg.threads)
        z2 = sample_z2(X, params, alloc.z1, rng, log_dens=dens)
        z1 = sample_z1(X, params, z2, rng, log_dens=dens)
        alloc = LatentAllocations(z1, z2)
        cur_ld = dens[np.arange(n), z1 * k2 + z2]
        params.pi2 = sample_pi2(z2, k2, cfg.delta, rng)
        params.pi1_given_j = sample_pi1(z1, z2, k1, k2, cfg.delta, rng)
        groups = _CellGroups(X, z1, z2, k1, k2)
        if update_alpha:
            params.alpha, acc_a = mh_update_alpha(X, params, z1, z2, cfg, rng, groups, cur_ld)
            accept_alpha += acc_a
        params.beta, acc_b = mh_update_beta(X, params, z1, z2, cfg, rng, groups, cur_ld)
        accept_beta += acc_b
        if cfg.scale_step > 0.0:
            alpha_s, params.beta = mh_update_scales(X, params, z1, z2, cfg, rng, groups, cur_ld)
            if update_alpha:
                params.alpha = alpha_s
        if cfg.aux_gibbs:
            alpha_g, params.beta = aux_gibbs_update(X, params, z1, z2, cfg, rng)
            if update_alpha:
                params.alpha = alpha_g
            cur_ld = _current_log_dens(X, params, z1, z2, groups)
        lp = (coeff_total + float(cur_ld.sum())
              + _allocation_log_prob(params, z1, z2)
              + _weight_prior_log_kernel(params, cfg.delta))
        if not np.isfinite(lp):
            raise RuntimeError(f"log-posterior became non-finite at iteration {it}")
        schedule.observe(it, lp)
        seg_lps.append(lp)
        if it > cfg.burn_in and (it - cfg.burn_in - 1) % cfg.thin == 0:
            trace.states.append(ChainState(
                iteration=it,
                params=params.copy(),
                alloc=alloc.copy(),
                log_posterior=lp,
                accept_alpha=accept_alpha.copy(),
                accept_beta=accept_beta.copy(),
            ))
    return trace


def assignment_from_log_densities(log_dens: np.ndarray, params: DeepMouParams):
    """Soft and hard top-layer assignment from a density matrix.

    ``log_dens`` has the batch layout (column i * k2 + j).  Adding any
    per-document constant leaves the result unchanged, so coefficient-free
    densities are exactly equivalent to full ones here.
    """
    n = log_dens.shape[0]
    k1, k2 = params.k1, params.k2
    log_pi2, log_pi1 = _log_weight_base(params)
    lw = log_dens.reshape(n, k1, k2) + log_pi1[None, :, :] + log_pi2[None, None, :]
    mx = np.max(lw, axis=2, keepdims=True)
    mx_safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        per_cluster = np.log(np.sum(np.exp(lw - mx_safe), axis=2)) + mx_safe[:, :, 0]
    norm = log_sum_exp_rows(per_cluster)
    soft = np.exp(per_cluster - norm[:, None])
    hard = Partition(np.argmax(per_cluster, axis=1), k1)
    return soft, hard


def posterior_assignment(X, params: DeepMouParams, threads: int = 1):
    """Posterior cluster-membership probabilities and their argmax labels.

    Soft weights mix the k2 hidden groups: row d, column i is
    proportional to sum_j pi1[i, j] pi2[j] p(x_d | i, j), normalized over
    i; ties in the hard argmax break toward the smallest index.
    """
    dens = log_dirmult_batch(X, params, threads=threads)
    return assignment_from_log_densities(dens, params)


def match_labels(reference, labels, k: int) -> np.ndarray:
    """Maximum-agreement mapping of ``labels`` onto ``reference`` labels.

    Returns an array m with m[raw_label] = reference_label, from the
    Hungarian assignment on the k x k co-assignment table (padded, so
    unused labels still receive a distinct image).
    """
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (np.asarray(reference, dtype=np.int64), np.asarray(labels, dtype=np.int64)), 1)
    ref_idx, raw_idx = linear_sum_assignment(table, maximize=True)
    mapping = np.empty(k, dtype=np.int64)
    mapping[raw_idx] = ref_idx
    return mapping


def consensus_partition(trace: ChainTrace) -> Partition:
    """Label-switching-resolved partition of a chain.

    The kept state with maximum log-posterior is the pivot; every other
    state's z1 labels are permutation-aligned to it, and each document
    takes the majority label, ties resolved toward the pivot's label
    (and then the smallest index).
    """
    if len(trace) == 0:
        raise ValueError("empty chain trace")
    pivot = trace.states[trace.pivot_index()]
    k1 = pivot.params.k1
    ref = pivot.alloc.z1
    n = ref.size
    votes = np.zeros((n, k1), dtype=np.int64)
    rows = np.arange(n)
    for state in trace.states:
        mapping = match_labels(ref, state.alloc.z1, k1)
        votes[rows, mapping[state.alloc.z1]] += 1
    best = np.argmax(votes, axis=1)
    top = votes[rows, best]
    pivot_votes = votes[rows, ref]
    labels = np.where(pivot_votes == top, ref, best)
    return Partition(labels, k1)


def posterior_mean_params(trace: ChainTrace) -> DeepMouParams:
    """Posterior means of the pivot-aligned kept states.

    Both layers are aligned to the pivot (z1 matching permutes beta and
    pi1 rows, z2 matching permutes alpha, pi2, and pi1 columns) before
    averaging; weight vectors are renormalized against rounding drift.
    """
    if len(trace) == 0:
        raise ValueError("empty chain trace")
    pivot = trace.states[trace.pivot_index()]
    k1, k2 = pivot.params.k1, pivot.params.k2
    sum_pi2 = np.zeros_like(pivot.params.pi2)
    sum_pi1 = np.zeros_like(pivot.params.pi1_given_j)
    sum_alpha = np.zeros_like(pivot.params.alpha)
    sum_beta = np.zeros_like(pivot.params.beta)
    for state in trace.states:
        m1 = match_labels(pivot.alloc.z1, state.alloc.z1, k1)
        m2 = match_labels(pivot.alloc.z2, state.alloc.z2, k2)
        aligned_beta = np.empty_like(state.params.beta)
        aligned_beta[m1] = state.params.beta
        aligned_alpha = np.empty_like(state.params.alpha)
        aligned_alpha[m2] = state.params.alpha
        aligned_pi2 = np.empty_like(state.params.pi2)
        aligned_pi2[m2] = state.params.pi2
        aligned_pi1 = np.empty_like(state.params.pi1_given_j)
        aligned_pi1[np.ix_(m1, m2)] = state.params.pi1_given_j
        sum_beta += aligned_beta
        sum_alpha += aligned_alpha
        sum_pi2 += aligned_pi2
        sum_pi1 += aligned_pi1
    m = len(trace)
    pi2 = sum_pi2 / m
    pi1 = sum_pi1 / m
    out = DeepMouParams(pi2 / pi2.sum(), pi1 / pi1.sum(axis=0, keepdims=True),
                        sum_alpha / m, sum_beta / m)
    out.validate()
    return out


def write_chain_jsonl(trace: ChainTrace, path) -> None:
    """One kept state per line: weights, alpha, beta, z1, z2, log-posterior."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in trace.states:
            rec = {
                "iteration": s.iteration,
                "log_posterior": s.log_posterior,
                "pi2": s.params.pi2.tolist(),
                "pi1_given_j": s.params.pi1_given_j.tolist(),
                "alpha": s.params.alpha.tolist(),
                "beta": s.params.beta.tolist(),
                "z1": s.alloc.z1.tolist(),
                "z2": s.alloc.z2.tolist(),
                "accept_alpha": s.accept_alpha.tolist(),
                "accept_beta": s.accept_beta.tolist(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_chain_jsonl(path) -> ChainTrace:
    trace = ChainTrace()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            params = DeepMouParams(
                pi2=np.array(rec["pi2"], dtype=np.float64),
                pi1_given_j=np.array(rec["pi1_given_j"], dtype=np.float64),
                alpha=np.array(rec["alpha"], dtype=np.float64),
                beta=np.array(rec["beta"], dtype=np.float64),
            )
            alloc = LatentAllocations(np.array(rec["z1"]), np.array(rec["z2"]))
            trace.states.append(ChainState(
                iteration=int(rec["iteration"]),
                params=params,
                alloc=alloc,
                log_posterior=float(rec["log_posterior"]),
                accept_alpha=np.array(rec["accept_alpha"], dtype=np.int64),
                accept_beta=np.array(rec["accept_beta"], dtype=np.int64),
            ))
    return trace


def write_log_posterior_csv(trace: ChainTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,log_posterior\n")
        for s in trace.states:
            fh.write(f"{s.iteration},{s.log_posterior!r}\n")
