"""Frequentist mixture of unigrams fitted by EM.

Each cluster is a multinomial over terms; responsibilities are computed
in log space and term probabilities get a tiny additive smoothing so
that sparse data never produces log(0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .metrics import Partition
from .numerics import RngStream, log_sum_exp_rows

__all__ = [
    "OMEGA_SMOOTHING",
    "MouParams",
    "em_fit",
    "mou_assign",
    "responsibilities",
    "write_model_json",
    "read_model_json",
]

OMEGA_SMOOTHING = 1e-10


@dataclass
class MouParams:
    """Mixture weights and row-stochastic term probabilities."""

    pi: np.ndarray      # (k,)
    omega: np.ndarray   # (k, T), rows sum to 1

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)

    @property
    def k(self) -> int:
        return self.pi.size

    def validate(self) -> None:
        if abs(self.pi.sum() - 1.0) > 1e-12 or np.any(self.pi <= 0.0):
            raise ValueError("pi must be strictly positive and sum to 1")
        if np.any(np.abs(self.omega.sum(axis=1) - 1.0) > 1e-10) or np.any(self.omega <= 0.0):
            raise ValueError("omega rows must be strictly positive and sum to 1")


def _doc_log_lik(X, params: MouParams) -> np.ndarray:
    # (n, k): sum_t x_dt ln omega_it + ln pi_i, coefficient excluded
    csr = X.to_scipy_csr()
    return csr @ np.log(params.omega).T + np.log(params.pi)[None, :]


def _coefficient_total(X) -> float:
    from .dirmult import log_multinomial_coefficients
    return float(log_multinomial_coefficients(X).sum())


def responsibilities(X, params: MouParams):
    """Posterior cluster probabilities per document and the log-likelihood."""
    lw = _doc_log_lik(X, params)
    norm = log_sum_exp_rows(lw)
    resp = np.exp(lw - norm[:, None])
    return resp, float(norm.sum()) + _coefficient_total(X)


def _m_step(X, resp: np.ndarray) -> MouParams:
    csr = X.to_scipy_csr()
    pi = resp.mean(axis=0)
    weighted = np.asarray(resp.T @ csr) + OMEGA_SMOOTHING
    omega = weighted / weighted.sum(axis=1, keepdims=True)
    return MouParams(pi, omega)


def _run_em(X, init_resp: np.ndarray, max_iters: int, tol: float):
    params = _m_step(X, init_resp)
    trace = []
    resp = init_resp
    prev = -np.inf
    for _ in range(max_iters):
        resp, ll = responsibilities(X, params)
        trace.append(ll)
        if np.isfinite(prev) and abs(ll - prev) < tol * max(1.0, abs(prev)):
            break
        prev = ll
        params = _m_step(X, resp)
    return params, resp, np.array(trace)


def em_fit(X, k: int, max_iters: int = 500, tol: float = 1e-8, restarts: int = 10,
           seed: int = 0, init_resp=None):
    """Best-of-restarts EM fit.

    Returns ``(params, responsibilities, log_lik_trace)`` of the restart
    with the highest final log-likelihood.  Initialization draws random
    responsibilities from an independent sub-stream per restart; passing
    ``init_resp`` runs a single fit from that start instead.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if init_resp is not None:
        resp0 = np.asarray(init_resp, dtype=np.float64)
        if resp0.shape != (X.n_docs, k):
            raise ValueError("init_resp shape must be (n_docs, k)")
        return _run_em(X, resp0, max_iters, tol)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = RngStream(seed)
    best = None
    for r in range(restarts):
        sub = rng.substream(r)
        raw = sub.gen.random((X.n_docs, k)) + 1e-12
        resp0 = raw / raw.sum(axis=1, keepdims=True)
        fit = _run_em(X, resp0, max_iters, tol)
        if best is None or fit[2][-1] > best[2][-1]:
            best = fit
    return best


def mou_assign(X, params: MouParams) -> Partition:
    """Argmax-responsibility labels, ties toward the smallest index."""
    lw = _doc_log_lik(X, params)
    return Partition(np.argmax(lw, axis=1), params.k)


def write_model_json(params: MouParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"pi": params.pi.tolist(), "omega": params.omega.tolist()},
                  fh, sort_keys=True)
        fh.write("\n")


def read_model_json(path) -> MouParams:
    with open(path, "r", encoding="utf-8") as fh:
        rec = json.load(fh)
    return MouParams(np.array(rec["pi"], dtype=np.float64),
                     np.array(rec["omega"], dtype=np.float64))
