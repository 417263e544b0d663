"""Special functions, log-space arithmetic, and reproducible random streams.

Every stochastic routine in the package draws through :class:`RngStream`,
a thin wrapper over a counter-based Philox generator keyed by
``(seed, stream_id)``.  Equal keys replay identical sequences and distinct
keys give independent streams, which is what makes parallel chains,
restarts, and derived sub-streams reproducible.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln as _gammaln

__all__ = [
    "RngStream",
    "log_gamma",
    "log_beta",
    "log_sum_exp",
    "log_sum_exp_rows",
    "sample_dirichlet",
    "sample_categorical",
    "sample_categorical_rows",
    "sample_poisson",
]

_U64 = (1 << 64) - 1


def _splitmix64(value: int) -> int:
    # SplitMix64 finalizer; decorrelates derived stream ids.
    z = (value + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return (z ^ (z >> 31)) & _U64


class RngStream:
    """Seeded random stream with independent, addressable sub-streams.

    ``(seed, stream_id)`` is used verbatim as the key of a Philox
    counter-based generator, so the same pair always replays the same
    variate sequence regardless of what other streams exist.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _U64
        self.stream_id = int(stream_id) & _U64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, child_id: int) -> "RngStream":
        """Independent stream derived deterministically from this one."""
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(int(child_id))))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def log_gamma(x):
    """Natural log of the Gamma function for positive arguments.

    Accepts a scalar or an array; raises ``ValueError`` on non-positive
    or non-finite input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("log_gamma requires finite x > 0")
    out = _gammaln(arr)
    if arr.ndim == 0:
        return float(out)
    return out


def log_beta(a, b):
    """ln B(a, b) = ln G(a) + ln G(b) - ln G(a+b) for positive a, b."""
    return log_gamma(a) + log_gamma(b) - log_gamma(np.asarray(a, dtype=np.float64) + b)


def log_sum_exp(v) -> float:
    """ln(sum(exp(v))) computed by max-shifting.

    Returns ``-inf`` (not an error) when every entry is ``-inf``.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = float(np.max(arr))
    if m == -np.inf:
        return -np.inf
    return m + float(np.log(np.sum(np.exp(arr - m))))


def log_sum_exp_rows(m) -> np.ndarray:
    """Row-wise log_sum_exp of a 2-D array; all ``-inf`` rows stay ``-inf``."""
    arr = np.asarray(m, dtype=np.float64)
    mx = np.max(arr, axis=1, keepdims=True)
    mx_safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(arr - mx_safe), axis=1)) + mx_safe[:, 0]


def sample_dirichlet(conc, rng: RngStream) -> np.ndarray:
    """One Dirichlet(conc) draw via normalized Gamma variates.

    Entries are strictly positive (underflowed variates are floored at
    the smallest normal double) and sum to 1 up to rounding.
    """
    a = np.asarray(conc, dtype=np.float64)
    if a.size == 0 or not np.all(np.isfinite(a)) or np.any(a <= 0.0):
        raise ValueError("Dirichlet concentrations must be finite and > 0")
    g = rng.gen.standard_gamma(a)
    g = np.maximum(g, np.finfo(np.float64).tiny)
    return g / g.sum()


def sample_categorical(log_weights, rng: RngStream) -> int:
    """Index i drawn with probability exp(lw_i - log_sum_exp(lw))."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        raise ValueError("categorical sampling from an empty weight vector")
    total = log_sum_exp(lw)
    if total == -np.inf:
        raise ValueError("categorical sampling with no support")
    cum = np.cumsum(np.exp(lw - total))
    u = rng.gen.random()
    return int(min(np.searchsorted(cum, u, side="right"), lw.size - 1))


def sample_categorical_rows(log_weights, rng: RngStream) -> np.ndarray:
    """One categorical draw per row of a matrix of log-weights.

    All uniforms come from a single vectorized call, so the draw for a
    given row never depends on how the other rows are processed; this is
    what keeps threaded sweeps byte-reproducible.
    """
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.ndim != 2 or lw.shape[1] == 0:
        raise ValueError("expected a non-degenerate 2-D log-weight matrix")
    norm = log_sum_exp_rows(lw)
    if np.any(norm == -np.inf):
        raise ValueError("categorical sampling with no support in some row")
    cum = np.cumsum(np.exp(lw - norm[:, None]), axis=1)
    u = rng.gen.random(lw.shape[0])
    idx = np.sum(cum < u[:, None], axis=1)
    return np.minimum(idx, lw.shape[1] - 1).astype(np.int64)


def sample_poisson(rate: float, rng: RngStream) -> int:
    """Poisson(rate) variate; rate must be finite and > 0."""
    if not np.isfinite(rate) or rate <= 0.0:
        raise ValueError("Poisson rate must be finite and > 0")
    return int(rng.gen.poisson(rate))
