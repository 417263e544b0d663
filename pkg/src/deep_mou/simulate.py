"""Synthetic short-document corpora with ground truth retained.

Three generators:

* ``deep``: documents split into balanced (cluster, hidden-group) cells;
  rates beta ~ U(0, beta_max] and perturbations alpha ~ U[-1, 1) drive
  per-document Dirichlet term probabilities and Poisson lengths;
* ``flat``: the same pipeline with a single hidden group and alpha = 0,
  i.e. plain Dirichlet-Multinomial clusters;
* an 8-cell recovery grid spanning n, T in {100, 200} and mean length
  N in {10, 20} at k1 = 3, k2 = 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .corpus import SparseDocTermMatrix, write_labels, write_triplets
from .metrics import Partition
from .numerics import RngStream, sample_poisson

__all__ = [
    "Study",
    "SimConfig",
    "SimOutput",
    "generate",
    "generate_deep",
    "generate_flat",
    "recovery_grid",
    "RECOVERY_GRID_CELLS",
    "write_sim_output",
    "read_true_params",
]


class Study(str, Enum):
    DEEP = "deep"
    FLAT = "flat"
    GRID = "grid"


@dataclass(frozen=True)
class SimConfig:
    """Generation settings for one synthetic corpus."""

    study: Study
    n: int = 200
    T: int = 200
    k1: int = 3
    k2: int = 2
    poisson_N: float = 20.0
    beta_max: float = 20.0
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1 or self.T < 1 or self.k1 < 1:
            raise ValueError("n, T, k1 must be >= 1")
        if self.study is Study.DEEP and self.k2 < 1:
            raise ValueError("k2 must be >= 1 for the deep study")
        if self.poisson_N <= 0.0 or self.beta_max <= 0.0:
            raise ValueError("poisson_N and beta_max must be > 0")


@dataclass(frozen=True)
class SimOutput:
    """Generated matrix plus the ground truth that produced it.

    ``true_z2`` is all zeros (one hidden group) for flat-study corpora;
    only deep-study runs write it to disk.
    """

    study: Study
    X: SparseDocTermMatrix
    true_z1: Partition
    true_z2: Partition
    true_beta: np.ndarray
    true_alpha: np.ndarray


# study-3 grid in (n, T, N) order; every cell uses k1 = 3, k2 = 2
RECOVERY_GRID_CELLS = (
    (100, 100, 10.0),
    (100, 100, 20.0),
    (100, 200, 10.0),
    (100, 200, 20.0),
    (200, 100, 10.0),
    (200, 100, 20.0),
    (200, 200, 10.0),
    (200, 200, 20.0),
)


def _uniform_left_open(rng: RngStream, high: float, size) -> np.ndarray:
    # U(0, high]: 1 - U[0, 1) keeps the half-open bound exact
    return high * (1.0 - rng.gen.random(size))


def _generate(cfg: SimConfig, rng: RngStream, k2: int, alpha: np.ndarray) -> SimOutput:
    n, T, k1 = cfg.n, cfg.T, cfg.k1
    beta = _uniform_left_open(rng, cfg.beta_max, (k1, T))
    # balanced cells: deterministic round-robin over (z1, z2) by doc index
    cell = np.arange(n) % (k1 * k2)
    z1 = cell // k2
    z2 = cell % k2
    counts = np.zeros((n, T), dtype=np.int64)
    for d in range(n):
        length = sample_poisson(cfg.poisson_N, rng)
        if length == 0:
            continue
        conc = beta[z1[d]] * (1.0 + alpha[z2[d]])
        g = rng.gen.standard_gamma(conc)
        g = np.maximum(g, np.finfo(np.float64).tiny)
        counts[d] = rng.gen.multinomial(length, g / g.sum())
    return SimOutput(
        study=cfg.study,
        X=SparseDocTermMatrix.from_dense(counts),
        true_z1=Partition(z1, k1),
        true_z2=Partition(z2, k2),
        true_beta=beta,
        true_alpha=alpha,
    )


def generate_deep(cfg: SimConfig, rng: RngStream) -> SimOutput:
    """Two-layer generative corpus with balanced (z1, z2) cells."""
    cfg.validate()
    if cfg.study is not Study.DEEP:
        raise ValueError("generate_deep requires a deep-study config")
    alpha = rng.gen.uniform(-1.0, 1.0, size=(cfg.k2, cfg.T))
    return _generate(cfg, rng, cfg.k2, alpha)


def generate_flat(cfg: SimConfig, rng: RngStream) -> SimOutput:
    """Single-layer corpus: k2 forced to 1 and alpha identically zero."""
    cfg.validate()
    if cfg.study is not Study.FLAT:
        raise ValueError("generate_flat requires a flat-study config")
    return _generate(cfg, rng, 1, np.zeros((1, cfg.T)))


def generate(cfg: SimConfig, rng: RngStream) -> SimOutput:
    if cfg.study is Study.DEEP:
        return generate_deep(cfg, rng)
    if cfg.study is Study.FLAT:
        return generate_flat(cfg, rng)
    raise ValueError(f"no single-corpus generator for study {cfg.study}")


def recovery_grid(rng: RngStream) -> list[SimOutput]:
    """The 8 deep-generative datasets of the recovery grid.

    Cells follow :data:`RECOVERY_GRID_CELLS`; each draws from a sub-stream
    of ``rng`` derived from its cell index, so the whole grid is
    reproducible from one base seed.
    """
    outputs = []
    for idx, (n, T, N) in enumerate(RECOVERY_GRID_CELLS):
        cfg = SimConfig(study=Study.DEEP, n=n, T=T, k1=3, k2=2,
                        poisson_N=N, seed=rng.seed)
        outputs.append(generate_deep(cfg, rng.substream(idx)))
    return outputs


def write_sim_output(out: SimOutput, directory) -> dict:
    """Write matrix, labels, and true parameters; returns the file map."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"matrix": d / "matrix.csv", "labels_z1": d / "labels_z1.txt",
             "true_params": d / "true_params.json"}
    write_triplets(out.X, paths["matrix"])
    write_labels(out.true_z1.labels, paths["labels_z1"])
    if out.study is Study.DEEP:
        paths["labels_z2"] = d / "labels_z2.txt"
        write_labels(out.true_z2.labels, paths["labels_z2"])
    record = {
        "study": out.study.value,
        "n_docs": out.X.n_docs,
        "n_terms": out.X.n_terms,
        "k1": out.true_z1.k,
        "k2": out.true_z2.k,
        "beta": out.true_beta.tolist(),
        "alpha": out.true_alpha.tolist(),
    }
    with open(paths["true_params"], "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True)
        fh.write("\n")
    return {name: str(p) for name, p in paths.items()}


def read_true_params(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        rec = json.load(fh)
    rec["beta"] = np.array(rec["beta"], dtype=np.float64)
    rec["alpha"] = np.array(rec["alpha"], dtype=np.float64)
    return rec
