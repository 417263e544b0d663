"""Deep mixtures of unigrams for clustering short, sparse documents.

A two-layer Bayesian mixture: each document picks a hidden group, then
an observed cluster, and its term counts follow a marginalized
Multinomial-Dirichlet whose concentration combines cluster-specific
rates with hidden-group perturbations.  Fitted by Metropolis-within-
Gibbs.  Ships with an EM-fitted mixture-of-unigrams baseline,
simulation-study generators, clustering metrics, and a batch CLI.
"""

__version__ = "0.1.0"

from .corpus import (
    CorpusFormatError,
    SparseDocTermMatrix,
    load_dense_csv,
    load_triplets,
    read_labels,
    write_labels,
    write_triplets,
)
from .dirmult import (
    ComponentConcentration,
    log_dirmult,
    log_dirmult_batch,
    log_multinomial_coefficients,
)
from .metrics import Partition, adjusted_rand_index, matched_accuracy, recovery_distance
from .mou_em import MouParams, em_fit, mou_assign
from .numerics import (
    RngStream,
    log_beta,
    log_gamma,
    log_sum_exp,
    sample_categorical,
    sample_dirichlet,
    sample_poisson,
)
from .sampler import (
    ChainState,
    ChainTrace,
    DeepMouParams,
    LatentAllocations,
    SamplerConfig,
    consensus_partition,
    init_state,
    log_posterior,
    posterior_assignment,
    posterior_mean_params,
    read_chain_jsonl,
    run_chain,
    write_chain_jsonl,
)
from .simulate import (
    RECOVERY_GRID_CELLS,
    SimConfig,
    SimOutput,
    Study,
    generate_deep,
    generate_flat,
    recovery_grid,
)

__all__ = [
    "__version__",
    "CorpusFormatError",
    "SparseDocTermMatrix",
    "load_dense_csv",
    "load_triplets",
    "read_labels",
    "write_labels",
    "write_triplets",
    "ComponentConcentration",
    "log_dirmult",
    "log_dirmult_batch",
    "log_multinomial_coefficients",
    "Partition",
    "adjusted_rand_index",
    "matched_accuracy",
    "recovery_distance",
    "MouParams",
    "em_fit",
    "mou_assign",
    "RngStream",
    "log_beta",
    "log_gamma",
    "log_sum_exp",
    "sample_categorical",
    "sample_dirichlet",
    "sample_poisson",
    "ChainState",
    "ChainTrace",
    "DeepMouParams",
    "LatentAllocations",
    "SamplerConfig",
    "consensus_partition",
    "init_state",
    "log_posterior",
    "posterior_assignment",
    "posterior_mean_params",
    "read_chain_jsonl",
    "run_chain",
    "write_chain_jsonl",
    "RECOVERY_GRID_CELLS",
    "SimConfig",
    "SimOutput",
    "Study",
    "generate_deep",
    "generate_flat",
    "recovery_grid",
]
