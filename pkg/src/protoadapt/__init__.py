"""Prototype-conditioned fast-weight adapters on synthetic episodic tasks.

The library covers the full pipeline: synthetic corpus generation with
planted low-rank adapter structure, spectral rank diagnostics with bootstrap
tests, prototype memory construction with coverage certificates, sparse
proximal retrieval with unrolled training, calibrated motif statistics,
continuous-time descriptor blocks with adjoint gradients, and an executable
excess-risk bound checker.
"""

from .adapters import AdapterMatrix, Canonicalizer, assemble_theta, fit_canonicalizer, ridge_adapter
from .descriptors import LeakageError, ProbeHead, Standardizer, build_descriptor, pooled_moments, probe_gradient
from .metrics import MetricsRecord, compute_metrics, rank_auc
from .motifs import (
    MarkovBackground,
    calibrate_tau,
    channel_activations,
    fit_background,
    make_channels,
    motif_test_report,
    permutation_pvalue,
    power_curve,
    q_values,
    screen_channels,
    storey_pi0,
)
from .node import SolveConfig, VectorField, adjoint_gradient, integrate
from .pipeline import (
    RunConfig,
    desk_config,
    emit_report,
    fewshot_benchmark_config,
    run_ablations,
    run_baselines,
    run_motifs,
    run_phase1,
    run_phase2,
    run_riskbound,
    run_seed_stability,
    run_support_sweep,
)
from .prototypes import (
    CoverageCertificate,
    FrozenMemoryError,
    PrototypeMemory,
    ProjectionChain,
    cluster_prototypes,
    coverage_certificate,
    diagnostics,
    l0_fit,
    merge_prototypes,
)
from .retrieval import (
    ProximalConfig,
    RetrievalNet,
    RetrievalSolution,
    TrainConfig,
    compose_adapter,
    hard_top_r,
    outer_objective,
    retrieve,
    solve_proximal,
    sweep_lambda_eta,
    train_retrieval,
)
from .riskbound import check_bound, check_bounds_over_tasks, lipschitz_constant, sparsity_capacity_term
from .spectral import (
    DimTestReport,
    FisherSpectrum,
    corpus_fisher_spectrum,
    fisher_ci_vs_support,
    fisher_energy_test,
    fisher_energy_test_tasks,
    fisher_spectrum,
    jl_outside_energy,
    pca_rank,
    sequential_r_selection,
)
from .synthdata import Corpus, EpisodeTask, GeneratorConfig, generate_corpus, partition_tasks, spearman

__version__ = "0.1.0"
