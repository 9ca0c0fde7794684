"""End-to-end orchestration: memory construction, retrieval training, baselines,
motif statistics, bound checks, and the report bundle.

Phase 1 estimates seed adapters, selects the rank, freezes the projection,
clusters prototypes, and certifies coverage. Phase 2 trains the retrieval
network on the outer objective with periodic diagnostics and early stopping.
All tabular outputs are deterministic functions of the run configuration;
wall-clock measurements go to runtime.txt and run.log only, never into CSVs.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import Canonicalizer, assemble_theta, fit_canonicalizer, ridge_adapter
from .descriptors import ProbeHead, Standardizer, build_descriptor
from .metrics import MetricsRecord, calibration_bins, compute_metrics
from .motifs import (
    DESK_PERMUTATION_FLOOR,
    calibrate_tau,
    channel_activations,
    fit_background,
    make_channels,
    motif_test_report,
)
from .node import SolveConfig, VectorField, adjoint_gradient, integrate
from .prototypes import (
    ProjectionChain,
    cluster_prototypes,
    coverage_certificate,
    merge_prototypes,
)
from .retrieval import (
    Adam,
    ProximalConfig,
    TrainConfig,
    compose_adapter,
    predict_task,
    retrieve,
    sweep_lambda_eta,
    train_retrieval,
)
from .riskbound import check_bounds_over_tasks, feature_radius_of, lipschitz_constant
from .spectral import (
    TaskGradientSummary,
    corpus_fisher_spectrum,
    fisher_energy_test,
    fisher_energy_test_tasks,
    jl_outside_energy,
    pca_rank,
    rank_curve,
    sequential_r_selection,
)
from .synthdata import GeneratorConfig, generate_corpus, partition_tasks, resample_support, save_corpus
from .util import ValidationError, child_rng, config_hash, require, sigmoid, write_csv, write_json

# Search-grid defaults from the experiment protocol; desk profiles override.
DEFAULT_K_GRID = (50, 100, 200)
DEFAULT_LAMBDA_GRID = (1e-6, 1e-5, 1e-4, 1e-3)
DEFAULT_GAMMA_GRID = (0.0, 1e-2, 1e-1, 1.0)
DEFAULT_R_GRID = (10, 20, 50)
DEFAULT_SEEDS = (42, 2023, 777)
DEFAULT_SUPPORT_SIZES = (5, 10, 20, 50)


@dataclass
class OdeBlockConfig:
    kind: str = "ode"          # "ode", "mlp", or "none"
    hidden: int = 8
    t1: float = 1.0
    rtol: float = 1e-5
    atol: float = 1e-7
    lr: float = 1e-3
    init_scale: float = 0.1


@dataclass
class MotifRunConfig:
    n_channels: int = 60
    kmer: int = 3
    alphabet_size: int = 4
    order: int = 2
    pseudocount: float = 0.5
    seq_len_lo: int = 8
    seq_len_hi: int = 14
    seqs_per_repertoire: int = 20
    n_pos: int = 20
    n_neg: int = 20
    plant_rate: float = 0.6
    top_frac: float = 0.2
    b_min: int = DESK_PERMUTATION_FLOOR
    b_max: int = 20_000
    null_pool_size: int = 128
    cohorts: tuple = ("cohortA", "cohortB", "cohortC", "cohortD", "cohortE")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    seed: int = 42
    seeds: tuple = DEFAULT_SEEDS
    outdir: str = "runs/latest"

    # partitioning
    frac_pre: float = 0.5
    frac_seed: float = 0.8
    tau_sim: float = 0.8
    ret_fracs: tuple = (0.6, 0.2, 0.2)

    # rank selection and memory
    rho: float = 0.99
    rho_list: tuple = (0.9, 0.95, 0.99)
    k_grid: tuple = DEFAULT_K_GRID
    n_restarts: int = 8
    ridge_alpha: float = 1e-2
    # per-sample ridge coefficient for few-shot supports (the effective
    # penalty is alpha * n_support, keeping the shrinkage ratio constant
    # across support sizes); tuned on validation splits
    ridge_alpha_retrieval: float = 0.2
    r_sparse: int | None = None
    coverage_n_boot: int = 1000
    dim_n_boot: int = 1000
    mu_threshold: float = 0.95
    kappa_threshold: float = 1e4
    canonicalize: bool = True
    fixed_r: int | None = None          # ablation: skip rank selection

    # retrieval
    lam: float = 1e-4
    lam_grid: tuple = DEFAULT_LAMBDA_GRID
    gamma: float = 0.1
    # prior weight decays as support evidence grows: the effective proximity
    # coefficient is gamma * gamma_ref_size / n_support (disabled when None)
    gamma_ref_size: int | None = 5
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    eta: float = 0.01
    r_grid: tuple = DEFAULT_R_GRID
    r_keep: int | None = None           # None: use the selected rank
    t_prox: int = 10
    solver_tol: float = 1e-9
    hard_threshold: bool = True         # ablation C: soft-only when False
    epochs: int = 400
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 40
    jaccard_min: float = 0.9
    hidden: int = 32
    support_size_train: int | None = None
    train_sizes: tuple | None = None    # union-of-sizes episodic training
    support_sizes_eval: tuple = DEFAULT_SUPPORT_SIZES
    diag_period: int = 25

    # descriptor transform and motifs
    ode: OdeBlockConfig = field(default_factory=OdeBlockConfig)
    motifs: MotifRunConfig = field(default_factory=MotifRunConfig)
    fixed_tau: float | None = None      # ablation E: skip calibration
    use_storey: bool = True             # ablation F: Bonferroni-only when False

    def validate(self) -> None:
        self.generator.validate()
        require(all(k >= 1 for k in self.k_grid), "K grid must be positive")
        require(all(l >= 0 for l in self.lam_grid), "lambda grid must be nonnegative")
        require(all(g >= 0 for g in self.gamma_grid), "gamma grid must be nonnegative")
        require(len(self.seeds) >= 1, "need at least one seed")

    def to_dict(self) -> dict:
        def plain(obj):
            if isinstance(obj, tuple):
                return list(obj)
            if hasattr(obj, "__dict__"):
                return {k: plain(v) for k, v in vars(obj).items()}
            return obj
        return plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "generator" in data:
            data["generator"] = GeneratorConfig(**data["generator"])
        if "ode" in data:
            data["ode"] = OdeBlockConfig(**data["ode"])
        if "motifs" in data:
            mot = dict(data["motifs"])
            if "cohorts" in mot:
                mot["cohorts"] = tuple(mot["cohorts"])
            data["motifs"] = MotifRunConfig(**mot)
        for key in ("seeds", "ret_fracs", "rho_list", "k_grid", "lam_grid",
                    "gamma_grid", "r_grid", "support_sizes_eval"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def desk_config(seed: int = 42, outdir: str = "runs/desk") -> RunConfig:
    """Small-corpus profile that exercises every stage in seconds."""
    return RunConfig(
        generator=GeneratorConfig(d_theta=8, q=16, r_true=2, n_tasks=120,
                                  n_support=300, n_query=60, noise_sigma=0.0,
                                  seed=seed, n_clusters=3, cluster_spread=0.10),
        seed=seed,
        outdir=outdir,
        k_grid=(4, 6, 8),
        epochs=80,
        patience=30,
        support_size_train=5,
        gamma=0.1,
        eta=0.01,
        lam=1e-4,
        hidden=16,
        weight_decay=2e-3,
    )


def fewshot_benchmark_config(seed: int = 42, outdir: str = "runs/fewshot") -> RunConfig:
    """The planted-corpus profile used for few-shot scaling and seed stability."""
    return RunConfig(
        generator=GeneratorConfig(d_theta=8, q=16, r_true=2, n_tasks=240,
                                  n_support=800, n_query=400, noise_sigma=0.0,
                                  seed=seed, n_clusters=3, cluster_spread=0.10),
        seed=seed,
        outdir=outdir,
        k_grid=(4, 6, 8),
        epochs=300,
        patience=60,
        train_sizes=(5, 10, 20, 50),
        gamma=0.1,
        eta=0.01,
        lam=1e-4,
        hidden=16,
        weight_decay=2e-3,
    )


# ---------------------------------------------------------------------------
# Descriptor transforms (continuous-time block and the ablation MLP)
# ---------------------------------------------------------------------------

class OdeTransform:
    """Descriptor warp driven by a trainable vector field, adjoint gradients."""

    def __init__(self, d_z: int, cfg: OdeBlockConfig, seed: int = 0):
        self.field = VectorField.create(m=d_z, hidden=cfg.hidden, seed=seed,
                                        scale=cfg.init_scale)
        self.solve_cfg = SolveConfig(rtol=cfg.rtol, atol=cfg.atol, t0=0.0, t1=cfg.t1)
        self._params = {"phi": self.field.params_vector()}
        self.opt = Adam(self._params, lr=cfg.lr)
        self.solver_log: list[dict] = []

    def forward(self, z: np.ndarray) -> np.ndarray:
        result = integrate(self.field, z, self.solve_cfg)
        if len(self.solver_log) < 1000:
            self.solver_log.append({"steps": result.n_steps,
                                    "rejected": result.n_rejected,
                                    "stiff": result.stiff})
        return result.z1

    def apply_batch(self, pairs) -> None:
        grad = np.zeros_like(self._params["phi"])
        for z_raw, gz_out in pairs:
            res = adjoint_gradient(self.field, z_raw, self.solve_cfg, gz_out)
            grad += res.grad_params
        self.opt.step({"phi": grad})
        self.field = self.field.with_params(self._params["phi"])


class MlpTransform:
    """Residual two-layer map used by the continuous-time ablation."""

    def __init__(self, d_z: int, hidden: int = 8, seed: int = 0, lr: float = 1e-3,
                 init_scale: float = 0.1):
        rng = child_rng(seed, "mlp-transform")
        self.params = {
            "w1": init_scale * rng.normal(size=(hidden, d_z)) / np.sqrt(d_z),
            "b1": np.zeros(hidden),
            "w2": init_scale * rng.normal(size=(d_z, hidden)) / np.sqrt(hidden),
            "b2": np.zeros(d_z),
        }
        self.opt = Adam(self.params, lr=lr)

    def forward(self, z: np.ndarray) -> np.ndarray:
        h = np.tanh(self.params["w1"] @ z + self.params["b1"])
        return z + self.params["w2"] @ h + self.params["b2"]

    def apply_batch(self, pairs) -> None:
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        for z, gz_out in pairs:
            h = np.tanh(self.params["w1"] @ z + self.params["b1"])
            grads["w2"] += np.outer(gz_out, h)
            grads["b2"] += gz_out
            gh = self.params["w2"].T @ gz_out
            gpre = gh * (1.0 - h**2)
            grads["w1"] += np.outer(gpre, z)
            grads["b1"] += gpre
        self.opt.step(grads)


def make_transform(kind: str, d_z: int, cfg: OdeBlockConfig, seed: int):
    if kind == "ode":
        return OdeTransform(d_z, cfg, seed=seed)
    if kind == "mlp":
        return MlpTransform(d_z, hidden=cfg.hidden, seed=seed, lr=cfg.lr,
                            init_scale=cfg.init_scale)
    if kind == "none":
        return None
    raise ValidationError(f"unknown descriptor transform kind {kind!r}")


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------

@dataclass
class Phase1Artifacts:
    cfg: RunConfig
    corpus: object
    partition: object
    theta_seed: object
    theta_pre: object
    rank_selected: int
    dim_report: object
    dim_report_tasks: object
    sequential: object
    jl_report: object
    memory: object
    certificate: object
    probe: ProbeHead
    standardizer: Standardizer
    merge_log: list
    k_chosen: int
    notes: list


def run_phase1(cfg: RunConfig, outdir: Path | None = None) -> Phase1Artifacts:
    """Memory construction: adapters, rank tests, clustering, certificate."""
    cfg.validate()
    notes: list[str] = []
    corpus = generate_corpus(cfg.generator)
    fmap = corpus.feature_map()

    adapters = {t.task_id: ridge_adapter(t, fmap, cfg.ridge_alpha) for t in corpus.tasks}
    vectors = np.stack([adapters[t.task_id] for t in corpus.tasks])
    partition = partition_tasks(corpus.tasks, frac_pre=cfg.frac_pre,
                                frac_seed=cfg.frac_seed, tau_sim=cfg.tau_sim,
                                seed=cfg.seed, vectors=vectors,
                                ret_fracs=cfg.ret_fracs)

    seed_tasks = corpus.tasks_in("Pre-Seed")
    pre_tasks = corpus.tasks_in("Pre-Seed", "Pre-Rest")
    theta_seed = assemble_theta([adapters[t.task_id] for t in seed_tasks],
                                task_ids=[t.task_id for t in seed_tasks],
                                ridge_alpha=cfg.ridge_alpha)
    theta_pre = assemble_theta([adapters[t.task_id] for t in pre_tasks],
                               task_ids=[t.task_id for t in pre_tasks],
                               ridge_alpha=cfg.ridge_alpha)

    if cfg.fixed_r is not None:
        r_selected = int(cfg.fixed_r)
        notes.append(f"rank selection disabled; fixed r={r_selected}")
    else:
        r_selected = pca_rank(theta_seed, cfg.rho)

    spectrum = corpus_fisher_spectrum(seed_tasks, fmap)
    dim_report = fisher_energy_test(spectrum, r_center=r_selected,
                                    n_boot=cfg.dim_n_boot, seed=cfg.seed)
    summaries = [TaskGradientSummary.from_task(t, fmap) for t in seed_tasks]
    dim_report_tasks = fisher_energy_test_tasks(summaries, r_center=r_selected,
                                                n_boot=cfg.dim_n_boot, seed=cfg.seed)
    sequential = sequential_r_selection(theta_seed, r_center=r_selected,
                                        n_boot=cfg.dim_n_boot, seed=cfg.seed)
    if dim_report.selected_r is None:
        notes.append("eigenvalue-resampling energy test did not reject at any "
                     "candidate (expected on spiked spectra); task-resampling "
                     f"variant selected r={dim_report_tasks.selected_r}")

    canon = (fit_canonicalizer(theta_seed) if cfg.canonicalize
             else Canonicalizer.identity(theta_seed.d_theta))
    chain = ProjectionChain(canonicalizer=canon, r=r_selected)

    rest_tasks = corpus.tasks_in("Pre-Rest")
    jl_report = None
    d_theta = theta_seed.d_theta
    s_dim = min(d_theta - 1, max(r_selected + 1, (r_selected + d_theta) // 2))
    if len(rest_tasks) >= 3 and r_selected < s_dim < d_theta:
        holdout = assemble_theta([adapters[t.task_id] for t in rest_tasks])
        fisher_mat = sum(np.outer(s.mean, s.mean) for s in summaries) / len(summaries)
        jl_report = jl_outside_energy(holdout, fisher_mat, r=r_selected, s=s_dim,
                                      n_maps=16, seed=cfg.seed)
    else:
        notes.append("projection leakage check skipped: no holdout dimension "
                     f"with r={r_selected} < s < d={d_theta} available")

    n_seed = theta_seed.n_tasks
    usable_k = [k for k in cfg.k_grid if k <= n_seed]
    if len(usable_k) < len(cfg.k_grid):
        notes.append(f"K grid values above the seed count {n_seed} skipped: "
                     f"{[k for k in cfg.k_grid if k > n_seed]}")
    require(len(usable_k) >= 1, "no usable K values in the grid")
    # K selection: best cluster separation (silhouette), restart stability
    # as the tie-breaker, then parsimony
    candidates = []
    for k in usable_k:
        mem = cluster_prototypes(theta_seed, chain, k=k,
                                 n_restarts=cfg.n_restarts, seed=cfg.seed)
        candidates.append((round(mem.silhouette, 6), mem.restart_stability, -k, mem))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]), reverse=True)
    memory = candidates[0][3]
    k_chosen = memory.K

    merge_log = []
    if memory.mu > cfg.mu_threshold or memory.kappa > cfg.kappa_threshold:
        memory, merge_log = merge_prototypes(memory, cfg.mu_threshold,
                                             cfg.kappa_threshold,
                                             theta_pre=theta_pre,
                                             r_sparse=cfg.r_sparse or r_selected)
        notes.append(f"prototype merging triggered: {len(merge_log)} merges, "
                     f"K {k_chosen} -> {memory.K}")

    memory.freeze()
    certificate = coverage_certificate(memory, theta_pre,
                                       r_sparse=cfg.r_sparse or min(r_selected, memory.K),
                                       n_boot=cfg.coverage_n_boot, seed=cfg.seed)

    probe = ProbeHead.create(cfg.generator.d_theta, seed=cfg.seed)
    # standardization statistics must match the support sizes the retrieval
    # stage will see; the fit set stays pretraining-only either way
    std_size = min(cfg.train_sizes) if cfg.train_sizes else cfg.support_size_train
    if std_size is not None:
        std_tasks = [resample_support(corpus, t, std_size, tag="standardizer")
                     for t in pre_tasks]
    else:
        std_tasks = pre_tasks
    standardizer = Standardizer().fit_from_tasks(std_tasks)

    artifacts = Phase1Artifacts(
        cfg=cfg, corpus=corpus, partition=partition, theta_seed=theta_seed,
        theta_pre=theta_pre, rank_selected=r_selected, dim_report=dim_report,
        dim_report_tasks=dim_report_tasks, sequential=sequential,
        jl_report=jl_report, memory=memory, certificate=certificate,
        probe=probe, standardizer=standardizer, merge_log=merge_log,
        k_chosen=k_chosen, notes=notes,
    )
    if outdir is not None:
        persist_phase1(artifacts, Path(outdir))
    return artifacts


def persist_phase1(artifacts: Phase1Artifacts, outdir: Path) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = artifacts.cfg
    write_json(outdir / "config.json", {"config": cfg.to_dict(), "hash": cfg.hash()})
    save_corpus(artifacts.corpus, outdir / "corpus.csv", outdir / "corpus_manifest.json")
    artifacts.theta_seed.to_csv(outdir / "adapters_seed.csv")
    artifacts.dim_report.to_csv(outdir / "rank_test_eigenvalues.csv")
    artifacts.dim_report_tasks.to_csv(outdir / "rank_test_tasks.csv")
    write_csv(outdir / "rank_sequential.csv",
              ["r", "mean_improvement", "p_value", "significant"],
              [[rec.r, rec.mean_improvement, rec.p_value, rec.significant]
               for rec in artifacts.sequential.records])
    curve = rank_curve(artifacts.theta_seed, cfg.rho_list, seed=cfg.seed)
    write_csv(outdir / "rank_curve.csv", ["n_tasks", "rho", "r"],
              [[row["n_tasks"], row["rho"], row["r"]] for row in curve])
    if artifacts.jl_report is not None:
        jl = artifacts.jl_report
        write_csv(outdir / "projection_energy.csv",
                  ["map_index", "outside_fraction", "upper95", "threshold", "accept"],
                  [[i, f, jl.upper95, jl.threshold, jl.accept]
                   for i, f in enumerate(jl.fractions)])
    artifacts.memory.save(outdir / "memory.csv", outdir / "memory.json")
    if artifacts.merge_log:
        lines = [f"merge pair={evt.pair} mu_before={evt.mu_before:.6f} "
                 f"K_after={evt.k_after} coverage {evt.coverage_before} -> {evt.coverage_after}"
                 for evt in artifacts.merge_log]
        (outdir / "merge_log.txt").write_text("\n".join(lines) + "\n")
    write_json(outdir / "phase1_summary.json", {
        "rank_selected": artifacts.rank_selected,
        "fisher_selected_tasks": artifacts.dim_report_tasks.selected_r,
        "fisher_selected_eigenvalues": artifacts.dim_report.selected_r,
        "sequential_selected": artifacts.sequential.selected_r,
        "k_chosen": artifacts.k_chosen,
        "k_final": artifacts.memory.K,
        "kappa": None if np.isinf(artifacts.memory.kappa) else artifacts.memory.kappa,
        "mu": artifacts.memory.mu,
        "eps_hat": artifacts.certificate.eps_hat,
        "eps_upper": artifacts.certificate.eps_upper,
        "notes": artifacts.notes,
    })


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------

@dataclass
class Phase2Result:
    net: object
    transform: object
    history: list
    metrics: dict
    theta_hats: dict
    descriptors: dict
    latency_ms: float
    support_size: int | None


def _ret_tasks_at_size(artifacts: Phase1Artifacts, tag: str, size: int | None,
                       resample_tag: str = "support-size"):
    tasks = artifacts.corpus.tasks_in(tag)
    if size is None:
        return tasks
    return [resample_support(artifacts.corpus, t, size, tag=resample_tag) for t in tasks]


def _ret_tasks_union(artifacts: Phase1Artifacts, tag: str, sizes):
    """One episode per (task, size) pair; ids carry a size suffix."""
    out = []
    for size in sizes:
        for task in _ret_tasks_at_size(artifacts, tag, size):
            clone = replace(task, task_id=f"{task.task_id}@{size}")
            out.append(clone)
    return out


def _prepare_inputs(artifacts: Phase1Artifacts, tasks):
    cfg = artifacts.cfg
    fmap = artifacts.corpus.feature_map()
    descriptors = {}
    theta_hats = {}
    for task in tasks:
        descriptors[task.task_id] = build_descriptor(
            task, artifacts.probe, artifacts.memory.chain, artifacts.standardizer, fmap)
        theta_hats[task.task_id] = ridge_adapter(
            task, fmap, cfg.ridge_alpha_retrieval * task.n_support)
    return descriptors, theta_hats


def _proximal_config(cfg: RunConfig):
    """Per-task solver settings; the proximity weight scales with evidence."""
    if cfg.gamma_ref_size is None:
        return ProximalConfig(lam=cfg.lam, gamma=cfg.gamma, t_prox=cfg.t_prox,
                              tol=cfg.solver_tol)

    def factory(task):
        gamma = cfg.gamma * cfg.gamma_ref_size / max(task.n_support, 1)
        return ProximalConfig(lam=cfg.lam, gamma=gamma, t_prox=cfg.t_prox,
                              tol=cfg.solver_tol)

    return factory


def _split_metrics(tasks, artifacts, net, transform, descriptors, theta_hats,
                   pcfg, r_keep, time_solves: bool = False):
    fmap = artifacts.corpus.feature_map()
    probs_all, labels_all = [], []
    elapsed = 0.0
    n_solved = 0
    for task in tasks:
        t0 = time.perf_counter()
        probs, _ = predict_task(task, artifacts.memory, net, descriptors[task.task_id],
                                theta_hats[task.task_id], pcfg, r_keep, fmap,
                                transform=transform,
                                hard_threshold=artifacts.cfg.hard_threshold)
        elapsed += time.perf_counter() - t0
        n_solved += 1
        probs_all.append(probs)
        labels_all.append(task.query_y)
    record = compute_metrics(np.concatenate(probs_all), np.concatenate(labels_all))
    latency_ms = 1000.0 * elapsed / max(n_solved, 1)
    return record, latency_ms, np.concatenate(probs_all), np.concatenate(labels_all)


def run_phase2(cfg: RunConfig, artifacts: Phase1Artifacts,
               outdir: Path | None = None, seed: int | None = None) -> Phase2Result:
    """Retrieval training on the anti-leakage splits plus test metrics."""
    seed = cfg.seed if seed is None else seed
    size = cfg.support_size_train
    if cfg.train_sizes:
        train_tasks = _ret_tasks_union(artifacts, "Ret-Train", cfg.train_sizes)
        # validate and test at the smallest size: the hardest regime drives
        # early stopping and is the reported few-shot operating point
        if size is None:
            size = min(cfg.train_sizes)
        val_tasks = _ret_tasks_at_size(artifacts, "Ret-Val", size)
    else:
        train_tasks = _ret_tasks_at_size(artifacts, "Ret-Train", size)
        val_tasks = _ret_tasks_at_size(artifacts, "Ret-Val", size)
    test_tasks = _ret_tasks_at_size(artifacts, "Ret-Test", size)

    all_tasks = train_tasks + val_tasks + test_tasks
    descriptors, theta_hats = _prepare_inputs(artifacts, all_tasks)

    d_z = descriptors[train_tasks[0].task_id].values.shape[0]
    transform = make_transform(cfg.ode.kind, d_z, cfg.ode, seed=seed)

    pcfg = _proximal_config(cfg)
    r_keep = cfg.r_keep if cfg.r_keep is not None else min(artifacts.rank_selected,
                                                           artifacts.memory.K)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       weight_decay=cfg.weight_decay, patience=cfg.patience,
                       jaccard_min=cfg.jaccard_min, seed=seed, r_keep=r_keep,
                       eta=cfg.eta)
    result = train_retrieval(train_tasks, artifacts.memory, descriptors, theta_hats,
                             artifacts.corpus.feature_map(), pcfg, tcfg,
                             val_tasks=val_tasks, transform=transform)

    metrics = {}
    latency_ms = 0.0
    probs_labels = {}
    for tag, tasks in (("train", train_tasks), ("val", val_tasks), ("test", test_tasks)):
        record, lat, probs, labels = _split_metrics(tasks, artifacts, result.net,
                                                    transform, descriptors, theta_hats,
                                                    pcfg, r_keep, time_solves=True)
        metrics[tag] = record
        probs_labels[tag] = (probs, labels)
        if tag == "test":
            latency_ms = lat

    out = Phase2Result(net=result.net, transform=transform, history=result.history,
                       metrics=metrics, theta_hats=theta_hats, descriptors=descriptors,
                       latency_ms=latency_ms, support_size=size)
    if outdir is not None:
        persist_phase2(cfg, artifacts, out, probs_labels, Path(outdir))
    return out


def persist_phase2(cfg: RunConfig, artifacts: Phase1Artifacts, result: Phase2Result,
                   probs_labels: dict, outdir: Path) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(outdir / "training_curve.csv",
              ["epoch", "train_loss", "val_auc", "jaccard"],
              [[row.epoch, row.train_loss, row.val_auc, row.jaccard]
               for row in result.history])
    write_csv(outdir / "metrics.csv",
              ["split"] + MetricsRecord.header(),
              [[tag] + rec.row() for tag, rec in result.metrics.items()])
    probs, labels = probs_labels["test"]
    write_csv(outdir / "calibration_bins.csv",
              ["bin", "lo", "hi", "count", "confidence", "frequency"],
              [[r["bin"], r["lo"], r["hi"], r["count"], r["confidence"], r["frequency"]]
               for r in calibration_bins(probs, labels)])
    # periodic diagnostics: memory health plus validation state every period
    rows = []
    for row in result.history:
        if row.epoch % cfg.diag_period == 0:
            rows.append([row.epoch, artifacts.memory.kappa, artifacts.memory.mu,
                         artifacts.certificate.eps_hat, artifacts.certificate.eps_upper,
                         row.val_auc, row.jaccard])
    write_csv(outdir / "diagnostics.csv",
              ["epoch", "kappa", "mu", "eps_hat", "eps_upper", "val_auc", "jaccard"],
              rows)

    from .descriptors import descriptors_to_csv
    descriptors_to_csv(result.descriptors, outdir / "descriptors.csv")

    # trained retrieval parameters into the run manifest
    write_json(outdir / "retrieval_net.json",
               {name: arr.tolist() for name, arr in result.net.params.items()})

    # one worked solver trace for audit, plus the penalty-surface sweep
    fmap = artifacts.corpus.feature_map()
    test_tasks = _ret_tasks_at_size(artifacts, "Ret-Test", result.support_size)
    pcfg_base = _proximal_config(cfg)
    pcfg_of = pcfg_base if callable(pcfg_base) else (lambda task: pcfg_base)
    sample = test_tasks[0]
    z = result.descriptors[sample.task_id].values
    if result.transform is not None:
        z = result.transform.forward(z)
    from .retrieval import solve_proximal
    trace_sol = solve_proximal(result.theta_hats[sample.task_id], artifacts.memory,
                               result.net.forward(z), pcfg_of(sample))
    write_csv(outdir / "solver_trace.csv", ["iteration", "objective"],
              list(enumerate(trace_sol.objective_trace)))

    val_tasks = _ret_tasks_at_size(artifacts, "Ret-Val", result.support_size)
    d_val, t_val = _prepare_inputs(artifacts, val_tasks)
    r_keep = cfg.r_keep if cfg.r_keep is not None else min(artifacts.rank_selected,
                                                           artifacts.memory.K)
    surface = sweep_lambda_eta(cfg.lam_grid, (0.0, cfg.eta), val_tasks,
                               artifacts.memory, result.net, d_val, t_val,
                               pcfg_of(val_tasks[0]), r_keep, fmap,
                               transform=result.transform)
    write_csv(outdir / "sweep_lambda_eta.csv",
              ["lam", "eta", "auc", "mean_l0_pre", "mean_l0_post", "mean_objective"],
              [[r["lam"], r["eta"], r["auc"], r["mean_l0_pre"], r["mean_l0_post"],
                r["mean_objective"]] for r in surface])

    log_lines = [f"phase2 stopped at epoch {result.stopped_epoch if hasattr(result, 'stopped_epoch') else len(result.history) - 1}"]
    if isinstance(result.transform, OdeTransform) and result.transform.solver_log:
        steps = [e["steps"] for e in result.transform.solver_log]
        rej = [e["rejected"] for e in result.transform.solver_log]
        stiff = sum(e["stiff"] for e in result.transform.solver_log)
        log_lines.append(
            f"descriptor flow solver: {len(steps)} solves, mean steps {np.mean(steps):.1f}, "
            f"mean rejected {np.mean(rej):.2f}, stiff flags {stiff}, "
            f"settings {result.transform.solve_cfg.as_log_dict()}")
    with open(outdir / "run.log", "a") as fh:
        fh.write("\n".join(log_lines) + "\n")
    (outdir / "runtime.txt").write_text(
        "split latency accounting (solve plus compose path only)\n"
        f"per_task_ms test {result.latency_ms:.3f}\n")


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _ridge_predictions(tasks, fmap, alpha, fit_on_query=False):
    probs_all, labels_all = [], []
    elapsed = 0.0
    for task in tasks:
        t0 = time.perf_counter()
        if fit_on_query:
            donor = type(task)(task_id=task.task_id, support_x=task.query_x,
                               support_y=task.query_y, query_x=task.query_x,
                               query_y=task.query_y, theta_true=task.theta_true,
                               partition=task.partition, cluster_id=task.cluster_id,
                               index=task.index)
            theta = ridge_adapter(donor, fmap, alpha)
        else:
            theta = ridge_adapter(task, fmap, alpha)
        probs = sigmoid(fmap(task.query_x) @ theta)
        elapsed += time.perf_counter() - t0
        probs_all.append(probs)
        labels_all.append(task.query_y)
    return (np.concatenate(probs_all), np.concatenate(labels_all),
            1000.0 * elapsed / max(len(tasks), 1))


def _nearest_centroid_predictions(tasks):
    probs_all, labels_all = [], []
    elapsed = 0.0
    for task in tasks:
        t0 = time.perf_counter()
        pos = task.support_x[task.support_y == 1]
        neg = task.support_x[task.support_y == 0]
        c_pos = pos.mean(axis=0)
        c_neg = neg.mean(axis=0)
        margin = (np.linalg.norm(task.query_x - c_neg, axis=1)
                  - np.linalg.norm(task.query_x - c_pos, axis=1))
        probs = sigmoid(margin)
        elapsed += time.perf_counter() - t0
        probs_all.append(probs)
        labels_all.append(task.query_y)
    return (np.concatenate(probs_all), np.concatenate(labels_all),
            1000.0 * elapsed / max(len(tasks), 1))


def run_baselines(cfg: RunConfig, artifacts: Phase1Artifacts,
                  outdir: Path | None = None, support_size: int | None = None):
    """Support-side ridge, nearest-centroid, and the query-trained oracle ridge."""
    size = support_size if support_size is not None else cfg.support_size_train
    test_tasks = _ret_tasks_at_size(artifacts, "Ret-Test", size)
    fmap = artifacts.corpus.feature_map()

    tracemalloc.start()
    results = {}
    probs, labels, lat = _ridge_predictions(test_tasks, fmap, cfg.ridge_alpha)
    results["ridge_support"] = (compute_metrics(probs, labels), lat)
    probs, labels, lat = _nearest_centroid_predictions(test_tasks)
    results["nearest_centroid"] = (compute_metrics(probs, labels), lat)
    probs, labels, lat = _ridge_predictions(test_tasks, fmap, cfg.ridge_alpha,
                                            fit_on_query=True)
    results["oracle_ridge"] = (compute_metrics(probs, labels), lat)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_csv(outdir / "baselines.csv",
                  ["baseline"] + MetricsRecord.header(),
                  [[name] + rec.row() for name, (rec, _) in results.items()])
        lines = ["baseline runtime table (per-task ms, solve path only; "
                 "peak memory is an allocator high-water estimate)"]
        for name, (_, lat) in results.items():
            lines.append(f"per_task_ms {name} {lat:.3f}")
        lines.append(f"peak_memory_bytes approx {peak}")
        (outdir / "runtime.txt").write_text("\n".join(lines) + "\n")
    return results


# ---------------------------------------------------------------------------
# Support-size sweep and seed stability
# ---------------------------------------------------------------------------

def run_support_sweep(cfg: RunConfig, artifacts: Phase1Artifacts, phase2: Phase2Result,
                      outdir: Path | None = None, sizes=None):
    """Test metrics across support sizes with the trained retrieval net."""
    sizes = tuple(sizes if sizes is not None else cfg.support_sizes_eval)
    pcfg = _proximal_config(cfg)
    r_keep = cfg.r_keep if cfg.r_keep is not None else min(artifacts.rank_selected,
                                                           artifacts.memory.K)
    rows = []
    for size in sizes:
        tasks = _ret_tasks_at_size(artifacts, "Ret-Test", size)
        descriptors, theta_hats = _prepare_inputs(artifacts, tasks)
        record, lat, _, _ = _split_metrics(tasks, artifacts, phase2.net,
                                           phase2.transform, descriptors, theta_hats,
                                           pcfg, r_keep)
        rows.append({"support_size": size, "auc": record.auc, "f1": record.f1,
                     "ece": record.ece, "latency_ms": lat})
    if outdir is not None:
        outdir = Path(outdir)
        write_csv(outdir / "support_curve.csv",
                  ["support_size", "auc", "f1", "ece"],
                  [[r["support_size"], r["auc"], r["f1"], r["ece"]] for r in rows])
        with open(outdir / "runtime.txt", "a") as fh:
            for r in rows:
                fh.write(f"per_task_ms support{r['support_size']} {r['latency_ms']:.3f}\n")
    return rows


def run_seed_stability(cfg: RunConfig, artifacts: Phase1Artifacts,
                       outdir: Path | None = None, seeds=None):
    """Phase-2 metric spread across training seeds on the fixed corpus."""
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    per_seed = {}
    for seed in seeds:
        result = run_phase2(cfg, artifacts, outdir=None, seed=seed)
        per_seed[seed] = result.metrics["test"]
    stats = {}
    for metric in ("auc", "f1", "ece"):
        vals = np.array([getattr(rec, metric) for rec in per_seed.values()])
        stats[metric] = {"mean": float(vals.mean()), "std": float(vals.std()),
                         "lo": float(vals.min()), "hi": float(vals.max())}
    if outdir is not None:
        outdir = Path(outdir)
        write_csv(outdir / "seed_stability.csv",
                  ["metric", "mean", "std", "range_lo", "range_hi"],
                  [[m, s["mean"], s["std"], s["lo"], s["hi"]]
                   for m, s in stats.items()])
    return per_seed, stats


# ---------------------------------------------------------------------------
# Motif pipeline over synthetic cohorts
# ---------------------------------------------------------------------------

def _synthetic_repertoire(background, channels, n_seqs, plant, rng):
    seqs = background.sample(n_seqs, rng)
    if plant:
        k = channels.shape[1]
        for seq in seqs:
            if seq.size >= k and rng.random() < 0.9:
                motif = channels[rng.integers(0, channels.shape[0])]
                pos = rng.integers(0, seq.size - k + 1)
                seq[pos:pos + k] = motif
    return seqs


def run_motifs(cfg: RunConfig, outdir: Path | None = None):
    """Synthetic-cohort motif statistics: screening, q-values, calibration."""
    mcfg = cfg.motifs
    rng_base = child_rng(cfg.seed, "motif-corpus")
    base_seqs = [rng_base.integers(0, mcfg.alphabet_size,
                                   size=rng_base.integers(mcfg.seq_len_lo, mcfg.seq_len_hi + 1))
                 for _ in range(200)]
    background = fit_background(base_seqs, order=mcfg.order,
                                pseudocount=mcfg.pseudocount,
                                alphabet_size=mcfg.alphabet_size)

    calibrations = []
    report = None
    for c_i, cohort in enumerate(mcfg.cohorts):
        channels = make_channels(mcfg.n_channels, k=mcfg.kmer,
                                 alphabet_size=mcfg.alphabet_size,
                                 seed=cfg.seed + 101 * c_i)
        rngs = child_rng(cfg.seed, "motif-cohort", cohort)
        planted = channels[: max(2, mcfg.n_channels // 10)]
        pos_reps = [_synthetic_repertoire(background, planted, mcfg.seqs_per_repertoire,
                                          True, rngs) for _ in range(mcfg.n_pos)]
        neg_reps = [_synthetic_repertoire(background, planted, mcfg.seqs_per_repertoire,
                                          False, rngs) for _ in range(mcfg.n_neg)]
        repertoires = pos_reps + neg_reps
        labels = np.array([1] * mcfg.n_pos + [0] * mcfg.n_neg)
        activations = channel_activations(channels, repertoires)

        if cfg.fixed_tau is not None:
            calibrations.append(None)
        else:
            calibrations.append(calibrate_tau(activations, labels, cohort=cohort,
                                              seed=cfg.seed))
        if c_i == 0:
            report = motif_test_report(channels, repertoires, background,
                                       top_frac=mcfg.top_frac, b_min=mcfg.b_min,
                                       b_max=mcfg.b_max,
                                       null_pool_size=mcfg.null_pool_size,
                                       seed=cfg.seed)
            if not cfg.use_storey:
                # ablation: familywise Bonferroni instead of the q-value path
                m = report.p_values.size
                report.q_values = np.minimum(1.0, report.p_values * m)

    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        if cfg.fixed_tau is None:
            write_csv(outdir / "threshold_calibration.csv",
                      ["cohort", "tau_bar", "se", "t_abs", "p_value", "delta_auc",
                       "pass", "zero_variance", "retries"],
                      [[c.cohort, c.tau_bar, c.se, c.t_abs, c.p_value, c.delta_auc,
                        c.passed, c.zero_variance, c.n_retries]
                       for c in calibrations])
        write_csv(outdir / "motif_tests.csv",
                  ["channel", "p_value", "q_value", "b_used"],
                  [[int(ch), p, q, int(b)] for ch, p, q, b in
                   zip(report.screened, report.p_values, report.q_values, report.b_used)])
        from .motifs import power_curve
        curve = power_curve((0.0, 0.5, 1.0, 2.0, 4.0), alpha=0.05,
                            null_sampler=lambda rng, size: rng.normal(size=size),
                            n_trials=60, m_channels=30, b_perm=300, seed=cfg.seed)
        write_csv(outdir / "power_curve.csv",
                  ["effect", "rate_p", "rate_q"],
                  [[r["effect"], r["rate_p"], r["rate_q"]] for r in curve])
        write_json(outdir / "motif_summary.json", {
            "pi0": report.pi0.pi0,
            "pi0_ci90": list(report.pi0.ci90),
            "screened": int(report.screened.size),
            "significant_at_q10": int(report.significant(0.1).size),
            "fixed_tau": cfg.fixed_tau,
        })
    return calibrations, report


# ---------------------------------------------------------------------------
# Risk-bound harness
# ---------------------------------------------------------------------------

def run_riskbound(cfg: RunConfig, artifacts: Phase1Artifacts,
                  outdir: Path | None = None):
    fmap = artifacts.corpus.feature_map()
    summary = check_bounds_over_tasks(artifacts.corpus.tasks, artifacts.memory,
                                      artifacts.certificate, fmap)
    radius = feature_radius_of(artifacts.corpus.tasks, fmap)
    lip = lipschitz_constant(radius)
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_csv(outdir / "riskbound.csv",
                  ["task_id", "eps_app", "eps_coverage", "eps_certified", "lipschitz",
                   "emp_gap", "adapter_gap", "deterministic_bound", "certified_bound",
                   "triangle_holds", "per_task_bound_holds", "certified_bound_holds"],
                  [[r.task_id, r.eps_app, r.eps_coverage, r.eps_certified, r.lipschitz,
                    r.emp_gap, r.adapter_gap, r.deterministic_bound, r.certified_bound,
                    r.triangle_holds, r.per_task_bound_holds, r.certified_bound_holds]
                   for r in summary.reports])
        with open(outdir / "run.log", "a") as fh:
            fh.write(summary.as_text() + f" | global lipschitz {lip.lipschitz:.4f}\n")
    return summary


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "full": {},
    "fixed_r": {"fixed_r": 5},
    "soft_l1_only": {"hard_threshold": False},
    "gamma_zero": {"gamma": 0.0},
    "fixed_tau": {"fixed_tau": 0.5},
    "bonferroni_only": {"use_storey": False},
    "no_canonicalization": {"canonicalize": False},
    "mlp_instead_of_ode": {"ode_kind": "mlp"},
}


def ablation_config(cfg: RunConfig, variant: str) -> RunConfig:
    require(variant in ABLATION_VARIANTS, f"unknown ablation variant {variant!r}")
    overrides = dict(ABLATION_VARIANTS[variant])
    ode_kind = overrides.pop("ode_kind", None)
    new_cfg = replace(cfg, **overrides) if overrides else replace(cfg)
    if ode_kind is not None:
        new_cfg = replace(new_cfg, ode=OdeBlockConfig(
            kind=ode_kind, hidden=cfg.ode.hidden, t1=cfg.ode.t1, rtol=cfg.ode.rtol,
            atol=cfg.ode.atol, lr=cfg.ode.lr, init_scale=cfg.ode.init_scale))
    return new_cfg


def run_ablations(cfg: RunConfig, variants, outdir: Path | None = None):
    rows = []
    for variant in variants:
        vcfg = ablation_config(cfg, variant)
        artifacts = run_phase1(vcfg)
        result = run_phase2(vcfg, artifacts)
        rec = result.metrics["test"]
        rows.append({"variant": variant, "auc": rec.auc, "f1": rec.f1,
                     "ece": rec.ece, "latency_ms": result.latency_ms,
                     "rank": artifacts.rank_selected, "k": artifacts.memory.K})
    if outdir is not None:
        outdir = Path(outdir)
        write_csv(outdir / "ablations.csv",
                  ["variant", "auc", "f1", "ece", "rank", "k"],
                  [[r["variant"], r["auc"], r["f1"], r["ece"], r["rank"], r["k"]]
                   for r in rows])
        with open(outdir / "runtime.txt", "a") as fh:
            for r in rows:
                fh.write(f"per_task_ms ablation_{r['variant']} {r['latency_ms']:.3f}\n")
    return rows


# ---------------------------------------------------------------------------
# Report bundle
# ---------------------------------------------------------------------------

def emit_report(outdir: Path) -> Path:
    """Assemble the plain-text summary over whatever artifacts exist."""
    outdir = Path(outdir)
    require(outdir.exists(), f"output directory {outdir} does not exist")
    lines = ["run report", "=" * 40]
    expected = [
        ("config.json", "configuration"),
        ("phase1_summary.json", "memory construction"),
        ("metrics.csv", "retrieval metrics"),
        ("baselines.csv", "baselines"),
        ("support_curve.csv", "support-size sweep"),
        ("seed_stability.csv", "seed stability"),
        ("threshold_calibration.csv", "threshold calibration"),
        ("riskbound.csv", "bound checks"),
        ("ablations.csv", "ablations"),
    ]
    for name, label in expected:
        present = (outdir / name).exists()
        lines.append(f"[{'x' if present else ' '}] {label}: {name}")
    phase2_present = (outdir / "metrics.csv").exists()
    if not phase2_present:
        lines.append("phase-1-only bundle: retrieval training has not run")
    summary = outdir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    return summary
