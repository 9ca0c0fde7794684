"""Spectral rank diagnostics: PCA energy rule, Fisher spectra, bootstrap tests.

Two bootstrap selectors live here. The percentile test on the Fisher energy
ratio resamples the eigenvalue vector itself and Bonferroni-corrects five
neighbouring candidate dimensions; a task-resampling variant of the same test
is provided because eigenvalue resampling is uninformative on strongly spiked
spectra (see fisher_energy_test notes). The sequential selector compares
reconstruction errors of adjacent PCA dimensions with paired bootstrap tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .resampling import (
    bootstrap_indices,
    exhaustive_index_tuples,
    percentile_interval,
    shift_bootstrap_pvalue,
)
from .util import ValidationError, check_finite, child_rng, require, sigmoid, write_csv

BONFERRONI_FAMILY = 5      # the candidate family {r-2, ..., r+2}
DEFAULT_H0_LEVEL = 0.95    # null energy level of the ratio test


# ---------------------------------------------------------------------------
# PCA energy rank rule
# ---------------------------------------------------------------------------

def singular_spectrum(theta) -> np.ndarray:
    rows = theta.rows if hasattr(theta, "rows") else np.asarray(theta, dtype=float)
    return np.linalg.svd(rows, compute_uv=False)


def pca_rank(theta, rho: float) -> int:
    """Smallest r whose top-r squared singular values reach a fraction rho."""
    require(0.0 < rho < 1.0, "rho must lie in (0, 1)")
    s = singular_spectrum(theta)
    energy = s**2
    total = energy.sum()
    if total <= 0.0:
        raise ValidationError("all-zero adapter matrix has no spectrum")
    cumulative = np.cumsum(energy) / total
    return int(np.searchsorted(cumulative, rho - 1e-12) + 1)


def rank_curve(theta, rho_list, n_grid=None, seed: int = 0):
    """r as a function of the number of tasks N, for several rho values."""
    rows = theta.rows if hasattr(theta, "rows") else np.asarray(theta, dtype=float)
    n = rows.shape[0]
    if n_grid is None:
        n_grid = sorted({max(2, n // 4), max(2, n // 2), max(2, (3 * n) // 4), n})
    order = child_rng(seed, "rank-curve").permutation(n)
    out = []
    for n_sub in n_grid:
        require(2 <= n_sub <= n, "subset size out of range")
        subset = rows[order[:n_sub]]
        for rho in rho_list:
            out.append({"n_tasks": n_sub, "rho": rho, "r": pca_rank(subset, rho)})
    return out


# ---------------------------------------------------------------------------
# Fisher spectra
# ---------------------------------------------------------------------------

@dataclass
class FisherSpectrum:
    """Descending nonnegative eigenvalues of a regularized Fisher estimate."""

    eigenvalues: np.ndarray
    ridge_reg: float
    n_support: int

    def __post_init__(self):
        self.eigenvalues = check_finite(self.eigenvalues, "eigenvalues")
        require(np.all(np.diff(self.eigenvalues) <= 1e-12), "eigenvalues must be sorted descending")
        require(np.all(self.eigenvalues >= -1e-12), "eigenvalues must be nonnegative")
        self.eigenvalues = np.clip(self.eigenvalues, 0.0, None)

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]


def _default_reg(trace: float, d: int) -> float:
    # trace-relative floor keeps the energy ratio stable without drowning it
    return 1e-6 * trace / d if trace > 0 else 0.0


def task_gradients(task, feature_map, at=None) -> np.ndarray:
    """Per-sample probe-loss gradients of the task's linear head.

    The probe loss is the logistic loss of the adapter-parameterized
    classifier; gradients are taken at the reference adapter ``at``
    (zero by default), giving (p - y) * features per sample.
    """
    x = check_finite(feature_map(task.support_x), "support features")
    y = np.asarray(task.support_y, dtype=float)
    theta0 = np.zeros(x.shape[1]) if at is None else np.asarray(at, dtype=float)
    p = sigmoid(x @ theta0)
    return (p - y)[:, None] * x


def fisher_spectrum_from_gradients(grads: np.ndarray, reg: float | None = None) -> FisherSpectrum:
    grads = check_finite(grads, "gradients")
    n, d = grads.shape
    fisher = grads.T @ grads / n
    if reg is None:
        reg = _default_reg(float(np.trace(fisher)), d)
    require(reg >= 0.0, "reg must be nonnegative")
    fisher = fisher + reg * np.eye(d)
    eig = np.linalg.eigvalsh(fisher)[::-1]
    return FisherSpectrum(eigenvalues=np.clip(eig, 0.0, None), ridge_reg=reg, n_support=n)


def fisher_spectrum(task, feature_map, reg: float | None = None, at=None) -> FisherSpectrum:
    """Eigenvalues of (1/n) sum g g^T + reg I over per-sample gradients."""
    require(task.support_x.shape[0] >= 1, "support is empty")
    return fisher_spectrum_from_gradients(task_gradients(task, feature_map, at=at), reg=reg)


@dataclass
class TaskGradientSummary:
    """Per-task mean gradient and within-task gradient covariance."""

    mean: np.ndarray
    within_cov: np.ndarray
    n_support: int

    @classmethod
    def from_task(cls, task, feature_map, at=None) -> "TaskGradientSummary":
        g = task_gradients(task, feature_map, at=at)
        n = g.shape[0]
        mean = g.mean(axis=0)
        if n > 1:
            centred = g - mean
            cov = centred.T @ centred / (n - 1)
        else:
            cov = np.zeros((g.shape[1], g.shape[1]))
        return cls(mean=mean, within_cov=cov, n_support=n)


def _corpus_fisher_matrix(summaries, bias_correct: bool) -> np.ndarray:
    d = summaries[0].mean.shape[0]
    fisher = np.zeros((d, d))
    for s in summaries:
        fisher += np.outer(s.mean, s.mean)
        if bias_correct and s.n_support > 1:
            fisher -= s.within_cov / s.n_support
    fisher /= len(summaries)
    return 0.5 * (fisher + fisher.T)


def corpus_fisher_spectrum(tasks, feature_map, reg: float | None = None, at=None,
                           bias_correct: bool = True) -> FisherSpectrum:
    """Across-task Fisher spectrum from per-task mean probe gradients.

    Each task contributes the outer product of its support-averaged gradient;
    with ``bias_correct`` the within-task sampling covariance (scaled by
    1/n_support) is subtracted so the expected matrix is the pure across-task
    second moment. Trailing eigenvalues are clipped at zero.
    """
    require(len(tasks) >= 2, "need at least two tasks")
    summaries = [TaskGradientSummary.from_task(t, feature_map, at=at) for t in tasks]
    fisher = _corpus_fisher_matrix(summaries, bias_correct)
    d = fisher.shape[0]
    if reg is None:
        reg = _default_reg(float(np.trace(fisher)), d)
    eig = np.linalg.eigvalsh(fisher + reg * np.eye(d))[::-1]
    n_med = int(np.median([s.n_support for s in summaries]))
    return FisherSpectrum(eigenvalues=np.clip(eig, 0.0, None), ridge_reg=reg, n_support=n_med)


# ---------------------------------------------------------------------------
# Fisher energy ratio test
# ---------------------------------------------------------------------------

def energy_ratio(eigenvalues: np.ndarray, r: int) -> float:
    """Fraction of total spectrum mass in the top r eigenvalues."""
    eigenvalues = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    total = eigenvalues.sum()
    if total <= 0.0:
        raise ValidationError("degenerate spectrum: total energy is zero")
    if r <= 0:
        return 0.0
    return float(eigenvalues[: min(r, eigenvalues.shape[0])].sum() / total)


@dataclass
class DimTestRecord:
    r_cand: int
    zeta_emp: float
    p_raw: float
    p_adj: float
    reject: bool
    borderline: bool = False


@dataclass
class DimTestReport:
    records: list
    selected_r: int | None
    alpha: float
    n_boot: int
    mode: str = "eigenvalues"
    notes: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        header = ["r_cand", "zeta_emp", "p_raw", "p_adj", "reject", "selected", "borderline"]
        rows = [
            [rec.r_cand, rec.zeta_emp, rec.p_raw, rec.p_adj, rec.reject,
             rec.r_cand == self.selected_r, rec.borderline]
            for rec in self.records
        ]
        write_csv(path, header, rows)


def adjusted_pvalue(p_raw: float) -> float:
    """Bonferroni correction over the five-candidate family."""
    return min(1.0, BONFERRONI_FAMILY * p_raw)


def decision_report_from_pvalues(rows, alpha: float = 0.01, n_boot: int = 1000) -> DimTestReport:
    """Pure arithmetic on (r_cand, zeta_emp, p_raw) triples.

    Applies the five-way Bonferroni correction and the familywise alpha rule;
    rows that miss alpha but would pass 0.05 are flagged as borderline so
    threshold disagreements are visible in the output.
    """
    records = []
    for r_cand, zeta_emp, p_raw in rows:
        p_adj = adjusted_pvalue(p_raw)
        reject = p_adj <= alpha
        records.append(DimTestRecord(
            r_cand=int(r_cand), zeta_emp=float(zeta_emp), p_raw=float(p_raw),
            p_adj=p_adj, reject=reject, borderline=(not reject) and p_adj <= 0.05,
        ))
    rejecting = [rec.r_cand for rec in records if rec.reject]
    selected = min(rejecting) if rejecting else None
    notes = [f"r={rec.r_cand} fails the alpha={alpha} rule but lies below 0.05"
             for rec in records if rec.borderline]
    return DimTestReport(records=records, selected_r=selected, alpha=alpha,
                         n_boot=n_boot, mode="summary", notes=notes)


def _candidate_set(r_center: int, d: int) -> list:
    cands = [r for r in range(r_center - 2, r_center + 3) if 1 <= r <= d]
    if not cands:
        raise ValidationError("no valid candidate dimensions")
    return cands


def fisher_energy_test(spectrum: FisherSpectrum, r_center: int, n_boot: int = 1000,
                       alpha: float = 0.01, h0_level: float = DEFAULT_H0_LEVEL,
                       seed: int = 0, exhaustive: bool = False) -> DimTestReport:
    """Percentile bootstrap test of the energy ratio, eigenvalue resampling.

    For each candidate r the eigenvalue vector is resampled with replacement,
    the ratio is recomputed on the sorted resample, and the one-sided p-value
    counts replicates at or below ``h0_level``. Five-way Bonferroni correction
    and the familywise alpha rule give the decision; the selected dimension is
    the smallest rejecting candidate.

    Note: on strongly spiked spectra (a few eigenvalues carrying nearly all
    mass) the resampled ratio is bimodal and this procedure loses power; the
    task-resampling variant below stays informative there.
    """
    eig = spectrum.eigenvalues
    if eig.sum() <= 0.0:
        raise ValidationError("degenerate spectrum: total energy is zero")
    require(n_boot >= 1, "n_boot must be positive")
    d = spectrum.dim
    records = []
    for r_cand in _candidate_set(r_center, d):
        zeta_emp = energy_ratio(eig, r_cand)
        if exhaustive:
            replicates = []
            for idx in exhaustive_index_tuples(d):
                sample = eig[list(idx)]
                total = sample.sum()
                replicates.append(1.0 if total <= 0 else
                                  np.sort(sample)[::-1][:r_cand].sum() / total)
            replicates = np.asarray(replicates)
            used = replicates.shape[0]
        else:
            rng = child_rng(seed, "fisher-test", r_cand)
            idx = bootstrap_indices(d, n_boot, rng)
            samples = eig[idx]
            sums = samples.sum(axis=1)
            part = -np.sort(-samples, axis=1)[:, :r_cand].sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                replicates = np.where(sums > 0, part / np.maximum(sums, 1e-300), 1.0)
            used = n_boot
        p_raw = (1 + int(np.sum(replicates <= h0_level))) / (used + 1)
        p_adj = adjusted_pvalue(p_raw)
        reject = p_adj <= alpha
        records.append(DimTestRecord(
            r_cand=r_cand, zeta_emp=zeta_emp, p_raw=p_raw, p_adj=p_adj,
            reject=reject, borderline=(not reject) and p_adj <= 0.05,
        ))
    rejecting = [rec.r_cand for rec in records if rec.reject]
    return DimTestReport(records=records, selected_r=min(rejecting) if rejecting else None,
                         alpha=alpha, n_boot=n_boot, mode="eigenvalues")


def fisher_energy_test_tasks(summaries, r_center: int, n_boot: int = 1000,
                             alpha: float = 0.01, h0_level: float = DEFAULT_H0_LEVEL,
                             seed: int = 0, reg: float | None = None,
                             bias_correct: bool = True) -> DimTestReport:
    """Energy ratio test with task-level resampling.

    Resamples tasks with replacement, rebuilds the corpus Fisher matrix per
    replicate, and recomputes the ratio. Decision arithmetic is identical to
    the eigenvalue variant. Informative on spiked spectra, where the
    eigenvalue-resampling procedure cannot reject.
    """
    require(len(summaries) >= 2, "need at least two task summaries")
    require(n_boot >= 1, "n_boot must be positive")
    d = summaries[0].mean.shape[0]

    def spectrum_of(subset):
        fisher = _corpus_fisher_matrix(subset, bias_correct)
        reg_use = _default_reg(float(np.trace(fisher)), d) if reg is None else reg
        return np.clip(np.linalg.eigvalsh(fisher + reg_use * np.eye(d))[::-1], 0.0, None)

    eig_full = spectrum_of(summaries)
    if eig_full.sum() <= 0:
        raise ValidationError("degenerate corpus spectrum")
    records = []
    n_tasks = len(summaries)
    for r_cand in _candidate_set(r_center, d):
        zeta_emp = energy_ratio(eig_full, r_cand)
        rng = child_rng(seed, "fisher-test-tasks", r_cand)
        count = 0
        for _ in range(n_boot):
            pick = rng.integers(0, n_tasks, size=n_tasks)
            eig_b = spectrum_of([summaries[i] for i in pick])
            total = eig_b.sum()
            zeta_b = 1.0 if total <= 0 else eig_b[:r_cand].sum() / total
            if zeta_b <= h0_level:
                count += 1
        p_raw = (1 + count) / (n_boot + 1)
        p_adj = adjusted_pvalue(p_raw)
        reject = p_adj <= alpha
        records.append(DimTestRecord(
            r_cand=r_cand, zeta_emp=zeta_emp, p_raw=p_raw, p_adj=p_adj,
            reject=reject, borderline=(not reject) and p_adj <= 0.05,
        ))
    rejecting = [rec.r_cand for rec in records if rec.reject]
    return DimTestReport(records=records, selected_r=min(rejecting) if rejecting else None,
                         alpha=alpha, n_boot=n_boot, mode="tasks")


# ---------------------------------------------------------------------------
# Eigenvalue confidence bands across support sizes
# ---------------------------------------------------------------------------

def fisher_ci_vs_support(task, feature_map, support_sizes, n_boot: int = 500,
                         percentiles=(5.0, 95.0), reg: float | None = None,
                         seed: int = 0, top_k: int = 3, at=None,
                         exhaustive: bool = False):
    """Percentile bands of leading Fisher eigenvalues vs support subsample size.

    Subsamples are drawn with replacement from the task support; band width
    is reported, not asserted, since stabilization has no numeric criterion.
    """
    grads = task_gradients(task, feature_map, at=at)
    n = grads.shape[0]
    rows = []
    for n_s in support_sizes:
        require(2 <= n_s <= n, f"support size {n_s} exceeds available samples ({n})")
        if exhaustive:
            require(n_s == n, "exhaustive mode enumerates full-size resamples only")
            draws = [list(idx) for idx in exhaustive_index_tuples(n)]
        else:
            rng = child_rng(seed, "fisher-ci", n_s)
            draws = rng.integers(0, n, size=(n_boot, n_s))
        top = np.array([
            fisher_spectrum_from_gradients(grads[list(idx)], reg=reg).eigenvalues[:top_k]
            for idx in draws
        ])
        for k in range(min(top_k, top.shape[1])):
            lo, hi = np.percentile(top[:, k], list(percentiles))
            rows.append({
                "n_support": int(n_s), "eig_index": k + 1,
                "lo": float(lo), "hi": float(hi), "width": float(hi - lo),
            })
    return rows


# ---------------------------------------------------------------------------
# Random-projection leakage check
# ---------------------------------------------------------------------------

@dataclass
class ProjectionEnergyReport:
    fractions: np.ndarray
    upper95: float
    threshold: float
    accept: bool
    r: int
    s: int


def jl_outside_energy(theta_holdout, fisher_matrix, r: int, s: int,
                      n_maps: int = 20, n_boot: int = 500,
                      threshold: float = 0.05, seed: int = 0) -> ProjectionEnergyReport:
    """Fisher energy outside the top-r subspace after random projection.

    Gaussian maps project the held-out adapters and the Fisher quadratic
    form to s dimensions; per map, the outside-subspace energy fraction is
    recorded, and the bootstrap 95 percent upper bound of the mean fraction
    is compared against the acceptance threshold.
    """
    rows = theta_holdout.rows if hasattr(theta_holdout, "rows") else np.asarray(theta_holdout, dtype=float)
    fisher = check_finite(fisher_matrix, "fisher matrix")
    d = rows.shape[1]
    require(s < d, "projection dimension must be below d_theta")
    require(s > r, "projection must exceed the tested subspace dimension")
    require(n_maps >= 1, "need at least one map")
    require(0.0 < threshold < 1.0, "threshold must lie in (0, 1)")

    fractions = np.empty(n_maps)
    for m in range(n_maps):
        rng = child_rng(seed, "jl-map", m)
        proj = rng.normal(size=(s, d)) / np.sqrt(s)
        projected = rows @ proj.T
        _, _, vt = np.linalg.svd(projected, full_matrices=False)
        v_r = vt[:r].T                      # s x r top directions of projected adapters
        fisher_p = proj @ fisher @ proj.T
        total = float(np.trace(fisher_p))
        inside = float(np.trace(v_r.T @ fisher_p @ v_r))
        fractions[m] = 0.0 if total <= 0 else max(0.0, 1.0 - inside / total)

    rng_b = child_rng(seed, "jl-boot")
    idx = bootstrap_indices(n_maps, n_boot, rng_b)
    means = fractions[idx].mean(axis=1)
    upper = float(np.percentile(means, 95.0))
    return ProjectionEnergyReport(fractions=fractions, upper95=upper,
                                  threshold=threshold, accept=upper <= threshold,
                                  r=r, s=s)


# ---------------------------------------------------------------------------
# Sequential paired-bootstrap selection
# ---------------------------------------------------------------------------

@dataclass
class SequentialRecord:
    r: int
    mean_improvement: float
    p_value: float
    significant: bool


@dataclass
class SequentialSelection:
    selected_r: int | None
    records: list
    alpha: float


def reconstruction_errors(rows: np.ndarray, r: int, basis: np.ndarray) -> np.ndarray:
    if r <= 0:
        return np.linalg.norm(rows, axis=1)
    v_r = basis[:, :r]
    resid = rows - (rows @ v_r) @ v_r.T
    return np.linalg.norm(resid, axis=1)


def sequential_r_selection(theta, r_center: int, n_boot: int = 1000,
                           alpha: float = 0.05, seed: int = 0) -> SequentialSelection:
    """Smallest candidate r whose r -> r+1 improvement is insignificant.

    Per-task reconstruction errors come from nested global PCA subspaces.
    For each candidate the paired improvement of adding one dimension is
    tested with a shift bootstrap of the mean; the selected dimension is the
    first whose improvement test fails to reject no-improvement (adding a
    dimension beyond it buys nothing statistically).
    """
    rows = theta.rows if hasattr(theta, "rows") else np.asarray(theta, dtype=float)
    require(rows.shape[0] >= 3, "need at least three tasks")
    d = rows.shape[1]
    _, _, vt = np.linalg.svd(rows, full_matrices=False)
    basis = vt.T

    records = []
    selected = None
    for r_cand in _candidate_set(r_center, d):
        err_r = reconstruction_errors(rows, r_cand, basis)
        err_next = (reconstruction_errors(rows, r_cand + 1, basis)
                    if r_cand + 1 <= basis.shape[1] else err_r)
        diffs = err_r - err_next
        if np.allclose(diffs, 0.0):
            p = 1.0
        else:
            rng = child_rng(seed, "seqr", r_cand)
            p = shift_bootstrap_pvalue(diffs, n_boot, rng)
        significant = p < alpha
        records.append(SequentialRecord(r=r_cand, mean_improvement=float(diffs.mean()),
                                        p_value=float(p), significant=significant))
        if not significant and selected is None:
            selected = r_cand
    if selected is None:
        selected = records[-1].r
    return SequentialSelection(selected_r=selected, records=records, alpha=alpha)
