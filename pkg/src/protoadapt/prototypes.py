"""Prototype memory: clustering, sparse coverage fits, certificates, diagnostics.

Prototypes are k-means centroids in the projected canonical coordinates,
lifted back to parameter space through the exact inverse of the projection
chain. Coverage is certified by bootstrapping the median sparse-fit residual
over pretraining tasks, with both percentile and BCa intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .adapters import Canonicalizer
from .resampling import (
    bca_interval,
    bootstrap_indices,
    exhaustive_index_tuples,
    jackknife_statistics,
    percentile_interval,
)
from .util import ValidationError, check_finite, child_rng, require, write_csv, write_json


class FrozenMemoryError(RuntimeError):
    """Mutation attempted on a frozen prototype memory."""


class DegenerateAtomError(ValidationError):
    """A prototype row with zero norm cannot act as a dictionary atom."""


@dataclass
class ProjectionChain:
    """Frozen linear map from raw parameter space to the top-r canonical coords."""

    canonicalizer: Canonicalizer
    r: int

    def project(self, rows):
        out = self.canonicalizer.apply(np.asarray(rows, dtype=float))
        return out[..., : self.r]

    def lift(self, coords):
        coords = np.asarray(coords, dtype=float)
        single = coords.ndim == 1
        coords2 = np.atleast_2d(coords)
        d = self.canonicalizer.basis.shape[0]
        full = np.zeros((coords2.shape[0], d))
        full[:, : self.r] = coords2
        out = self.canonicalizer.invert(full)
        return out[0] if single else out

    def raw_basis(self) -> np.ndarray:
        """Orthonormal basis of the fitted subspace in raw coordinates."""
        img = self.lift(np.eye(self.r))          # r x d rows spanning the subspace
        q, _ = np.linalg.qr(img.T)
        return q[:, : self.r]

    def subspace_project(self, vec: np.ndarray) -> np.ndarray:
        basis = self.raw_basis()
        return basis @ (basis.T @ np.asarray(vec, dtype=float))


@dataclass
class CoverageCertificate:
    """Bootstrap certificate for the median sparse reconstruction error."""

    eps_hat: float
    pct90: tuple
    bca90: tuple
    n_boot: int
    r_sparse: int
    per_task_residuals: np.ndarray = field(repr=False, default=None)
    raw_eps_hat: float = None
    raw_pct90: tuple = None
    raw_per_task_residuals: np.ndarray = field(repr=False, default=None)

    @property
    def eps_upper(self) -> float:
        return self.pct90[1]

    @property
    def raw_eps_upper(self) -> float:
        return self.raw_pct90[1]

    def as_dict(self) -> dict:
        return {
            "eps_hat": self.eps_hat,
            "pct90": list(self.pct90),
            "bca90": list(self.bca90),
            "eps_upper": self.eps_upper,
            "raw_eps_hat": self.raw_eps_hat,
            "raw_pct90": list(self.raw_pct90),
            "n_boot": self.n_boot,
            "r_sparse": self.r_sparse,
        }


class PrototypeMemory:
    """K prototype rows plus the frozen projection and health diagnostics."""

    def __init__(self, m_rows, chain, centroids, restart_stability=None, sse=None,
                 silhouette=None):
        self.M = check_finite(m_rows, "prototype rows")
        self.chain = chain
        self.centroids = check_finite(centroids, "centroids")
        self.restart_stability = restart_stability
        self.sse = sse
        self.silhouette = silhouette
        # conditioning lives on the projected dictionary (the K x r form the
        # sparse fits use; the raw K x d rows are rank deficient by design
        # whenever K exceeds r), coherence on the raw parameter-space rows
        self.kappa = kappa_of(self.centroids)
        self.mu = mu_of(self.M)
        self.eps_M_hat = None
        self.eps_M_upper = None
        self.certificate = None
        self.frozen = False
        self._operator_norm = None

    @property
    def K(self) -> int:
        return self.M.shape[0]

    @property
    def d_theta(self) -> int:
        return self.M.shape[1]

    @property
    def r(self) -> int:
        return self.chain.r

    def operator_norm(self) -> float:
        """Largest singular value of M^T, cached (rows are fixed once frozen)."""
        if self._operator_norm is None:
            self._operator_norm = float(np.linalg.svd(self.M, compute_uv=False)[0]) if self.M.size else 0.0
        return self._operator_norm

    def freeze(self) -> "PrototypeMemory":
        self.M.setflags(write=False)
        self.centroids.setflags(write=False)
        self.frozen = True
        return self

    def require_frozen(self) -> None:
        if not self.frozen:
            raise FrozenMemoryError("memory must be frozen first")

    def require_mutable(self) -> None:
        if self.frozen:
            raise FrozenMemoryError("memory is frozen; prototype rows are immutable")

    def attach_certificate(self, cert: CoverageCertificate) -> None:
        self.require_frozen()
        if self.certificate is not None:
            raise FrozenMemoryError("certificate already attached")
        self.certificate = cert
        self.eps_M_hat = cert.eps_hat
        self.eps_M_upper = cert.eps_upper

    def save(self, csv_path, json_path) -> None:
        header = [f"m{j}" for j in range(self.d_theta)]
        write_csv(csv_path, header, self.M.tolist())
        meta = {
            "K": self.K,
            "r": self.r,
            "kappa": None if np.isinf(self.kappa) else self.kappa,
            "mu": self.mu,
            "eps_M_hat": self.eps_M_hat,
            "eps_M_upper": self.eps_M_upper,
            "restart_stability": self.restart_stability,
            "sse": self.sse,
            "canonicalizer": self.chain.canonicalizer.as_dict(),
            "certificate": self.certificate.as_dict() if self.certificate else None,
        }
        write_json(json_path, meta)


# ---------------------------------------------------------------------------
# k-means with restarts
# ---------------------------------------------------------------------------

def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(0, n)]
    dist = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist.sum()
        if total <= 0:
            centroids[j] = points[rng.integers(0, n)]
            continue
        pick = np.searchsorted(np.cumsum(dist), rng.random() * total)
        centroids[j] = points[min(pick, n - 1)]
        dist = np.minimum(dist, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(points, centroids, max_iter=300):
    k = centroids.shape[0]
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            mask = new_labels == j
            if np.any(mask):
                centroids[j] = points[mask].mean(axis=0)
            else:
                far = int(np.argmax(d2.min(axis=1)))
                centroids[j] = points[far]
                new_labels[far] = j
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    sse = float(d2[np.arange(points.shape[0]), labels].sum())
    return centroids, labels, sse


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over points; singleton clusters contribute zero."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        return 0.0
    dists = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    scores = np.zeros(points.shape[0])
    for i in range(points.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own <= 1:
            continue
        a = dists[i, own].sum() / (n_own - 1)
        b = np.inf
        for other in uniq:
            if other == labels[i]:
                continue
            mask = labels == other
            b = min(b, dists[i, mask].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.shape[0]
    labels_a, labels_b = np.unique(a), np.unique(b)
    table = np.zeros((labels_a.size, labels_b.size))
    for i, la in enumerate(labels_a):
        for j, lb in enumerate(labels_b):
            table[i, j] = np.sum((a == la) & (b == lb))

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def cluster_prototypes(theta, chain: ProjectionChain, k: int, n_restarts: int = 8,
                       seed: int = 0) -> PrototypeMemory:
    """Best-of-restarts k-means in projected canonical coordinates.

    Centroids are lifted back to raw parameter space; restart stability is
    the mean pairwise adjusted Rand agreement of the restart assignments.
    """
    rows = theta.rows if hasattr(theta, "rows") else np.asarray(theta, dtype=float)
    n = rows.shape[0]
    require(n >= 1, "empty seed set")
    require(1 <= k <= n, f"need K <= N (K={k}, N={n})")
    require(n_restarts >= 1, "n_restarts must be positive")

    points = chain.project(rows)
    best = None
    assignments = []
    for restart in range(n_restarts):
        rng = child_rng(seed, "kmeans", restart)
        centroids = _kmeans_pp_init(points.copy(), k, rng)
        centroids, labels, sse = _lloyd(points, centroids)
        assignments.append(labels)
        if best is None or sse < best[2] - 1e-12:
            best = (centroids, labels, sse, restart)

    if len(assignments) > 1:
        pairs = [adjusted_rand_index(x, y) for x, y in combinations(assignments, 2)]
        stability = float(np.mean(pairs))
    else:
        stability = 1.0

    centroids = best[0]
    m_rows = chain.lift(centroids)
    return PrototypeMemory(m_rows=m_rows, chain=chain, centroids=centroids,
                           restart_stability=stability, sse=best[2],
                           silhouette=silhouette_score(points, best[1]))


# ---------------------------------------------------------------------------
# Sparse coverage fit
# ---------------------------------------------------------------------------

def _ls_on_support(u, atoms, support):
    sub = atoms[support]                      # |S| x dim
    coef, _, _, _ = np.linalg.lstsq(sub.T, u, rcond=None)
    resid = u - coef @ sub
    return coef, float(np.linalg.norm(resid))


def l0_fit(u, atoms, r_sparse: int, exact: bool = False):
    """Sparse nonzero-count-constrained fit of u in the prototype row basis.

    Orthogonal matching pursuit by default: greedily add the atom with the
    largest normalized correlation to the residual, refitting least squares
    on the active set each step. ``exact=True`` enumerates every support of
    size up to ``r_sparse`` (small K only) and returns the global optimum,
    breaking ties toward the lexicographically smallest support.

    Returns (w, residual_norm) with w a length-K coefficient vector.
    """
    u = check_finite(u, "target vector")
    atoms = check_finite(atoms, "atoms")
    k, dim = atoms.shape
    require(1 <= r_sparse <= min(k, dim), "need 1 <= r_sparse <= min(K, dim)")
    norms = np.linalg.norm(atoms, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateAtomError("prototype rows with zero norm present")

    if exact:
        require(k <= 12, "exact mode is for small dictionaries")
        best = (float(np.linalg.norm(u)), (), np.zeros(k))
        for size in range(1, r_sparse + 1):
            for support in combinations(range(k), size):
                coef, resid = _ls_on_support(u, atoms, list(support))
                if resid < best[0] - 1e-12:
                    w = np.zeros(k)
                    w[list(support)] = coef
                    best = (resid, support, w)
        return best[2], best[0]

    w = np.zeros(k)
    residual = u.copy()
    active: list[int] = []
    u_norm = np.linalg.norm(u)
    for _ in range(r_sparse):
        corr = np.abs(atoms @ residual) / norms
        corr[active] = -np.inf
        best_atom = int(np.argmax(corr))
        if corr[best_atom] <= 1e-12 * max(u_norm, 1e-300):
            break
        active.append(best_atom)
        coef, _ = _ls_on_support(u, atoms, active)
        residual = u - coef @ atoms[active]
    if active:
        coef, resid = _ls_on_support(u, atoms, active)
        w[active] = coef
    else:
        resid = float(np.linalg.norm(u))
    return w, resid


# ---------------------------------------------------------------------------
# Coverage certificate
# ---------------------------------------------------------------------------

def coverage_residuals(memory: PrototypeMemory, theta_pre, r_sparse: int):
    """Per-task sparse-fit residuals in canonical coordinates and raw units."""
    rows = theta_pre.rows if hasattr(theta_pre, "rows") else np.asarray(theta_pre, dtype=float)
    require(rows.shape[0] >= 1, "no pretraining adapters")
    coords = memory.chain.project(rows)
    canon = np.empty(rows.shape[0])
    raw = np.empty(rows.shape[0])
    lift = memory.chain.lift
    for i, u in enumerate(coords):
        w, resid = l0_fit(u, memory.centroids, r_sparse)
        canon[i] = resid
        recon = w @ memory.centroids
        raw[i] = float(np.linalg.norm(lift(u) - lift(recon)))
    return canon, raw


def coverage_certificate(memory: PrototypeMemory, theta_pre, r_sparse: int | None = None,
                         n_boot: int = 1000, seed: int = 0,
                         exhaustive: bool = False) -> CoverageCertificate:
    """Median-residual certificate with percentile and BCa 90 percent intervals.

    Bootstraps pretraining tasks with replacement; the conservative upper
    endpoint of the percentile interval is stored on the memory. Exhaustive
    mode enumerates every resample for small task counts, making percentile
    endpoints exact.
    """
    memory.require_frozen()
    if r_sparse is None:
        r_sparse = min(memory.r, memory.K)
    canon, raw = coverage_residuals(memory, theta_pre, r_sparse)
    n = canon.shape[0]

    def run_boot(values):
        if exhaustive:
            meds = np.array([np.median(values[list(idx)])
                             for idx in exhaustive_index_tuples(n)])
        else:
            rng = child_rng(seed, "coverage")
            idx = bootstrap_indices(n, n_boot, rng)
            meds = np.median(values[idx], axis=1)
        return meds

    meds = run_boot(canon)
    eps_hat = float(np.median(canon))
    pct = percentile_interval(meds, 0.90)
    jack = jackknife_statistics(canon, np.median)
    bca = bca_interval(meds, eps_hat, jack, 0.90)

    meds_raw = run_boot(raw)
    raw_eps_hat = float(np.median(raw))
    raw_pct = percentile_interval(meds_raw, 0.90)

    cert = CoverageCertificate(
        eps_hat=eps_hat, pct90=pct, bca90=bca,
        n_boot=len(meds) if exhaustive else n_boot, r_sparse=r_sparse,
        per_task_residuals=canon,
        raw_eps_hat=raw_eps_hat, raw_pct90=raw_pct,
        raw_per_task_residuals=raw,
    )
    memory.attach_certificate(cert)
    return cert


# ---------------------------------------------------------------------------
# Conditioning and coherence
# ---------------------------------------------------------------------------

def kappa_of(m_rows: np.ndarray) -> float:
    """Condition number sigma_max / sigma_min of the transposed row matrix."""
    m_rows = np.asarray(m_rows, dtype=float)
    if m_rows.shape[0] < 2:
        return 1.0 if m_rows.size else np.inf
    s = np.linalg.svd(m_rows.T, compute_uv=False)
    smin = s.min()
    return np.inf if smin < 1e-300 else float(s.max() / smin)


def mu_of(m_rows: np.ndarray) -> float:
    """Mutual coherence: largest absolute cosine between distinct rows."""
    m_rows = np.asarray(m_rows, dtype=float)
    if m_rows.shape[0] < 2:
        return 0.0
    norms = np.linalg.norm(m_rows, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateAtomError("zero-norm prototype row")
    unit = m_rows / norms[:, None]
    gram = np.abs(unit @ unit.T)
    np.fill_diagonal(gram, 0.0)
    return float(np.clip(gram.max(), 0.0, 1.0))


def diagnostics_of(m_rows: np.ndarray):
    """Condition number of M^T and mutual coherence of the rows of M."""
    return kappa_of(m_rows), mu_of(m_rows)


def diagnostics(memory: PrototypeMemory):
    require(memory.K >= 2, "need at least two prototypes")
    return diagnostics_of(memory.M)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------

@dataclass
class MergeEvent:
    pair: tuple
    mu_before: float
    kappa_before: float
    k_after: int
    coverage_before: float | None = None
    coverage_after: float | None = None


def _most_coherent_pair(m_rows):
    norms = np.linalg.norm(m_rows, axis=1)
    unit = m_rows / norms[:, None]
    gram = np.abs(unit @ unit.T)
    np.fill_diagonal(gram, -1.0)
    best = np.unravel_index(np.argmax(gram), gram.shape)
    i, j = int(min(best)), int(max(best))
    return i, j


def merge_prototypes(memory: PrototypeMemory, mu_threshold: float = 0.95,
                     kappa_threshold: float = 1e4, theta_pre=None,
                     r_sparse: int | None = None):
    """Merge the most coherent pair until both diagnostics clear thresholds.

    The merged row is the sign-aligned normalized mean of the pair, rescaled
    to their average norm; ties break toward the lowest index pair. Returns
    a new unfrozen memory and the merge log. When pretraining adapters are
    supplied, each event also records the induced coverage-error change.
    """
    memory.require_mutable()
    m_rows = memory.M.copy()
    chain = memory.chain
    log: list[MergeEvent] = []

    def coverage_of(rows):
        if theta_pre is None:
            return None
        rs = r_sparse if r_sparse is not None else min(chain.r, rows.shape[0])
        rs = min(rs, rows.shape[0])
        probe = PrototypeMemory(rows, chain, chain.project(rows))
        probe.freeze()
        canon, _ = coverage_residuals(probe, theta_pre, rs)
        return float(np.median(canon))

    def health(rows):
        return kappa_of(chain.project(rows)), mu_of(rows)

    kappa, mu = health(m_rows)
    while m_rows.shape[0] > 1 and (mu > mu_threshold or kappa > kappa_threshold):
        i, j = _most_coherent_pair(m_rows)
        cov_before = coverage_of(m_rows)
        a, b = m_rows[i], m_rows[j]
        sign = 1.0 if a @ b >= 0 else -1.0
        direction = a / np.linalg.norm(a) + sign * b / np.linalg.norm(b)
        direction /= np.linalg.norm(direction)
        merged = direction * 0.5 * (np.linalg.norm(a) + np.linalg.norm(b))
        m_rows = np.vstack([m_rows[:i], [merged], m_rows[i + 1:j], m_rows[j + 1:]])
        kappa_next, mu_next = health(m_rows)
        log.append(MergeEvent(pair=(i, j), mu_before=mu, kappa_before=kappa,
                              k_after=m_rows.shape[0],
                              coverage_before=cov_before,
                              coverage_after=coverage_of(m_rows)))
        kappa, mu = kappa_next, mu_next

    merged_memory = PrototypeMemory(m_rows=m_rows, chain=chain,
                                    centroids=chain.project(m_rows),
                                    restart_stability=memory.restart_stability,
                                    sse=memory.sse)
    return merged_memory, log
