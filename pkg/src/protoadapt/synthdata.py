"""Synthetic episodic tasks with planted low-dimensional adapter structure.

The generator plants task adapters near a fixed low-dimensional subspace of
parameter space, links embeddings to labels through a frozen random linear
feature map, and tags every task with one of five leakage-safe partitions:
Pre-Seed, Pre-Rest, Ret-Train, Ret-Val, Ret-Test.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import ValidationError, check_finite, child_rng, require, sigmoid, write_json

PARTITIONS = ("Pre-Seed", "Pre-Rest", "Ret-Train", "Ret-Val", "Ret-Test")
PRE_PARTITIONS = ("Pre-Seed", "Pre-Rest")
RET_PARTITIONS = ("Ret-Train", "Ret-Val", "Ret-Test")


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for one synthetic corpus. Generation is a pure function of seed."""

    d_theta: int = 8
    q: int = 16
    r_true: int = 2
    n_tasks: int = 120
    n_support: int = 10
    n_query: int = 30
    noise_sigma: float = 0.0
    seed: int = 42
    n_clusters: int = 4
    adapter_scale: float = 4.0
    cluster_spread: float = 0.15
    off_subspace_norm: float = 0.0  # exact distance of each adapter to the planted subspace

    def validate(self) -> None:
        require(self.d_theta >= 1, "d_theta must be positive")
        require(self.q >= 1, "q must be positive")
        require(1 <= self.r_true <= self.d_theta, "need 1 <= r_true <= d_theta")
        require(self.n_tasks >= 1, "n_tasks must be positive")
        require(self.n_support >= 2, "n_support must be at least 2 (both classes must fit)")
        require(self.n_query >= 1, "n_query must be positive")
        require(self.noise_sigma >= 0.0, "noise_sigma must be nonnegative")
        require(self.n_clusters >= 1, "n_clusters must be positive")
        require(self.adapter_scale > 0.0, "adapter_scale must be positive")
        require(self.cluster_spread >= 0.0, "cluster_spread must be nonnegative")
        require(self.off_subspace_norm >= 0.0, "off_subspace_norm must be nonnegative")


class PartitionError(ValidationError):
    """A partition would be empty or a tag was assigned twice."""


@dataclass
class EpisodeTask:
    """One binary episodic task: disjoint support and query draws."""

    task_id: str
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    theta_true: np.ndarray | None = None
    partition: str | None = None
    cluster_id: int | None = None
    index: int = 0

    @property
    def n_support(self) -> int:
        return self.support_x.shape[0]

    def set_partition(self, tag: str) -> None:
        if tag not in PARTITIONS:
            raise PartitionError(f"unknown partition tag {tag!r}")
        if self.partition is not None and self.partition != tag:
            raise PartitionError(f"task {self.task_id} already assigned to {self.partition}")
        self.partition = tag


@dataclass
class Corpus:
    """Generated tasks plus the frozen encoder surrogate and planted geometry."""

    cfg: GeneratorConfig
    tasks: list
    feature_w: np.ndarray   # d_theta x q frozen random linear map
    basis: np.ndarray       # d_theta x r_true planted orthonormal basis
    cluster_dirs: np.ndarray

    def features(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.feature_w.T

    def feature_map(self):
        w = self.feature_w

        def _map(x):
            return np.atleast_2d(np.asarray(x, dtype=float)) @ w.T

        return _map

    def tasks_in(self, *tags) -> list:
        return [t for t in self.tasks if t.partition in tags]


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    g = rng.normal(size=(rows, cols))
    q_mat, r_mat = np.linalg.qr(g)
    # fix QR sign ambiguity so the draw is deterministic across BLAS builds
    signs = np.sign(np.diag(r_mat))
    signs[signs == 0] = 1.0
    return q_mat * signs


def _cluster_directions(rng: np.random.Generator, r_true: int, n_clusters: int) -> np.ndarray:
    # directions spread over a half circle: antipodal pairs would be
    # indistinguishable to the coherence diagnostic yet both needed by
    # nonnegative combinations, so they are avoided by construction
    if r_true == 1:
        return np.ones((n_clusters, 1))
    if r_true == 2:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        angles = phase + np.pi * np.arange(n_clusters) / n_clusters
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    dirs = rng.normal(size=(n_clusters, r_true))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # flip draws into a common half space to rule out antipodal collisions
    anchor = dirs[0]
    for i in range(1, n_clusters):
        if dirs[i] @ anchor < 0:
            dirs[i] = -dirs[i]
    return dirs


def _sample_labeled_set(rng, n, cfg, w_theta, noise_sigma):
    """Draw embeddings and Bernoulli labels, forcing both classes to appear."""
    for _ in range(50):
        x = rng.normal(size=(n, cfg.q))
        logits = x @ w_theta
        if noise_sigma > 0:
            logits = logits + noise_sigma * rng.normal(size=n)
        probs = sigmoid(logits)
        y = (rng.random(n) < probs).astype(int)
        if 0 < y.sum() < n:
            return x, y
    # pathological draw: flip the most ambiguous sample to the missing class
    flip = int(np.argmin(np.abs(probs - 0.5)))
    y[flip] = 1 - y[flip]
    return x, y


def generate_corpus(cfg: GeneratorConfig) -> Corpus:
    """Build the full task corpus deterministically from cfg.seed.

    Every planted adapter sits at Euclidean distance exactly
    ``cfg.off_subspace_norm`` from the planted subspace (zero by default),
    and labels follow a logistic model on the adapter/feature inner product
    with ``noise_sigma`` logit perturbation.
    """
    cfg.validate()
    rng_map = child_rng(cfg.seed, "feature-map")
    if cfg.q >= cfg.d_theta:
        feature_w = _orthonormal_columns(rng_map, cfg.q, cfg.d_theta).T
    else:
        feature_w = rng_map.normal(size=(cfg.d_theta, cfg.q)) / np.sqrt(cfg.q)

    rng_basis = child_rng(cfg.seed, "subspace")
    basis = _orthonormal_columns(rng_basis, cfg.d_theta, cfg.r_true)
    cluster_dirs = _cluster_directions(child_rng(cfg.seed, "clusters"), cfg.r_true, cfg.n_clusters)

    tasks = []
    for t in range(cfg.n_tasks):
        rng_t = child_rng(cfg.seed, "task", t)
        k = t % cfg.n_clusters
        coord = cluster_dirs[k] + cfg.cluster_spread * rng_t.normal(size=cfg.r_true)
        coord = coord / np.linalg.norm(coord) * cfg.adapter_scale
        theta = basis @ coord
        if cfg.off_subspace_norm > 0 and cfg.r_true < cfg.d_theta:
            raw = rng_t.normal(size=cfg.d_theta)
            perp = raw - basis @ (basis.T @ raw)
            theta = theta + cfg.off_subspace_norm * perp / np.linalg.norm(perp)

        w_theta = feature_w.T @ theta  # acts on raw embeddings
        sx, sy = _sample_labeled_set(rng_t, cfg.n_support, cfg, w_theta, cfg.noise_sigma)
        qx, qy = _sample_labeled_set(rng_t, cfg.n_query, cfg, w_theta, cfg.noise_sigma)
        tasks.append(
            EpisodeTask(
                task_id=f"task{t:04d}",
                support_x=sx,
                support_y=sy,
                query_x=qx,
                query_y=qy,
                theta_true=theta,
                cluster_id=None,
                index=t,
            )
        )
    return Corpus(cfg=cfg, tasks=tasks, feature_w=feature_w, basis=basis, cluster_dirs=cluster_dirs)


def resample_support(corpus: Corpus, task: EpisodeTask, n_support: int, tag: str = "resupport") -> EpisodeTask:
    """New support set of a different size for the same task identity.

    The query set is left untouched so metric sweeps over support size stay
    comparable. Deterministic in (corpus seed, task index, n_support, tag).
    """
    require(n_support >= 2, "n_support must be at least 2")
    cfg = corpus.cfg
    rng = child_rng(cfg.seed, tag, task.index, n_support)
    w_theta = corpus.feature_w.T @ task.theta_true
    sx, sy = _sample_labeled_set(rng, n_support, cfg, w_theta, cfg.noise_sigma)
    return replace(task, support_x=sx, support_y=sy)


@dataclass
class PartitionSummary:
    counts: dict
    n_seed_clusters: int
    assignments: dict = field(repr=False)
    cluster_ids: dict = field(repr=False)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def partition_tasks(
    tasks,
    frac_pre: float = 0.5,
    frac_seed: float = 0.8,
    tau_sim: float = 0.8,
    seed: int = 0,
    vectors=None,
    ret_fracs=(0.6, 0.2, 0.2),
) -> PartitionSummary:
    """Assign every task to exactly one partition tag.

    Pretraining tasks are split into a seed subset (fraction ``frac_seed``)
    and a remainder. Seed tasks form cosine-similarity clusters at threshold
    ``tau_sim`` (leader rule: join the first cluster whose centroid matches,
    else start a new one); the remainder is mapped to its nearest seed
    cluster, or left unclustered (-1) when no centroid reaches ``tau_sim``.
    Retrieval tasks split into train/val/test by ``ret_fracs``.

    ``vectors`` holds one similarity vector per task (typically estimated
    adapters), aligned with ``tasks``.
    """
    require(0.0 < frac_pre < 1.0, "frac_pre must lie in (0, 1)")
    require(0.0 < frac_seed < 1.0, "frac_seed must lie in (0, 1)")
    require(len(ret_fracs) == 3 and abs(sum(ret_fracs) - 1.0) < 1e-9, "ret_fracs must sum to 1")
    n = len(tasks)
    require(n >= 5, "need at least five tasks to fill all partitions")
    if vectors is None:
        vectors = np.stack([t.support_x.mean(axis=0) for t in tasks])
    vectors = check_finite(vectors, "vectors")
    require(vectors.shape[0] == n, "one similarity vector per task required")

    rng = child_rng(seed, "partition")
    order = rng.permutation(n)
    n_pre = int(round(frac_pre * n))
    n_pre = min(max(n_pre, 2), n - 3)
    pre_idx = list(order[:n_pre])
    ret_idx = list(order[n_pre:])

    n_seed = int(round(frac_seed * n_pre))
    n_seed = min(max(n_seed, 1), n_pre - 1)
    seed_idx = pre_idx[:n_seed]
    rest_idx = pre_idx[n_seed:]

    # leader clustering over seed tasks in draw order
    centroids: list[np.ndarray] = []
    members: list[list[int]] = []
    cluster_ids: dict[str, int] = {}
    for i in seed_idx:
        v = vectors[i]
        placed = False
        for c, centroid in enumerate(centroids):
            if _cosine(v, centroid) >= tau_sim:
                members[c].append(i)
                centroids[c] = vectors[members[c]].mean(axis=0)
                cluster_ids[tasks[i].task_id] = c
                placed = True
                break
        if not placed:
            centroids.append(v.copy())
            members.append([i])
            cluster_ids[tasks[i].task_id] = len(centroids) - 1

    for i in rest_idx:
        sims = [_cosine(vectors[i], c) for c in centroids]
        best = int(np.argmax(sims))
        cluster_ids[tasks[i].task_id] = best if sims[best] >= tau_sim else -1

    n_ret = len(ret_idx)
    n_train = int(round(ret_fracs[0] * n_ret))
    n_val = int(round(ret_fracs[1] * n_ret))
    n_train = min(max(n_train, 1), n_ret - 2)
    n_val = min(max(n_val, 1), n_ret - n_train - 1)
    splits = {
        "Ret-Train": ret_idx[:n_train],
        "Ret-Val": ret_idx[n_train:n_train + n_val],
        "Ret-Test": ret_idx[n_train + n_val:],
    }

    assignments: dict[str, str] = {}
    for i in seed_idx:
        assignments[tasks[i].task_id] = "Pre-Seed"
    for i in rest_idx:
        assignments[tasks[i].task_id] = "Pre-Rest"
    for tag, idxs in splits.items():
        for i in idxs:
            assignments[tasks[i].task_id] = tag

    counts = {tag: 0 for tag in PARTITIONS}
    for tag in assignments.values():
        counts[tag] += 1
    empty = [tag for tag, c in counts.items() if c == 0]
    if empty:
        raise PartitionError(f"partitions would be empty: {empty}")

    for t in tasks:
        t.set_partition(assignments[t.task_id])
        t.cluster_id = cluster_ids.get(t.task_id)

    return PartitionSummary(
        counts=counts,
        n_seed_clusters=len(centroids),
        assignments=assignments,
        cluster_ids=cluster_ids,
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    a = check_finite(a, "a").ravel()
    b = check_finite(b, "b").ravel()
    require(a.size == b.size, "inputs must have equal length")
    require(a.size >= 3, "need at least three observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValidationError("correlation undefined for constant input")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    return float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))


def save_corpus(corpus: Corpus, csv_path, manifest_path=None) -> None:
    """Serialize the corpus: one CSV row per sample plus a JSON manifest."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    q = corpus.cfg.q
    header = ["task_id", "split", "label"] + [f"x{j}" for j in range(q)]
    lines = [",".join(header)]
    for task in corpus.tasks:
        for split, xs, ys in (("support", task.support_x, task.support_y),
                              ("query", task.query_x, task.query_y)):
            for row, label in zip(xs, ys):
                cells = [task.task_id, split, str(int(label))]
                cells += [f"{v:.12g}" for v in row]
                lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n")

    if manifest_path is not None:
        manifest = {
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in vars(corpus.cfg).items()},
            "partition": {t.task_id: t.partition for t in corpus.tasks},
            "clusters": {t.task_id: t.cluster_id for t in corpus.tasks},
        }
        write_json(manifest_path, manifest)
