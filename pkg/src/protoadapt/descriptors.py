"""Task descriptors: pooled moments, probe gradients, standardized assembly.

Descriptors are permutation invariant in the support ordering and are
standardized exclusively with pretraining-partition statistics; building a
standardizer from any retrieval-partition task is a leakage error by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import PRE_PARTITIONS
from .util import ValidationError, check_finite, child_rng, require, sigmoid

DEFAULT_PERCENTILES = (10.0, 25.0, 50.0, 75.0, 90.0)


class LeakageError(RuntimeError):
    """Retrieval-partition data reached a pretraining-only statistic."""


@dataclass(frozen=True)
class ProbeHead:
    """Fixed affine-plus-logistic probe whose loss gradient characterizes a task.

    The weight vector lives in adapter space and consumes embeddings through
    the frozen feature map, so its gradient can be projected by the same
    rank-r operator as the adapters.
    """

    weights: np.ndarray
    bias: float
    seed: int

    @classmethod
    def create(cls, d_theta: int, seed: int) -> "ProbeHead":
        rng = child_rng(seed, "probe")
        w = rng.normal(size=d_theta) / np.sqrt(d_theta)
        head = cls(weights=w, bias=0.0, seed=seed)
        head.weights.setflags(write=False)
        return head

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return sigmoid(np.atleast_2d(features) @ self.weights + self.bias)


def pooled_moments(embeddings):
    """Pooled mean and elementwise population standard deviation."""
    h = check_finite(embeddings, "embeddings")
    require(h.ndim == 2 and h.shape[0] >= 1, "need a nonempty 2-d embedding block")
    mu = h.mean(axis=0)
    sigma = np.sqrt(np.mean((h - mu) ** 2, axis=0))
    return mu, sigma


def probe_gradient(probe: ProbeHead, task, feature_map):
    """Mean cross-entropy loss and averaged parameter gradient of the probe.

    Returns (loss, g) with g of length d_theta + 1; the last entry is the
    bias partial. The analytic gradient is checked against finite
    differences in the test suite.
    """
    x = check_finite(feature_map(task.support_x), "support features")
    y = np.asarray(task.support_y, dtype=float)
    require(set(np.unique(y)) <= {0.0, 1.0}, "labels must be binary")
    p = sigmoid(x @ probe.weights + probe.bias)
    p_safe = np.clip(p, 1e-12, 1.0 - 1e-12)
    loss = float(-np.mean(y * np.log(p_safe) + (1.0 - y) * np.log(1.0 - p_safe)))
    err = p - y
    grad_w = (err[:, None] * x).mean(axis=0)
    grad_b = float(err.mean())
    return loss, np.concatenate([grad_w, [grad_b]])


class Standardizer:
    """Per-coordinate standardization of the pooled-moment block.

    Fit only on pretraining tasks; any retrieval-tagged task in the fit set
    raises LeakageError.
    """

    def __init__(self):
        self.mean = None
        self.std = None
        self.fitted_on = None

    def fit_from_tasks(self, tasks) -> "Standardizer":
        require(len(tasks) >= 2, "need at least two tasks to standardize")
        blocks = []
        for task in tasks:
            if task.partition not in PRE_PARTITIONS:
                raise LeakageError(
                    f"standardizer fit saw task {task.task_id} with partition "
                    f"{task.partition!r}; only pretraining tasks are allowed")
            mu, sigma = pooled_moments(task.support_x)
            blocks.append(np.concatenate([mu, sigma]))
        stacked = np.stack(blocks)
        self.mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        self.std = np.where(std < 1e-12, 1.0, std)
        self.fitted_on = tuple(sorted({t.partition for t in tasks}))
        return self

    def transform(self, moments_vec: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ValidationError("standardizer is not fitted")
        return (moments_vec - self.mean) / self.std


@dataclass
class TaskDescriptor:
    task_id: str
    values: np.ndarray
    blocks: dict
    has_boot_var: bool

    @property
    def d_z(self) -> int:
        return self.values.shape[0]


def _sorted_support(support_x: np.ndarray) -> np.ndarray:
    # lexicographic row order makes bootstrap draws permutation invariant
    order = np.lexsort(support_x.T[::-1])
    return support_x[order]


def build_descriptor(task, probe: ProbeHead, chain, standardizer: Standardizer,
                     feature_map, percentiles=DEFAULT_PERCENTILES,
                     n_small_cutoff: int = 5, n_boot_var: int = 200,
                     clip: float = 10.0, boot_seed: int = 0) -> TaskDescriptor:
    """Concatenate standardized moments, percentiles, and the projected gradient.

    Layout: (standardized mu_h and sigma_h, percentile set of the pooled
    support coordinates, rank-r projection of the probe gradient plus its
    bias partial, optional bootstrap-variance block when the support is
    smaller than ``n_small_cutoff``). All entries are clipped elementwise.
    """
    if standardizer.fitted_on is not None:
        if any(tag not in PRE_PARTITIONS for tag in standardizer.fitted_on):
            raise LeakageError("standardizer carries retrieval-partition statistics")
    mu, sigma = pooled_moments(task.support_x)
    std_block = standardizer.transform(np.concatenate([mu, sigma]))

    order_block = np.percentile(task.support_x.ravel(), list(percentiles))

    _, grad = probe_gradient(probe, task, feature_map)
    g_proj = chain.project(grad[:-1])
    g_block = np.concatenate([g_proj, grad[-1:]])

    blocks = {"moments": std_block, "order_stats": order_block, "gradient": g_block}
    has_boot = task.support_x.shape[0] < n_small_cutoff
    if has_boot:
        rng = child_rng(boot_seed, "descriptor-bootvar", task.task_id)
        base = _sorted_support(task.support_x)
        n = base.shape[0]
        idx = rng.integers(0, n, size=(n_boot_var, n))
        means = base[idx].mean(axis=1)
        blocks["boot_var"] = means.var(axis=0)

    values = np.clip(np.concatenate(list(blocks.values())), -clip, clip)
    return TaskDescriptor(task_id=task.task_id, values=values,
                          blocks=blocks, has_boot_var=has_boot)


def descriptor_length(q: int, r: int, n_percentiles: int = 5,
                      with_boot_var: bool = False) -> int:
    return 2 * q + n_percentiles + (r + 1) + (q if with_boot_var else 0)


def descriptors_to_csv(descriptors, path) -> None:
    """Audit export: one row per task id, one column per descriptor entry."""
    from .util import write_csv

    items = sorted(descriptors.items())
    require(len(items) >= 1, "no descriptors to export")
    d_z = items[0][1].values.shape[0]
    header = ["task_id"] + [f"z{j}" for j in range(d_z)]
    rows = [[tid] + list(desc.values) for tid, desc in items]
    write_csv(path, header, rows)
