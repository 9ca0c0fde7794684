import numpy as np
import pytest

from protoadapt.synthdata import (
    GeneratorConfig,
    PartitionError,
    generate_corpus,
    partition_tasks,
    resample_support,
    save_corpus,
    spearman,
)
from protoadapt.util import ValidationError


def test_zero_noise_full_rank_theta_in_subspace():
    cfg = GeneratorConfig(d_theta=4, q=8, r_true=4, n_tasks=10, noise_sigma=0.0, seed=3)
    corpus = generate_corpus(cfg)
    basis = corpus.basis
    for task in corpus.tasks:
        proj = basis @ (basis.T @ task.theta_true)
        assert np.linalg.norm(task.theta_true - proj) < 1e-12


def test_same_seed_bit_identical():
    cfg = GeneratorConfig(n_tasks=12, seed=99)
    c1 = generate_corpus(cfg)
    c2 = generate_corpus(cfg)
    assert np.array_equal(c1.feature_w, c2.feature_w)
    for t1, t2 in zip(c1.tasks, c2.tasks):
        assert np.array_equal(t1.support_x, t2.support_x)
        assert np.array_equal(t1.support_y, t2.support_y)
        assert np.array_equal(t1.query_x, t2.query_x)
        assert np.array_equal(t1.theta_true, t2.theta_true)


def test_planted_rank_two_energy():
    # eigendecomposition oracle on the generated adapter set
    cfg = GeneratorConfig(d_theta=8, q=16, r_true=2, n_tasks=200, noise_sigma=0.0, seed=7)
    corpus = generate_corpus(cfg)
    thetas = np.stack([t.theta_true for t in corpus.tasks])
    eigvals = np.linalg.eigvalsh(thetas.T @ thetas)[::-1]
    assert eigvals[:2].sum() / eigvals.sum() >= 0.99


def test_off_subspace_norm_exact():
    cfg = GeneratorConfig(d_theta=6, q=8, r_true=2, n_tasks=20, off_subspace_norm=0.3, seed=5)
    corpus = generate_corpus(cfg)
    basis = corpus.basis
    for task in corpus.tasks:
        resid = task.theta_true - basis @ (basis.T @ task.theta_true)
        assert np.linalg.norm(resid) == pytest.approx(0.3, abs=1e-10)


def test_both_classes_present_and_disjoint_draws():
    cfg = GeneratorConfig(n_tasks=40, n_support=5, n_query=8, seed=11)
    corpus = generate_corpus(cfg)
    for task in corpus.tasks:
        assert 0 < task.support_y.sum() < task.n_support
        # continuous draws: no support row reappears among queries
        for row in task.support_x:
            assert not np.any(np.all(np.isclose(task.query_x, row), axis=1))


def test_invalid_configs_rejected():
    with pytest.raises(ValidationError):
        GeneratorConfig(r_true=9, d_theta=8).validate()
    with pytest.raises(ValidationError):
        GeneratorConfig(n_support=1).validate()
    with pytest.raises(ValidationError):
        GeneratorConfig(n_tasks=0).validate()


def test_resample_support_deterministic_and_query_fixed():
    cfg = GeneratorConfig(n_tasks=6, seed=2)
    corpus = generate_corpus(cfg)
    task = corpus.tasks[0]
    a = resample_support(corpus, task, 20)
    b = resample_support(corpus, task, 20)
    assert np.array_equal(a.support_x, b.support_x)
    assert a.support_x.shape[0] == 20
    assert np.array_equal(a.query_x, task.query_x)


class TestPartition:
    def _vectors(self, corpus):
        return np.stack([t.theta_true for t in corpus.tasks])

    def test_seed_fraction_80_of_100(self):
        cfg = GeneratorConfig(n_tasks=220, seed=21)
        corpus = generate_corpus(cfg)
        # force exactly 100 pre tasks
        summary = partition_tasks(
            corpus.tasks, frac_pre=100 / 220, frac_seed=0.8, tau_sim=0.8,
            seed=1, vectors=self._vectors(corpus),
        )
        assert summary.counts["Pre-Seed"] == 80
        assert summary.counts["Pre-Rest"] == 20

    def test_disjoint_and_reproducible(self):
        cfg = GeneratorConfig(n_tasks=60, seed=13)
        c1 = generate_corpus(cfg)
        c2 = generate_corpus(cfg)
        s1 = partition_tasks(c1.tasks, seed=4, vectors=self._vectors(c1))
        s2 = partition_tasks(c2.tasks, seed=4, vectors=self._vectors(c2))
        assert s1.assignments == s2.assignments
        pre = {tid for tid, tag in s1.assignments.items() if tag.startswith("Pre")}
        ret = {tid for tid, tag in s1.assignments.items() if tag.startswith("Ret")}
        assert not pre & ret
        assert sum(s1.counts.values()) == 60

    def test_tau_minus_one_never_blocks(self):
        cfg = GeneratorConfig(n_tasks=30, seed=17)
        corpus = generate_corpus(cfg)
        summary = partition_tasks(corpus.tasks, tau_sim=-1.0, seed=0,
                                  vectors=self._vectors(corpus))
        assert all(cid is not None and cid >= 0 for cid in summary.cluster_ids.values())

    def test_two_separated_directions_two_clusters(self):
        # exhaustive pairwise-cosine oracle: ten tasks from two orthogonal
        # adapter directions must form exactly two seed clusters at 0.8
        rng = np.random.default_rng(0)
        base = np.zeros((10, 6))
        for i in range(10):
            direction = np.zeros(6)
            direction[i % 2] = 1.0
            base[i] = 5.0 * direction + 0.05 * rng.normal(size=6) * direction[i % 2]
        cfg = GeneratorConfig(n_tasks=10, seed=23, d_theta=6)
        corpus = generate_corpus(cfg)
        summary = partition_tasks(corpus.tasks, frac_pre=0.7, frac_seed=0.8,
                                  tau_sim=0.8, seed=9, vectors=base)
        cos = base @ base.T / np.outer(np.linalg.norm(base, axis=1), np.linalg.norm(base, axis=1))
        seed_ids = [tid for tid, tag in summary.assignments.items() if tag == "Pre-Seed"]
        idx = {f"task{i:04d}": i for i in range(10)}
        for a in seed_ids:
            for b in seed_ids:
                same = summary.cluster_ids[a] == summary.cluster_ids[b]
                assert same == (cos[idx[a], idx[b]] >= 0.8)
        assert summary.n_seed_clusters == 2

    def test_partition_assigned_once(self):
        cfg = GeneratorConfig(n_tasks=20, seed=31)
        corpus = generate_corpus(cfg)
        partition_tasks(corpus.tasks, seed=0, vectors=self._vectors(corpus))
        with pytest.raises(PartitionError):
            corpus.tasks[0].set_partition("Ret-Test" if corpus.tasks[0].partition != "Ret-Test" else "Pre-Seed")

    def test_empty_partition_fails(self):
        cfg = GeneratorConfig(n_tasks=4, seed=37)
        corpus = generate_corpus(cfg)
        with pytest.raises(ValidationError):
            partition_tasks(corpus.tasks, seed=0, vectors=self._vectors(corpus))


class TestSpearman:
    def test_perfect_agreement(self):
        assert spearman([1, 2, 3, 5], [10, 20, 30, 50]) == pytest.approx(1.0)

    def test_perfect_reversal(self):
        assert spearman([1, 2, 3, 4], [9, 7, 5, 3]) == pytest.approx(-1.0)

    def test_hand_computed_case(self):
        # d = (0, 1, -1, 0), sum d^2 = 2, rho = 1 - 6*2 / (4*15) = 0.8
        assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_constant_input_rejected(self):
        with pytest.raises(ValidationError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_save_corpus_roundtrip_shape(tmp_path):
    cfg = GeneratorConfig(n_tasks=5, n_support=4, n_query=6, q=3, seed=41)
    corpus = generate_corpus(cfg)
    partition_tasks(corpus.tasks, seed=0,
                    vectors=np.stack([t.theta_true for t in corpus.tasks]))
    csv_path = tmp_path / "corpus.csv"
    save_corpus(corpus, csv_path, tmp_path / "manifest.json")
    lines = csv_path.read_text().strip().split("\n")
    assert lines[0].split(",")[:3] == ["task_id", "split", "label"]
    assert len(lines) == 1 + 5 * (4 + 6)
    assert (tmp_path / "manifest.json").exists()
