from itertools import combinations, product

import numpy as np
import pytest

from protoadapt.adapters import Canonicalizer, fit_canonicalizer
from protoadapt.prototypes import (
    DegenerateAtomError,
    FrozenMemoryError,
    PrototypeMemory,
    ProjectionChain,
    adjusted_rand_index,
    cluster_prototypes,
    coverage_certificate,
    coverage_residuals,
    diagnostics,
    diagnostics_of,
    l0_fit,
    merge_prototypes,
)
from protoadapt.util import ValidationError


class _Rows:
    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=float)


def identity_chain(d, r):
    return ProjectionChain(canonicalizer=Canonicalizer.identity(d), r=r)


def make_memory(m_rows, r=None):
    m_rows = np.asarray(m_rows, dtype=float)
    d = m_rows.shape[1]
    chain = identity_chain(d, r or d)
    return PrototypeMemory(m_rows=m_rows, chain=chain,
                           centroids=chain.project(m_rows))


class TestProjectionChain:
    def test_project_lift_roundtrip_on_subspace(self):
        rng = np.random.default_rng(0)
        rows = rng.normal(size=(20, 5)) * np.array([4.0, 2.0, 1.0, 0.02, 0.01])
        canon = fit_canonicalizer(rows)
        chain = ProjectionChain(canonicalizer=canon, r=2)
        coords = chain.project(rows)
        assert coords.shape == (20, 2)
        # lift then project is the identity on coordinates
        again = chain.project(chain.lift(coords))
        assert np.max(np.abs(again - coords)) < 1e-10

    def test_raw_basis_orthonormal_and_spans_lift(self):
        rng = np.random.default_rng(1)
        rows = rng.normal(size=(15, 4)) * np.array([3.0, 2.0, 0.5, 0.1])
        chain = ProjectionChain(canonicalizer=fit_canonicalizer(rows), r=2)
        basis = chain.raw_basis()
        assert np.allclose(basis.T @ basis, np.eye(2), atol=1e-10)
        lifted = chain.lift(np.eye(2))
        proj = basis @ (basis.T @ lifted.T)
        assert np.max(np.abs(proj - lifted.T)) < 1e-10


class TestClustering:
    def test_k_equals_n_zero_sse(self):
        rng = np.random.default_rng(2)
        rows = rng.normal(size=(6, 3))
        memory = cluster_prototypes(_Rows(rows), identity_chain(3, 3), k=6,
                                    n_restarts=3, seed=0)
        assert memory.sse == pytest.approx(0.0, abs=1e-18)
        # every adapter equals some prototype
        for row in rows:
            dists = np.linalg.norm(memory.M - row, axis=1)
            assert dists.min() < 1e-10

    def test_two_blobs_recovers_means(self):
        rng = np.random.default_rng(3)
        blob_a = np.array([5.0, 0.0]) + 1e-3 * rng.normal(size=(25, 2))
        blob_b = np.array([-5.0, 1.0]) + 1e-3 * rng.normal(size=(25, 2))
        rows = np.vstack([blob_a, blob_b])
        memory = cluster_prototypes(_Rows(rows), identity_chain(2, 2), k=2,
                                    n_restarts=5, seed=1)
        got = memory.M[np.argsort(memory.M[:, 0])]
        want = np.stack([blob_b.mean(axis=0), blob_a.mean(axis=0)])
        assert np.max(np.abs(got - want)) < 1e-6
        assert memory.restart_stability == pytest.approx(1.0)

    def test_k_greater_than_n_rejected(self):
        rows = np.eye(3)
        with pytest.raises(ValidationError):
            cluster_prototypes(_Rows(rows), identity_chain(3, 3), k=4)

    def test_ari_bounds(self):
        a = np.array([0, 0, 1, 1])
        assert adjusted_rand_index(a, a) == pytest.approx(1.0)
        assert adjusted_rand_index(a, np.array([1, 1, 0, 0])) == pytest.approx(1.0)
        scrambled = adjusted_rand_index(np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]))
        assert scrambled < 0.5


class TestL0Fit:
    def test_exact_prototype_row(self):
        atoms = np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [1.0, 1.0, 1.0]])
        w, resid = l0_fit(atoms[1], atoms, r_sparse=1)
        assert resid == pytest.approx(0.0, abs=1e-12)
        assert w[1] == pytest.approx(1.0)
        assert np.count_nonzero(w) == 1

    def test_orthogonal_target_zero_fit(self):
        atoms = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        u = np.array([0.0, 0.0, 2.5])
        w, resid = l0_fit(u, atoms, r_sparse=2)
        assert np.allclose(w, 0.0)
        assert resid == pytest.approx(2.5)

    def test_omp_never_beats_exact(self):
        rng = np.random.default_rng(4)
        for trial in range(40):
            atoms = rng.normal(size=(6, 5))
            u = rng.normal(size=5)
            w_omp, r_omp = l0_fit(u, atoms, r_sparse=2)
            w_ex, r_ex = l0_fit(u, atoms, r_sparse=2, exact=True)
            assert r_omp >= r_ex - 1e-10
            # oracle: full enumeration over C(6, 2) supports plus singletons
            best = np.linalg.norm(u)
            for size in (1, 2):
                for support in combinations(range(6), size):
                    sub = atoms[list(support)]
                    coef, _, _, _ = np.linalg.lstsq(sub.T, u, rcond=None)
                    best = min(best, np.linalg.norm(u - coef @ sub))
            assert r_ex == pytest.approx(best, abs=1e-10)

    def test_residual_nonincreasing_in_sparsity(self):
        rng = np.random.default_rng(5)
        atoms = rng.normal(size=(8, 6))
        u = rng.normal(size=6)
        resids = [l0_fit(u, atoms, r_sparse=r)[1] for r in range(1, 6)]
        assert all(a >= b - 1e-10 for a, b in zip(resids, resids[1:]))

    def test_zero_atom_rejected(self):
        atoms = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateAtomError):
            l0_fit(np.array([1.0, 1.0]), atoms, r_sparse=1)


class TestCoverage:
    def test_inside_span_zero_certificate(self):
        rng = np.random.default_rng(6)
        atoms = np.vstack([np.eye(3), rng.normal(size=(2, 3))])
        coeffs = rng.normal(size=(12, 3))
        rows = coeffs @ atoms[:3]
        memory = make_memory(atoms).freeze()
        cert = coverage_certificate(memory, _Rows(rows), r_sparse=3, n_boot=200, seed=0)
        assert cert.eps_hat == pytest.approx(0.0, abs=1e-9)
        assert cert.pct90 == pytest.approx((0.0, 0.0), abs=1e-9)
        assert cert.bca90 == pytest.approx((0.0, 0.0), abs=1e-9)
        assert memory.eps_M_upper == pytest.approx(0.0, abs=1e-9)

    def test_single_task_zero_width(self):
        memory = make_memory(np.eye(3)[:2]).freeze()
        rows = np.array([[0.3, 0.4, 1.2]])
        cert = coverage_certificate(memory, _Rows(rows), r_sparse=2, n_boot=64, seed=1)
        assert cert.pct90[0] == pytest.approx(cert.pct90[1])
        assert cert.eps_hat == pytest.approx(1.2)

    def test_exhaustive_bootstrap_matches_enumeration(self):
        rng = np.random.default_rng(7)
        atoms = rng.normal(size=(4, 3))
        rows = rng.normal(size=(5, 3))
        memory = make_memory(atoms, r=3).freeze()
        cert = coverage_certificate(memory, _Rows(rows), r_sparse=2,
                                    seed=0, exhaustive=True)
        canon, _ = coverage_residuals(memory, _Rows(rows), 2)
        meds = [np.median(canon[list(idx)]) for idx in product(range(5), repeat=5)]
        lo, hi = np.percentile(meds, [5, 95])
        assert cert.pct90[0] == pytest.approx(float(lo))
        assert cert.pct90[1] == pytest.approx(float(hi))

    def test_requires_frozen_memory(self):
        memory = make_memory(np.eye(2))
        with pytest.raises(FrozenMemoryError):
            coverage_certificate(memory, _Rows(np.eye(2)), r_sparse=1)

    def test_certificate_deterministic(self):
        rng = np.random.default_rng(8)
        atoms = rng.normal(size=(5, 4))
        rows = rng.normal(size=(9, 4))
        c1 = coverage_certificate(make_memory(atoms).freeze(), _Rows(rows),
                                  r_sparse=2, n_boot=300, seed=11)
        c2 = coverage_certificate(make_memory(atoms).freeze(), _Rows(rows),
                                  r_sparse=2, n_boot=300, seed=11)
        assert c1.pct90 == c2.pct90
        assert c1.bca90 == c2.bca90


class TestDiagnostics:
    def test_orthonormal_rows(self):
        memory = make_memory(np.eye(4)[:3])
        kappa, mu = diagnostics(memory)
        assert kappa == pytest.approx(1.0)
        assert mu == pytest.approx(0.0)

    def test_duplicate_row_full_coherence(self):
        rows = np.array([[1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
        kappa, mu = diagnostics_of(rows)
        assert mu == pytest.approx(1.0)

    def test_matches_svd_gram_oracle(self):
        rng = np.random.default_rng(9)
        rows = rng.normal(size=(5, 3))
        kappa, mu = diagnostics_of(rows)
        s = np.linalg.svd(rows.T, compute_uv=False)
        assert kappa == pytest.approx(s.max() / s.min(), abs=1e-10)
        best = 0.0
        for i in range(5):
            for j in range(i + 1, 5):
                c = abs(rows[i] @ rows[j]) / (np.linalg.norm(rows[i]) * np.linalg.norm(rows[j]))
                best = max(best, c)
        assert mu == pytest.approx(best, abs=1e-10)

    def test_singular_gives_inf_sentinel(self):
        rows = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        kappa, mu = diagnostics_of(rows)
        assert np.isinf(kappa)

    def test_invariances(self):
        rng = np.random.default_rng(10)
        rows = rng.normal(size=(6, 4))
        kappa, mu = diagnostics_of(rows)
        perm = rng.permutation(6)
        kappa_p, mu_p = diagnostics_of(rows[perm])
        assert kappa_p == pytest.approx(kappa)
        assert mu_p == pytest.approx(mu)
        scales = rng.uniform(0.5, 3.0, size=6)
        _, mu_s = diagnostics_of(rows * scales[:, None])
        assert mu_s == pytest.approx(mu)


class TestMerge:
    def test_threshold_one_no_merges(self):
        rng = np.random.default_rng(11)
        memory = make_memory(rng.normal(size=(5, 3)))
        merged, log = merge_prototypes(memory, mu_threshold=1.0, kappa_threshold=np.inf)
        assert merged.K == 5
        assert log == []

    def test_identical_rows_merge_to_duplicate(self):
        rows = np.array([[1.0, 2.0, 2.0], [1.0, 2.0, 2.0], [0.0, 0.0, 3.0]])
        memory = make_memory(rows)
        merged, log = merge_prototypes(memory, mu_threshold=0.99, kappa_threshold=np.inf)
        assert merged.K == 2
        assert len(log) == 1
        dists = np.linalg.norm(merged.M - rows[0], axis=1)
        assert dists.min() < 1e-10

    def test_coherent_triple_lands_below_threshold(self):
        base = np.array([1.0, 0.0, 0.0])
        mk = lambda ang: np.array([np.cos(ang), np.sin(ang), 0.0])
        rows = np.stack([base, mk(0.14), mk(0.28)]) * 2.0
        memory = make_memory(rows)
        merged, log = merge_prototypes(memory, mu_threshold=0.95, kappa_threshold=np.inf)
        _, mu_after = diagnostics_of(merged.M)
        assert mu_after <= 0.95
        assert len(log) >= 1

    def test_frozen_memory_not_mergeable(self):
        memory = make_memory(np.eye(3)).freeze()
        with pytest.raises(FrozenMemoryError):
            merge_prototypes(memory)

    def test_freeze_is_one_way(self):
        memory = make_memory(np.eye(3)).freeze()
        with pytest.raises((ValueError, RuntimeError)):
            memory.M[0, 0] = 5.0
        with pytest.raises(FrozenMemoryError):
            memory.attach_certificate.__self__.require_mutable()
