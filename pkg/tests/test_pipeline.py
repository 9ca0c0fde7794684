import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from protoadapt.metrics import compute_metrics
from protoadapt.pipeline import (
    ABLATION_VARIANTS,
    DEFAULT_GAMMA_GRID,
    DEFAULT_K_GRID,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_R_GRID,
    DEFAULT_SEEDS,
    MlpTransform,
    OdeTransform,
    OdeBlockConfig,
    RunConfig,
    ablation_config,
    desk_config,
    emit_report,
    make_transform,
    run_baselines,
    run_motifs,
    run_phase1,
    run_phase2,
    run_riskbound,
    run_support_sweep,
)
from protoadapt.synthdata import GeneratorConfig


def tiny_config(seed=42, **overrides):
    cfg = desk_config(seed=seed)
    gen = replace(cfg.generator, n_tasks=60, n_support=120, n_query=30)
    cfg = replace(cfg, generator=gen, epochs=6, patience=5, coverage_n_boot=200,
                  dim_n_boot=1000, n_restarts=3, **overrides)
    return cfg


@pytest.fixture(scope="module")
def tiny_artifacts():
    cfg = tiny_config()
    return cfg, run_phase1(cfg)


class TestDefaults:
    def test_protocol_grids(self):
        cfg = RunConfig()
        assert cfg.k_grid == DEFAULT_K_GRID == (50, 100, 200)
        assert cfg.lam_grid == DEFAULT_LAMBDA_GRID == (1e-6, 1e-5, 1e-4, 1e-3)
        assert cfg.gamma_grid == DEFAULT_GAMMA_GRID == (0.0, 1e-2, 1e-1, 1.0)
        assert cfg.r_grid == DEFAULT_R_GRID == (10, 20, 50)
        assert cfg.seeds == DEFAULT_SEEDS == (42, 2023, 777)
        assert cfg.patience == 40
        assert cfg.epochs <= 1000
        assert cfg.batch_size == 100

    def test_config_roundtrip_and_hash(self):
        cfg = tiny_config()
        blob = cfg.to_dict()
        again = RunConfig.from_dict(json.loads(json.dumps(blob)))
        assert again.to_dict() == blob
        assert again.hash() == cfg.hash()

    def test_support_sizes_protocol(self):
        assert RunConfig().support_sizes_eval == (5, 10, 20, 50)


class TestPhase1(object):
    def test_artifacts_complete(self, tiny_artifacts):
        cfg, art = tiny_artifacts
        assert art.memory.frozen
        assert art.certificate is art.memory.certificate
        assert art.rank_selected >= 1
        assert art.memory.K <= max(cfg.k_grid)
        assert art.dim_report.mode == "eigenvalues"
        assert art.dim_report_tasks.mode == "tasks"

    def test_k_grid_filtered_with_note(self):
        cfg = tiny_config(k_grid=(4, 5000))
        art = run_phase1(cfg)
        assert any("skipped" in n for n in art.notes)
        assert art.memory.K <= 4

    def test_persisted_bundle(self, tmp_path):
        cfg = tiny_config()
        run_phase1(cfg, outdir=tmp_path)
        for name in ("config.json", "corpus.csv", "adapters_seed.csv",
                     "rank_test_eigenvalues.csv", "rank_test_tasks.csv",
                     "rank_sequential.csv", "rank_curve.csv", "memory.csv",
                     "memory.json", "phase1_summary.json"):
            assert (tmp_path / name).exists(), name

    def test_fixed_r_ablation(self):
        cfg = tiny_config(fixed_r=3)
        art = run_phase1(cfg)
        assert art.rank_selected == 3
        assert any("fixed r" in n for n in art.notes)


class TestPhase2:
    def test_metrics_and_outputs(self, tiny_artifacts, tmp_path):
        cfg, art = tiny_artifacts
        result = run_phase2(cfg, art, outdir=tmp_path)
        assert set(result.metrics) == {"train", "val", "test"}
        assert 0.0 <= result.metrics["test"].auc <= 1.0
        assert (tmp_path / "training_curve.csv").exists()
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "calibration_bins.csv").exists()
        assert (tmp_path / "diagnostics.csv").exists()
        # latency numbers stay out of the CSVs
        assert "ms" in (tmp_path / "runtime.txt").read_text()

    def test_determinism_across_runs(self, tmp_path):
        cfg = tiny_config()
        art1 = run_phase1(cfg)
        art2 = run_phase1(cfg)
        r1 = run_phase2(cfg, art1, outdir=tmp_path / "a")
        r2 = run_phase2(cfg, art2, outdir=tmp_path / "b")
        for name in ("training_curve.csv", "metrics.csv", "calibration_bins.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_transforms(self):
        ode = make_transform("ode", 6, OdeBlockConfig(hidden=4), seed=0)
        mlp = make_transform("mlp", 6, OdeBlockConfig(hidden=4), seed=0)
        none = make_transform("none", 6, OdeBlockConfig(), seed=0)
        z = np.linspace(-1, 1, 6)
        assert isinstance(ode, OdeTransform) and ode.forward(z).shape == (6,)
        assert isinstance(mlp, MlpTransform) and mlp.forward(z).shape == (6,)
        assert none is None
        # near-identity initialization keeps the warp gentle
        assert np.linalg.norm(ode.forward(z) - z) < 1.0

    def test_mlp_transform_learns(self):
        mlp = MlpTransform(4, hidden=4, seed=1, lr=0.05)
        z = np.ones(4)
        before = mlp.forward(z).copy()
        for _ in range(30):
            out = mlp.forward(z)
            mlp.apply_batch([(z, out - np.array([1.0, 0.0, 0.0, 0.0]))])
        after = mlp.forward(z)
        target = np.array([1.0, 0.0, 0.0, 0.0])
        assert np.linalg.norm(after - target) < np.linalg.norm(before - target)


class TestBaselinesAndSweeps:
    def test_baselines_ordering(self, tiny_artifacts, tmp_path):
        cfg, art = tiny_artifacts
        results = run_baselines(cfg, art, outdir=tmp_path, support_size=5)
        assert results["oracle_ridge"][0].auc >= results["ridge_support"][0].auc
        runtime = (tmp_path / "runtime.txt").read_text()
        assert "per_task_ms" in runtime and "peak_memory_bytes" in runtime
        assert (tmp_path / "baselines.csv").exists()

    def test_one_cluster_corpus_centroid_near_chance(self):
        cfg = tiny_config()
        gen = replace(cfg.generator, n_clusters=1, cluster_spread=0.0,
                      adapter_scale=0.05, n_tasks=60)
        cfg = replace(cfg, generator=gen)
        art = run_phase1(cfg)
        results = run_baselines(cfg, art, support_size=5)
        # labels are nearly coin flips, so no baseline finds real signal
        assert abs(results["nearest_centroid"][0].auc - 0.5) < 0.1

    def test_support_sweep_rows(self, tiny_artifacts, tmp_path):
        cfg, art = tiny_artifacts
        result = run_phase2(cfg, art)
        rows = run_support_sweep(cfg, art, result, outdir=tmp_path, sizes=(5, 10))
        assert [r["support_size"] for r in rows] == [5, 10]
        assert (tmp_path / "support_curve.csv").exists()


class TestMotifAndRiskRuns:
    def test_motif_run_outputs(self, tmp_path):
        cfg = tiny_config()
        mot = replace(cfg.motifs, n_channels=24, n_pos=16, n_neg=16, b_min=200,
                      b_max=400, null_pool_size=48, cohorts=("cohortA", "cohortB"))
        cfg = replace(cfg, motifs=mot)
        calibrations, report = run_motifs(cfg, outdir=tmp_path)
        assert len(calibrations) == 2
        assert all(c.passed for c in calibrations)
        assert (tmp_path / "threshold_calibration.csv").exists()
        assert (tmp_path / "motif_tests.csv").exists()

    def test_riskbound_run(self, tiny_artifacts, tmp_path):
        cfg, art = tiny_artifacts
        summary = run_riskbound(cfg, art, outdir=tmp_path)
        assert summary.triangle_rate == 1.0
        assert summary.per_task_rate == 1.0
        assert (tmp_path / "riskbound.csv").exists()


class TestAblations:
    def test_variant_configs(self):
        cfg = tiny_config()
        assert ablation_config(cfg, "gamma_zero").gamma == 0.0
        assert ablation_config(cfg, "soft_l1_only").hard_threshold is False
        assert ablation_config(cfg, "no_canonicalization").canonicalize is False
        assert ablation_config(cfg, "mlp_instead_of_ode").ode.kind == "mlp"
        assert ablation_config(cfg, "fixed_tau").fixed_tau == 0.5
        assert ablation_config(cfg, "bonferroni_only").use_storey is False
        assert set(ABLATION_VARIANTS) >= {"full", "fixed_r", "soft_l1_only",
                                          "gamma_zero", "fixed_tau",
                                          "bonferroni_only", "no_canonicalization",
                                          "mlp_instead_of_ode"}

    def test_single_prototype_memory_degenerates(self):
        cfg = tiny_config(k_grid=(1,))
        art = run_phase1(cfg)
        assert art.memory.K == 1
        result = run_phase2(cfg, art)
        # single-prototype retrieval equals that prototype's direct classifier
        from protoadapt.util import sigmoid
        fmap = art.corpus.feature_map()
        probs, labels = [], []
        from protoadapt.pipeline import _ret_tasks_at_size
        for t in _ret_tasks_at_size(art, "Ret-Test", cfg.support_size_train):
            probs.append(sigmoid(fmap(t.query_x) @ art.memory.M[0]))
            labels.append(t.query_y)
        direct = compute_metrics(np.concatenate(probs), np.concatenate(labels))
        assert abs(result.metrics["test"].auc - direct.auc) < 0.05


class TestReportBundle:
    def test_phase1_only_guard(self, tmp_path):
        cfg = tiny_config()
        run_phase1(cfg, outdir=tmp_path)
        summary = emit_report(tmp_path)
        text = summary.read_text()
        assert "phase-1-only bundle" in text

    def test_full_bundle_lists_artifacts(self, tmp_path):
        cfg = tiny_config()
        art = run_phase1(cfg, outdir=tmp_path)
        run_phase2(cfg, art, outdir=tmp_path)
        text = emit_report(tmp_path).read_text()
        assert "[x] retrieval metrics" in text
        assert "phase-1-only" not in text
