"""Command-line entry points for the episodic retrieval pipeline.

Every subcommand is a deterministic function of the JSON run configuration;
later stages regenerate earlier artifacts from the same configuration, so a
phase2 invocation reproduces phase1 bit-for-bit before training.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from .pipeline import (
    RunConfig,
    desk_config,
    emit_report,
    run_ablations,
    run_baselines,
    run_motifs,
    run_phase1,
    run_phase2,
    run_riskbound,
    run_seed_stability,
    run_support_sweep,
    ABLATION_VARIANTS,
)
from .synthdata import generate_corpus, partition_tasks, save_corpus
from .adapters import ridge_adapter

import numpy as np


def load_config(args) -> RunConfig:
    if args.config:
        data = json.loads(Path(args.config).read_text())
        cfg = RunConfig.from_dict(data.get("config", data))
    else:
        cfg = desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.generator = type(cfg.generator)(**{**vars(cfg.generator), "seed": args.seed})
    if args.outdir is not None:
        cfg.outdir = args.outdir
    return cfg


def cmd_generate(args):
    cfg = load_config(args)
    corpus = generate_corpus(cfg.generator)
    fmap = corpus.feature_map()
    vectors = np.stack([ridge_adapter(t, fmap, cfg.ridge_alpha) for t in corpus.tasks])
    partition_tasks(corpus.tasks, frac_pre=cfg.frac_pre, frac_seed=cfg.frac_seed,
                    tau_sim=cfg.tau_sim, seed=cfg.seed, vectors=vectors,
                    ret_fracs=cfg.ret_fracs)
    outdir = Path(cfg.outdir)
    save_corpus(corpus, outdir / "corpus.csv", outdir / "corpus_manifest.json")
    print(f"wrote {outdir / 'corpus.csv'} ({len(corpus.tasks)} tasks)")


def cmd_phase1(args):
    cfg = load_config(args)
    artifacts = run_phase1(cfg, outdir=Path(cfg.outdir))
    print(f"rank selected: {artifacts.rank_selected}; K = {artifacts.memory.K}; "
          f"coverage upper bound = {artifacts.certificate.eps_upper:.6f}")


def cmd_phase2(args):
    cfg = load_config(args)
    artifacts = run_phase1(cfg, outdir=Path(cfg.outdir))
    result = run_phase2(cfg, artifacts, outdir=Path(cfg.outdir))
    rec = result.metrics["test"]
    print(f"test AUC {rec.auc:.4f}, F1 {rec.f1:.4f}, ECE {rec.ece:.4f}")
    run_support_sweep(cfg, artifacts, result, outdir=Path(cfg.outdir))
    run_seed_stability(cfg, artifacts, outdir=Path(cfg.outdir))


def cmd_baselines(args):
    cfg = load_config(args)
    artifacts = run_phase1(cfg)
    results = run_baselines(cfg, artifacts, outdir=Path(cfg.outdir))
    for name, (rec, lat) in results.items():
        print(f"{name}: AUC {rec.auc:.4f} ({lat:.2f} ms/task)")


def cmd_ablate(args):
    cfg = load_config(args)
    variants = args.variants or list(ABLATION_VARIANTS)
    rows = run_ablations(cfg, variants, outdir=Path(cfg.outdir))
    for row in rows:
        print(f"{row['variant']}: AUC {row['auc']:.4f} F1 {row['f1']:.4f}")


def cmd_motifs(args):
    cfg = load_config(args)
    calibrations, report = run_motifs(cfg, outdir=Path(cfg.outdir))
    print(f"screened {report.screened.size} channels; "
          f"pi0 = {report.pi0.pi0:.3f} {report.pi0.ci90}")
    for cal in calibrations:
        if cal is not None:
            print(f"{cal.cohort}: tau_bar {cal.tau_bar:.3f} |t| {cal.t_abs:.2f} "
                  f"pass {cal.passed}")


def cmd_riskbound(args):
    cfg = load_config(args)
    artifacts = run_phase1(cfg)
    summary = run_riskbound(cfg, artifacts, outdir=Path(cfg.outdir))
    print(summary.as_text())


def cmd_report(args):
    cfg = load_config(args)
    path = emit_report(Path(cfg.outdir))
    print(path.read_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoadapt",
        description="prototype-conditioned fast-weight retrieval on synthetic episodic tasks")
    parser.add_argument("--config", help="JSON run configuration", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--outdir", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write the corpus CSV and manifest").set_defaults(fn=cmd_generate)
    sub.add_parser("phase1", help="memory construction and certificates").set_defaults(fn=cmd_phase1)
    sub.add_parser("phase2", help="retrieval training plus metric sweeps").set_defaults(fn=cmd_phase2)
    sub.add_parser("baselines", help="ridge, nearest-centroid, oracle runs").set_defaults(fn=cmd_baselines)
    ablate = sub.add_parser("ablate", help="run ablation variants")
    ablate.add_argument("variants", nargs="*", choices=list(ABLATION_VARIANTS) + [[]],
                        help="variant names (default: all)")
    ablate.set_defaults(fn=cmd_ablate)
    sub.add_parser("motifs", help="motif statistics over synthetic cohorts").set_defaults(fn=cmd_motifs)
    sub.add_parser("riskbound", help="empirical bound verification").set_defaults(fn=cmd_riskbound)
    sub.add_parser("report", help="assemble the plain-text summary").set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
