#!/usr/bin/env python3
"""
Run the calibration runs behind the acceptance thresholds.

Trains on the learnable world and on the null world (no cross-modal
association, averaged over several world and run seeds), checks the
ablation trends over several seeds, the U/G ordering, clustering sanity,
determinism and the self-test suite, then prints a PASS/FAIL summary.

Usage:
    python scripts/run_acceptance.py [--config PATH] [--out DIR] [--seeds N] [--null-seeds N]
                                     [--threads N] [--skip-trends]
"""

import argparse
import sys
import time
from pathlib import Path
from typing import Dict, List, Tuple

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from faalab.ablation import run_ablation, trend_checks, write_ablation  # noqa: E402
from faalab.config import configure_logging  # noqa: E402
from faalab.evalsuite import EvalReport, evaluate_model, write_report  # noqa: E402
from faalab.runconfig import RunConfig, load_run_config  # noqa: E402
from faalab.selftest import run_selftest  # noqa: E402
from faalab.synthworld import generate_world  # noqa: E402
from faalab.trainer import TrainResult, train, write_run_outputs  # noqa: E402

AUC_MIN = 0.90
ACC_MIN = 0.85
MAP_RATIO_MIN = 10.0
NULL_BAND = (0.45, 0.55)
NMI_MIN = 0.6
TREND_QUORUM = 4

Check = Tuple[str, bool, str]


def _train_and_eval(config: RunConfig, out: Path, threads: int) -> Tuple[TrainResult, EvalReport]:
    dataset = generate_world(config.world)
    result = train(dataset, config.train, config.ablation, config.eval, out_dir=out, threads=threads)
    write_run_outputs(result, out)
    report = evaluate_model(
        result.best.restore(), dataset.partition("test"), config.eval,
        scoring="fusion" if config.ablation.fusion_scoring else "cosine",
        threads=threads,
        config_hash=config.config_hash(),
    )
    write_report(report, out / "report.json")
    return result, report


def learnable_world(config: RunConfig, out: Path, threads: int) -> List[Check]:
    print("\n=== Learnable world ===")
    started = time.perf_counter()
    result, report = _train_and_eval(config, out / "learnable", threads)
    minutes = (time.perf_counter() - started) / 60.0
    initial = result.history.records[0].clusters
    final = result.final_progress.clusters
    nmi = result.history.records[-1].pseudo_label_nmi
    print(f"  AUC(U) {report.auc_u:.4f}  AUC(G) {report.auc_g:.4f}  EER(U) {report.eer_u:.4f}")
    print(f"  ACC V2F {report.acc_v2f_u:.4f}/{report.acc_v2f_g:.4f}  F2V {report.acc_f2v_u:.4f}/{report.acc_f2v_g:.4f}")
    print(f"  mAP V2F {report.map_v2f:.4f} (random {report.random_map_v2f:.4f})  "
          f"F2V {report.map_f2v:.4f} (random {report.random_map_f2v:.4f})")
    print(f"  C {initial} -> {final}, NMI {nmi:.3f}, {minutes:.1f} min")
    return [
        ("learnable:auc", report.auc_u >= AUC_MIN, f"{report.auc_u:.4f} >= {AUC_MIN}"),
        ("learnable:matching", min(report.acc_v2f_u, report.acc_f2v_u) >= ACC_MIN,
         f"V2F {report.acc_v2f_u:.4f}, F2V {report.acc_f2v_u:.4f} >= {ACC_MIN}"),
        ("learnable:retrieval",
         report.map_v2f >= MAP_RATIO_MIN * report.random_map_v2f
         and report.map_f2v >= MAP_RATIO_MIN * report.random_map_f2v,
         f"mAP >= {MAP_RATIO_MIN}x random gallery"),
        ("ordering:u_vs_g",
         report.auc_u >= report.auc_g and report.acc_v2f_u >= report.acc_v2f_g
         and report.acc_f2v_u >= report.acc_f2v_g,
         "AUC and ACC under U >= under G"),
        ("clustering:nmi", nmi >= NMI_MIN, f"{nmi:.3f} >= {NMI_MIN}"),
        ("clustering:halvings", final <= initial / 4, f"final C {final} <= {initial}/4"),
    ]


def null_world(config: RunConfig, out: Path, seeds: int, threads: int) -> List[Check]:
    print(f"\n=== Null world (no cross-modal association), mean over {seeds} seeds ===")
    rows = []
    for seed in range(seeds):
        null = config.model_copy(update={
            "world": config.world.model_copy(update={"cross_modal_strength": 0.0, "seed": seed}),
            "train": config.train.model_copy(update={"seed": seed}),
        })
        _, report = _train_and_eval(null, out / "null" / f"seed{seed}", threads)
        rows.append((report.auc_u, report.acc_v2f_u, report.acc_f2v_u))
        print(f"  seed {seed}: AUC(U) {report.auc_u:.4f}  ACC V2F {report.acc_v2f_u:.4f}  F2V {report.acc_f2v_u:.4f}")
    auc_u, acc_v2f, acc_f2v = (sum(column) / len(column) for column in zip(*rows))
    lo, hi = NULL_BAND
    print(f"  mean:   AUC(U) {auc_u:.4f}  ACC V2F {acc_v2f:.4f}  F2V {acc_f2v:.4f}")
    return [
        ("null:auc", lo <= auc_u <= hi, f"mean {auc_u:.4f} in [{lo}, {hi}]"),
        ("null:matching", all(lo <= acc <= hi for acc in (acc_v2f, acc_f2v)),
         f"mean V2F {acc_v2f:.4f}, F2V {acc_f2v:.4f} in [{lo}, {hi}]"),
    ]


def ablation_trends(config: RunConfig, out: Path, seeds: int, threads: int) -> List[Check]:
    print(f"\n=== Ablation trends over {seeds} seeds ===")
    held: Dict[str, int] = {}
    for seed in range(seeds):
        seeded = config.model_copy(update={
            "world": config.world.model_copy(update={"seed": seed}),
            "train": config.train.model_copy(update={"seed": seed}),
        })
        rows = run_ablation(generate_world(seeded.world), seeded, threads=threads)
        write_ablation(rows, out / "ablation" / f"seed{seed}", seeded.config_hash())
        for name, ok in trend_checks(rows).items():
            held[name] = held.get(name, 0) + int(ok)
        print(f"  seed {seed}: " + ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in trend_checks(rows).items()))
    quorum = min(TREND_QUORUM, seeds)
    return [(f"trend:{name}", count >= quorum, f"{count}/{seeds} seeds") for name, count in sorted(held.items())]


def determinism(config: RunConfig, out: Path, threads: int) -> List[Check]:
    print("\n=== Determinism ===")
    short = config.model_copy(update={"train": config.train.model_copy(update={"max_epochs": 3})})
    for name in ("a", "b"):
        _train_and_eval(short, out / "determinism" / name, threads)
    files = ("model.faac", "history.jsonl", "report.json")
    same = all(
        (out / "determinism" / "a" / f).read_bytes() == (out / "determinism" / "b" / f).read_bytes() for f in files
    )
    print(f"  {', '.join(files)}: {'identical' if same else 'DIFFER'}")
    return [("determinism:bytes", same, "two runs with one seed")]


def selftest() -> List[Check]:
    print("\n=== Self-test ===")
    report = run_selftest()
    print(f"  {len(report.checks) - len(report.failures)}/{len(report.checks)} passed in {report.seconds:.1f}s")
    return [
        ("selftest:all", report.passed, ", ".join(c.name for c in report.failures) or "all checks"),
        ("selftest:runtime", report.seconds < 120.0, f"{report.seconds:.1f}s < 120s"),
    ]


def main():
    """Main CLI entry point."""
    parser = argparse.ArgumentParser(
        description="Run the acceptance calibration runs and print a summary"
    )
    parser.add_argument("--config", default=None, help="Run config (YAML); defaults to the desk-scale world")
    parser.add_argument("--out", default="./runs/acceptance", help="Output directory (default: ./runs/acceptance)")
    parser.add_argument("--seeds", type=int, default=5, help="Seeds for the ablation trend runs (default: 5)")
    parser.add_argument("--null-seeds", type=int, default=8,
                        help="Seeds averaged for the null-world control (default: 8)")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads (default: 1)")
    parser.add_argument("--skip-trends", action="store_true", help="Skip the ablation grid (the slowest part)")
    args = parser.parse_args()

    configure_logging(level="WARNING")
    try:
        config = load_run_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)

        checks: List[Check] = []
        checks += selftest()
        checks += learnable_world(config, out, args.threads)
        checks += null_world(config, out, args.null_seeds, args.threads)
        checks += determinism(config, out, args.threads)
        if not args.skip_trends:
            checks += ablation_trends(config, out, args.seeds, args.threads)
    except Exception as e:
        print(f"\n✗ Acceptance run failed: {e}")
        return 1

    print("\n" + "=" * 60)
    print("Summary")
    print("=" * 60)
    for name, ok, detail in checks:
        print(f"  {'✓' if ok else '✗'} {name:<40} {detail}")
    failed = [name for name, ok, _ in checks if not ok]
    print(f"\n{len(checks) - len(failed)}/{len(checks)} criteria met")
    return 1 if failed else 0


if __name__ == "__main__":
    exit(main())
