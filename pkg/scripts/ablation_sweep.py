"""Run the ablation suites against a synthetic interaction teacher.

Reproduces the qualitative orderings from the modality/architecture/data
sweeps at desk scale: trimodal > bimodal > unimodal, transformer > identity
trunk, and mean score rising with training sessions. Writes one CSV of
per-seed rows per suite.

    python3 scripts/ablation_sweep.py --out /tmp/sweep --suites modality_subsets
"""

import argparse
import json
import time
from pathlib import Path

from tribe.alignment import LayerGroupSpec, WindowConfig
from tribe.datastore import load_manifest
from tribe.evaluator import ABLATION_SUITES, run_ablation
from tribe.synthgen import TeacherSpec, generate
from tribe.trainer import TrainConfig

GS = LayerGroupSpec(anchors=(1.0,), aggregation="average")


def dataset_for(suite: str, out: Path, seed: int):
    """Interaction teacher for model ablations; a noisy 20-video one for the
    data-scaling sweep (more data only helps when noise is present)."""
    if suite == "sessions_scaling":
        path = out / "data_scaling"
        if not (path / "manifest.json").exists():
            generate(TeacherSpec(noise_std=1.0), 1, 20, 200, seed=seed + 1,
                     out_dir=path, num_repeat_videos=1)
    else:
        path = out / "data_interaction"
        if not (path / "manifest.json").exists():
            generate(TeacherSpec(noise_std=0.0), 2, 6, 300, seed=seed,
                     out_dir=path, num_repeat_videos=1)
    return load_manifest(path / "manifest.json")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--suites", nargs="+", default=list(ABLATION_SUITES),
                    choices=list(ABLATION_SUITES))
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=21)
    args = ap.parse_args()

    overrides = dict(
        proj_dim=12,
        num_layers=1,
        num_heads=4,
        window=WindowConfig(trs_per_window=30, tr_seconds=1.49,
                            frequency_hz=2.0, jitter_s=0.0),
    )
    tc = TrainConfig(
        epochs=args.epochs, batch_size=8, lr_peak=2e-2,
        modality_dropout_p=0.2, swa_start_epoch=max(1, args.epochs - 2),
        early_stop_patience=args.epochs, loss="mse", seed=0,
    )

    summaries = {}
    for suite in args.suites:
        manifest = dataset_for(suite, args.out, args.data_seed)
        t0 = time.time()
        report = run_ablation(
            suite, manifest, GS, overrides, tc,
            seeds=tuple(args.seeds),
            out_path=args.out / f"{suite}_rows.csv",
        )
        summaries[suite] = report["summary"]
        print(f"[{suite}] {time.time() - t0:.0f}s")
        for cond, mean in sorted(report["summary"].items(), key=lambda kv: -kv[1]):
            print(f"    {cond:20s} {mean:.4f}")

    (args.out / "summaries.json").write_text(json.dumps(summaries, indent=1))
    print(f"wrote {args.out / 'summaries.json'}")


if __name__ == "__main__":
    main()
