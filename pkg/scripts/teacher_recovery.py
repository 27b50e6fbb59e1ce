"""Train a small encoder against a noiseless synthetic teacher and report
raw and noise-ceiling-normalized validation scores.

The teacher wires each parcel to one modality, so a model that recovers the
mapping scores near 1.0 on held-out videos. Useful as an end-to-end smoke
run and as a template for sweeping window/model sizes.

    python3 scripts/teacher_recovery.py --out /tmp/recovery --epochs 50
"""

import argparse
import time
from pathlib import Path

from tribe.alignment import LayerGroupSpec, WindowConfig
from tribe.datastore import load_bold_series
from tribe.evaluator import (
    assemble_split,
    noise_ceiling,
    normalized_scores,
    score_sessions,
    write_scores_csv,
)
from tribe.synthgen import TeacherSpec, generate, load_teacher_record
from tribe.trainer import TrainConfig, make_net_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--videos", type=int, default=8)
    ap.add_argument("--subjects", type=int, default=2)
    ap.add_argument("--session-trs", type=int, default=600)
    ap.add_argument("--window-trs", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=2e-2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data_dir = args.out / "data"
    spec = TeacherSpec(
        noise_std=0.0, driver_counts={"text": 4, "audio": 4, "video": 4}
    )
    manifest = generate(
        spec,
        args.subjects,
        args.videos,
        args.session_trs,
        seed=args.seed + 11,
        out_dir=data_dir,
        num_repeat_videos=1,
    )
    print(f"dataset: {len(manifest.sessions)} sessions under {data_dir}")

    gs = LayerGroupSpec(anchors=(1.0,), aggregation="average")
    window = WindowConfig(
        trs_per_window=args.window_trs,
        tr_seconds=spec.tr_seconds,
        frequency_hz=spec.frequency_hz,
        jitter_s=0.0,
    )
    net_cfg = make_net_config(
        manifest, gs, proj_dim=16, num_layers=2, num_heads=4, window=window
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=8,
        lr_peak=args.lr,
        modality_dropout_p=0.2,
        swa_start_epoch=max(1, args.epochs - 5),
        early_stop_patience=args.epochs,
        loss="mse",
        seed=args.seed,
    )
    t0 = time.time()
    result = train(manifest, gs, net_cfg, train_cfg, out_dir=args.out / "run")
    print(f"trained {args.epochs} epochs in {time.time() - t0:.0f}s")

    table = score_sessions(result.net, assemble_split(manifest, "val", gs))
    record = load_teacher_record(data_dir)
    a_id, b_id = record["repeat_pairs"][0]
    by_id = {s.session_id: s for s in manifest.sessions}
    ceiling = noise_ceiling(
        load_bold_series(manifest, by_id[a_id]).data,
        load_bold_series(manifest, by_id[b_id]).data,
    )
    normed = normalized_scores(table, ceiling)
    write_scores_csv(table, args.out / "scores.csv", ceiling, manifest.subjects)
    print(f"mean val pearson:            {table.mean_score:.4f}")
    print(f"mean normalized val pearson: {normed.mean_score:.4f}")
    print(f"scores: {args.out / 'scores.csv'}")


if __name__ == "__main__":
    main()
