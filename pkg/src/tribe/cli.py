"""Command-line entry point.

One executable, eight subcommands:

    gen-synth         write a synthetic dataset with a known teacher
    train             train one encoder from a manifest
    eval              score a trained run on a split (optionally masked)
    ensemble-fit      train a member population and fit per-parcel weights
    ensemble-predict  blend members on a split and score the blend
    probe             single-modality masking maps for a trained run
    ablate            run one ablation suite
    report            summarize a run's score CSV into JSON + histogram CSV

Every subcommand reads a JSON config (plus a few flags), writes its outputs
under --out, copies the config there, and finishes by writing files.json:
a name/bytes/sha256 manifest of everything produced. Nothing written embeds
absolute paths or timestamps, so a rerun with the same config and seed into
a fresh directory reproduces outputs bit-for-bit.

TRIBE_NUM_THREADS caps --jobs and is exported to the usual BLAS thread-count
variables for worker processes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap() -> int | None:
    raw = os.environ.get("TRIBE_NUM_THREADS")
    if raw is None:
        return None
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise SystemExit(f"TRIBE_NUM_THREADS must be an integer, got {raw!r}")
    for var in THREAD_ENV_VARS:
        os.environ.setdefault(var, str(cap))
    return cap


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise SystemExit(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SystemExit(f"config {p} is not valid JSON: {e}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _copy_config(out: Path, config: dict) -> None:
    (out / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))


def _write_files_manifest(out: Path) -> None:
    entries = []
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == "files.json":
            continue
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        entries.append(
            {
                "path": str(p.relative_to(out)),
                "bytes": p.stat().st_size,
                "sha256": digest,
            }
        )
    (out / "files.json").write_text(json.dumps(entries, indent=1, sort_keys=True))


def _group_spec_from(doc: dict):
    from .alignment import LayerGroupSpec

    return LayerGroupSpec(
        anchors=tuple(doc.get("anchors", (0.5, 0.75, 1.0))),
        mode=doc.get("mode", "group_by_intervals"),
        aggregation=doc.get("aggregation", "concatenate"),
    )


def _net_overrides_from(doc: dict) -> dict:
    from .alignment import WindowConfig

    overrides = dict(doc)
    if "window" in overrides:
        overrides["window"] = WindowConfig(**overrides["window"])
    return overrides


def _train_config_from(doc: dict, seed: int | None):
    from .trainer import TrainConfig

    cfg = TrainConfig(**doc)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _mask_from(arg: str):
    from .tribenet import ModalityMask

    if arg == "none":
        return None
    return ModalityMask.keep_only(arg)


def _load_run(run_dir: str):
    """A train run directory: config.json + swa/final checkpoints."""
    run = Path(run_dir)
    config = json.loads((run / "config.json").read_text())
    stem = run / "swa"
    if not stem.with_suffix(".json").exists():
        stem = run / "final"
    return run, config, stem


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_synth(args) -> int:
    from .synthgen import TeacherSpec, generate

    config = _load_config(args.config)
    out = _out_dir(args)
    spec = TeacherSpec.from_json(config.get("spec", {}))
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    generate(
        spec,
        num_subjects=config.get("num_subjects", 2),
        num_sessions=config.get("num_sessions", 10),
        session_trs=config.get("session_trs", 100),
        seed=seed,
        out_dir=out,
        holdout_fraction=config.get("holdout_fraction", 0.2),
        num_repeat_videos=config.get("num_repeat_videos", 0),
    )
    _copy_config(out, {**config, "seed": seed})
    _write_files_manifest(out)
    print(f"dataset written to {out}")
    return 0


def _cmd_train(args) -> int:
    from . import datastore, trainer

    config = _load_config(args.config)
    out = _out_dir(args)
    manifest = datastore.load_manifest(args.data)
    group_spec = _group_spec_from(config.get("group_spec", {}))
    net_config = trainer.make_net_config(
        manifest, group_spec, **_net_overrides_from(config.get("net", {}))
    )
    train_config = _train_config_from(config.get("train", {}), args.seed)
    _copy_config(
        out,
        {
            "group_spec": config.get("group_spec", {}),
            "net": config.get("net", {}),
            "train": train_config.to_json(),
        },
    )
    result = trainer.train(manifest, group_spec, net_config, train_config, out)
    _write_files_manifest(out)
    epochs_run = result.log[-1]["epoch"] if result.log else 0
    print(
        f"trained {epochs_run} epochs; best val pearson "
        f"{result.best_val_score:.4f}; checkpoints in {out}"
    )
    return 0


def _cmd_eval(args) -> int:
    from . import datastore, evaluator

    manifest = datastore.load_manifest(args.data)
    run, run_config, stem = _load_run(args.run)
    group_spec = _group_spec_from(run_config.get("group_spec", {}))
    out = _out_dir(args)
    mask = _mask_from(args.mask)
    table = evaluator.score_model(stem, manifest, args.split, group_spec, mask)
    evaluator.write_scores_csv(table, out / "scores.csv", subjects=manifest.subjects)
    evaluator.save_summary(table, out / "summary.json")
    _copy_config(out, {"run": run.name, "split": args.split, "mask": args.mask})
    _write_files_manifest(out)
    print(f"mean pearson over parcels: {table.mean_score:.4f} ({args.split})")
    return 0


def _cmd_probe(args) -> int:
    from . import datastore, evaluator
    from .alignment import assemble_split
    from .tribenet import load_checkpoint

    manifest = datastore.load_manifest(args.data)
    run, run_config, stem = _load_run(args.run)
    group_spec = _group_spec_from(run_config.get("group_spec", {}))
    out = _out_dir(args)
    net = load_checkpoint(stem)
    sessions = assemble_split(manifest, args.split, group_spec)
    dropout = run_config.get("train", {}).get("modality_dropout_p")
    probe = evaluator.probe_modalities(
        net, sessions, trained_with_dropout=None if dropout is None else dropout > 0
    )
    evaluator.write_probe_csv(probe, out / "probe.csv")
    counts = {m: probe.argmax.count(m) for m in sorted(set(probe.argmax))}
    (out / "summary.json").write_text(
        json.dumps({"argmax_counts": counts}, indent=1, sort_keys=True)
    )
    _copy_config(out, {"run": run.name, "split": args.split})
    _write_files_manifest(out)
    print(f"probe argmax counts: {counts}")
    return 0


def _cmd_ensemble_fit(args) -> int:
    from . import datastore, ensembler

    config = _load_config(args.config)
    out = _out_dir(args)
    manifest = datastore.load_manifest(args.data)
    ens_kwargs = {}
    for k, v in config.get("ensemble", {}).items():
        if isinstance(v, list):  # JSON axes -> tuples (nested for anchor sets)
            v = tuple(tuple(a) if isinstance(a, list) else a for a in v)
        ens_kwargs[k] = v
    ens_config = ensembler.EnsembleConfig(**ens_kwargs)
    if args.seed is not None:
        ens_config = replace(ens_config, seed=args.seed)
    base_train = _train_config_from(config.get("train", {}), None)
    members = ensembler.sample_grid(
        ens_config, manifest, _net_overrides_from(config.get("net", {})), base_train
    )
    entries = ensembler.train_members(manifest, members, out, jobs=args.jobs)
    weights = ensembler.fit_weights(
        ensembler.collect_val_scores(entries), ens_config.temperature
    )
    ensembler.save_weights(weights, out)
    _copy_config(out, config)
    _write_files_manifest(out)
    best = max(e["mean_val_score"] for e in entries)
    print(f"{len(entries)} members trained; best member val score {best:.4f}")
    return 0


def _cmd_ensemble_predict(args) -> int:
    from . import datastore, ensembler, evaluator, tensorio

    manifest = datastore.load_manifest(args.data)
    out = _out_dir(args)
    entries = ensembler.load_registry(args.run)
    weights = ensembler.load_weights(args.run)
    blended, table = ensembler.predict_ensemble(
        entries,
        weights,
        manifest,
        args.split,
        allow_fit_split=args.allow_fit_split,
    )
    for session_id, pred in sorted(blended.items()):
        tensorio.write_tensor(
            out / "predictions" / f"{session_id}.f32", pred.astype(np.float32)
        )
    evaluator.write_scores_csv(table, out / "scores.csv", subjects=manifest.subjects)
    evaluator.save_summary(table, out / "summary.json")
    _copy_config(out, {"run": Path(args.run).name, "split": args.split})
    _write_files_manifest(out)
    print(f"ensemble mean pearson: {table.mean_score:.4f} ({args.split})")
    return 0


def _cmd_ablate(args) -> int:
    from . import datastore, evaluator

    config = _load_config(args.config)
    out = _out_dir(args)
    manifest = datastore.load_manifest(args.data)
    group_spec = _group_spec_from(config.get("group_spec", {}))
    train_config = _train_config_from(config.get("train", {}), args.seed)
    report = evaluator.run_ablation(
        config["suite"],
        manifest,
        group_spec,
        _net_overrides_from(config.get("net", {})),
        train_config,
        seeds=tuple(config.get("seeds", (0, 1, 2))),
        session_counts=tuple(config.get("session_counts", (2, 4, 8, 16))),
        out_path=out / "ablation.csv",
    )
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    _copy_config(out, config)
    _write_files_manifest(out)
    print(f"{report['suite']}: " + ", ".join(
        f"{cond}={score:.4f}" for cond, score in sorted(report["summary"].items())
    ))
    return 0


def _cmd_report(args) -> int:
    run = Path(args.run_dir)
    scores_path = run / "scores.csv"
    if not scores_path.exists():
        raise SystemExit(f"no scores.csv under {run}")
    rho, rho_norm = [], []
    with scores_path.open() as fh:
        for row in csv.DictReader(fh):
            r = float(row["rho"])
            rn = float(row["rho_norm"])
            if np.isfinite(r):
                rho.append(r)
            if np.isfinite(rn):
                rho_norm.append(rn)
    values = np.asarray(rho_norm if rho_norm else rho)
    if values.size == 0:
        raise SystemExit(f"{scores_path} holds no finite scores")
    q25, q50, q75 = np.percentile(values, [25, 50, 75])
    summary = {
        "source": "rho_norm" if rho_norm else "rho",
        "count": int(values.size),
        "mean": float(values.mean()),
        "median": float(q50),
        "iqr": [float(q25), float(q75)],
    }
    (run / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    edges = np.linspace(-1.0, 1.0, 41)
    counts, _ = np.histogram(values, bins=edges)
    with (run / "histogram.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.3f}", f"{hi:.3f}", int(c)])
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tribe", description="multimodal fMRI encoding pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True, out=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        if data:
            p.add_argument("--data", required=True, help="path to manifest.json")
        if out:
            p.add_argument("--out", required=True, help="output run directory")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-synth", help="generate a synthetic teacher dataset")
    common(p, data=False)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train", help="train one encoder")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a trained run")
    common(p, config=False, seed=False)
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument(
        "--mask",
        default="none",
        choices=("text", "audio", "video", "none"),
        help="keep only this modality (zero the others)",
    )
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("probe", help="single-modality probing maps")
    common(p, config=False, seed=False)
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("ensemble-fit", help="train members and fit parcel weights")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel member training")
    p.set_defaults(func=_cmd_ensemble_fit)

    p = sub.add_parser("ensemble-predict", help="blend members on a split")
    common(p, config=False, seed=False)
    p.add_argument("--run", required=True, help="ensemble-fit output directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument(
        "--allow-fit-split",
        action="store_true",
        help="permit evaluating on the split the weights were fitted on",
    )
    p.set_defaults(func=_cmd_ensemble_predict)

    p = sub.add_parser("ablate", help="run an ablation suite")
    common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="summarize a run's scores.csv")
    p.add_argument("run_dir", help="directory holding scores.csv")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    cap = _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    if cap is not None and getattr(args, "jobs", None) is not None:
        args.jobs = max(1, min(args.jobs, cap))
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
