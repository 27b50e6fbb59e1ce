"""Shared fixtures: a tiny on-disk dataset built by hand (not via synthgen)."""

import math

import numpy as np
import pytest

from tribe import tensorio
from tribe.datastore import (
    BoldMeta,
    DatasetManifest,
    ModalityMeta,
    SessionRecord,
    save_manifest,
    load_manifest,
)

MODALITY_SHAPES = {"text": (3, 6), "audio": (3, 5), "video": (2, 4)}


def build_dataset(
    root,
    subjects=("sub-01", "sub-02"),
    videos_per_split=(3, 1),
    num_trs=24,
    num_parcels=7,
    tr_seconds=1.49,
    frequency_hz=2.0,
    seed=0,
    modality_shapes=None,
):
    """Write a minimal valid dataset under `root` and return its manifest."""
    shapes = dict(modality_shapes or MODALITY_SHAPES)
    rng = np.random.default_rng(seed)
    num_steps = math.ceil(num_trs * tr_seconds * frequency_hz)
    modalities = [
        ModalityMeta(name=m, dim=d, num_layers=l, frequency_hz=frequency_hz)
        for m, (l, d) in shapes.items()
    ]
    n_train, n_val = videos_per_split
    videos = [(f"vid{i:02d}", "train" if i < n_train else "val") for i in range(n_train + n_val)]

    sessions = []
    for vid, split in videos:
        feats = {}
        for m, (l, d) in shapes.items():
            rel = f"features/{vid}_{m}.f32"
            tensorio.write_tensor(root / rel, rng.standard_normal((num_steps, l, d)).astype(np.float32))
            feats[m] = rel
        for sub in subjects:
            rel = f"bold/{sub}_{vid}.f32"
            tensorio.write_tensor(root / rel, rng.standard_normal((num_trs, num_parcels)).astype(np.float32))
            sessions.append(
                SessionRecord(
                    session_id=f"{sub}_{vid}",
                    subject_id=sub,
                    video_id=vid,
                    split=split,
                    feature_paths=feats,
                    bold_path=rel,
                    num_trs=num_trs,
                    num_feature_steps=num_steps,
                )
            )

    manifest = DatasetManifest(
        modalities=modalities,
        bold=BoldMeta(num_parcels=num_parcels, tr_seconds=tr_seconds),
        subjects=list(subjects),
        sessions=sessions,
    )
    save_manifest(manifest, root / "manifest.json")
    return load_manifest(root / "manifest.json")


@pytest.fixture
def tiny_dataset(tmp_path):
    return build_dataset(tmp_path)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance-criterion verdicts as one block at the end."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    lines = getattr(mod, "REPORT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
