"""End-to-end: toy stimulus in, validated datastore out.

The last tests are the contract for the whole package: extraction output
for a 30 s stimulus must survive the datastore loader's eager validation,
behave under the alignment ops exactly like training features do, and the
text series on disk must equal alignment.bin_words applied to the word
table the extractor reports.
"""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from tribe import alignment, datastore, tensorio
from tribe.alignment import LayerGroupSpec, WindowConfig

from tribe_extractor import (
    ExtractorError,
    StimulusJob,
    extract_stimulus,
    extract_text,
    read_transcript,
    run_jobs,
)


def jobs_for(stimulus_dir: Path, n: int = 2) -> list[StimulusJob]:
    return [
        StimulusJob(
            session_id=f"ses-{i:02d}",
            subject_id=f"sub-{i:02d}",
            video_id="stim-toy",
            split="train",
            transcript=stimulus_dir / "transcript.tsv",
            audio=stimulus_dir / "audio.wav",
            video=stimulus_dir / "frames.npz",
        )
        for i in range(n)
    ]


@pytest.fixture(scope="module")
def built(stimulus_dir, tmp_path_factory):
    from tribe_extractor import ExtractionConfig

    out = tmp_path_factory.mktemp("extracted")
    config = ExtractionConfig()
    path = run_jobs(jobs_for(stimulus_dir), config, out)
    return path, config


def test_job_modalities_are_canonically_ordered(stimulus_dir):
    job = StimulusJob(
        session_id="s",
        subject_id="sub",
        video_id="v",
        video=stimulus_dir / "frames.npz",
        transcript=stimulus_dir / "transcript.tsv",
    )
    assert job.modalities() == ("text", "video")
    with pytest.raises(ExtractorError, match="no stimulus"):
        StimulusJob(session_id="s", subject_id="sub", video_id="v").modalities()


def test_manifest_passes_datastore_validation(built):
    path, _ = built
    manifest = datastore.load_manifest(path)  # raises on any shape mismatch
    assert [m.name for m in manifest.modalities] == ["text", "audio", "video"]
    assert {m.name: (m.num_layers, m.dim) for m in manifest.modalities} == {
        "text": (4, 8),
        "audio": (3, 6),
        "video": (3, 5),
    }
    assert manifest.frequency_hz == 2.0
    for record in manifest.sessions:
        assert record.num_feature_steps == 60  # floor(30 s * 2 Hz)
        assert record.num_trs == 20  # floor(30 s / 1.49 s)
        assert record.bold_path is None


def test_features_behave_under_alignment_ops(built):
    path, _ = built
    manifest = datastore.load_manifest(path)
    record = manifest.sessions[0]

    spec = LayerGroupSpec(anchors=(1.0,), aggregation="average")
    session = alignment.assemble_session(manifest, record, spec)
    assert session.bold is None
    for name, feats in session.features.items():
        assert feats.shape == (60, manifest.modality_meta(name).dim)

    window_config = WindowConfig(
        trs_per_window=20, tr_seconds=1.49, frequency_hz=2.0, jitter_s=0.0
    )
    window = alignment.extract_window(session, window_config, 0, with_targets=False)
    for name, block in window.inputs.items():
        assert block.shape == (60, manifest.modality_meta(name).dim)
    assert not window.pad_mask.any()

    concat = LayerGroupSpec(anchors=(0.5, 1.0), aggregation="concatenate")
    grouped = alignment.group_layers(
        datastore.load_embedding_series(manifest, record, "text").data, concat
    )
    assert grouped.shape == (60, 2 * 8)


def test_text_series_equals_bin_words_on_the_word_table(built, stimulus_dir):
    path, config = built
    manifest = datastore.load_manifest(path)
    record = manifest.sessions[0]
    on_disk = tensorio.read_tensor(manifest.resolve(record.feature_paths["text"]))

    words = read_transcript(stimulus_dir / "transcript.tsv")
    result = extract_text(words, config, num_steps=record.num_feature_steps)
    rebinned = alignment.bin_words(
        result.words, config.frequency_hz, record.num_feature_steps
    )
    assert np.array_equal(on_disk, rebinned)


def test_parallel_extraction_is_deterministic(stimulus_dir, tmp_path, cfg):
    jobs = jobs_for(stimulus_dir)
    seq_path = run_jobs(jobs, cfg, tmp_path / "seq", max_workers=1)
    par_path = run_jobs(jobs, cfg, tmp_path / "par", max_workers=2)

    def digest(root: Path) -> dict[str, str]:
        return {
            p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*.f32"))
        }

    assert digest(seq_path.parent) == digest(par_path.parent)


def test_extract_stimulus_reports_shared_step_count(stimulus_dir, cfg):
    extracted = extract_stimulus(jobs_for(stimulus_dir, n=1)[0], cfg)
    assert extracted.num_steps == 60
    assert extracted.duration_s == pytest.approx(30.0)
    assert len(extracted.words) == 60
    shapes = {m: s.data.shape[0] for m, s in extracted.features.items()}
    assert shapes == {"text": 60, "audio": 60, "video": 60}


def test_text_only_job_uses_transcript_horizon(stimulus_dir, tmp_path, cfg):
    job = StimulusJob(
        session_id="ses-t",
        subject_id="sub-t",
        video_id="stim-text",
        transcript=stimulus_dir / "transcript.tsv",
    )
    path = run_jobs([job], cfg, tmp_path / "textonly")
    manifest = datastore.load_manifest(path)
    record = manifest.sessions[0]
    # last word ends at 29.5 + 0.4 s; ceil(29.9 * 2) keeps it inside the grid
    assert record.num_feature_steps == 60
    assert record.num_trs == 20
    assert [m.name for m in manifest.modalities] == ["text"]


def test_mixed_modality_jobs_rejected(stimulus_dir, tmp_path, cfg):
    jobs = jobs_for(stimulus_dir)
    jobs[1] = StimulusJob(
        session_id="ses-01",
        subject_id="sub-01",
        video_id="stim-toy",
        transcript=stimulus_dir / "transcript.tsv",
    )
    with pytest.raises(ExtractorError, match="modalities"):
        run_jobs(jobs, cfg, tmp_path / "mixed")


def test_duplicate_session_ids_rejected(stimulus_dir, tmp_path, cfg):
    jobs = jobs_for(stimulus_dir) + jobs_for(stimulus_dir)[:1]
    with pytest.raises(ExtractorError, match="duplicate"):
        run_jobs(jobs, cfg, tmp_path / "dup")


def test_training_package_never_imports_this_one():
    import tribe

    root = Path(tribe.__file__).parent
    offenders = [
        p.name for p in root.rglob("*.py") if "tribe_extractor" in p.read_text()
    ]
    assert offenders == []
