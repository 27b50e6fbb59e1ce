from __future__ import annotations

from pathlib import Path

import pytest

from tribe_extractor import ExtractionConfig

from toy_stimulus import write_stimulus


@pytest.fixture(scope="session")
def stimulus_dir(tmp_path_factory) -> Path:
    """The 30 s three-modality toy stimulus, built once per run."""
    root = tmp_path_factory.mktemp("stimulus")
    write_stimulus(root)
    return root


@pytest.fixture()
def cfg() -> ExtractionConfig:
    return ExtractionConfig()
