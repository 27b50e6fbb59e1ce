"""Multimodal fMRI encoding: align cached text/audio/video embeddings to the
TR grid, train a subject-conditioned transformer to predict parcellated BOLD,
ensemble models per parcel, and evaluate against the noise ceiling. A
synthetic teacher generator makes the whole pipeline testable at desk scale.
"""

from .alignment import (
    AlignedWindow,
    LayerGroupSpec,
    TimedWordEmbedding,
    WindowConfig,
    bin_words,
    group_layers,
    resample_audio,
)
from .datastore import (
    BoldMeta,
    BoldSeries,
    DatasetManifest,
    EmbeddingSeries,
    ManifestError,
    ModalityMeta,
    SessionRecord,
    load_manifest,
    make_split,
    zscore_session,
)
from .tribenet import ModalityMask, NetConfig, TribeNet, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AlignedWindow",
    "BoldMeta",
    "BoldSeries",
    "DatasetManifest",
    "EmbeddingSeries",
    "LayerGroupSpec",
    "ManifestError",
    "ModalityMask",
    "ModalityMeta",
    "NetConfig",
    "SessionRecord",
    "TimedWordEmbedding",
    "TribeNet",
    "WindowConfig",
    "bin_words",
    "group_layers",
    "load_checkpoint",
    "load_manifest",
    "make_split",
    "resample_audio",
    "save_checkpoint",
    "zscore_session",
    "__version__",
]
