"""Stimulus readers: transcripts, waveforms, frame sequences.

File formats accepted:

- transcripts: tab-separated ``word<TAB>onset_s<TAB>duration_s``, one word per
  line, optional header row;
- audio: PCM WAV (8/16/32-bit integer or 32-bit float), mono;
- video: an ``.npz`` container (``frames`` [T, H, W, C] plus scalar ``fps``),
  a directory of per-frame ``frame_{i:05d}.npy`` files with a ``meta.json``,
  or any container OpenCV can decode when ``cv2`` is importable.

Frame access goes through the small `FrameSource` protocol so extraction can
ask "is frame i actually present?" and substitute a neighbour when it is not
(sparse frame directories happen when decoding jobs die partway).
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExtractorError


@dataclass(frozen=True)
class WordEvent:
    """One transcript word with its time span in seconds."""

    word: str
    onset_s: float
    duration_s: float

    def __post_init__(self):
        if not self.word or any(c.isspace() for c in self.word):
            raise ExtractorError(f"bad transcript word {self.word!r}")
        if not np.isfinite(self.onset_s) or self.onset_s < 0:
            raise ExtractorError(f"word {self.word!r}: bad onset {self.onset_s}")
        if not np.isfinite(self.duration_s) or self.duration_s < 0:
            raise ExtractorError(f"word {self.word!r}: bad duration {self.duration_s}")


def read_transcript(path: Path | str) -> list[WordEvent]:
    """Parse a TSV transcript; onsets must be nondecreasing."""
    path = Path(path)
    words: list[WordEvent] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ExtractorError(f"{path.name}:{lineno}: expected 3 columns, got {len(parts)}")
        try:
            onset, duration = float(parts[1]), float(parts[2])
        except ValueError:
            if lineno == 1:
                continue  # header row
            raise ExtractorError(f"{path.name}:{lineno}: non-numeric timestamp") from None
        words.append(WordEvent(parts[0], onset, duration))
    for prev, cur in zip(words, words[1:]):
        if cur.onset_s < prev.onset_s:
            raise ExtractorError(
                f"{path.name}: onsets not monotone at {cur.word!r} "
                f"({cur.onset_s} after {prev.onset_s})"
            )
    return words


def transcript_end_s(words: list[WordEvent]) -> float:
    return max((w.onset_s + w.duration_s for w in words), default=0.0)


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

_PCM_SCALE = {1: 2.0**7, 2: 2.0**15, 4: 2.0**31}
_PCM_DTYPE = {1: np.uint8, 2: np.dtype("<i2"), 4: np.dtype("<i4")}


def read_wav(path: Path | str) -> tuple[np.ndarray, int]:
    """Load a mono PCM WAV as float64 in [-1, 1]; returns (samples, rate)."""
    path = Path(path)
    with wave.open(str(path), "rb") as w:
        channels, width = w.getnchannels(), w.getsampwidth()
        rate, nframes = w.getframerate(), w.getnframes()
        raw = w.readframes(nframes)
    if channels != 1:
        raise ExtractorError(f"{path.name}: expected mono audio, got {channels} channels")
    if width not in _PCM_DTYPE:
        raise ExtractorError(f"{path.name}: unsupported sample width {width} bytes")
    data = np.frombuffer(raw, dtype=_PCM_DTYPE[width]).astype(np.float64)
    if width == 1:
        data -= 128.0  # 8-bit WAV is unsigned
    return data / _PCM_SCALE[width], rate


# ---------------------------------------------------------------------------
# video frames
# ---------------------------------------------------------------------------


class FrameSource:
    """Random access to decoded frames plus presence information."""

    fps: float
    num_frames: int

    def has(self, index: int) -> bool:
        raise NotImplementedError

    def frame(self, index: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.fps


class ArrayFrames(FrameSource):
    """Frames already in memory as one [T, H, W, C] array."""

    def __init__(self, frames: np.ndarray, fps: float):
        frames = np.asarray(frames)
        if frames.ndim != 4:
            raise ExtractorError(f"frames must be [T, H, W, C], got {frames.shape}")
        if fps <= 0:
            raise ExtractorError(f"fps must be > 0, got {fps}")
        self.frames = frames
        self.fps = float(fps)
        self.num_frames = frames.shape[0]

    def has(self, index: int) -> bool:
        return 0 <= index < self.num_frames

    def frame(self, index: int) -> np.ndarray:
        return self.frames[index]


class FrameDir(FrameSource):
    """A directory of frame_{i:05d}.npy files; gaps are tolerated.

    meta.json declares {"fps": float, "num_frames": int}; num_frames is the
    intended count, the set of files actually on disk may be smaller.
    """

    def __init__(self, path: Path | str):
        self.path = Path(path)
        meta_path = self.path / "meta.json"
        if not meta_path.exists():
            raise ExtractorError(f"{self.path} has no meta.json")
        meta = json.loads(meta_path.read_text())
        self.fps = float(meta["fps"])
        self.num_frames = int(meta["num_frames"])
        if self.fps <= 0 or self.num_frames < 1:
            raise ExtractorError(f"{meta_path}: bad fps/num_frames")
        self._present = {
            int(p.stem.split("_")[1]) for p in self.path.glob("frame_*.npy")
        }
        if not self._present:
            raise ExtractorError(f"{self.path} contains no frame_*.npy files")

    def has(self, index: int) -> bool:
        return index in self._present

    def frame(self, index: int) -> np.ndarray:
        return np.load(self.path / f"frame_{index:05d}.npy")


def _container_frames(path: Path) -> ArrayFrames:
    # requires opencv; decodes the whole clip into memory, fine at desk scale
    try:
        import cv2
    except ImportError as e:
        raise ExtractorError(
            f"{path.name}: decoding video containers needs opencv-python"
        ) from e
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ExtractorError(f"could not open video container {path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    frames = []
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        frames.append(bgr[:, :, ::-1])  # BGR -> RGB
    cap.release()
    if not frames:
        raise ExtractorError(f"{path} decoded to zero frames")
    return ArrayFrames(np.stack(frames), fps)


def load_frames(path: Path | str) -> FrameSource:
    """Open a frame directory, .npz bundle, or decodable container."""
    path = Path(path)
    if path.is_dir():
        return FrameDir(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            if "frames" not in z or "fps" not in z:
                raise ExtractorError(f"{path.name}: .npz needs 'frames' and 'fps'")
            return ArrayFrames(z["frames"], float(z["fps"]))
    return _container_frames(path)
