"""Audio representation, I/O, segmentation and seeded randomness."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

from .errors import AudioFormatError

CANONICAL_RATE = 16000
DEFAULT_SEGMENT_LEN = 32000


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {x.shape}")
        if x.size < 1:
            raise ValueError("AudioClip must hold at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioClip samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class Segment:
    samples: np.ndarray
    source_id: str
    offset: int
    valid_len: int  # samples before zero padding


class CropMode(str, Enum):
    TRAIN_RANDOM_CROP = "train_random_crop"
    EVAL_TILED = "eval_tiled"


def make_rng(seed: int, *stream) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional stream path.

    ``make_rng(seed, epoch)`` and ``make_rng(seed, "utt", i)`` give
    independent reproducible streams without sharing generator state.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            key.append(int.from_bytes(part.encode("utf-8")[:8].ljust(8, b"\0"), "little"))
        else:
            key.append(int(part))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Band-limited polyphase resampling (Kaiser-windowed FIR)."""
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    ratio = Fraction(int(target_rate), int(orig_rate))
    y = resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator,
                      window=("kaiser", 8.0))
    n_out = int(round(len(samples) * target_rate / orig_rate))
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return y[:n_out]


def load_audio(path, target_rate: int = CANONICAL_RATE) -> AudioClip:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except sf.LibsndfileError as exc:
        raise AudioFormatError(f"cannot decode {path}: {exc}") from exc
    except RuntimeError as exc:
        raise AudioFormatError(f"cannot decode {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise AudioFormatError(f"{path} contains no samples")
    mono = data.mean(axis=1)
    mono = resample(mono, rate, target_rate)
    if not np.all(np.isfinite(mono)):
        raise AudioFormatError(f"{path} decodes to non-finite samples")
    return AudioClip(mono, target_rate)


def save_audio(clip: AudioClip, path, subtype: str = "PCM_16") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(clip.samples, -1.0, 1.0), clip.sample_rate, subtype=subtype, format="WAV")
    return path


def peak_normalize(clip: AudioClip) -> AudioClip:
    peak = float(np.max(np.abs(clip.samples)))
    if peak == 0.0:
        return clip
    return AudioClip(clip.samples / peak, clip.sample_rate)


def _window(x: np.ndarray, start: int, segment_len: int) -> tuple[np.ndarray, int]:
    chunk = x[start:start + segment_len]
    if chunk.size < segment_len:
        chunk = np.concatenate([chunk, np.zeros(segment_len - chunk.size)])
        return chunk, x.size - start
    return chunk.copy(), segment_len


def segment_clip(clip: AudioClip, segment_len: int = DEFAULT_SEGMENT_LEN,
                 mode: CropMode | str = CropMode.EVAL_TILED,
                 rng: np.random.Generator | None = None, source_id: str = "") -> list[Segment]:
    """Cut a clip into fixed-length detector windows.

    TRAIN_RANDOM_CROP returns one uniformly placed window (needs ``rng``);
    EVAL_TILED returns ``ceil(len / segment_len)`` non-overlapping tiles.
    Short material is zero-padded at the tail.
    """
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    mode = CropMode(mode)
    x = clip.samples
    if mode is CropMode.TRAIN_RANDOM_CROP:
        if rng is None:
            raise ValueError("TRAIN_RANDOM_CROP needs an rng")
        slack = x.size - segment_len
        start = int(rng.integers(0, slack + 1)) if slack > 0 else 0
        chunk, valid = _window(x, start, segment_len)
        return [Segment(chunk, source_id, start, valid)]
    n_tiles = math.ceil(x.size / segment_len)
    out = []
    for i in range(n_tiles):
        chunk, valid = _window(x, i * segment_len, segment_len)
        out.append(Segment(chunk, source_id, i * segment_len, valid))
    return out
