"""Speech / background-noise decomposition ``x = s + n``.

The noise estimate is always the residual ``n = x - s``, so additivity is
exact regardless of which back-end produced ``s``.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .audio import CANONICAL_RATE, AudioClip, load_audio, resample, save_audio
from .errors import AdapterError, ConfigError, InputTooShortError

log = logging.getLogger(__name__)

BUILTIN_ID = "spectral-gate"


@dataclass(frozen=True)
class SeparatorConfig:
    fft_size: int = 512
    hop: int = 128
    window: str = "hann"
    noise_percentile: float = 0.10
    oversubtraction: float = 1.5
    gain_floor: float = 0.05

    def __post_init__(self):
        if self.fft_size < 2 or self.hop < 1 or self.hop > self.fft_size:
            raise ConfigError(f"need 1 <= hop <= fft_size, got hop={self.hop} fft_size={self.fft_size}")
        if not 0.0 < self.noise_percentile < 1.0:
            raise ConfigError("noise_percentile must lie in (0, 1)")
        if self.oversubtraction <= 0:
            raise ConfigError("oversubtraction must be positive")
        if not 0.0 <= self.gain_floor < 1.0:
            raise ConfigError("gain_floor must lie in [0, 1)")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")


@dataclass(frozen=True, eq=False)
class SeparationResult:
    speech: AudioClip
    noise: AudioClip
    separator_id: str

    def component(self, kind) -> AudioClip:
        name = getattr(kind, "value", kind)
        if name == "speech":
            return self.speech
        if name == "noise":
            return self.noise
        raise ValueError(f"no separated component for {kind!r}")


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Centred STFT (zero padding of ``fft_size // 2`` each side), frames x bins."""
    pad = fft_size // 2
    n_frames = 1 + int(np.ceil(x.size / hop))
    total = (n_frames - 1) * hop + fft_size
    padded = np.zeros(total)
    padded[pad:pad + x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, fft_size)[::hop][:n_frames]
    return np.fft.rfft(frames * hann(fft_size)[None, :], axis=1)


def istft(spec: np.ndarray, fft_size: int, hop: int, length: int) -> np.ndarray:
    frames = np.fft.irfft(spec, n=fft_size, axis=1)
    total = (spec.shape[0] - 1) * hop + fft_size
    y = kernels.overlap_add(frames, hann(fft_size), hop, total)
    pad = fft_size // 2
    return y[pad:pad + length]


def estimate_noise_floor(stft_magnitudes: np.ndarray, percentile: float) -> np.ndarray:
    """Per-bin magnitude at ``percentile`` across frames (linear interpolation)."""
    mags = np.asarray(stft_magnitudes, dtype=np.float64)
    if mags.ndim != 2 or mags.shape[0] < 1 or mags.shape[1] < 1:
        raise ValueError(f"need a non-empty frames x bins matrix, got shape {mags.shape}")
    return np.quantile(mags, percentile, axis=0, method="linear")


def spectral_gain(magnitude, floor, beta: float, gain_floor: float) -> np.ndarray:
    return kernels.spectral_gain(magnitude, floor, beta, gain_floor)


def separate(x: AudioClip, cfg: SeparatorConfig | None = None) -> SeparationResult:
    """Built-in spectral-gating separator."""
    cfg = cfg or SeparatorConfig()
    if len(x) < cfg.fft_size:
        raise InputTooShortError(f"clip has {len(x)} samples, shorter than one {cfg.fft_size}-sample frame")
    spec = stft(x.samples, cfg.fft_size, cfg.hop)
    mag = np.abs(spec)
    floor = estimate_noise_floor(mag, cfg.noise_percentile)
    gain = spectral_gain(mag, floor, cfg.oversubtraction, cfg.gain_floor)
    s = istft(gain * spec, cfg.fft_size, cfg.hop, len(x))
    n = x.samples - s
    return SeparationResult(AudioClip(s, x.sample_rate), AudioClip(n, x.sample_rate), BUILTIN_ID)


@dataclass
class ExternalSeparatorAdapter:
    """Bridge to a pretrained separator living outside this package.

    Either ``command`` (a template with ``{input}`` and ``{output}``) that
    writes a speech estimate, or ``speech_dir`` holding ``<utt_id>.wav``
    speech estimates produced ahead of time.
    """

    name: str
    command: str | None = None
    speech_dir: str | Path | None = None
    max_length_mismatch: float = 0.01
    timeout: float | None = None
    corrections: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if (self.command is None) == (self.speech_dir is None):
            raise ConfigError("adapter needs exactly one of command or speech_dir")
        if self.command is not None and ("{input}" not in self.command or "{output}" not in self.command):
            raise ConfigError("adapter command must contain {input} and {output}")

    def fetch_speech(self, x: AudioClip, utt_id: str | None) -> AudioClip:
        if self.speech_dir is not None:
            if not utt_id:
                raise AdapterError(f"[{self.name}] utt_id is required for directory lookups")
            path = Path(self.speech_dir) / f"{utt_id}.wav"
            if not path.exists():
                raise AdapterError(f"[{self.name}] missing speech estimate for {utt_id}: {path}")
            return load_audio(path, x.sample_rate)
        with tempfile.TemporaryDirectory(prefix="noisetrace-sep-") as tmp:
            src = Path(tmp) / "input.wav"
            dst = Path(tmp) / "speech.wav"
            save_audio(x, src, subtype="FLOAT")
            argv = [part.format(input=str(src), output=str(dst)) for part in shlex.split(self.command)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AdapterError(f"[{self.name}] failed to run {argv[0]!r} for {utt_id}: {exc}") from exc
            if proc.returncode != 0:
                raise AdapterError(f"[{self.name}] command exited {proc.returncode} for {utt_id}: "
                                   f"{proc.stderr.strip()[-400:]}")
            if not dst.exists():
                raise AdapterError(f"[{self.name}] command produced no output for {utt_id}")
            return load_audio(dst, x.sample_rate)


def external_separate(x: AudioClip, adapter: ExternalSeparatorAdapter, utt_id: str | None = None) -> SeparationResult:
    s = adapter.fetch_speech(x, utt_id)
    if s.sample_rate != x.sample_rate:
        s = AudioClip(resample(s.samples, s.sample_rate, x.sample_rate), x.sample_rate)
    diff = len(s) - len(x)
    if abs(diff) > adapter.max_length_mismatch * len(x):
        raise AdapterError(f"[{adapter.name}] speech estimate for {utt_id or '<clip>'} has {len(s)} samples, "
                           f"input has {len(x)} (beyond {adapter.max_length_mismatch:.0%})")
    speech = s.samples
    if diff:
        log.info("%s: length-matching %s by %+d samples", adapter.name, utt_id, -diff)
        adapter.corrections.append((utt_id, -diff))
        speech = speech[:len(x)] if diff > 0 else np.pad(speech, (0, -diff))
    n = x.samples - speech
    return SeparationResult(AudioClip(speech, x.sample_rate), AudioClip(n, x.sample_rate), adapter.name)


class Separator:
    """Callable wrapper choosing between the built-in and an external back-end."""

    def __init__(self, config: SeparatorConfig | None = None, adapter: ExternalSeparatorAdapter | None = None):
        self.config = config or SeparatorConfig()
        self.adapter = adapter

    @property
    def separator_id(self) -> str:
        return self.adapter.name if self.adapter else BUILTIN_ID

    def __call__(self, x: AudioClip, utt_id: str | None = None) -> SeparationResult:
        if self.adapter is not None:
            return external_separate(x, self.adapter, utt_id)
        return separate(x, self.config)


def _main(argv=None):
    # Reference adapter command: python -m noisetrace.separation IN OUT
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python -m noisetrace.separation INPUT.wav SPEECH_OUT.wav", file=sys.stderr)
        return 2
    clip = load_audio(argv[0], CANONICAL_RATE)
    save_audio(separate(clip).speech, argv[1], subtype="FLOAT")
    return 0


if __name__ == "__main__":
    sys.exit(_main())
