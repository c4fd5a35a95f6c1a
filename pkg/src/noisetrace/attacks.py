"""Anti-forensic post-processing applied to x before separation."""
from __future__ import annotations

import logging
import os
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .audio import CANONICAL_RATE, AudioClip, load_audio, resample, save_audio
from .datasets import Manifest
from .errors import AttackError, ConfigError, EncoderUnavailableError

log = logging.getLogger(__name__)

MP3_PRESETS_KBPS = (192, 128, 64)
# MPEG-2 LSF layer III bitrates (16/22.05/24 kHz)
_LSF_BITRATES = {8, 16, 24, 32, 40, 48, 56, 64, 80, 96, 112, 128, 144, 160}
_MPEG1_BITRATES = {32, 40, 48, 56, 64, 80, 96, 112, 128, 160, 192, 224, 256, 320}

ENCODE_TEMPLATE = "{exe} -hide_banner -loglevel error -y -i {input} -ac 1 -codec:a libmp3lame -b:a {bitrate}k {output}"
DECODE_TEMPLATE = "{exe} -hide_banner -loglevel error -y -i {input} -ac 1 -f wav -acodec pcm_f32le {output}"


class AttackKind(str, Enum):
    NONE = "none"
    MP3 = "mp3"
    LOWPASS_PROXY = "lowpass"


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = AttackKind.NONE
    bitrate_kbps: int = 64
    cutoff_hz: float = 6000.0
    quantization_bits: int = 10

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.kind is AttackKind.MP3 and self.bitrate_kbps <= 0:
            raise ConfigError("bitrate_kbps must be positive")
        if self.kind is AttackKind.LOWPASS_PROXY:
            if not 0 < self.cutoff_hz < CANONICAL_RATE / 2:
                raise ConfigError(f"cutoff_hz must lie in (0, {CANONICAL_RATE // 2})")
            if not 2 <= self.quantization_bits <= 32:
                raise ConfigError("quantization_bits must lie in [2, 32]")

    @property
    def condition(self) -> str:
        if self.kind is AttackKind.MP3:
            return f"mp3-{self.bitrate_kbps}"
        if self.kind is AttackKind.LOWPASS_PROXY:
            return f"lp-{int(round(self.cutoff_hz))}"
        return "clean"

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        """``clean`` / ``none``, ``mp3-64``, ``lp-6000`` or ``lp-6000-q10``."""
        t = text.strip().lower()
        if t in ("clean", "none"):
            return cls()
        head, _, rest = t.partition("-")
        try:
            if head == "mp3":
                return cls(AttackKind.MP3, bitrate_kbps=int(rest))
            if head in ("lp", "lowpass"):
                cutoff, _, q = rest.partition("-q")
                return cls(AttackKind.LOWPASS_PROXY, cutoff_hz=float(cutoff), quantization_bits=int(q or 10))
        except ValueError:
            pass
        raise ConfigError(f"cannot parse attack {text!r}")


def find_encoder() -> str | None:
    """Path of an ffmpeg binary with libmp3lame, or None."""
    exe = os.environ.get("NOISETRACE_FFMPEG") or shutil.which("ffmpeg")
    if exe:
        return exe
    try:
        import imageio_ffmpeg

        return imageio_ffmpeg.get_ffmpeg_exe()
    except Exception:
        return None


def lowpass_proxy(samples: np.ndarray, fs: int, cutoff_hz: float, bits: int) -> np.ndarray:
    """Zero-phase brick-wall low-pass, then mid-tread quantisation to ``bits``."""
    spec = np.fft.rfft(samples)
    spec[np.fft.rfftfreq(samples.size, 1.0 / fs) > cutoff_hz] = 0.0
    y = np.fft.irfft(spec, n=samples.size)
    step = 2.0 / 2**bits
    top = 1.0 - step
    return np.clip(np.round(y / step) * step, -1.0, top)


def _run(argv: list[str], what: str):
    log.info("%s: %s", what, shlex.join(argv))
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except OSError as exc:
        raise AttackError(f"{what} failed to start: {exc}") from exc
    if proc.returncode != 0:
        raise AttackError(f"{what} exited {proc.returncode}: {proc.stderr.strip()[-400:]}")


def mp3_roundtrip(clip: AudioClip, bitrate_kbps: int, encoder: str | None = None,
                  encode_template: str = ENCODE_TEMPLATE, decode_template: str = DECODE_TEMPLATE) -> AudioClip:
    """CBR mono encode/decode; output trimmed or zero-padded to the input length.

    Rates outside MPEG-2 LSF (e.g. 192 kbps at 16 kHz) go through a 32 kHz
    MPEG-1 path and are resampled back.
    """
    exe = encoder or find_encoder()
    if exe is None:
        raise EncoderUnavailableError("no MP3 encoder (ffmpeg with libmp3lame) found; "
                                      "use the lowpass proxy attack (lp-<cutoff>) instead")
    rate = clip.sample_rate
    x = clip.samples
    path_taken = "native"
    if rate == 16000 and bitrate_kbps not in _LSF_BITRATES:
        if bitrate_kbps not in _MPEG1_BITRATES:
            raise AttackError(f"{bitrate_kbps} kbps is not a valid layer III bitrate")
        x = resample(x, rate, 32000)
        rate = 32000
        path_taken = "resampled-32k"
    with tempfile.TemporaryDirectory(prefix="noisetrace-mp3-") as tmp:
        src, mp3, dst = (Path(tmp) / n for n in ("in.wav", "enc.mp3", "out.wav"))
        save_audio(AudioClip(x, rate), src, subtype="FLOAT")
        fmt = dict(exe=exe, bitrate=bitrate_kbps)
        _run([p.format(input=src, output=mp3, **fmt) for p in shlex.split(encode_template)], "mp3 encode")
        _run([p.format(input=mp3, output=dst, **fmt) for p in shlex.split(decode_template)], "mp3 decode")
        decoded = load_audio(dst, rate).samples
    if rate != clip.sample_rate:
        decoded = resample(decoded, rate, clip.sample_rate)
    n = len(clip)
    if decoded.size != n:
        log.info("mp3-%d (%s): length %d -> %d", bitrate_kbps, path_taken, decoded.size, n)
        decoded = decoded[:n] if decoded.size > n else np.pad(decoded, (0, n - decoded.size))
    log.info("mp3-%d path: %s", bitrate_kbps, path_taken)
    return AudioClip(np.clip(decoded, -1.0, 1.0), clip.sample_rate)


def apply_attack(clip: AudioClip, spec: AttackSpec, encoder: str | None = None) -> AudioClip:
    if spec.kind is AttackKind.NONE:
        return clip
    if spec.kind is AttackKind.LOWPASS_PROXY:
        return AudioClip(lowpass_proxy(clip.samples, clip.sample_rate, spec.cutoff_hz, spec.quantization_bits),
                         clip.sample_rate)
    return mp3_roundtrip(clip, spec.bitrate_kbps, encoder)


def attack_manifest(manifest: Manifest, spec: AttackSpec, out_dir, encoder: str | None = None) -> Manifest:
    """Attack every track into ``out_dir`` (mirroring the source tree) and tag the condition."""
    out_dir = Path(out_dir)
    paths = [Path(r.path).resolve() for r in manifest]
    root = Path(os.path.commonpath([str(p.parent) for p in paths])) if paths else out_dir
    records, failures = [], []
    for rec, src in zip(manifest, paths):
        rel = src.relative_to(root)
        try:
            if spec.kind is AttackKind.NONE:
                dst = out_dir / rel
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, dst)
            else:
                dst = save_audio(apply_attack(load_audio(src), spec, encoder), (out_dir / rel).with_suffix(".wav"))
        except Exception as exc:  # collect, report all at the end
            failures.append(f"{rec.utt_id}: {exc}")
            continue
        records.append(replace(rec, path=str(dst), condition=spec.condition))
    if failures:
        raise AttackError(f"{len(failures)} of {len(manifest)} tracks failed:\n  " + "\n  ".join(failures[:20]))
    return Manifest(records)
