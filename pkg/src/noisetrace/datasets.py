"""Manifests, protocol parsers and the synthetic desk-scale corpus."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .audio import CANONICAL_RATE, AudioClip, load_audio, make_rng, save_audio
from .errors import DataError, ParseError

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "eval")


class Label(str, Enum):
    REAL = "real"
    FAKE = "fake"

    @property
    def index(self) -> int:
        return 1 if self is Label.FAKE else 0

    @classmethod
    def parse(cls, text) -> "Label":
        if isinstance(text, Label):
            return text
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise DataError(f"unknown label {text!r} (expected real or fake)") from None


@dataclass(frozen=True)
class TrackRecord:
    utt_id: str
    path: str
    label: Label
    dataset: str = ""
    split: str = "eval"
    condition: str = "clean"


@dataclass
class Manifest:
    records: list[TrackRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = Counter(r.utt_id for r in self.records)
        dup = sorted(k for k, v in seen.items() if v > 1)
        if dup:
            raise DataError(f"duplicate utt_id(s) in manifest: {', '.join(dup[:10])}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def counts(self) -> dict[tuple[str, Label], int]:
        return dict(Counter((r.split, r.label) for r in self.records))

    def class_counts(self) -> dict[Label, int]:
        c = Counter(r.label for r in self.records)
        return {lab: c.get(lab, 0) for lab in Label}

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name])

    def labels(self) -> np.ndarray:
        return np.array([r.label.index for r in self.records], dtype=np.int64)

    def with_condition(self, condition: str) -> "Manifest":
        return Manifest([replace(r, condition=condition) for r in self.records])


MANIFEST_FIELDS = ("utt_id", "path", "label", "split", "dataset", "condition")


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in manifest:
            w.writerow([r.utt_id, r.path, r.label.value, r.split, r.dataset, r.condition])
    return path


def parse_generic_manifest(csv_file, dataset: str | None = None) -> Manifest:
    """Read a ``utt_id,path,label,split`` CSV (extra dataset/condition columns allowed).

    Relative paths resolve against the CSV's directory.
    """
    csv_file = Path(csv_file)
    base = csv_file.parent
    with open(csv_file, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = {"utt_id", "path", "label", "split"} - set(header)
        if missing:
            raise ParseError(f"{csv_file}: header lacks {sorted(missing)}", 1)
        records = []
        for line_no, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            if not row["utt_id"]:
                raise ParseError("empty utt_id", line_no)
            try:
                label = Label.parse(row["label"])
            except DataError as exc:
                raise ParseError(str(exc), line_no) from None
            p = Path(row["path"])
            if not p.is_absolute():
                p = base / p
            records.append(TrackRecord(row["utt_id"], str(p), label,
                                       dataset or row.get("dataset") or csv_file.stem,
                                       row["split"] or "eval", row.get("condition") or "clean"))
    return Manifest(records)


_ASV_KEYS = {"bonafide": Label.REAL, "spoof": Label.FAKE}


def parse_asvspoof_protocol(protocol_file, audio_dir, split: str, extension: str = ".flac",
                            dataset: str = "asvspoof2019-la") -> Manifest:
    """Parse an ASVspoof LA CM protocol.

    Lines look like ``LA_0079 LA_T_1138215 - - bonafide``: speaker, utterance,
    two system/attack fields, key. ASVspoof 2021 adds trailing columns after
    the key position; only the first five fields are read.
    """
    audio_dir = Path(audio_dir)
    records = []
    unresolved = []
    with open(protocol_file) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) < 5:
                raise ParseError(f"expected >= 5 whitespace-separated fields, got {len(fields)}: {line.strip()!r}",
                                 line_no)
            key = fields[4].lower()
            if key not in _ASV_KEYS:
                raise ParseError(f"unknown key {fields[4]!r} (expected bonafide or spoof)", line_no)
            utt = fields[1]
            path = audio_dir / f"{utt}{extension}"
            if not path.exists():
                unresolved.append(utt)
            records.append(TrackRecord(utt, str(path), _ASV_KEYS[key], dataset, split))
    if unresolved:
        log.warning("%d protocol entries have no audio file under %s (first: %s)",
                    len(unresolved), audio_dir, unresolved[0])
    manifest = Manifest(records)
    manifest.unresolved = unresolved
    return manifest


def validate_manifest(manifest: Manifest) -> list[str]:
    """Return a list of problems (missing or undecodable files); empty means valid."""
    problems = []
    for r in manifest:
        try:
            load_audio(r.path)
        except Exception as exc:  # report every failure, keep going
            problems.append(f"{r.utt_id}: {type(exc).__name__}: {exc}")
    return problems


# ---------------------------------------------------------------------------
# synthetic corpus

class ArtifactKind(str, Enum):
    BAND_ATTENUATION = "band_attenuation"
    PERIODIC_TONE = "periodic_tone"


@dataclass(frozen=True)
class SynthCorpusConfig:
    n_tracks: int = 100
    duration_s: float = 3.0
    artifact_band: tuple[float, float] = (6000.0, 8000.0)
    artifact_kind: ArtifactKind = ArtifactKind.BAND_ATTENUATION
    snr_db: float = 15.0
    seed: int = 0
    sample_rate: int = CANONICAL_RATE
    attenuation_db: float = -20.0
    tone_level_db: float = -25.0
    tone_spacing_hz: float = 250.0

    def __post_init__(self):
        lo, hi = self.artifact_band
        if not 0 < lo < hi <= self.sample_rate / 2:
            raise DataError(f"artifact_band {self.artifact_band} must lie within (0, {self.sample_rate / 2}]")
        if self.n_tracks < 1:
            raise DataError("n_tracks must be >= 1")
        object.__setattr__(self, "artifact_kind", ArtifactKind(self.artifact_kind))
        object.__setattr__(self, "artifact_band", (float(lo), float(hi)))


def _syllable_envelope(n: int, fs: int, rng) -> np.ndarray:
    env = np.zeros(n)
    t = int(rng.uniform(0.05, 0.3) * fs)
    while t < n:
        dur = int(rng.uniform(0.10, 0.32) * fs)
        amp = rng.uniform(0.5, 1.0)
        seg = np.sin(np.pi * np.arange(dur) / dur) ** 2 * amp
        end = min(n, t + dur)
        env[t:end] = seg[:end - t]
        t = end + int(rng.uniform(0.06, 0.28) * fs)
    return env


def _resonator(freq: float, bw: float, fs: int):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


# fricative burst level relative to the voiced part, dB
FRICATIVE_LEVEL_DB = (-20.0, 0.0)


def speech_surrogate(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Speech stand-in: harmonic source through formants, syllable-gated, plus fricative bursts."""
    t = np.arange(n) / fs
    f0_base = rng.uniform(90.0, 240.0)
    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(fs) * rng.uniform(5.0, 25.0)
    f0 = f0_base * (1 + rng.uniform(0.02, 0.12) * np.sin(2 * np.pi * rng.uniform(0.5, 4) * t
                                                         + rng.uniform(0, 2 * np.pi))) + drift
    f0 = np.clip(f0, 80.0, 300.0)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    source = np.zeros(n)
    nyq = fs / 2
    tilt = rng.uniform(0.9, 1.4)
    for k in range(1, int(nyq / 80.0) + 1):
        active = k * f0 < nyq - 100.0
        if not active.any():
            break
        source += np.where(active, np.sin(k * phase), 0.0) / k**tilt
    n_formants = int(rng.integers(2, 4))
    centres = [rng.uniform(300, 900), rng.uniform(900, 2300), rng.uniform(2300, 3500)][:n_formants]
    voiced = np.zeros(n)
    for fc in centres:
        b, a = _resonator(fc, rng.uniform(60, 200), fs)
        voiced += lfilter(b, a, source) * rng.uniform(0.5, 1.0)
    env = _syllable_envelope(n, fs, rng)
    voiced *= env
    unvoiced = _fricative_bursts(n, fs, rng)
    v_rms = np.sqrt(np.mean(voiced**2))
    u_rms = np.sqrt(np.mean(unvoiced**2))
    if u_rms > 0:
        voiced += unvoiced * (v_rms / u_rms) * 10 ** (rng.uniform(*FRICATIVE_LEVEL_DB) / 20)
    return voiced


def _fricative_bursts(n: int, fs: int, rng) -> np.ndarray:
    """Short high-band noise bursts (unvoiced consonants)."""
    sos = butter(4, [2500.0, min(7900.0, fs / 2 - 50)], btype="bandpass", fs=fs, output="sos")
    hiss = sosfilt(sos, rng.standard_normal(n))
    env = np.zeros(n)
    for _ in range(max(1, int(rng.poisson(2.0 * n / fs)))):
        dur = int(rng.uniform(0.04, 0.15) * fs)
        start = int(rng.integers(0, max(1, n - dur)))
        env[start:start + dur] += np.sin(np.pi * np.arange(dur) / dur) ** 2 * rng.uniform(0.3, 1.0)
    return hiss * env


def pink_noise(n: int, rng: np.random.Generator, fs: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / fs)
    shape = np.zeros_like(f)
    shape[1:] = 1.0 / np.sqrt(np.maximum(f[1:], 20.0))
    y = np.fft.irfft(spec * shape, n=n)
    return y / np.sqrt(np.mean(y**2))


def _plant_artifact(noise: np.ndarray, cfg: SynthCorpusConfig, rng) -> np.ndarray:
    fs = cfg.sample_rate
    lo, hi = cfg.artifact_band
    if cfg.artifact_kind is ArtifactKind.BAND_ATTENUATION:
        spec = np.fft.rfft(noise)
        f = np.fft.rfftfreq(noise.size, 1 / fs)
        spec[(f >= lo) & (f <= hi)] *= 10 ** (cfg.attenuation_db / 20)
        return np.fft.irfft(spec, n=noise.size)
    t = np.arange(noise.size) / fs
    tone_amp = np.sqrt(2 * np.mean(noise**2)) * 10 ** (cfg.tone_level_db / 20)
    freqs = np.arange(lo, min(hi, fs / 2 - 1), cfg.tone_spacing_hz)
    comb = sum(np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi)) for fk in freqs)
    return noise + tone_amp * comb


def synth_track(cfg: SynthCorpusConfig, index: int, label: Label) -> np.ndarray:
    """One corpus track. Speech depends only on (seed, index), never on the label."""
    fs = cfg.sample_rate
    n = int(round(cfg.duration_s * fs))
    speech = speech_surrogate(n, fs, make_rng(cfg.seed, "speech", index))
    level = make_rng(cfg.seed, "level", index).uniform(0.05, 0.15)
    speech *= level / max(np.sqrt(np.mean(speech**2)), 1e-12)
    noise_rng = make_rng(cfg.seed, "noise", index)
    noise = pink_noise(n, noise_rng, fs)
    noise *= np.sqrt(np.mean(speech**2) / 10 ** (cfg.snr_db / 10))
    if label is Label.FAKE:
        noise = _plant_artifact(noise, cfg, noise_rng)
    x = speech + noise
    peak = np.max(np.abs(x))
    if peak > 0.95:
        x *= 0.95 / peak
    return x


def generate_synth_corpus(cfg: SynthCorpusConfig, out_dir) -> Manifest:
    """Write ``<out>/<split>/<utt_id>.wav`` for both classes and ``<out>/manifest.csv``.

    Tracks ``2k`` are Real and ``2k+1`` Fake; each class is split 80/10/10
    into train/dev/eval in index order.
    """
    out_dir = Path(out_dir)
    n = cfg.n_tracks
    n_train = int(round(0.8 * n))
    n_dev = int(round(0.1 * n))
    records = []
    for k in range(n):
        split = "train" if k < n_train else ("dev" if k < n_train + n_dev else "eval")
        for label, index in ((Label.REAL, 2 * k), (Label.FAKE, 2 * k + 1)):
            utt = f"synth_{index:05d}"
            x = synth_track(cfg, index, label)
            path = save_audio(AudioClip(x, cfg.sample_rate), out_dir / split / f"{utt}.wav")
            records.append(TrackRecord(utt, str(path.resolve()), label, "synth", split))
    manifest = Manifest(records)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def band_energy(samples: np.ndarray, fs: int, band: tuple[float, float]) -> float:
    """Mean power of ``samples`` inside ``band`` (Hz), via the periodogram."""
    spec = np.fft.rfft(np.asarray(samples, dtype=np.float64))
    f = np.fft.rfftfreq(len(samples), 1 / fs)
    sel = (f >= band[0]) & (f <= band[1])
    return float(np.sum(np.abs(spec[sel]) ** 2) / len(samples) ** 2)
