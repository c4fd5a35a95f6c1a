"""Raw-waveform detector: learnable sinc band-pass front-end, residual blocks
with filter-wise feature-map scaling, GRU aggregation and a two-class head.

One architecture serves all three detectors; they differ only in
``component_kind`` (which signal they are trained and scored on).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import CANONICAL_RATE
from .errors import ConfigError, IncompatibleVersionError, InvalidBandError, ModelFormatError


class ComponentKind(str, Enum):
    FULL = "full"
    SPEECH = "speech"
    NOISE = "noise"

    @classmethod
    def parse(cls, value) -> "ComponentKind":
        if isinstance(value, ComponentKind):
            return value
        v = str(value).strip().lower()
        return {"x": cls.FULL, "s": cls.SPEECH, "n": cls.NOISE}.get(v) or cls(v)

    @property
    def short(self) -> str:
        return {"full": "x", "speech": "s", "noise": "n"}[self.value]


@dataclass(frozen=True)
class SincLayerConfig:
    num_filters: int = 20
    kernel_len: int = 129
    min_low_hz: float = 0.0
    min_band_hz: float = 50.0
    learnable: bool = True
    sample_rate: int = CANONICAL_RATE

    def validate(self):
        if self.kernel_len % 2 != 1 or self.kernel_len < 3:
            raise ConfigError(f"kernel_len must be odd and >= 3, got {self.kernel_len}")
        if self.num_filters < 1:
            raise ConfigError("num_filters must be >= 1")
        if not 0 <= self.min_low_hz < self.sample_rate / 2 - self.min_band_hz:
            raise ConfigError("min_low_hz + min_band_hz must stay below Nyquist")
        if self.min_band_hz <= 0:
            raise ConfigError("min_band_hz must be positive")


@dataclass(frozen=True)
class DetectorConfig:
    sinc: SincLayerConfig = field(default_factory=SincLayerConfig)
    res_blocks: tuple[tuple[int, int], ...] = ((20, 2), (128, 4))
    gru_hidden: int = 1024
    gru_layers: int = 1
    fc_hidden: int = 1024
    num_classes: int = 2
    input_len: int = 32000

    def validate(self):
        self.sinc.validate()
        if self.num_classes != 2:
            raise ConfigError("num_classes must be 2")
        if self.input_len <= self.sinc.kernel_len:
            raise ConfigError("input_len must exceed the sinc kernel length")
        if not self.res_blocks or any(c < 1 or n < 1 for c, n in self.res_blocks):
            raise ConfigError(f"bad res_blocks {self.res_blocks}")
        if min(self.gru_hidden, self.gru_layers, self.fc_hidden) < 1:
            raise ConfigError("gru_hidden, gru_layers and fc_hidden must be >= 1")
        if self.frames_after_pooling() < 1:
            raise ConfigError(f"input_len {self.input_len} is too short for {self.n_blocks} pooling stages")

    @property
    def n_blocks(self) -> int:
        return sum(n for _, n in self.res_blocks)

    def frames_after_pooling(self) -> int:
        t = (self.input_len - self.sinc.kernel_len + 1) // 3
        for _ in range(self.n_blocks):
            t //= 3
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["res_blocks"] = [list(b) for b in self.res_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown detector config keys: {sorted(unknown)}")
        sinc = d.pop("sinc", {}) or {}
        if not isinstance(sinc, SincLayerConfig):
            bad = set(sinc) - set(SincLayerConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown sinc config keys: {sorted(bad)}")
            sinc = SincLayerConfig(**sinc)
        if "res_blocks" in d:
            d["res_blocks"] = tuple((int(c), int(n)) for c, n in d["res_blocks"])
        cfg = cls(sinc=sinc, **d)
        cfg.validate()
        return cfg


def tiny_config(input_len: int = 512) -> DetectorConfig:
    """Smallest useful network, for gradient checks and smoke tests."""
    return DetectorConfig(sinc=SincLayerConfig(num_filters=2, kernel_len=31), res_blocks=((2, 1),),
                          gru_hidden=4, fc_hidden=4, input_len=input_len)


def reduced_config(input_len: int = 16000) -> DetectorConfig:
    """Desk-scale network used by the synthetic experiment."""
    return DetectorConfig(sinc=SincLayerConfig(num_filters=16), res_blocks=((16, 1), (32, 1)),
                          gru_hidden=64, fc_hidden=64, input_len=input_len)


# ---------------------------------------------------------------------------
# sinc band-pass filters

def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def sinc_kernel(f1: float, f2: float, kernel_len: int, fs: float = CANONICAL_RATE) -> np.ndarray:
    """Hamming-windowed band-pass ``[f1, f2]`` as a difference of two low-passes.

    ``g[m] = 2 f2/fs sinc(2 pi f2 m / fs) - 2 f1/fs sinc(2 pi f1 m / fs)`` with
    ``sinc(t) = sin(t)/t`` and ``m`` centred on zero.
    """
    if not 0 <= f1 < f2 <= fs / 2:
        raise InvalidBandError(f"need 0 <= f1 < f2 <= fs/2, got f1={f1}, f2={f2}, fs={fs}")
    if kernel_len % 2 != 1:
        raise InvalidBandError("kernel_len must be odd")
    m = np.arange(kernel_len) - (kernel_len - 1) / 2
    lp = lambda fc: (2 * fc / fs) * np.sinc(2 * fc * m / fs)  # np.sinc(t) = sin(pi t)/(pi t)
    return (lp(f2) - lp(f1)) * np.hamming(kernel_len)


class SincConv(nn.Module):
    """Band-pass filter bank parameterised by (low cutoff, bandwidth) per filter.

    Cutoffs are read through ``f1 = min_low + |low|`` and
    ``f2 = f1 + min_band + |band|``, both clamped inside ``[min_low, fs/2]``,
    so every kernel is a valid band-pass after any parameter update.
    """

    def __init__(self, cfg: SincLayerConfig):
        super().__init__()
        self.cfg = cfg
        self.low_hz_ = nn.Parameter(torch.zeros(cfg.num_filters, 1), requires_grad=cfg.learnable)
        self.band_hz_ = nn.Parameter(torch.zeros(cfg.num_filters, 1), requires_grad=cfg.learnable)
        half = (cfg.kernel_len - 1) // 2
        n = torch.arange(1, half + 1, dtype=torch.float64) / cfg.sample_rate
        self.register_buffer("_n_right", n.view(1, -1), persistent=False)
        win = torch.from_numpy(np.hamming(cfg.kernel_len))
        self.register_buffer("_window", win, persistent=False)

    def reset_cutoffs(self):
        c = self.cfg
        nyq = c.sample_rate / 2
        hz = mel_to_hz(np.linspace(hz_to_mel(c.min_low_hz), hz_to_mel(nyq), c.num_filters + 1))
        low = hz[:-1] - c.min_low_hz
        band = np.diff(hz) - c.min_band_hz
        with torch.no_grad():
            self.low_hz_.copy_(torch.from_numpy(low).view(-1, 1))
            self.band_hz_.copy_(torch.from_numpy(band).view(-1, 1))

    def cutoffs(self) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.cfg
        nyq = c.sample_rate / 2
        f1 = torch.clamp(c.min_low_hz + torch.abs(self.low_hz_), max=nyq - c.min_band_hz)
        f2 = torch.clamp(f1 + c.min_band_hz + torch.abs(self.band_hz_), min=c.min_low_hz, max=nyq)
        return f1, f2

    def kernels(self) -> torch.Tensor:
        f1, f2 = self.cutoffs()
        dtype = self.low_hz_.dtype
        n = self._n_right.to(dtype)
        t1 = 2 * math.pi * f1 * n
        t2 = 2 * math.pi * f2 * n
        # (sin(2 pi f2 m) - sin(2 pi f1 m)) / (pi m) for m > 0, in seconds-scaled units
        right = (torch.sin(t2) - torch.sin(t1)) / (math.pi * n * self.cfg.sample_rate)
        centre = 2 * (f2 - f1) / self.cfg.sample_rate
        full = torch.cat([torch.flip(right, dims=[1]), centre, right], dim=1)
        return full * self._window.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv1d(x, self.kernels().unsqueeze(1))


class FMS(nn.Module):
    """Filter-wise feature-map scaling: ``x * s + s`` with ``s = sigmoid(W mean_t(x))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, channels)

    def forward(self, x):
        s = torch.sigmoid(self.fc(x.mean(dim=-1))).unsqueeze(-1)
        return x * s + s


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, first: bool = False):
        super().__init__()
        self.first = first
        if not first:
            self.bn1 = nn.BatchNorm1d(in_ch)
        self.conv1 = nn.Conv1d(in_ch, out_ch, kernel_size=3, padding=1)
        self.bn2 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, kernel_size=3, padding=1)
        self.downsample = nn.Conv1d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch else None
        self.fms = FMS(out_ch)

    def forward(self, x):
        out = x if self.first else F.leaky_relu(self.bn1(x), 0.3)
        out = self.conv1(out)
        out = F.leaky_relu(self.bn2(out), 0.3)
        out = self.conv2(out)
        identity = self.downsample(x) if self.downsample is not None else x
        out = F.max_pool1d(out + identity, 3)
        return self.fms(out)


class RawNet(nn.Module):
    """The detector model. ``component_kind`` is fixed at construction."""

    def __init__(self, config: DetectorConfig, component_kind=ComponentKind.FULL):
        super().__init__()
        config.validate()
        self.config = config
        self._component_kind = ComponentKind.parse(component_kind)
        self.sinc = SincConv(config.sinc)
        self.first_bn = nn.BatchNorm1d(config.sinc.num_filters)
        blocks = []
        in_ch = config.sinc.num_filters
        for channels, count in config.res_blocks:
            for _ in range(count):
                blocks.append(ResidualBlock(in_ch, channels, first=not blocks))
                in_ch = channels
        self.blocks = nn.ModuleList(blocks)
        self.bn_before_gru = nn.BatchNorm1d(in_ch)
        self.gru = nn.GRU(in_ch, config.gru_hidden, num_layers=config.gru_layers, batch_first=True)
        self.fc1 = nn.Linear(config.gru_hidden, config.fc_hidden)
        self.fc2 = nn.Linear(config.fc_hidden, config.num_classes)

    @property
    def component_kind(self) -> ComponentKind:
        return self._component_kind

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.sinc(x.unsqueeze(1))
        x = F.max_pool1d(torch.abs(x), 3)
        x = F.selu(self.first_bn(x))
        for block in self.blocks:
            x = block(x)
        x = F.selu(self.bn_before_gru(x))
        out, _ = self.gru(x.transpose(1, 2))
        return self.fc2(self.fc1(out[:, -1, :]))

    @torch.no_grad()
    def warm_start_norm_stats(self, x: torch.Tensor):
        """Set every batch-norm running statistic from one batch.

        The stock running variance starts at 1, far from the feature scale of
        quiet inputs such as a separated noise component; with few steps per
        epoch that stale value would dominate inference for many epochs.
        """
        norms = [m for m in self.modules() if isinstance(m, nn.BatchNorm1d)]
        saved = [m.momentum for m in norms]
        was_training = self.training
        self.train()
        try:
            for m in norms:
                m.momentum = 1.0
            self(x)
        finally:
            for m, mom in zip(norms, saved):
                m.momentum = mom
            self.train(was_training)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups = {"sinc": [], "conv": [], "recurrent": [], "head": []}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith("sinc."):
                groups["sinc"].append(name)
            elif name.startswith("gru."):
                groups["recurrent"].append(name)
            elif name.startswith(("fc1.", "fc2.")):
                groups["head"].append(name)
            else:
                groups["conv"].append(name)
        return groups


DetectorModel = RawNet


def init_model(config: DetectorConfig, rng: np.random.Generator | int = 0,
               component_kind=ComponentKind.FULL, dtype=torch.float32) -> RawNet:
    """Build a detector with mel-spaced sinc cutoffs and fan-in-scaled uniform weights."""
    if not isinstance(config, DetectorConfig):
        raise ConfigError("config must be a DetectorConfig")
    config.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    model = RawNet(config, component_kind).to(dtype)
    model.sinc.reset_cutoffs()
    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, (nn.Conv1d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, mod.weight.shape)))
                if mod.bias is not None:
                    mod.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, mod.bias.shape)))
            elif isinstance(mod, nn.BatchNorm1d):
                mod.reset_parameters()
            elif isinstance(mod, nn.GRU):
                bound = 1.0 / math.sqrt(mod.hidden_size)
                for p in mod.parameters():
                    p.copy_(torch.from_numpy(rng.uniform(-bound, bound, p.shape)))
    return model


def _as_batch(model: RawNet, batch) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    x = batch if isinstance(batch, torch.Tensor) else torch.from_numpy(np.asarray(batch, dtype=np.float64))
    x = x.to(dtype)
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if x.ndim != 2 or x.shape[1] != model.config.input_len:
        raise ValueError(f"expected batch of shape (B, {model.config.input_len}), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("batch contains non-finite samples")
    return x


def forward(model: RawNet, batch) -> torch.Tensor:
    """Logits ``(B, 2)``; uses the model's current train/eval mode."""
    return model(_as_batch(model, batch))


def predict_proba(model: RawNet, batch, chunk: int = 256) -> np.ndarray:
    """Softmax probabilities in float64, inference mode. Column 1 is P(Fake)."""
    was_training = model.training
    model.eval()
    try:
        x = _as_batch(model, batch)
        with torch.no_grad():
            logits = torch.cat([model(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)])
    finally:
        model.train(was_training)
    return softmax(logits.double().numpy())


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# model files

MAGIC = b"NTRCDET\x00"
FORMAT_VERSION = 1


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Binary container: magic, u32 version, u64 header length, JSON header, raw arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": index}, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no model file at {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path} is not a detector file (bad magic bytes)")
    version, head_len = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(f"{path} has format version {version}; this build reads {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from exc
    base = start + head_len
    arrays = {}
    for entry in header.pop("arrays", []):
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise ModelFormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def model_arrays(model: RawNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_model(model: RawNet, path, extra_header: dict | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None) -> Path:
    header = {"kind": "detector", "config": model.config.to_dict(),
              "component_kind": model.component_kind.value, **(extra_header or {})}
    arrays = {f"model/{k}": v for k, v in model_arrays(model).items()}
    arrays.update(extra_arrays or {})
    return write_container(path, header, arrays)


def model_from_container(header: dict, arrays: dict[str, np.ndarray]) -> RawNet:
    try:
        config = DetectorConfig.from_dict(header["config"])
        kind = ComponentKind.parse(header["component_kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad detector header: {exc}") from exc
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    dtype = state["sinc.low_hz_"].dtype if "sinc.low_hz_" in state else torch.float32
    model = RawNet(config, kind).to(dtype)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ModelFormatError(f"parameter set does not match config: {exc}") from exc
    model.eval()
    return model


def load_model(path) -> RawNet:
    header, arrays = read_container(path)
    return model_from_container(header, arrays)
