"""Training recipe: class-balanced batches, label-smoothed cross-entropy,
Adam at a fixed learning rate, early stopping on validation loss, and
resumable checkpoints."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .audio import AudioClip, CropMode, make_rng, segment_clip
from .components import ComponentStore
from .detector import (ComponentKind, RawNet, model_from_container, read_container,
                       save_model)
from .errors import ConfigError, DataError, DivergenceError, ModelFormatError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    early_stop_patience: int = 15
    batch_size: int = 128
    learning_rate: float = 1e-4
    label_smoothing: float = 0.2
    seed: int = 0
    component_kind: ComponentKind = ComponentKind.FULL
    min_delta: float = 1e-6
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch: int = 64

    def __post_init__(self):
        object.__setattr__(self, "component_kind", ComponentKind.parse(self.component_kind))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if not 1 <= self.early_stop_patience <= self.epochs:
            raise ConfigError("need 1 <= early_stop_patience <= epochs")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["component_kind"] = self.component_kind.value
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    history: list[tuple[float, float]] = field(default_factory=list)
    stopped_early: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [list(h) for h in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        d = dict(d)
        d["history"] = [tuple(h) for h in d.get("history", [])]
        return cls(**d)


def label_smoothed_ce(logits, labels, eps: float):
    """Mean of ``-sum_c q_c log p_c`` with ``q = (1 - eps) onehot + eps / 2``.

    Returns a tensor for tensor input (differentiable), a float otherwise.
    """
    as_float = not isinstance(logits, torch.Tensor)
    z = logits if not as_float else torch.as_tensor(np.asarray(logits, dtype=np.float64))
    y = labels if isinstance(labels, torch.Tensor) else torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or z.shape[1] != 2 or y.shape != (z.shape[0],):
        raise ValueError(f"need (B, 2) logits and (B,) labels, got {tuple(z.shape)} and {tuple(y.shape)}")
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if not torch.isfinite(z).all():
        raise ValueError("non-finite logits")
    if ((y != 0) & (y != 1)).any():
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    logp = F.log_softmax(z, dim=1)
    q = F.one_hot(y.long(), 2).to(z.dtype) * (1.0 - eps) + eps / 2.0
    loss = -(q * logp).sum(dim=1).mean()
    return float(loss) if as_float else loss


def balanced_batches(labels, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches with exactly ``batch_size / 2`` items per class.

    Every majority-class item appears once per epoch; the minority class is
    oversampled (repeated shuffled passes) to keep each batch balanced. When
    the majority count is not a multiple of ``batch_size / 2`` the last batch
    is topped up with re-drawn majority items.
    """
    if hasattr(labels, "labels"):
        labels = labels.labels()
    labels = np.asarray(labels)
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even, got {batch_size}")
    real = np.flatnonzero(labels == 0)
    fake = np.flatnonzero(labels == 1)
    if real.size == 0 or fake.size == 0:
        missing = "real" if real.size == 0 else "fake"
        raise DataError(f"cannot balance batches: no {missing} items")
    half = batch_size // 2
    major, minor = (real, fake) if real.size >= fake.size else (fake, real)
    n_batches = -(-major.size // half)

    def fill(pool, n):
        out = []
        while sum(len(o) for o in out) < n:
            out.append(rng.permutation(pool))
        return np.concatenate(out)[:n]

    major_seq = rng.permutation(major)
    if major_seq.size < n_batches * half:
        extra = rng.choice(major, n_batches * half - major_seq.size, replace=False)
        major_seq = np.concatenate([major_seq, extra])
    minor_seq = fill(minor, n_batches * half)
    for b in range(n_batches):
        idx = np.concatenate([major_seq[b * half:(b + 1) * half], minor_seq[b * half:(b + 1) * half]])
        yield rng.permutation(idx)


def crop_batch(store: ComponentStore, idx: Sequence[int], segment_len: int, rng) -> np.ndarray:
    return np.stack([
        segment_clip(AudioClip(store.signals[i]), segment_len, CropMode.TRAIN_RANDOM_CROP, rng,
                     store.utt_ids[i])[0].samples
        for i in idx
    ])


def tiled_segments(store: ComponentStore, segment_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All eval tiles, their labels and the owning track index."""
    xs, ys, owner = [], [], []
    for i, sig in enumerate(store.signals):
        for seg in segment_clip(AudioClip(sig), segment_len, CropMode.EVAL_TILED, source_id=store.utt_ids[i]):
            xs.append(seg.samples)
            ys.append(store.labels[i])
            owner.append(i)
    return np.stack(xs), np.asarray(ys), np.asarray(owner)


def validation_loss(model: RawNet, store: ComponentStore, eps: float, chunk: int = 64) -> float:
    x, y, _ = tiled_segments(store, model.config.input_len)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with torch.no_grad():
            for i in range(0, len(x), chunk):
                logits = model(torch.from_numpy(x[i:i + chunk]).to(dtype))
                total += float(label_smoothed_ce(logits, torch.from_numpy(y[i:i + chunk]), eps)) * len(logits)
    finally:
        model.train(was_training)
    return total / len(x)


def set_deterministic(enabled: bool = True, threads: int = 1):
    """Single-threaded, deterministic kernels for bit-reproducible runs."""
    if enabled:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


# ---------------------------------------------------------------------------
# checkpoints

def _optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"optim/{pid}/{key}"] = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
    return {"param_groups": sd["param_groups"]}, arrays


def _restore_optimizer(opt: torch.optim.Optimizer, meta: dict, arrays: dict):
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith("optim/"):
            continue
        _, pid, key = name.split("/", 2)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def checkpoint(state: TrainState, model: RawNet, path, optimizer: torch.optim.Optimizer | None = None,
               best_state: dict | None = None, cfg: TrainConfig | None = None) -> Path:
    """Write a resumable checkpoint that ``load_model`` can also read."""
    extra_header = {"train_state": state.to_dict()}
    extra = {}
    if cfg is not None:
        extra_header["train_config"] = cfg.to_dict()
    if optimizer is not None:
        meta, extra = _optimizer_arrays(optimizer)
        extra_header["optimizer"] = meta
    if best_state is not None:
        extra.update({f"best/{k}": v.detach().cpu().numpy() for k, v in best_state.items()})
    return save_model(model, path, extra_header, extra)


def resume(path) -> tuple[RawNet, TrainState]:
    model, state, _ = _resume_full(path)
    return model, state


def _resume_full(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    header, arrays = read_container(path)
    if "train_state" not in header:
        raise ModelFormatError(f"{path} is a model file, not a training checkpoint")
    try:
        model = model_from_container(header, arrays)
        state = TrainState.from_dict(header["train_state"])
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"corrupt checkpoint {path}: {exc}") from exc
    return model, state, (header, arrays)


# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RawNet
    state: TrainState


def train(model: RawNet, train_data: ComponentStore, val_data: ComponentStore, cfg: TrainConfig,
          run_dir=None, resume_from=None, validate: Callable[[RawNet, int], float] | None = None,
          stop_after: int | None = None) -> tuple[RawNet, TrainState]:
    """Fit ``model`` and return it holding its best-validation parameters.

    ``validate(model, epoch)`` overrides the validation loss (defaults to
    label-smoothed CE over the tiled validation set). ``stop_after`` ends
    the run after that many total epochs without marking it finished, for
    interrupt/resume workflows.
    """
    if model.component_kind is not cfg.component_kind:
        raise ConfigError(f"model is a {model.component_kind.value} detector but the run trains "
                          f"{cfg.component_kind.value}")
    if train_data.kind is not cfg.component_kind or val_data.kind is not cfg.component_kind:
        raise DataError("training data component does not match the detector's component kind")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
    state = TrainState()
    best_state = copy.deepcopy(model.state_dict())
    if resume_from is not None:
        ck_model, state, (header, arrays) = _resume_full(resume_from)
        model.load_state_dict(ck_model.state_dict())
        if "optimizer" in header:
            _restore_optimizer(optimizer, header["optimizer"], arrays)
        best = {k[len("best/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("best/")}
        if best:
            best_state = best
    if validate is None:
        def validate(m, _epoch):
            return validation_loss(m, val_data, cfg.label_smoothing, cfg.eval_batch)

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        metrics_path = run_dir / "metrics.csv"
        if resume_from is None or not metrics_path.exists():
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "train_loss", "val_loss", "seconds"])

    dtype = next(model.parameters()).dtype
    segment_len = model.config.input_len
    half = cfg.batch_size // 2
    if state.epoch == 0 and resume_from is None:
        rng = make_rng(cfg.seed, "norm-warmup")
        idx = next(balanced_batches(train_data.labels, cfg.batch_size, rng))
        model.warm_start_norm_stats(torch.from_numpy(crop_batch(train_data, idx, segment_len, rng)).to(dtype))
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < last and not state.stopped_early:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        rng = make_rng(cfg.seed, "epoch", epoch)
        model.train()
        losses = []
        for b, idx in enumerate(balanced_batches(train_data.labels, cfg.batch_size, rng)):
            y = train_data.labels[idx]
            n_fake = int(y.sum())
            assert n_fake == half and len(y) - n_fake == half, "unbalanced batch"
            x = torch.from_numpy(crop_batch(train_data, idx, segment_len, rng)).to(dtype)
            optimizer.zero_grad(set_to_none=True)
            loss = label_smoothed_ce(model(x), torch.from_numpy(y), cfg.label_smoothing)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = float(validate(model, epoch))
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        state.epoch = epoch
        state.history.append((train_loss, val_loss))
        if val_loss < state.best_val_loss - cfg.min_delta:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= cfg.early_stop_patience:
                state.stopped_early = True
        seconds = time.perf_counter() - t0
        log.info("[%s] epoch %d train %.5f val %.5f (best %d) %.1fs", cfg.component_kind.short, epoch,
                 train_loss, val_loss, state.best_epoch, seconds)
        if run_dir is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(train_loss), repr(val_loss), f"{seconds:.3f}"])
            checkpoint(state, model, run_dir / "checkpoint.ntd", optimizer, best_state, cfg)

    finished = state.stopped_early or state.epoch >= cfg.epochs
    if finished:
        model.load_state_dict(best_state)
        if run_dir is not None:
            save_model(model, run_dir / "best.ntd", {"best_epoch": state.best_epoch})
    return model, state
