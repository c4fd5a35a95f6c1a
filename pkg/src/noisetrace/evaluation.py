"""Scoring, ROC/AUC, balanced accuracy and detector comparison reports.

Fake is the positive class and the score is always P(Fake).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .audio import AudioClip, CropMode, segment_clip
from .components import ComponentStore, extract_component
from .datasets import Label
from .detector import ComponentKind, RawNet, predict_proba
from .errors import ComparisonError, MetricUndefinedError
from .separation import Separator, hann, stft

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    score: float
    label: Label
    component_kind: ComponentKind = ComponentKind.FULL
    condition: str = "clean"

    def __post_init__(self):
        s = float(self.score)
        if not (np.isfinite(s) and 0.0 <= s <= 1.0):
            raise ValueError(f"score for {self.utt_id} must be finite and in [0, 1], got {self.score}")
        object.__setattr__(self, "score", s)
        object.__setattr__(self, "label", Label.parse(self.label))
        object.__setattr__(self, "component_kind", ComponentKind.parse(self.component_kind))


@dataclass
class EvalReport:
    auc: float
    balanced_accuracy: float
    roc_points: list[tuple[float, float]]
    threshold: float = 0.5
    n_real: int = 0
    n_fake: int = 0
    manifest_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"auc": self.auc, "balanced_accuracy": self.balanced_accuracy, "threshold": self.threshold,
                "n_real": self.n_real, "n_fake": self.n_fake, "manifest_id": self.manifest_id}


def aggregate(values: np.ndarray, how: str = "mean") -> float:
    if how == "mean":
        return float(np.mean(values))
    if how == "max":
        return float(np.max(values))
    raise ValueError(f"unknown aggregation {how!r}")


def score_track(model: RawNet, clip: AudioClip, separator: Separator | None = None, *, utt_id: str = "",
                label=Label.REAL, condition: str = "clean", how: str = "mean") -> ScoreRecord:
    """Score one track: pick the model's component, tile it, aggregate P(Fake)."""
    view = extract_component(clip, model.component_kind, separator, utt_id)
    tiles = segment_clip(view, model.config.input_len, CropMode.EVAL_TILED, source_id=utt_id)
    p = predict_proba(model, np.stack([t.samples for t in tiles]))[:, 1]
    return ScoreRecord(utt_id, aggregate(p, how), label, model.component_kind, condition)


def score_store(model: RawNet, store: ComponentStore, condition: str = "clean", how: str = "mean",
                per_segment: bool = False) -> list[ScoreRecord]:
    """Batched scoring of every track in a component store."""
    if store.kind is not model.component_kind:
        raise ComparisonError(f"{model.component_kind.value} model cannot score {store.kind.value} signals")
    xs, owner = [], []
    for i, sig in enumerate(store.signals):
        for seg in segment_clip(AudioClip(sig), model.config.input_len, CropMode.EVAL_TILED):
            xs.append(seg.samples)
            owner.append(i)
    owner = np.asarray(owner)
    p = predict_proba(model, np.stack(xs))[:, 1]
    label_of = [Label.FAKE if y else Label.REAL for y in store.labels]
    if per_segment:
        out = []
        for i in range(len(store)):
            for k, v in enumerate(p[owner == i]):
                out.append(ScoreRecord(f"{store.utt_ids[i]}#{k}", v, label_of[i], store.kind, condition))
        return out
    return [ScoreRecord(store.utt_ids[i], aggregate(p[owner == i], how), label_of[i], store.kind, condition)
            for i in range(len(store))]


def _scores_labels(records) -> tuple[np.ndarray, np.ndarray]:
    records = list(records)
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([Label.parse(r.label).index for r in records], dtype=np.int64)
    if (labels == 1).sum() == 0 or (labels == 0).sum() == 0:
        raise MetricUndefinedError("metric needs at least one real and one fake record")
    return scores, labels


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points sweeping every distinct threshold, tied scores in one step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    return list(zip(fpr.tolist(), tpr.tolist()))


def roc_auc(records) -> tuple[float, list[tuple[float, float]]]:
    scores, labels = _scores_labels(records)
    points = roc_curve(scores, labels)
    fpr, tpr = np.array(points).T
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, points


def balanced_accuracy(records, threshold: float = 0.5) -> float:
    """``(TPR + TNR) / 2`` predicting Fake iff ``score >= threshold``."""
    scores, labels = _scores_labels(records)
    pred = scores >= threshold
    tpr = pred[labels == 1].mean()
    tnr = (~pred[labels == 0]).mean()
    return float((tpr + tnr) / 2.0)


def manifest_fingerprint(records) -> str:
    h = hashlib.sha1()
    for utt, lab in sorted((r.utt_id, Label.parse(r.label).value) for r in records):
        h.update(f"{utt}\t{lab}\n".encode())
    return h.hexdigest()[:16]


def evaluate(records, threshold: float = 0.5) -> EvalReport:
    records = list(records)
    auc, points = roc_auc(records)
    labels = [Label.parse(r.label) for r in records]
    return EvalReport(auc, balanced_accuracy(records, threshold), points, threshold,
                      labels.count(Label.REAL), labels.count(Label.FAKE), manifest_fingerprint(records))


# ---------------------------------------------------------------------------
# comparison tables

TABLE_FIELDS = ("dataset", "condition", "component", "auc", "balanced_accuracy", "n_real", "n_fake",
                "best_auc", "best_balanced_accuracy", "missing")


def compare_detectors(reports: Mapping[tuple, EvalReport], out_dir=None,
                      kinds: Sequence | None = None) -> list[dict]:
    """One row per (dataset, condition, detector); flags the column maxima.

    Keys are ``(component_kind, dataset, condition)``. Detectors absent from
    a (dataset, condition) cell get an explicit row with ``missing=True``.
    """
    keyed = {(ComponentKind.parse(k), d, c): r for (k, d, c), r in reports.items()}
    kinds = [ComponentKind.parse(k) for k in kinds] if kinds else sorted({k for k, _, _ in keyed},
                                                                         key=list(ComponentKind).index)
    cells = []
    for _, d, c in keyed:
        if (d, c) not in cells:
            cells.append((d, c))
    rows = []
    for d, c in cells:
        present = [keyed[(k, d, c)] for k in kinds if (k, d, c) in keyed]
        ids = {r.manifest_id for r in present if r.manifest_id}
        if len(ids) > 1:
            raise ComparisonError(f"detectors in cell ({d}, {c}) were scored on different manifests")
        best_auc = max(r.auc for r in present)
        best_bacc = max(r.balanced_accuracy for r in present)
        for k in kinds:
            r = keyed.get((k, d, c))
            if r is None:
                rows.append({"dataset": d, "condition": c, "component": k.short, "auc": None,
                             "balanced_accuracy": None, "n_real": None, "n_fake": None,
                             "best_auc": False, "best_balanced_accuracy": False, "missing": True})
                continue
            rows.append({"dataset": d, "condition": c, "component": k.short, "auc": r.auc,
                         "balanced_accuracy": r.balanced_accuracy, "n_real": r.n_real, "n_fake": r.n_fake,
                         "best_auc": r.auc == best_auc, "best_balanced_accuracy": r.balanced_accuracy == best_bacc,
                         "missing": False})
    if out_dir is not None:
        write_comparison(rows, keyed, out_dir)
    return rows


def write_comparison(rows: list[dict], reports: Mapping[tuple, EvalReport], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    (out_dir / "comparison.json").write_text(json.dumps(rows, indent=2))
    roc_dir = out_dir / "roc"
    for (kind, dataset, condition), rep in reports.items():
        write_roc(rep.roc_points, roc_dir / f"{dataset}__{condition}__{ComponentKind.parse(kind).short}.csv")
    return out_dir


def write_roc(points, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        w.writerows(points)
    return path


def write_scores(records: Iterable[ScoreRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "score", "label", "component", "condition"])
        for r in records:
            w.writerow([r.utt_id, repr(r.score), r.label.value, r.component_kind.short, r.condition])
    return path


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        return [ScoreRecord(row["utt_id"], float(row["score"]), row["label"], row["component"], row["condition"])
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# spectrograms

LOG_FLOOR_DB = -200.0


def spectrogram(clip: AudioClip, fft_size: int = 512, hop: int = 128):
    """Log-magnitude STFT in dB: (matrix frames x bins, times s, freqs Hz)."""
    spec = stft(clip.samples, fft_size, hop)
    mag = np.abs(spec) / np.sum(hann(fft_size))
    db = 20.0 * np.log10(np.maximum(mag, 10 ** (LOG_FLOOR_DB / 20)))
    times = np.arange(spec.shape[0]) * hop / clip.sample_rate
    freqs = np.fft.rfftfreq(fft_size, 1.0 / clip.sample_rate)
    return db, times, freqs


def export_spectrogram(clip: AudioClip, path, fft_size: int = 512, hop: int = 128, image: bool = True):
    """Write ``<path>.csv`` (first row frequencies, first column times) and ``<path>.png``."""
    if len(clip) == 0:
        raise ValueError("empty clip")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    db, times, freqs = spectrogram(clip, fft_size, hop)
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s\\freq_hz"] + [f"{f:g}" for f in freqs])
        for t, row in zip(times, db):
            w.writerow([f"{t:.6f}"] + [f"{v:.4f}" for v in row])
    if image:
        try:
            import matplotlib
        except ImportError:
            log.warning("matplotlib not installed; wrote %s only", csv_path)
            return db, times, freqs
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.5))
        vmax = db.max()
        mesh = ax.pcolormesh(times, freqs, db.T, shading="auto", vmin=max(vmax - 100.0, LOG_FLOOR_DB), vmax=vmax)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("frequency [Hz]")
        fig.colorbar(mesh, ax=ax, label="dB")
        fig.tight_layout()
        fig.savefig(path.with_suffix(".png"), dpi=100)
        plt.close(fig)
    return db, times, freqs
