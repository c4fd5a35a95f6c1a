"""Desk-scale synthetic experiment: train D_x, D_s and D_n on the planted-artifact
corpus, score them clean and under attack, and check the sanity oracles.

Everything is cached under one work directory so repeated calls (from the
acceptance suite or the CLI) reuse the corpus and trained models.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackSpec, apply_attack
from .audio import load_audio
from .components import ComponentStore
from .datasets import Manifest, SynthCorpusConfig, band_energy, generate_synth_corpus, parse_generic_manifest
from .detector import ComponentKind, init_model, load_model, reduced_config
from .evaluation import ScoreRecord, evaluate, score_store
from .separation import Separator
from .training import TrainConfig, set_deterministic, train

log = logging.getLogger(__name__)

KINDS = (ComponentKind.FULL, ComponentKind.SPEECH, ComponentKind.NOISE)


@dataclass(frozen=True)
class DeskConfig:
    n_tracks: int = 400
    seed: int = 0
    epochs: int = 15
    patience: int = 15
    batch_size: int = 128
    learning_rate: float = 1e-4
    input_len: int = 16000
    attack: str = "lp-6000"


@dataclass
class DeskResult:
    auc: dict = field(default_factory=dict)  # (kind short, condition) -> float
    balanced_accuracy: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)  # kind short -> [(train, val), ...]
    seconds: dict = field(default_factory=dict)


def split_components(manifest: Manifest, separator: Separator, attack: AttackSpec | None = None
                     ) -> dict[ComponentKind, ComponentStore]:
    """Load (and optionally attack) every track once, separate once, return x/s/n stores."""
    sig = {k: [] for k in KINDS}
    for rec in manifest:
        clip = load_audio(rec.path)
        if attack is not None:
            clip = apply_attack(clip, attack)
        res = separator(clip, rec.utt_id)
        sig[ComponentKind.FULL].append(clip.samples)
        sig[ComponentKind.SPEECH].append(res.speech.samples)
        sig[ComponentKind.NOISE].append(res.noise.samples)
    labels = manifest.labels()
    utts = [r.utt_id for r in manifest]
    return {k: ComponentStore(sig[k], labels, utts, k) for k in KINDS}


def ensure_corpus(work: Path, cfg: DeskConfig) -> Manifest:
    path = work / "corpus" / "manifest.csv"
    if not path.exists():
        generate_synth_corpus(SynthCorpusConfig(n_tracks=cfg.n_tracks, seed=cfg.seed), work / "corpus")
    return parse_generic_manifest(path)


def band_oracle_auc(store: ComponentStore, band=(6000.0, 8000.0)) -> float:
    """AUC of the untrained classifier "less 6-8 kHz energy means Fake"."""
    energy = np.array([band_energy(s, 16000, band) for s in store.signals])
    score = 1.0 - energy / energy.max()
    recs = [ScoreRecord(u, float(v), "fake" if y else "real") for u, v, y in zip(store.utt_ids, score, store.labels)]
    return evaluate(recs).auc


def train_detector(kind: ComponentKind, stores: dict, cfg: DeskConfig, run_dir: Path,
                   deterministic: bool = True):
    """Train one detector into ``run_dir`` (reusing ``best.ntd`` if present)."""
    best = run_dir / "best.ntd"
    if best.exists():
        hist = json.loads((run_dir / "history.json").read_text())
        return load_model(best), [tuple(h) for h in hist]
    set_deterministic(deterministic)
    torch.manual_seed(cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, early_stop_patience=min(cfg.patience, cfg.epochs),
                       batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, seed=cfg.seed,
                       component_kind=kind)
    model = init_model(reduced_config(cfg.input_len), cfg.seed, kind)
    model, state = train(model, stores["train"][kind], stores["dev"][kind], tcfg, run_dir=run_dir)
    (run_dir / "history.json").write_text(json.dumps(state.history))
    return model, state.history


def run_desk_experiment(work_dir, cfg: DeskConfig = DeskConfig(), kinds=KINDS, deterministic: bool = True,
                        tag: str = "") -> DeskResult:
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    result = DeskResult()
    t0 = time.perf_counter()
    manifest = ensure_corpus(work, cfg)
    sep = Separator()
    stores = {s: split_components(manifest.split(s), sep) for s in ("train", "dev", "eval")}
    attack = AttackSpec.parse(cfg.attack)
    attacked = split_components(manifest.split("eval"), sep, attack)
    result.seconds["data"] = time.perf_counter() - t0
    for kind in kinds:
        kind = ComponentKind.parse(kind)
        t = time.perf_counter()
        model, hist = train_detector(kind, stores, cfg, work / f"train{tag}_{kind.short}", deterministic)
        result.histories[kind.short] = hist
        for cond, store in (("clean", stores["eval"][kind]), (attack.condition, attacked[kind])):
            rep = evaluate(score_store(model, store, cond))
            result.auc[(kind.short, cond)] = rep.auc
            result.balanced_accuracy[(kind.short, cond)] = rep.balanced_accuracy
        result.seconds[kind.short] = time.perf_counter() - t
        log.info("D_%s: AUC %.4f clean, %.4f %s", kind.short, result.auc[(kind.short, "clean")],
                 result.auc[(kind.short, attack.condition)], attack.condition)
    return result
