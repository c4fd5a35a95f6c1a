"""Turning manifests into in-memory signal views (x, s or n) for a detector."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, load_audio
from .datasets import Manifest
from .detector import ComponentKind
from .errors import DataError, NoiseTraceError
from .separation import Separator


def extract_component(clip: AudioClip, kind, separator: Separator | None, utt_id: str | None = None) -> AudioClip:
    """The view of ``clip`` a detector of ``kind`` consumes."""
    kind = ComponentKind.parse(kind)
    if kind is ComponentKind.FULL:
        return clip
    if separator is None:
        raise DataError(f"{kind.value} component requested for {utt_id or 'clip'} but no separator is configured")
    try:
        result = separator(clip, utt_id)
    except NoiseTraceError as exc:
        raise type(exc)(f"{utt_id}: {exc}") from exc
    return result.component(kind)


def component_path(component_root, kind, utt_id: str) -> Path:
    return Path(component_root) / ComponentKind.parse(kind).short / f"{utt_id}.wav"


@dataclass
class ComponentStore:
    """Signals of one component kind for every record of a manifest."""

    signals: list[np.ndarray]
    labels: np.ndarray
    utt_ids: list[str]
    kind: ComponentKind

    def __len__(self):
        return len(self.signals)

    @classmethod
    def from_manifest(cls, manifest: Manifest, kind, separator: Separator | None = None,
                      component_root=None, transform=None, jobs: int = 1) -> "ComponentStore":
        """Load tracks and derive the requested component.

        ``component_root`` points at a tree written by the ``separate`` command
        (``<root>/s/<utt>.wav``, ``<root>/n/<utt>.wav``) and takes priority over
        on-the-fly separation. ``transform`` (e.g. an attack) is applied to
        ``x`` before separation.
        """
        kind = ComponentKind.parse(kind)
        if kind is not ComponentKind.FULL and separator is None and component_root is None:
            raise DataError(f"{kind.value} detector needs a separator or a pre-separated component tree")

        def one(rec):
            if component_root is not None and kind is not ComponentKind.FULL and transform is None:
                path = component_path(component_root, kind, rec.utt_id)
                if not path.exists():
                    raise DataError(f"{rec.utt_id}: missing pre-separated component {path}")
                return load_audio(path).samples
            clip = load_audio(rec.path)
            if transform is not None:
                clip = transform(clip)
            return extract_component(clip, kind, separator, rec.utt_id).samples

        records = list(manifest)
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                signals = list(pool.map(one, records))
        else:
            signals = [one(r) for r in records]
        return cls(signals, manifest.labels(), [r.utt_id for r in records], kind)
