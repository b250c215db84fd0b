"""Manifest ingestion, 10-second segment assembly, speaker-disjoint splits,
loss weights and training-time input distortion."""
from __future__ import annotations

import json
import logging
from collections import OrderedDict, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .audio_features import (
    FRAME_LENGTH,
    SAMPLE_RATE,
    AudioError,
    AudioSignal,
    FeatureConfig,
    FeatureSequence,
    decode_audio,
    extract_features,
    normalize_amplitude,
    read_features,
    write_features,
)

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 10.0
PAUSE_SECONDS = 0.3
SEGMENT_SAMPLES = int(SEGMENT_SECONDS * SAMPLE_RATE)
PAUSE_SAMPLES = int(round(PAUSE_SECONDS * SAMPLE_RATE))
SEGMENT_FRAMES = SEGMENT_SAMPLES // FRAME_LENGTH  # 312

MANIFEST_FIELDS = ("path", "language", "speaker_id", "source")


class CorpusError(ValueError):
    pass


@dataclass
class ManifestEntry:
    path: str
    language: str
    speaker_id: str
    source: str
    extra: dict = field(default_factory=dict)


@dataclass
class CorpusIndex:
    entries: list[ManifestEntry]
    languages: list[str]

    def __len__(self):
        return len(self.entries)

    def language_index(self, tag: str) -> int:
        return self.languages.index(tag)


@dataclass
class SegmentRecord:
    """A 10 s labeled segment.  ``language`` is a 0-based index into the corpus label list."""

    features: FeatureSequence
    language: int
    speaker_id: str
    source: str
    origin: tuple[str, ...] = ()


@dataclass
class WeightConfig:
    K1: float = 20.0
    K2: float = 5.0

    def __post_init__(self):
        if self.K1 <= 0 or self.K2 <= 0:
            raise ValueError("K1 and K2 must be positive")


@dataclass
class DistortionConfig:
    n_sigmoids: int = 6
    contraction: float = 15.0
    angle_sd: float = np.pi / 10

    def __post_init__(self):
        if self.n_sigmoids <= 0 or self.contraction <= 0 or self.angle_sd <= 0:
            raise ValueError("distortion parameters must be positive")


def load_manifest(path, languages: Sequence[str] | None = None) -> CorpusIndex:
    """Parse a JSON Lines manifest.

    Languages get dense indices in first-seen order unless ``languages`` fixes
    the label list, in which case unknown tags are an error.
    """
    base = Path(path).parent
    entries = []
    seen_paths = set()
    order = list(languages) if languages is not None else []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            missing = [k for k in MANIFEST_FIELDS if not isinstance(record.get(k), str)]
            if missing:
                raise CorpusError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            lang = record["language"]
            if lang not in order:
                if languages is not None:
                    raise CorpusError(f"{path}:{lineno}: unknown language {lang!r}")
                order.append(lang)
            audio = Path(record["path"])
            if not audio.is_absolute():
                audio = base / audio
            if str(audio) in seen_paths:
                log.warning("%s:%d: duplicate path %s", path, lineno, audio)
            seen_paths.add(str(audio))
            extra = {k: v for k, v in record.items() if k not in MANIFEST_FIELDS}
            entries.append(
                ManifestEntry(str(audio), lang, record["speaker_id"], record["source"], extra)
            )
    if not entries:
        raise CorpusError(f"{path}: empty manifest")
    return CorpusIndex(entries, order)


def cut_segments(
    items: Iterable[tuple[ManifestEntry, AudioSignal]],
) -> list[tuple[ManifestEntry, np.ndarray, tuple[str, ...]]]:
    """Cut decoded files into 10 s sample blocks.

    Files of 10 s or more are cut on their own; shorter files of one
    (speaker, source) pair are joined in order with 0.3 s of silence and the
    joined stream is cut.  Remainders under 10 s are dropped.
    """
    groups: OrderedDict[tuple[str, str], list] = OrderedDict()
    for entry, signal in items:
        groups.setdefault((entry.speaker_id, entry.source), []).append((entry, signal))

    out = []
    for group in groups.values():
        parts, spans, short_entry = [], [], None
        pos = 0
        for entry, signal in group:
            x = normalize_amplitude(signal).samples
            if len(x) >= SEGMENT_SAMPLES:
                for k in range(len(x) // SEGMENT_SAMPLES):
                    block = x[k * SEGMENT_SAMPLES : (k + 1) * SEGMENT_SAMPLES]
                    out.append((entry, block, (entry.path,)))
                continue
            if parts:
                parts.append(np.zeros(PAUSE_SAMPLES))
                pos += PAUSE_SAMPLES
            short_entry = short_entry or entry
            parts.append(x)
            spans.append((entry.path, pos, pos + len(x)))
            pos += len(x)
        if not parts:
            continue
        stream = np.concatenate(parts)
        for k in range(len(stream) // SEGMENT_SAMPLES):
            lo, hi = k * SEGMENT_SAMPLES, (k + 1) * SEGMENT_SAMPLES
            origin = tuple(p for p, a, b in spans if a < hi and b > lo)
            out.append((short_entry, stream[lo:hi], origin))
    return out


def assemble_segments(
    index: CorpusIndex,
    feature_config: FeatureConfig | None = None,
    resample: bool = False,
    on_error: Callable[[str, Exception], None] | None = None,
    jobs: int = 1,
) -> list[SegmentRecord]:
    """Decode every manifest entry and turn it into labeled 312-frame segments.

    Decode failures are reported through ``on_error`` (or logged) and skipped.
    ``jobs > 1`` extracts features in a process pool; output order is unchanged.
    """
    decoded = []
    for entry in index.entries:
        try:
            decoded.append((entry, decode_audio(entry.path, resample_to_16k=resample)))
        except AudioError as exc:
            if on_error is not None:
                on_error(entry.path, exc)
            else:
                log.error("skipping %s: %s", entry.path, exc)
    blocks = cut_segments(decoded)
    signals = [AudioSignal(block) for _, block, _ in blocks]
    configs = [feature_config] * len(signals)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            features = list(pool.map(extract_features, signals, configs, chunksize=8))
    else:
        features = list(map(extract_features, signals, configs))
    segments = []
    for (entry, _, origin), feats in zip(blocks, features):
        segments.append(
            SegmentRecord(
                features=feats,
                language=index.language_index(entry.language),
                speaker_id=entry.speaker_id,
                source=entry.source,
                origin=origin,
            )
        )
    return segments


def save_segment_cache(directory, segments: Sequence[SegmentRecord], languages: Sequence[str]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, seg in enumerate(segments):
        name = f"seg{i:06d}.rfe"
        write_features(directory / name, seg.features)
        records.append(
            {
                "file": name,
                "language": languages[seg.language],
                "speaker_id": seg.speaker_id,
                "source": seg.source,
                "origin": list(seg.origin),
            }
        )
    index = {"languages": list(languages), "segments": records}
    (directory / "index.json").write_text(json.dumps(index, indent=1))


def load_segment_cache(directory) -> tuple[list[SegmentRecord], list[str]]:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
    except FileNotFoundError:
        raise CorpusError(f"{directory}: no segment cache (index.json missing)") from None
    languages = index["languages"]
    segments = [
        SegmentRecord(
            features=read_features(directory / rec["file"]),
            language=languages.index(rec["language"]),
            speaker_id=rec["speaker_id"],
            source=rec["source"],
            origin=tuple(rec.get("origin", ())),
        )
        for rec in index["segments"]
    ]
    return segments, languages


def split_train_test(
    segments: Sequence[SegmentRecord], test_fraction: float = 0.08, seed: int = 0
) -> tuple[list[SegmentRecord], list[SegmentRecord]]:
    """Speaker-disjoint split.

    For each language, speakers are visited in a seeded random order and moved
    to the test side until it holds at least ``test_fraction`` of that
    language's segments.  At least one speaker always stays in training.
    A speaker seen in several languages keeps its first assignment.
    """
    by_lang: dict[int, dict[str, int]] = defaultdict(dict)
    for seg in segments:
        counts = by_lang[seg.language]
        counts[seg.speaker_id] = counts.get(seg.speaker_id, 0) + 1

    lonely = sorted(lang for lang, spk in by_lang.items() if len(spk) < 2)
    if lonely:
        raise CorpusError(f"languages with a single speaker cannot be split: {lonely}")

    rng = np.random.default_rng(seed)
    test_speakers: set[str] = set()
    assigned: set[str] = set()
    for lang in sorted(by_lang):
        counts = by_lang[lang]
        speakers = sorted(counts)
        speakers = [speakers[i] for i in rng.permutation(len(speakers))]
        total = sum(counts.values())
        in_test = sum(counts[s] for s in speakers if s in test_speakers)
        n_train_speakers = sum(1 for s in speakers if s not in test_speakers)
        for spk in speakers:
            if in_test >= test_fraction * total:
                break
            if spk in assigned or n_train_speakers <= 1:
                continue
            test_speakers.add(spk)
            in_test += counts[spk]
            n_train_speakers -= 1
        assigned.update(speakers)

    train = [s for s in segments if s.speaker_id not in test_speakers]
    test = [s for s in segments if s.speaker_id in test_speakers]
    return train, test


def compute_sample_weights(
    segments: Sequence[SegmentRecord], config: WeightConfig | None = None
) -> np.ndarray:
    """Per-segment loss weight ``1/(K2 + n_spk) * 1/(K1 + n(s))``.

    ``n(s)`` counts segments of speaker ``s`` and
    ``n_spk = sum_s n(s)/(K1 + n(s))`` runs over the speakers of one language.
    """
    config = config or WeightConfig()
    counts: dict[tuple[int, str], int] = defaultdict(int)
    for seg in segments:
        counts[seg.language, seg.speaker_id] += 1
    n_spk: dict[int, float] = defaultdict(float)
    for (lang, _), n in counts.items():
        n_spk[lang] += n / (config.K1 + n)
    return np.array(
        [
            1.0 / (config.K2 + n_spk[seg.language]) * (1.0 / (config.K1 + counts[seg.language, seg.speaker_id]))
            for seg in segments
        ]
    )


class Distortion:
    """Monotone map of [0, 1] onto itself built from evenly spaced sigmoids.

    Each sigmoid's height is the slope ``tan(pi/4 + angle)``, so zero angles
    give a near-identity staircase; the sum is rescaled so that 0 -> 0, 1 -> 1.
    """

    def __init__(self, angles: np.ndarray, contraction: float = 15.0):
        self.angles = np.asarray(angles, dtype=np.float64)
        self.contraction = contraction
        n = len(self.angles)
        self.centers = np.linspace(0.0, 1.0, n)
        self.heights = np.tan(np.pi / 4 + self.angles)
        self._h0 = self._raw(np.array([0.0]))[0]
        self._h1 = self._raw(np.array([1.0]))[0]

    def _raw(self, x: np.ndarray) -> np.ndarray:
        z = self.contraction * (x[..., None] - self.centers)
        return (self.heights / (1.0 + np.exp(-z))).sum(axis=-1)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = (self._raw(x) - self._h0) / (self._h1 - self._h0)
        return np.clip(g, 0.0, 1.0)


def draw_distortion(config: DistortionConfig, rng: np.random.Generator) -> Distortion:
    angles = rng.normal(0.0, config.angle_sd, config.n_sigmoids)
    bad = np.abs(angles) >= np.pi / 4
    while bad.any():
        angles[bad] = rng.normal(0.0, config.angle_sd, bad.sum())
        bad = np.abs(angles) >= np.pi / 4
    return Distortion(angles, config.contraction)


def augment_batch(
    batch: np.ndarray, config: DistortionConfig, rng: np.random.Generator
) -> np.ndarray:
    """Distort the level channels of a (B, T, 6) batch with one shared map; deltas are recomputed."""
    g = draw_distortion(config, rng)
    levels = g(batch[..., :3]).astype(batch.dtype)
    deltas = np.zeros_like(levels)
    deltas[:, 1:] = levels[:, 1:] - levels[:, :-1]
    return np.concatenate([levels, deltas], axis=-1)


def stack_segments(segments: Sequence[SegmentRecord], dtype=np.float32) -> np.ndarray:
    """(B, T, 6) array of network inputs; all segments must share a length."""
    return np.stack([seg.features.stacked(dtype) for seg in segments])

