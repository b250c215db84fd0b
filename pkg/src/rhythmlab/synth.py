"""Synthetic "languages" with distinct rhythm statistics.

Each recording is a chain of consonant/vowel intervals.  Vowels are a
band-limited pulse train at the speaker's f0 (voiced); consonants are
high-passed noise or short closures (voiceless).  Three rhythm profiles are
provided:

* ``regular5``: regular 5 Hz syllables, low duration variance;
* ``stress``: alternating strong/weak syllables with high duration variance;
* ``regular8``: regular 8 Hz syllables with frequent voiceless stretches.

Speakers differ by spectral tilt, f0 and speaking-rate factor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import lfilter

from .audio_features import SAMPLE_RATE, AudioSignal, FeatureConfig, extract_features, write_wav
from .corpus import SEGMENT_SAMPLES, SegmentRecord

LANGUAGES = ("regular5", "stress", "regular8")
PAUSE_EVERY = (1.8, 3.2)  # seconds between phrase pauses
PAUSE_LENGTH = (0.15, 0.35)


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    language: str
    tilt: float  # one-pole coefficient; > 0 darkens, < 0 brightens
    f0: float
    rate: float
    seed: int


def make_speakers(language: str, count: int, rng: np.random.Generator) -> list[Speaker]:
    return [
        Speaker(
            speaker_id=f"{language}-spk{k:02d}",
            language=language,
            tilt=float(rng.uniform(-0.4, 0.8)),
            f0=float(rng.uniform(95.0, 230.0)),
            rate=float(rng.uniform(0.9, 1.1)),
            seed=int(rng.integers(2**31)),
        )
        for k in range(count)
    ]


def _syllables(language: str, speaker: Speaker, duration: float, rng) -> list[tuple[str, float, float, bool]]:
    """Interval chain ``(kind, seconds, amplitude, voiced)`` covering ``duration``."""
    out: list[tuple[str, float, float, bool]] = []
    t = 0.0
    next_pause = rng.uniform(*PAUSE_EVERY)
    strong = bool(rng.integers(2))
    while t < duration:
        if t >= next_pause:
            gap = rng.uniform(*PAUSE_LENGTH)
            out.append(("P", gap, 0.0, False))
            t += gap
            next_pause = t + rng.uniform(*PAUSE_EVERY)
            continue
        if language == "regular5":
            period = 0.2 / speaker.rate * rng.normal(1.0, 0.05)
            cons = period * rng.uniform(0.3, 0.4)
            items = [("C", cons, 0.25, False), ("V", period - cons, 1.0, True)]
        elif language == "stress":
            if strong:
                period = 0.34 / speaker.rate * abs(rng.normal(1.0, 0.3))
                cons = period * rng.uniform(0.3, 0.55)
                items = [("C", cons, 0.35, False), ("V", period - cons, 1.0, True)]
            else:
                period = 0.13 / speaker.rate * abs(rng.normal(1.0, 0.35))
                cons = period * rng.uniform(0.35, 0.6)
                items = [("C", cons, 0.2, False), ("V", period - cons, 0.3, True)]
            strong = not strong
        elif language == "regular8":
            period = 0.125 / speaker.rate * rng.normal(1.0, 0.05)
            if rng.random() < 0.35:
                items = [("C", period, 0.45, False)]
            else:
                cons = period * rng.uniform(0.3, 0.4)
                items = [("C", cons, 0.3, False), ("V", period - cons, 1.0, True)]
        else:
            raise ValueError(f"unknown synthetic language {language!r}")
        for kind, d, amp, voiced in items:
            d = max(d, 0.02)
            out.append((kind, d, amp, voiced))
            t += d
    return out


def render(intervals, speaker: Speaker, n_samples: int, rng) -> np.ndarray:
    """Turn an interval chain into a waveform of ``n_samples`` samples."""
    voiced_env = np.zeros(n_samples)
    noise_env = np.zeros(n_samples)
    pos = 0
    for kind, d, amp, voiced in intervals:
        n = int(round(d * SAMPLE_RATE))
        end = min(pos + n, n_samples)
        if voiced:
            voiced_env[pos:end] = amp
        elif kind == "C":
            noise_env[pos:end] = amp
        pos = end
        if pos >= n_samples:
            break
    ramp = int(0.012 * SAMPLE_RATE)
    voiced_env = uniform_filter1d(voiced_env, ramp)
    noise_env = uniform_filter1d(noise_env, ramp)

    t = np.arange(n_samples) / SAMPLE_RATE
    f0 = speaker.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(3500 // (speaker.f0 * 1.03))
    k = np.arange(1, n_harm + 1)
    source = np.zeros(n_samples)
    for h in k:
        source += np.sin(h * phase) / h
    noise = lfilter([1.0, -0.9], [1.0], rng.standard_normal(n_samples))
    x = voiced_env * source + noise_env * noise * 0.5
    x = lfilter([1.0], [1.0, -speaker.tilt], x) * (1.0 - abs(speaker.tilt))
    x += 1e-4 * rng.standard_normal(n_samples)
    return x / (np.max(np.abs(x)) + 1e-12) * 0.8


def cv_segmentation(intervals, duration: float) -> list[tuple[str, float]]:
    """C/V durations inside the first ``duration`` seconds; pauses count as consonantal."""
    out: list[tuple[str, float]] = []
    t = 0.0
    for kind, d, _, _ in intervals:
        if t >= duration:
            break
        d = min(d, duration - t)
        t += d
        kind = "V" if kind == "V" else "C"
        if out and out[-1][0] == kind:
            out[-1] = (kind, out[-1][1] + d)
        else:
            out.append((kind, d))
    return out


def generate_recording(speaker: Speaker, duration: float, rng) -> tuple[AudioSignal, list[tuple[str, float]]]:
    intervals = _syllables(speaker.language, speaker, duration, rng)
    n = int(round(duration * SAMPLE_RATE))
    return AudioSignal(render(intervals, speaker, n, rng)), cv_segmentation(intervals, duration)


def generate_segments(
    per_language: int = 200,
    speakers_per_language: int = 20,
    seed: int = 0,
    languages=LANGUAGES,
    feature_config: FeatureConfig | None = None,
) -> tuple[list[SegmentRecord], list[str]]:
    """In-memory synthetic corpus of 10 s segments, balanced over speakers."""
    rng = np.random.default_rng(seed)
    segments = []
    for lang_idx, lang in enumerate(languages):
        speakers = make_speakers(lang, speakers_per_language, rng)
        for k in range(per_language):
            spk = speakers[k % speakers_per_language]
            srng = np.random.default_rng([spk.seed, k])
            audio, _ = generate_recording(spk, SEGMENT_SAMPLES / SAMPLE_RATE, srng)
            segments.append(
                SegmentRecord(extract_features(audio, feature_config), lang_idx, spk.speaker_id, "synth")
            )
    return segments, list(languages)


def write_corpus(
    directory,
    per_language: int = 200,
    speakers_per_language: int = 20,
    seed: int = 0,
    duration: float = SEGMENT_SAMPLES / SAMPLE_RATE,
    languages=LANGUAGES,
) -> Path:
    """Write WAV files, C/V segmentation files and a JSON Lines manifest.

    Returns the manifest path.  Each manifest line carries an extra
    ``segmentation`` field pointing at the matching ``.cv`` file.
    """
    directory = Path(directory)
    (directory / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for lang in languages:
            speakers = make_speakers(lang, speakers_per_language, rng)
            for k in range(per_language):
                spk = speakers[k % speakers_per_language]
                srng = np.random.default_rng([spk.seed, k])
                audio, cv = generate_recording(spk, duration, srng)
                stem = f"{lang}_{k:04d}"
                write_wav(directory / "audio" / f"{stem}.wav", audio)
                with open(directory / "audio" / f"{stem}.cv", "w") as cv_fh:
                    cv_fh.write(f"# synthetic {lang} {spk.speaker_id}\n")
                    for kind, d in cv:
                        cv_fh.write(f"{kind} {d:.6f}\n")
                record = {
                    "path": f"audio/{stem}.wav",
                    "language": lang,
                    "speaker_id": spk.speaker_id,
                    "source": "synth",
                    "segmentation": f"audio/{stem}.cv",
                }
                fh.write(json.dumps(record) + "\n")
    return manifest
