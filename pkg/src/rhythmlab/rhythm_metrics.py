"""Interval-based rhythm metrics: %V, deltaC/V, VarcoC/V, rPVI_C and nPVI_V."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

METRIC_NAMES = ("percent_v", "delta_c", "delta_v", "varco_c", "varco_v", "rpvi_c", "npvi_v")


class SegmentationError(ValueError):
    pass


@dataclass
class IntervalSequence:
    intervals: list[tuple[str, float]]
    sentence_id: str = ""
    language: str = ""

    def durations(self, kind: str) -> np.ndarray:
        return np.array([d for k, d in self.intervals if k == kind], dtype=np.float64)

    def scaled(self, factor: float) -> "IntervalSequence":
        return IntervalSequence([(k, d * factor) for k, d in self.intervals], self.sentence_id, self.language)


@dataclass
class MetricVector:
    """Rhythm metrics of one sentence.  NaN marks a metric lacking enough intervals.

    Units: %V in percent; deltas and rPVI in ms; Varco and nPVI scaled by 100.
    """

    percent_v: float = math.nan
    delta_c: float = math.nan
    delta_v: float = math.nan
    varco_c: float = math.nan
    varco_v: float = math.nan
    rpvi_c: float = math.nan
    npvi_v: float = math.nan
    undefined: tuple[str, ...] = field(default=())

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in METRIC_NAMES])

    def as_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in METRIC_NAMES}


def parse_segmentation(path, sentence_id: str | None = None, language: str = "") -> IntervalSequence:
    """Read ``C 0.083`` / ``V 0.125`` lines; ``#`` starts a comment.

    Adjacent intervals of the same kind are merged with a warning.
    """
    path = Path(path)
    intervals: list[tuple[str, float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise SegmentationError(f"{path}:{lineno}: expected '<C|V> <seconds>'")
            kind, value = parts[0].upper(), parts[1]
            if kind not in ("C", "V"):
                raise SegmentationError(f"{path}:{lineno}: unknown interval kind {parts[0]!r}")
            try:
                dur = float(value)
            except ValueError:
                raise SegmentationError(f"{path}:{lineno}: bad duration {value!r}") from None
            if not dur > 0 or not math.isfinite(dur):
                raise SegmentationError(f"{path}:{lineno}: duration must be positive")
            if intervals and intervals[-1][0] == kind:
                log.warning("%s:%d: merging adjacent %s intervals", path, lineno, kind)
                intervals[-1] = (kind, intervals[-1][1] + dur)
            else:
                intervals.append((kind, dur))
    if not intervals:
        raise SegmentationError(f"{path}: no intervals")
    return IntervalSequence(intervals, sentence_id or path.stem, language)


def _pvi(d: np.ndarray, normalized: bool) -> float:
    diffs = np.abs(np.diff(d))
    if normalized:
        diffs = diffs / ((d[1:] + d[:-1]) / 2.0)
    return float(diffs.mean())


def compute_metrics(seq: IntervalSequence) -> MetricVector:
    # work in milliseconds so that round decimal inputs stay exact
    c = 1000.0 * seq.durations("C")
    v = 1000.0 * seq.durations("V")
    out = MetricVector()
    undefined = []
    if len(c) and len(v):
        out.percent_v = 100.0 * v.sum() / (v.sum() + c.sum())
    else:
        undefined.append("percent_v")
    for kind, d in (("c", c), ("v", v)):
        if len(d) >= 2:
            sd = float(np.std(d))
            setattr(out, f"delta_{kind}", sd)
            setattr(out, f"varco_{kind}", 100.0 * sd / d.mean())
        else:
            undefined += [f"delta_{kind}", f"varco_{kind}"]
    if len(c) >= 2:
        out.rpvi_c = _pvi(c, normalized=False)
    else:
        undefined.append("rpvi_c")
    if len(v) >= 2:
        out.npvi_v = 100.0 * _pvi(v, normalized=True)
    else:
        undefined.append("npvi_v")
    out.undefined = tuple(undefined)
    return out


def write_metrics_csv(path, rows: list[tuple[str, str, MetricVector]]):
    """One row per sentence: id, language and the seven metrics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "language", *METRIC_NAMES])
        for sid, lang, m in rows:
            writer.writerow([sid, lang, *(repr(float(x)) if not math.isnan(x) else "" for x in m.as_array())])


def read_metrics_csv(path) -> list[tuple[str, str, MetricVector]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            values = {n: float(row[n]) if row[n] != "" else math.nan for n in METRIC_NAMES}
            out.append((row["id"], row["language"], MetricVector(**values)))
    return out

