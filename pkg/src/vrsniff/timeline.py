"""Trace-level inference: which app produced a trace and what the user did when."""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .capture import Trace, US_PER_S
from .errors import VrsniffError
from .features import FeatureDataset, extract_windows
from .models.trained import TrainedModel


@dataclass(frozen=True)
class Segment:
    start_s: int  # inclusive
    end_s: int    # exclusive
    label: str
    mean_confidence: float

    @property
    def length(self) -> int:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class ActivityTimeline:
    segments: tuple[Segment, ...]
    per_second: tuple[tuple[int, str, float], ...]

    def to_json(self) -> dict:
        return {"segments": [{"start_s": s.start_s, "end_s": s.end_s, "label": s.label,
                              "mean_confidence": s.mean_confidence} for s in self.segments]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t_s", "label", "confidence"))
        for t, lab, conf in self.per_second:
            w.writerow((t, lab, f"{conf:.6g}"))
        return buf.getvalue()


def featurize_for(model: TrainedModel, trace: Trace) -> FeatureDataset:
    cfg = model.feature_config
    return extract_windows(trace, cfg.window_s, cfg.stride_s, cfg.centered, cfg.cdf, cfg.split_direction)


def identify_app(trace: Trace, app_model: TrainedModel) -> tuple[str, float, dict[str, int]]:
    """Majority app over all windows; confidence is the winner's vote share.

    Equal vote counts go to the alphabetically first app.
    """
    votes = Counter(app_model.predict(featurize_for(app_model, trace)))
    histogram = dict(sorted(votes.items()))
    label = min(histogram, key=lambda k: (-histogram[k], k))
    return label, histogram[label] / sum(histogram.values()), histogram


def smooth(labels: Sequence, m: int) -> list:
    """Sliding majority over ``m`` labels centred on each position (clipped at the ends).

    On a tied vote the previous smoothed label wins if it is among the tied
    labels, else the position's own label, else the tied label that occurs
    first in the window.
    """
    if m < 1:
        raise VrsniffError("BAD_CONFIG", f"smoothing window must be >= 1, got {m}")
    labels = list(labels)
    if m == 1:
        return labels
    half_lo, half_hi = m // 2, (m - 1) // 2
    out: list = []
    for i in range(len(labels)):
        window = labels[max(0, i - half_lo):i + half_hi + 1]
        counts = Counter(window)
        top = max(counts.values())
        tied = [lab for lab in dict.fromkeys(window) if counts[lab] == top]
        if len(tied) == 1:
            out.append(tied[0])
        elif out and out[-1] in tied:
            out.append(out[-1])
        elif labels[i] in tied:
            out.append(labels[i])
        else:
            out.append(tied[0])
    return out


def _runs(seconds: Sequence[int], labels: Sequence) -> list[list]:
    runs: list[list] = []
    for t, lab in zip(seconds, labels):
        if runs and runs[-1][2] == lab:
            runs[-1][1] = t + 1
        else:
            runs.append([t, t + 1, lab])
    return runs


def _absorb_short(runs: list[list], min_len: float) -> list[list]:
    """Merge runs shorter than ``min_len`` into their longer neighbour (left on a tie), shortest first."""
    runs = [list(r) for r in runs]
    while len(runs) > 1:
        short = [i for i, r in enumerate(runs) if r[1] - r[0] < min_len]
        if not short:
            break
        i = min(short, key=lambda k: (runs[k][1] - runs[k][0], k))
        left = runs[i - 1] if i > 0 else None
        right = runs[i + 1] if i + 1 < len(runs) else None
        if right is None or (left is not None and left[1] - left[0] >= right[1] - right[0]):
            left[1] = runs[i][1]
            del runs[i]
        else:
            right[0] = runs[i][0]
            del runs[i]
        merged: list[list] = []
        for r in runs:
            if merged and merged[-1][2] == r[2]:
                merged[-1][1] = r[1]
            else:
                merged.append(r)
        runs = merged
    return runs


def build_timeline(seconds: Sequence[int], labels: Sequence[str], proba: np.ndarray, classes: Sequence[str],
                   smooth_m: int = 3, min_segment_s: float = 2) -> ActivityTimeline:
    """Turn per-second window predictions into segments.

    ``proba[i, k]`` is the vote share of ``classes[k]`` at ``seconds[i]``;
    seconds must be consecutive integers.
    """
    seconds = [int(t) for t in seconds]
    if not seconds:
        raise VrsniffError("TRACE_TOO_SHORT", "no windows to build a timeline from")
    if any(b - a != 1 for a, b in zip(seconds, seconds[1:])):
        raise VrsniffError("BAD_CONFIG", "timeline needs one prediction per second")
    runs = _absorb_short(_runs(seconds, smooth(labels, smooth_m)), min_segment_s)
    col = {c: k for k, c in enumerate(classes)}
    t0 = seconds[0]
    per_second, segments = [], []
    for start, end, lab in runs:
        conf = [float(proba[t - t0, col[lab]]) for t in range(start, end)]
        per_second += [(t, lab, c) for t, c in zip(range(start, end), conf)]
        segments.append(Segment(start, end, lab, float(np.mean(conf))))
    return ActivityTimeline(tuple(segments), tuple(per_second))


def infer_timeline(trace: Trace, activity_model: TrainedModel, smooth_m: int = 3,
                   min_segment_s: float = 2) -> ActivityTimeline:
    """Per-second activity timeline covering seconds ``[W - 1, duration)`` of the trace."""
    if activity_model.feature_config.stride_s != 1:
        raise VrsniffError("BAD_CONFIG", "timelines need a model trained with stride 1")
    ds = featurize_for(activity_model, trace)
    proba = activity_model.predict_proba(ds)
    labels = activity_model.codec.decode(proba.argmax(axis=1))
    return build_timeline(ds.t_s, labels, proba, activity_model.codec.labels, smooth_m, min_segment_s)


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def ground_truth_seconds(trace: Trace) -> list[tuple[float, float, str]]:
    """The trace's labelled intervals in seconds relative to its first whole second."""
    if not len(trace):
        raise VrsniffError("EMPTY_TRACE", "trace has no packets")
    origin = (int(trace.timestamps[0]) // US_PER_S) * US_PER_S
    return [((iv.start_us - origin) / US_PER_S, (iv.end_us - origin) / US_PER_S, iv.label)
            for iv in trace.intervals]


def segment_iou(timeline: ActivityTimeline, truth: Sequence[tuple[float, float, str]]) -> list[tuple[str, float]]:
    """Temporal IoU per ground-truth interval, restricted to the timeline's covered range.

    The prediction for an interval is the union of the same-label segments
    that overlap it.
    """
    lo, hi = timeline.segments[0].start_s, timeline.segments[-1].end_s
    out = []
    for start, end, lab in truth:
        gs, ge = max(start, lo), min(end, hi)
        if ge <= gs:
            continue
        hits = [s for s in timeline.segments if s.label == lab and s.start_s < ge and s.end_s > gs]
        if not hits:
            out.append((lab, 0.0))
            continue
        inter = sum(max(0.0, min(s.end_s, ge) - max(s.start_s, gs)) for s in hits)
        pred_len = sum(s.length for s in hits)
        out.append((lab, inter / (pred_len + (ge - gs) - inter)))
    return out
