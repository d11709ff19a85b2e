"""Per-second buckets and rolling-window feature vectors.

Columns ``f1`` .. ``f12`` of a window ending at second ``t`` (``W`` = window
length, all statistics population ones, ``ddof=0``):

====  =================================================================
f1    packet count of second t (mean-centred)
f2    std of inter-packet gaps inside the window (raw seconds)
f3    sum of per-second bits over the window (mean-centred)
f4    t, seconds since trace start
f5    sum of per-second packet counts over the window (mean-centred)
f6    smallest inter-packet gap inside the window (raw seconds)
f7    mean distance to the k nearest training rows (see :func:`attach_knn`)
f8    smallest per-second packet count in the window (mean-centred)
f9    std of per-second packet counts in the window
f10   variance of per-second bits in the window
f11   variance of individual frame lengths in the window
f12   largest per-second bit count in the window (mean-centred)
====  =================================================================

A gap counts as inside the window when both of its packets fall in it.
Optional extras: ``f13``-``f15`` are empirical CDF ranks of second t's packet
count, mean gap and mean frame length among the window's seconds; the
``*_up``/``*_down`` columns repeat f1, f3, f5 and f12 per direction.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .capture import Trace, US_PER_S
from .errors import VrsniffError

NO_ACTIVITY = "No Activity"
BASE_COLUMNS = tuple(f"f{i}" for i in range(1, 13))
CDF_COLUMNS = ("f13", "f14", "f15")
DIRECTION_COLUMNS = ("f1_up", "f1_down", "f3_up", "f3_down", "f5_up", "f5_down", "f12_up", "f12_down")
KNN_COLUMN = "f7"
QUANTILES = tuple(np.linspace(0.0, 1.0, 11))


@dataclass(frozen=True)
class SecondBucket:
    second_index: int
    packet_count: int
    bit_count: int
    mean_packet_length: float
    mean_delta_time: float


@dataclass(frozen=True)
class _Buckets:
    origin_us: int
    sec: np.ndarray       # per packet: second index
    gaps: np.ndarray      # per consecutive packet pair, seconds
    counts: np.ndarray
    bits: np.ndarray
    length_sum: np.ndarray
    gap_sum: np.ndarray

    @property
    def n(self) -> int:
        return len(self.counts)

    def mean_delta(self) -> np.ndarray:
        out = np.zeros(self.n)
        multi = self.counts >= 2
        out[multi] = self.gap_sum[multi] / (self.counts[multi] - 1)
        return out

    def mean_length(self) -> np.ndarray:
        out = np.zeros(self.n)
        busy = self.counts > 0
        out[busy] = self.length_sum[busy] / self.counts[busy]
        return out


def _bucket_arrays(trace: Trace, mask: np.ndarray | None = None) -> _Buckets:
    if len(trace) == 0:
        raise VrsniffError("EMPTY_TRACE", "trace has no packets")
    ts = trace.timestamps
    origin = (int(ts[0]) // US_PER_S) * US_PER_S
    sec_all = (ts - origin) // US_PER_S
    n = int(sec_all[-1]) + 1
    if mask is not None:
        ts, lengths = ts[mask], trace.lengths[mask]
    else:
        lengths = trace.lengths
    sec = (ts - origin) // US_PER_S
    gaps = np.diff(ts) / US_PER_S
    same = sec[1:] == sec[:-1]
    return _Buckets(
        origin_us=origin, sec=sec, gaps=gaps,
        counts=np.bincount(sec, minlength=n).astype(np.int64),
        bits=np.bincount(sec, weights=lengths * 8, minlength=n),
        length_sum=np.bincount(sec, weights=lengths, minlength=n),
        gap_sum=np.bincount(sec[:-1][same], weights=gaps[same], minlength=n),
    )


def bucketize(trace: Trace) -> list[SecondBucket]:
    """Aggregate a sorted trace into contiguous one-second buckets."""
    b = _bucket_arrays(trace)
    md, ml = b.mean_delta(), b.mean_length()
    return [SecondBucket(i, int(b.counts[i]), int(round(b.bits[i])), float(ml[i]), float(md[i]))
            for i in range(b.n)]


def center(values, mean: float | None = None) -> np.ndarray:
    """Subtract ``mean`` (default: the series' own mean)."""
    values = np.asarray(values, dtype=float)
    if mean is None:
        mean = values.mean() if len(values) else 0.0
    return values - mean


def trace_means(trace: Trace) -> dict[str, float]:
    """Per-trace means used for centring."""
    b = _bucket_arrays(trace)
    return {
        "delta_time": float(b.gaps.mean()) if len(b.gaps) else 0.0,
        "bits_per_s": float(b.bits.mean()),
        "packets_per_s": float(b.counts.mean()),
        "packet_length": float(trace.lengths.mean()),
    }


def cdf_rank(values: Sequence[float], current: float) -> float:
    """Empirical CDF of ``current`` against ``values`` (fraction <= current)."""
    values = np.asarray(values, dtype=float)
    return float(np.count_nonzero(values <= current)) / len(values)


def cdf_features(counts_w, deltas_w, lengths_w) -> tuple[float, float, float]:
    """CDF ranks of the window's last second for count, mean gap and mean length."""
    return (cdf_rank(counts_w, counts_w[-1]), cdf_rank(deltas_w, deltas_w[-1]),
            cdf_rank(lengths_w, lengths_w[-1]))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Standardizer":
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["std"], dtype=float))


@dataclass
class FeatureDataset:
    """Window rows from one or more traces.

    ``centering`` holds one dict of per-trace means per source trace;
    ``standardization`` is set once f7 has been attached against a reference.
    """

    columns: tuple[str, ...]
    X: np.ndarray
    t_s: np.ndarray
    activity: np.ndarray
    app: np.ndarray
    trace_id: np.ndarray
    centering: tuple[dict, ...] = ()
    cdf_summary: dict = field(default_factory=dict)
    standardization: Standardizer | None = None

    def __len__(self) -> int:
        return len(self.X)

    def col(self, name: str) -> int:
        return self.columns.index(name)

    def labels(self, target: str) -> np.ndarray:
        if target == "activity":
            return self.activity
        if target == "app":
            return self.app
        raise ValueError(f"unknown target {target!r}")

    def take(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], t_s=self.t_s[idx], activity=self.activity[idx],
                       app=self.app[idx], trace_id=self.trace_id[idx])

    @property
    def knn_inputs(self) -> np.ndarray:
        keep = [i for i, c in enumerate(self.columns) if c != KNN_COLUMN]
        return self.X[:, keep]

    @classmethod
    def concat(cls, parts: Sequence["FeatureDataset"]) -> "FeatureDataset":
        if not parts:
            raise VrsniffError("EMPTY_DATASET", "nothing to concatenate")
        cols = parts[0].columns
        if any(p.columns != cols for p in parts):
            raise VrsniffError("ARITY_MISMATCH", "datasets have different feature columns")
        offset, ids = 0, []
        for p in parts:
            ids.append(p.trace_id + offset)
            offset += int(p.trace_id.max()) + 1 if len(p) else 0
        return cls(cols, np.vstack([p.X for p in parts]), np.concatenate([p.t_s for p in parts]),
                   np.concatenate([p.activity for p in parts]), np.concatenate([p.app for p in parts]),
                   np.concatenate(ids), tuple(c for p in parts for c in p.centering), dict(parts[0].cdf_summary))

    # ---- CSV ----------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t_s",) + self.columns + ("activity_label", "app_label"))
        for i in range(len(self)):
            vals = ["" if np.isnan(v) else f"{v:.9g}" for v in self.X[i]]
            w.writerow([int(self.t_s[i])] + vals + [self.activity[i], self.app[i] or ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, data: str | bytes) -> "FeatureDataset":
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        rows = list(csv.reader(io.StringIO(text, newline="")))
        if not rows or rows[0][0] != "t_s" or rows[0][-2:] != ["activity_label", "app_label"]:
            raise VrsniffError("BAD_HEADER", "expected t_s,f1,...,activity_label,app_label")
        header = rows[0]
        cols = tuple(header[1:-2])
        if cols[:12] != BASE_COLUMNS:
            raise VrsniffError("BAD_HEADER", "feature columns must start with f1..f12")
        body = [r for r in rows[1:] if r]
        X = np.empty((len(body), len(cols)))
        for i, r in enumerate(body):
            if len(r) != len(header):
                raise VrsniffError("BAD_ROW", f"line {i + 2}: wrong field count", line=i + 2)
            try:
                X[i] = [float(v) if v else np.nan for v in r[1:-2]]
            except ValueError:
                raise VrsniffError("BAD_ROW", f"line {i + 2}: non-numeric feature", line=i + 2) from None
        t_s = np.array([int(r[0]) for r in body], dtype=np.int64)
        # a row restarting at an earlier second marks the next trace
        trace_id = np.concatenate([[0], np.cumsum(np.diff(t_s) <= 0)]) if len(body) else np.zeros(0, int)
        return cls(cols, X, t_s, np.array([r[-2] for r in body], dtype=object),
                   np.array([r[-1] or None for r in body], dtype=object), trace_id.astype(np.int64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureDataset":
        return cls.from_csv(Path(path).read_bytes())


def extract_windows(trace: Trace, window_s: int = 5, stride_s: int = 1, centered: bool = True,
                    cdf: bool = False, split_direction: bool = False) -> FeatureDataset:
    """One feature row per second ``t`` from ``window_s - 1`` to the last second.

    Each row is labelled with the activity interval covering the midpoint of
    second ``t`` (``"No Activity"`` when none does) and the trace's app.
    ``f7`` is left as NaN until :func:`attach_knn` fills it.
    """
    if window_s < 1 or stride_s < 1:
        raise VrsniffError("BAD_CONFIG", "window and stride must be >= 1")
    b = _bucket_arrays(trace)
    if b.n < window_s:
        raise VrsniffError("TRACE_TOO_SHORT", f"trace spans {b.n} s, window needs {window_s} s")
    means = trace_means(trace)
    shift_count = means["packets_per_s"] if centered else 0.0
    shift_bits = means["bits_per_s"] if centered else 0.0
    counts_c = b.counts - shift_count
    bits_c = b.bits - shift_bits
    lengths = trace.lengths.astype(float)
    md, ml = b.mean_delta(), b.mean_length()

    if split_direction:
        up = trace.uplink
        dirs = []
        for mask in (up, ~up):
            if mask.any():
                sub = _bucket_arrays(trace, mask)
                c, bt = sub.counts.astype(float), sub.bits
            else:
                c, bt = np.zeros(b.n), np.zeros(b.n)
            if centered:
                c, bt = c - c.mean(), bt - bt.mean()
            dirs.append((c, bt))

    columns = BASE_COLUMNS + (CDF_COLUMNS if cdf else ()) + (DIRECTION_COLUMNS if split_direction else ())
    ts = list(range(window_s - 1, b.n, stride_s))
    X = np.empty((len(ts), len(columns)))
    for row, t in enumerate(ts):
        lo = t - window_s + 1
        pl = int(np.searchsorted(b.sec, lo, "left"))
        ph = int(np.searchsorted(b.sec, t, "right"))
        gaps = b.gaps[pl:max(ph - 1, pl)]
        cw, bw = counts_c[lo:t + 1], bits_c[lo:t + 1]
        raw_c, raw_b = b.counts[lo:t + 1], b.bits[lo:t + 1]
        vals = [
            counts_c[t],
            gaps.std() if len(gaps) else 0.0,
            bw.sum(),
            float(t),
            cw.sum(),
            gaps.min() if len(gaps) else 0.0,
            np.nan,
            cw.min(),
            raw_c.std(),
            raw_b.var(),
            lengths[pl:ph].var() if ph > pl else 0.0,
            bw.max(),
        ]
        if cdf:
            vals += cdf_features(raw_c, md[lo:t + 1], ml[lo:t + 1])
        if split_direction:
            (cu, bu), (cd, bd) = dirs
            vals += [cu[t], cd[t], bu[lo:t + 1].sum(), bd[lo:t + 1].sum(),
                     cu[lo:t + 1].sum(), cd[lo:t + 1].sum(), bu[lo:t + 1].max(), bd[lo:t + 1].max()]
        X[row] = vals

    labels = np.array([trace.label_at(b.origin_us + (t + 0.5) * US_PER_S) or NO_ACTIVITY for t in ts],
                      dtype=object)
    summary = {
        "packets_per_s": np.quantile(b.counts, QUANTILES).tolist(),
        "delta_time": (np.quantile(b.gaps, QUANTILES) if len(b.gaps) else np.zeros(len(QUANTILES))).tolist(),
        "packet_length": np.quantile(lengths, QUANTILES).tolist(),
    }
    return FeatureDataset(columns, X, np.array(ts, dtype=np.int64), labels,
                          np.array([trace.app] * len(ts), dtype=object), np.zeros(len(ts), dtype=np.int64),
                          (means,), summary)


class KnnReference:
    """Standardised training rows against which f7 distances are measured."""

    def __init__(self, reference: FeatureDataset | np.ndarray, k: int = 3,
                 standardizer: Standardizer | None = None):
        raw = reference.knn_inputs if isinstance(reference, FeatureDataset) else np.asarray(reference, float)
        if len(raw) < k + 1:
            raise VrsniffError("REFERENCE_TOO_SMALL", f"need at least k + 1 = {k + 1} reference rows, got {len(raw)}")
        self.k = k
        self.standardizer = standardizer or Standardizer.fit(raw)
        self.Z = self.standardizer.transform(raw)
        self._tree = cKDTree(self.Z)

    def distances(self, rows: np.ndarray, exclude_self: bool = False) -> np.ndarray:
        """Mean distance to the k nearest reference rows.

        With ``exclude_self`` row ``i`` of ``rows`` is reference row ``i`` and
        that one neighbour (not identical duplicates) is skipped.
        """
        Z = self.standardizer.transform(np.asarray(rows, float))
        if not exclude_self:
            d, _ = self._tree.query(Z, k=self.k)
            return np.asarray(d, float).reshape(len(Z), self.k).mean(axis=1)
        d, idx = self._tree.query(Z, k=self.k + 1)
        d = np.asarray(d, float).reshape(len(Z), self.k + 1).copy()
        idx = np.asarray(idx).reshape(len(Z), self.k + 1)
        d[idx == np.arange(len(Z))[:, None]] = np.inf
        d.sort(axis=1)
        return d[:, :self.k].mean(axis=1)


def attach_knn(dataset: FeatureDataset, reference: FeatureDataset | KnnReference, k: int = 3) -> FeatureDataset:
    """Fill f7 for ``dataset`` from ``reference``.

    Passing the same dataset object as both arguments computes training-set
    f7 values, where each row skips itself.
    """
    exclude_self = reference is dataset
    ref = reference if isinstance(reference, KnnReference) else KnnReference(reference, k)
    X = dataset.X.copy()
    X[:, dataset.col(KNN_COLUMN)] = ref.distances(dataset.knn_inputs, exclude_self)
    return replace(dataset, X=X, standardization=ref.standardizer)
