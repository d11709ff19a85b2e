"""Experiment harness: stratified 80/20 evaluation, idle-class removal,
training-size ablation and activity-count scaling, with cost measurement.

Every experiment returns an :class:`ExperimentResult` holding its tables,
the underlying reports and the raw test-set predictions. Measured costs
(times, CPU share, memory) live in columns flagged volatile so that a
deterministic view of each table can be produced for the report bundle.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import VrsniffError
from .features import NO_ACTIVITY, FeatureDataset
from .metrics import EvalReport, evaluate_predictions
from .models import ModelSpec, TrainedModel, warmup

try:
    import resource
except ImportError:  # not available on Windows
    resource = None

ABLATION_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
RQ6_COUNTS = (2, 3, 4, 5, 6)

# Published reference numbers, shown next to measurements for comparison only.
REF_APP = {"forest": (92.4, 93.0, 92.0), "tree": (87.1, 88.0, 87.0), "mlp": (80.2, 83.0, 80.0)}
REF_ACTIVITY = {"forest": (91.2, 91.0, 91.0), "tree": (82.0, 83.0, 82.0), "mlp": (77.5, 75.0, 78.0)}
REF_DROP_IDLE = {"forest": (91.2, 96.16), "tree": (82.0, 91.0), "mlp": (77.5, 79.4)}
REF_ABLATION = {0.2: (25.57, 65.04, 12.33), 0.4: (44.02, 65.95, 12.28), 0.6: (64.17, 67.06, 12.53),
                0.8: (79.14, 61.17, 12.60), 1.0: (96.71, 60.67, 12.74)}
REF_RQ6 = {2: (94.0, 0.69), 3: (92.0, 0.81), 4: (89.0, 1.06), 5: (94.0, 1.54), 6: (92.0, 3.16)}
# train_s, cpu % as tabulated, cpu % as stated in prose, memory GB
REF_SYSTEMS = {"forest": (96.71, 62.27, 28.75, 1.38), "tree": (77.65, 11.72, 11.72, 1.37)}


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    volatile: frozenset[str] = frozenset()
    note: str = ""

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(values))

    def stable(self) -> "Table":
        """The table without run-dependent cost columns."""
        keep = [i for i, c in enumerate(self.columns) if c not in self.volatile]
        return Table(self.name, tuple(self.columns[i] for i in keep),
                     [tuple(r[i] for i in keep) for r in self.rows], frozenset(), self.note)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_json(self) -> dict:
        return {"columns": list(self.columns), "rows": [list(map(_jsonable, r)) for r in self.rows],
                "note": self.note}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in r])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [list(self.columns)] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(row, widths)))
                 for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        head = [self.name] + ([self.note] if self.note else [])
        return "\n".join(head + lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.1f}" if abs(v) >= 1 or v == 0 else f"{v:.3g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def pct(x: float) -> float:
    return 100.0 * x


REF_NOTE = "ref_* columns are published reference values for comparison; they were not reproduced"


# --------------------------------------------------------------------------
# splitting, evaluation, cost measurement
# --------------------------------------------------------------------------

def split_indices(labels, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split; each class sends ``round_half_up(0.8 n)`` rows to train, keeping one for test."""
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in sorted(set(labels)):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise VrsniffError("CLASS_TOO_SMALL", f"class {c!r} has {len(idx)} row(s); need 2", label=c)
        perm = rng.permutation(idx)
        k = min(math.floor(train_fraction * len(idx) + 0.5), len(idx) - 1)
        train.append(perm[:k])
        test.append(perm[k:])
    if not train:
        raise VrsniffError("EMPTY_DATASET", "nothing to split")
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_80_20(dataset: FeatureDataset, seed: int, target: str = "activity") -> tuple[FeatureDataset, FeatureDataset]:
    tr, te = split_indices(dataset.labels(target), seed)
    return dataset.take(tr), dataset.take(te)


def _peak_rss_bytes() -> int | None:
    if resource is None:
        return None
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(peak if sys.platform == "darwin" else peak * 1024)


def measure_resources(job: Callable, *args, **kwargs) -> tuple[object, dict]:
    """Run ``job`` and return ``(result, stats)``.

    ``stats`` always has ``wall_s``; ``peak_memory_bytes`` (process resident
    high-water mark) and ``cpu_fraction`` (CPU seconds over wall seconds times
    core count) appear only where the platform reports them.
    """
    t0, c0 = time.perf_counter(), time.process_time()
    result = job(*args, **kwargs)
    wall = time.perf_counter() - t0
    cpu = time.process_time() - c0
    stats: dict = {"wall_s": wall}
    peak = _peak_rss_bytes()
    if peak is not None:
        stats["peak_memory_bytes"] = peak
    if wall > 0:
        stats["cpu_fraction"] = cpu / (wall * (os.cpu_count() or 1))
    return result, stats


def evaluate(model: TrainedModel, test: FeatureDataset) -> tuple[EvalReport, np.ndarray]:
    """Score ``model`` on labelled rows; returns the report and the predictions."""
    if len(test) == 0:
        raise VrsniffError("EMPTY_TEST_SET", "no test rows")
    pred, stats = measure_resources(model.predict, test)
    report = evaluate_predictions(list(test.labels(model.target)), list(pred), model.codec.labels)
    report.timing["infer_s"] = stats["wall_s"]
    return report, pred


def fit_and_evaluate(train: FeatureDataset, test: FeatureDataset, spec: ModelSpec,
                     target: str) -> tuple[TrainedModel, EvalReport, np.ndarray]:
    model, stats = measure_resources(TrainedModel.fit, train, spec, target)
    report, pred = evaluate(model, test)
    report.timing["train_s"] = stats["wall_s"]
    report.resources = {k: v for k, v in stats.items() if k != "wall_s"}
    return model, report, pred


def time_inference(model: TrainedModel, rows: FeatureDataset, multipliers: Sequence[int] = (1, 4, 16),
                   repeats: int = 3) -> list[tuple[int, float]]:
    """Best-of-``repeats`` batch prediction time for ``rows`` tiled each multiplier times."""
    out = []
    base = np.arange(len(rows))
    for m in multipliers:
        batch = rows.take(np.tile(base, m))
        best = min(measure_resources(model.predict, batch)[1]["wall_s"] for _ in range(repeats))
        out.append((len(batch), best))
    return out


def prediction_digest(pred) -> str:
    return hashlib.sha256("\n".join(map(str, pred)).encode("utf-8")).hexdigest()


@dataclass
class ExperimentResult:
    tables: list[Table]
    reports: dict[str, EvalReport] = field(default_factory=dict)
    predictions: dict[str, list] = field(default_factory=dict)
    models: dict[str, TrainedModel] = field(default_factory=dict)

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def digests(self) -> dict[str, str]:
        return {k: prediction_digest(v) for k, v in sorted(self.predictions.items())}


def _cost_cells(report: EvalReport) -> tuple:
    cpu = report.resources.get("cpu_fraction")
    mem = report.resources.get("peak_memory_bytes")
    return (report.timing.get("train_s"), report.timing.get("infer_s"),
            None if cpu is None else pct(cpu), None if mem is None else mem / 2**20)


COST_COLUMNS = ("train_s", "infer_s", "cpu_pct", "peak_memory_mb")


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

TARGET_TAGS = {"app": ("rq1_app", REF_APP), "activity": ("rq2_activity", REF_ACTIVITY)}


def run_rq1_rq2(dataset: FeatureDataset, specs: Mapping[str, ModelSpec], seed: int,
                targets: Sequence[str] = ("app", "activity")) -> ExperimentResult:
    """App and activity identification with every model family on one stratified 80/20 split per target."""
    warmup()
    tables, reports, preds, models = [], {}, {}, {}
    for target in targets:
        tag, refs = TARGET_TAGS[target]
        train_idx, test_idx = split_indices(dataset.labels(target), seed)
        train, test = dataset.take(train_idx), dataset.take(test_idx)
        summary = Table(f"{tag}_summary", ("model", "accuracy_pct", "precision_pct", "recall_pct")
                        + COST_COLUMNS + ("ref_accuracy_pct", "ref_precision_pct", "ref_recall_pct"),
                        volatile=frozenset(COST_COLUMNS), note=REF_NOTE)
        for name, spec in specs.items():
            models[f"{target}/{name}"], rep, pred = fit_and_evaluate(train, test, spec, target)
            reports[f"{target}/{name}"] = rep
            preds[f"{target}/{name}"] = list(pred)
            ref = refs.get(spec.kind, (None, None, None))
            summary.add(name, pct(rep.accuracy), pct(rep.macro_precision), pct(rep.macro_recall),
                        *_cost_cells(rep), *ref)
        labels = sorted(set(test.labels(target)))
        per_class = Table(f"{tag}_per_class", ("label", "test_rows") + tuple(f"{n}_pct" for n in specs))
        for lab in labels:
            per_class.add(lab, int(np.sum(test.labels(target) == lab)),
                          *(pct(reports[f"{target}/{n}"].per_class_accuracy[lab]) for n in specs))
        tables += [summary, per_class]

    systems = Table("systems", ("model", "target") + COST_COLUMNS
                    + ("ref_train_s", "ref_cpu_pct_table", "ref_cpu_pct_text", "ref_memory_gb"),
                    volatile=frozenset(COST_COLUMNS), note=REF_NOTE)
    for target in targets:
        for name, spec in specs.items():
            systems.add(name, target, *_cost_cells(reports[f"{target}/{name}"]),
                        *REF_SYSTEMS.get(spec.kind, (None,) * 4))
    tables.append(systems)
    return ExperimentResult(tables, reports, preds, models)


def run_rq3_drop_idle(dataset: FeatureDataset, specs: Mapping[str, ModelSpec], seed: int,
                      idle_label: str = NO_ACTIVITY) -> ExperimentResult:
    """Activity models with and without idle rows.

    The "after" run restricts the same train/test split to non-idle rows, so
    a corpus without idle rows gives identical before and after numbers.
    """
    warmup()
    y = dataset.labels("activity")
    train_idx, test_idx = split_indices(y, seed)
    keep_tr, keep_te = train_idx[y[train_idx] != idle_label], test_idx[y[test_idx] != idle_label]
    if len(keep_te) == 0:
        raise VrsniffError("EMPTY_TEST_SET", "no non-idle test rows")
    overall = Table("rq3_drop_idle", ("model", "before_pct", "after_pct", "delta_pts", "ref_before_pct",
                                      "ref_after_pct"), note=REF_NOTE)
    reports, preds = {}, {}
    for name, spec in specs.items():
        _, before, pb = fit_and_evaluate(dataset.take(train_idx), dataset.take(test_idx), spec, "activity")
        _, after, pa = fit_and_evaluate(dataset.take(keep_tr), dataset.take(keep_te), spec, "activity")
        reports[f"before/{name}"], reports[f"after/{name}"] = before, after
        preds[f"before/{name}"], preds[f"after/{name}"] = list(pb), list(pa)
        overall.add(name, pct(before.accuracy), pct(after.accuracy), pct(after.accuracy - before.accuracy),
                    *REF_DROP_IDLE.get(spec.kind, (None, None)))
    per_class = Table("rq3_per_class", ("label",) + tuple(f"{n}_{w}_pct" for n in specs for w in ("before", "after")))
    for lab in sorted(set(y[test_idx])):
        cells = []
        for n in specs:
            for w in ("before", "after"):
                v = reports[f"{w}/{n}"].per_class_accuracy.get(lab)
                cells.append(None if v is None else pct(v))
        per_class.add(lab, *cells)
    return ExperimentResult([overall, per_class], reports, preds)


def nested_subsets(labels, train_idx: np.ndarray, fractions: Sequence[float], seed: int) -> dict[float, np.ndarray]:
    """Stratified, nested training subsets: each class keeps a fixed random order and
    a fraction ``f`` takes its first ``max(1, round_half_up(f n))`` rows."""
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise VrsniffError("BAD_CONFIG", f"fractions must lie in (0, 1], got {list(fractions)}")
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(train_idx[labels[train_idx] == c]) for c in sorted(set(labels[train_idx]))]
    out = {}
    for f in fractions:
        parts = [o[:max(1, min(len(o), math.floor(f * len(o) + 0.5)))] for o in orders]
        out[f] = np.sort(np.concatenate(parts))
    return out


def run_rq5_ablation(dataset: FeatureDataset, spec: ModelSpec, seed: int, target: str = "activity",
                     fractions: Sequence[float] = ABLATION_FRACTIONS) -> ExperimentResult:
    """Retrain on nested fractions of the 80% training split; the 20% test split stays fixed.

    Fraction 1.0 uses exactly the training rows of :func:`run_rq1_rq2` for the
    same seed, so its report matches that run's.
    """
    warmup()
    y = dataset.labels(target)
    train_idx, test_idx = split_indices(y, seed)
    test = dataset.take(test_idx)
    subsets = nested_subsets(y, train_idx, fractions, seed + 1)
    cols = ("fraction_pct", "train_rows", "accuracy_pct", "precision_pct", "recall_pct", "train_s", "cpu_pct",
            "peak_memory_mb", "ref_train_s", "ref_cpu_pct", "ref_memory_pct")
    table = Table(f"rq5_ablation_{target}", cols, volatile=frozenset({"train_s", "cpu_pct", "peak_memory_mb"}),
                  note=REF_NOTE)
    reports, preds = {}, {}
    for f in fractions:
        _, rep, pred = fit_and_evaluate(dataset.take(subsets[f]), test, spec, target)
        reports[f"{f:g}"] = rep
        preds[f"{target}/{f:g}"] = list(pred)
        train_s, _, cpu, mem = _cost_cells(rep)
        table.add(pct(f), len(subsets[f]), pct(rep.accuracy), pct(rep.macro_precision), pct(rep.macro_recall),
                  train_s, cpu, mem, *REF_ABLATION.get(round(f, 6), (None, None, None)))
    return ExperimentResult([table], reports, preds)


def activity_order(labels, idle_label: str = NO_ACTIVITY) -> list[str]:
    """Non-idle activities alphabetically, idle last; the first m form the m-activity task."""
    present = set(labels)
    return sorted(present - {idle_label}) + ([idle_label] if idle_label in present else [])


def run_rq6_inference_scaling(dataset: FeatureDataset, spec: ModelSpec, seed: int,
                              counts: Sequence[int] = RQ6_COUNTS,
                              size_multipliers: Sequence[int] = (1, 4, 16)) -> ExperimentResult:
    """Per app, restrict to its first m activities, train an activity model and time batch inference.

    Accuracy and inference time are averaged over the apps that have at least
    m activities. A second table times one app's model on growing test batches.
    """
    warmup()
    summary = Table("rq6_activity_counts", ("activities", "apps", "accuracy_pct", "infer_s", "ref_accuracy_pct",
                                          "ref_infer_s"), volatile=frozenset({"infer_s"}), note=REF_NOTE)
    sizes = Table("rq6_inference_sizes", ("activities", "rows", "infer_s"), volatile=frozenset({"infer_s"}))
    reports, preds = {}, {}
    apps = sorted(set(a for a in dataset.app if a is not None))
    if not apps:
        raise VrsniffError("BAD_CONFIG", "rows carry no app labels")
    for m in counts:
        accs, times = [], []
        for k, app in enumerate(apps):
            rows = np.flatnonzero(dataset.app == app)
            order = activity_order(dataset.activity[rows])
            if len(order) < m:
                continue
            sub = dataset.take(rows[np.isin(dataset.activity[rows], order[:m])])
            tr, te = split_indices(sub.activity, seed + k)
            model, rep, pred = fit_and_evaluate(sub.take(tr), sub.take(te), spec, "activity")
            reports[f"{m}/{app}"] = rep
            preds[f"{m}/{app}"] = list(pred)
            accs.append(rep.accuracy)
            times.append(rep.timing["infer_s"])
            if m not in sizes.column("activities"):
                for n_rows, t in time_inference(model, sub.take(te), size_multipliers):
                    sizes.add(m, n_rows, t)
        if not accs:
            raise VrsniffError("BAD_CONFIG", f"no app has {m} activities")
        summary.add(m, len(accs), pct(float(np.mean(accs))), float(np.mean(times)), *REF_RQ6.get(m, (None, None)))
    return ExperimentResult([summary, sizes], reports, preds)


def environment() -> dict:
    import numba
    import scipy

    return {"python": sys.version.split()[0], "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "platform": sys.platform}


def dumps_canonical(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
