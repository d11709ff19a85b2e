"""End-to-end experiment suite on a seeded synthetic corpus.

Output layout under the chosen directory::

    traces/    generated captures (canonical CSV + label sidecars)
    features/  window features for the main and the activity-count corpora
    models/    app and activity forests from the 80/20 run
    reports/   one CSV and one text table per experiment table, bundle.json,
               costs.json (timings and resource use) and figures/*.svg

``bundle.json`` holds only quantities that are a pure function of the seed,
so two runs with the same configuration produce identical bundles.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .capture import Trace, detect_vr_device, filter_device, save_trace
from .errors import VrsniffError
from .evaluation import (Table, dumps_canonical, environment, run_rq1_rq2, run_rq3_drop_idle, run_rq5_ablation,
                         run_rq6_inference_scaling)
from .features import FeatureDataset, extract_windows
from .models import ModelSpec
from .outputs import write_atomic
from .synth import PRESETS, VOCABULARY, AppProfile, generate_corpus, generate_trace
from .timeline import ground_truth_seconds, infer_timeline, segment_iou

log = logging.getLogger(__name__)

# sub-seed offsets from the single run seed
SEED_OFFSETS = {"corpus": 0, "split": 1, "forest": 2, "mlp": 3, "rq6_corpus": 4, "timeline_trace": 5}
TIMELINE_SCRIPT = (("Talking", 45.0), ("Throwing", 45.0), ("Paused", 45.0), ("Walking", 45.0))


@dataclass(frozen=True)
class ReproduceConfig:
    seed: int = 7
    preset: str = "separable"
    n_apps: int = 10
    session_s: float = 600.0
    rq6_apps: int = 5
    n_trees: int = 300
    mlp_epochs: int = 200
    threads: int | None = None

    def seeds(self) -> dict[str, int]:
        return {k: self.seed + v for k, v in SEED_OFFSETS.items()}

    def specs(self) -> dict[str, ModelSpec]:
        s = self.seeds()
        return {"forest": ModelSpec("forest", {"n_trees": self.n_trees, "seed": s["forest"], "threads": self.threads}),
                "tree": ModelSpec("tree"),
                "mlp": ModelSpec("mlp", {"epochs": self.mlp_epochs, "seed": s["mlp"]})}

    def describe(self) -> dict:
        doc = asdict(self)
        doc.pop("threads")  # results do not depend on it
        return doc


def device_view(trace: Trace) -> Trace:
    """The trace restricted to its most likely VR headset."""
    found = detect_vr_device(trace)
    if not found or found[0].score <= 0:
        raise VrsniffError("UNKNOWN_MAC", "no VR headset evidence in trace")
    return filter_device(trace, found[0].mac)


def featurize_corpus(traces: list[Trace]) -> FeatureDataset:
    return FeatureDataset.concat([extract_windows(device_view(t)) for t in traces])


def _write_table(reports: Path, table: Table) -> None:
    write_atomic(reports / f"{table.name}.csv", table.to_csv())
    write_atomic(reports / f"{table.name}.txt", table.to_text())


def run(cfg: ReproduceConfig, out: str | Path) -> dict:
    """Run every experiment and write the output tree; returns the bundle document."""
    from . import plotting  # matplotlib is only needed here

    if cfg.preset not in PRESETS:
        raise VrsniffError("BAD_CONFIG", f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    out = Path(out)
    seeds = cfg.seeds()
    specs = cfg.specs()
    reports_dir, figures = out / "reports", out / "reports" / "figures"
    costs: dict = {}
    t_start = time.perf_counter()

    log.info("generating %d-app corpus", cfg.n_apps)
    corpus = generate_corpus(cfg.n_apps, seeds["corpus"], PRESETS[cfg.preset], cfg.session_s)
    for trace in corpus:
        save_trace(trace, out / "traces" / f"{trace.app}.csv")
    data = featurize_corpus(corpus)
    write_atomic(out / "features" / "corpus.csv", data.to_csv())

    log.info("app and activity identification")
    rq12 = run_rq1_rq2(data, specs, seeds["split"])
    log.info("idle removal")
    rq3 = run_rq3_drop_idle(data, specs, seeds["split"])
    log.info("training-size ablation")
    rq5 = {t: run_rq5_ablation(data, specs["forest"], seeds["split"], t) for t in ("app", "activity")}
    log.info("activity-count scaling")
    rq6_corpus = generate_corpus(cfg.rq6_apps, seeds["rq6_corpus"], PRESETS[cfg.preset], cfg.session_s, (6, 6))
    rq6_data = featurize_corpus(rq6_corpus)
    write_atomic(out / "features" / "activity_counts.csv", rq6_data.to_csv())
    rq6 = run_rq6_inference_scaling(rq6_data, specs["forest"], seeds["split"])

    log.info("timeline on a held-out trace")
    activity_model = rq12.models["activity/forest"]
    acts = {n: VOCABULARY[n] for n in ("No Activity",) + tuple(a for a, _ in TIMELINE_SCRIPT)}
    probe = generate_trace(AppProfile("unseen-app", acts, TIMELINE_SCRIPT, 0.1, 30.0), seeds["timeline_trace"])
    probe = device_view(probe)
    timeline = infer_timeline(probe, activity_model)
    truth = ground_truth_seconds(probe)
    iou = Table("rq4_timeline_iou", ("label", "iou"))
    for lab, v in segment_iou(timeline, truth):
        iou.add(lab, v)

    for key, model in rq12.models.items():
        model.save(out / "models" / f"{key.replace('/', '_')}.json")

    experiments = {"rq1_rq2": rq12, "rq3": rq3, "rq5_app": rq5["app"], "rq5_activity": rq5["activity"], "rq6": rq6}
    tables = [t for e in experiments.values() for t in e.tables] + [iou]
    for table in tables:
        _write_table(reports_dir, table)
    write_atomic(reports_dir / "timeline.csv", timeline.to_csv())
    write_atomic(reports_dir / "timeline.json", dumps_canonical(timeline.to_json()))

    plotting.plot_confusion(rq12.reports["app/forest"], figures / "rq1_app_confusion_forest.svg",
                            "app identification (forest)")
    plotting.plot_confusion(rq12.reports["activity/forest"], figures / "rq2_activity_confusion_forest.svg",
                            "activity identification (forest)")
    for target, res in rq5.items():
        t = res.tables[0]
        plotting.plot_ablation(t.column("fraction_pct"), t.column("accuracy_pct"), t.column("precision_pct"),
                               t.column("recall_pct"), figures / f"rq5_ablation_{target}.svg", f"{target} (forest)")
    t6 = rq6.tables[0]
    plotting.plot_activity_counts(t6.column("activities"), t6.column("accuracy_pct"), t6.column("infer_s"),
                                  figures / "rq6_activity_counts.svg")
    plotting.plot_timeline(timeline, figures / "rq4_timeline.svg", truth, "activity timeline, unseen app")

    bundle = {
        "version": __version__,
        "config": cfg.describe(),
        "seeds": seeds,
        "environment": environment(),
        "tables": {t.name: t.stable().to_json() for t in tables},
        "reports": {f"{name}/{k}": r.to_json(with_costs=False)
                    for name, e in experiments.items() for k, r in sorted(e.reports.items())},
        "predictions": {f"{name}/{k}": d for name, e in experiments.items() for k, d in e.digests().items()},
        "timeline": timeline.to_json(),
    }
    write_atomic(reports_dir / "bundle.json", dumps_canonical(bundle))
    for name, e in experiments.items():
        costs[name] = {k: {"timing": r.timing, "resources": r.resources} for k, r in sorted(e.reports.items())}
    costs["total_wall_s"] = time.perf_counter() - t_start
    write_atomic(reports_dir / "costs.json", dumps_canonical(costs))
    log.info("done in %.1f s", costs["total_wall_s"])
    return bundle
