"""Command-line entry point.

Exit status: 0 success, 1 usage error (nothing written), 2 data error.
Every command that writes files also writes ``run.json`` provenance: the
parsed configuration, seed, tool version and SHA-256 digests of the inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import VrsniffError
from .outputs import file_digest, write_atomic

log = logging.getLogger("vrsniff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed (default: 0; reproduce: 7)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="vrsniff", description="VR traffic side-channel analysis toolkit")
    parser.add_argument("--version", action="version", version=f"vrsniff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, **kw):
        return sub.add_parser(name, help=help_, description=help_, parents=[common], **kw)

    p = add("ingest", "convert a capture to the canonical CSV trace")
    p.add_argument("input")
    p.add_argument("--format", choices=("pcap", "csv"))
    p.add_argument("--device", default=None, help="MAC address to keep, or 'auto' for the detected headset")
    p.add_argument("-o", "--output", required=True)

    p = add("detect", "rank devices by VR headset evidence")
    p.add_argument("input")
    p.add_argument("--format", choices=("pcap", "csv"))
    p.add_argument("-o", "--output", help="also write the ranking as CSV")

    p = add("featurize", "extract window features from one or more traces")
    p.add_argument("traces", nargs="+")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--cdf", action="store_true")
    p.add_argument("--split-direction", action="store_true")
    p.add_argument("--no-center", action="store_true")
    p.add_argument("--device", default="auto", help="MAC to keep, 'auto' (default) or 'all'")
    p.add_argument("-o", "--output", required=True)

    p = add("synth", "generate a labelled synthetic corpus")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--profile", help="JSON profile file")
    src.add_argument("--preset", choices=("separable", "overlapping"))
    p.add_argument("--apps", type=int, default=10)
    p.add_argument("--session", type=float, default=600.0, help="seconds per app")
    p.add_argument("--activities", type=int, nargs=2, default=(3, 5), metavar=("MIN", "MAX"))
    p.add_argument("--bystander-rate", type=float, default=0.0, help="packets/s from a non-VR device")
    p.add_argument("--format", choices=("csv", "pcap"), default="csv")
    p.add_argument("-o", "--output", required=True)

    p = add("train", "train a classifier on a feature file")
    p.add_argument("features")
    p.add_argument("--model", choices=("forest", "tree", "mlp"), default="forest")
    p.add_argument("--target", choices=("activity", "app"), default="activity")
    p.add_argument("--trees", type=int, default=300)
    p.add_argument("--params", help="extra hyperparameters as a JSON object, or @file.json")
    p.add_argument("-o", "--output", required=True)

    p = add("tune", "grid search with stratified cross-validation")
    p.add_argument("features")
    p.add_argument("--model", choices=("forest", "tree", "mlp"), default="forest")
    p.add_argument("--target", choices=("activity", "app"), default="activity")
    p.add_argument("--grid", required=True, help="JSON file: {param: [values]} or [{param: value}, ...]")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--trees", type=int, default=300)
    p.add_argument("-o", "--output", required=True)

    p = add("eval", "80/20 evaluation and optional extra experiments")
    p.add_argument("features")
    p.add_argument("--models", default="forest,tree,mlp")
    p.add_argument("--target", choices=("activity", "app"), default="activity")
    p.add_argument("--trees", type=int, default=300)
    p.add_argument("--drop-idle", action="store_true")
    p.add_argument("--ablate", action="store_true")
    p.add_argument("--rq6", action="store_true", help="per-app activity-count scaling")
    p.add_argument("-o", "--output", required=True)

    p = add("predict", "apply a trained model to a feature file")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("-o", "--output", required=True)

    p = add("timeline", "identify the app and the activity timeline of a trace")
    p.add_argument("trace")
    p.add_argument("--app-model", required=True)
    p.add_argument("--activity-model", required=True)
    p.add_argument("--smooth", type=int, default=3)
    p.add_argument("--min-seg", type=float, default=2.0)
    p.add_argument("--device", default="auto")
    p.add_argument("--plot", action="store_true", help="also write timeline.svg")
    p.add_argument("-o", "--output", required=True)

    p = add("reproduce", "run the full experiment suite on a seeded synthetic corpus")
    p.add_argument("--preset", choices=("separable", "overlapping"), default="separable")
    p.add_argument("--apps", type=int, default=10)
    p.add_argument("--session", type=float, default=600.0)
    p.add_argument("--trees", type=int, default=300)
    p.add_argument("-o", "--output", required=True)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _device(trace, device: str | None):
    from .capture import filter_device
    from .reproduce import device_view

    if device in (None, "all"):
        return trace
    if device == "auto":
        return device_view(trace)
    return filter_device(trace, device.lower())


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _run_json(path: Path, args, inputs: list[str], seed: int, outputs: list[Path]) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {
        "tool": "vrsniff",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
    }
    write_atomic(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _provenance_for_file(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".run.json")


def _forest_params(args) -> dict:
    return {"n_trees": args.trees, "seed": _seed(args), "threads": args.threads}


def _spec(kind: str, args, extra: dict | None = None):
    from .models import ModelSpec

    params = {}
    if kind == "forest":
        params = _forest_params(args)
    elif kind == "mlp":
        params = {"seed": _seed(args)}
    params.update(extra or {})
    return ModelSpec(kind, params)


def _load_json(path: str, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise VrsniffError("BAD_CONFIG", f"cannot read {what} {path}: {exc}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    from .capture import load_trace, save_trace

    trace = _device(load_trace(args.input, args.format), args.device)
    save_trace(trace, args.output)
    if trace.dropped_frames:
        log.warning("%d truncated frame(s) dropped", trace.dropped_frames)
    _run_json(_provenance_for_file(args.output), args, [args.input], _seed(args), [Path(args.output)])
    return 0


def cmd_detect(args) -> int:
    from .capture import detect_vr_device, load_trace

    ranked = detect_vr_device(load_trace(args.input, args.format))
    lines = ["mac,score,reasons"] + [f"{d.mac},{d.score},{';'.join(d.reasons)}" for d in ranked]
    print("\n".join(f"{d.mac}  {d.score:>3}  {', '.join(d.reasons) or '-'}" for d in ranked))
    if args.output:
        write_atomic(args.output, "\n".join(lines) + "\n")
        _run_json(_provenance_for_file(args.output), args, [args.input], _seed(args), [Path(args.output)])
    return 0


def cmd_featurize(args) -> int:
    from .capture import load_trace
    from .features import FeatureDataset, extract_windows

    parts = []
    for path in args.traces:
        trace = _device(load_trace(path), args.device)
        parts.append(extract_windows(trace, args.window, args.stride, not args.no_center, args.cdf,
                                     args.split_direction))
    ds = FeatureDataset.concat(parts)
    write_atomic(args.output, ds.to_csv())
    _run_json(_provenance_for_file(args.output), args, args.traces, _seed(args), [Path(args.output)])
    log.info("%d windows from %d trace(s)", len(ds), len(parts))
    return 0


def cmd_synth(args) -> int:
    from .capture import save_trace, write_pcap
    from .synth import PRESETS, generate_trace, load_profiles, make_app_profiles, profiles_to_json

    seed = _seed(args)
    out = Path(args.output)
    if args.profile:
        profiles = load_profiles(args.profile)
    else:
        profiles = make_app_profiles(args.apps, seed, PRESETS[args.preset or "separable"], args.session,
                                     tuple(args.activities))
    written = []
    for k, prof in enumerate(profiles):
        trace = generate_trace(prof, seed * 1000 + k + 1, args.session, args.bystander_rate)
        if args.format == "pcap":
            path = out / f"{prof.name}.pcap"
            write_atomic(path, write_pcap(trace))
        else:
            path = out / f"{prof.name}.csv"
            save_trace(trace, path)
        written.append(path)
    write_atomic(out / "profiles.json", json.dumps(profiles_to_json(profiles), indent=1) + "\n")
    _run_json(out / "run.json", args, [args.profile] if args.profile else [], seed, written)
    return 0


def cmd_train(args) -> int:
    from .features import FeatureDataset
    from .models import TrainedModel

    extra = {}
    if args.params:
        if args.params.startswith("@"):
            extra = _load_json(args.params[1:], "params")
        else:
            try:
                extra = json.loads(args.params)
            except json.JSONDecodeError as exc:
                raise UsageError(f"vrsniff train: error: argument --params: {exc}") from None
    model = TrainedModel.fit(FeatureDataset.load(args.features), _spec(args.model, args, extra), args.target)
    model.save(args.output)
    _run_json(_provenance_for_file(args.output), args, [args.features], _seed(args), [Path(args.output)])
    return 0


def cmd_tune(args) -> int:
    from .features import FeatureDataset
    from .models import tune

    grid = _load_json(args.grid, "grid")
    result = tune(FeatureDataset.load(args.features), _spec(args.model, args), grid, args.target, args.folds,
                  _seed(args))
    doc = {"best_params": result.best_params, "best_mean_accuracy": result.best_score, "table": result.table}
    write_atomic(args.output, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result.best_params, sort_keys=True), f"{100 * result.best_score:.2f}%")
    _run_json(_provenance_for_file(args.output), args, [args.features, args.grid], _seed(args), [Path(args.output)])
    return 0


def cmd_eval(args) -> int:
    from . import evaluation as ev
    from . import plotting
    from .features import FeatureDataset

    names = [n.strip() for n in args.models.split(",") if n.strip()]
    bad = [n for n in names if n not in ("forest", "tree", "mlp")]
    if bad or not names:
        raise UsageError(f"vrsniff eval: error: argument --models: unknown model(s) {bad or names}")
    ds = FeatureDataset.load(args.features)
    seed = _seed(args)
    specs = {n: _spec(n, args) for n in names}
    out = Path(args.output)
    results = {"rq1_rq2": ev.run_rq1_rq2(ds, specs, seed, targets=(args.target,))}
    if args.drop_idle:
        results["rq3"] = ev.run_rq3_drop_idle(ds, specs, seed)
    if args.ablate:
        results["rq5"] = ev.run_rq5_ablation(ds, specs.get("forest", next(iter(specs.values()))), seed, args.target)
    if args.rq6:
        results["rq6"] = ev.run_rq6_inference_scaling(ds, specs.get("forest", next(iter(specs.values()))), seed)
    written = []
    for res in results.values():
        for t in res.tables:
            written.append(write_atomic(out / f"{t.name}.csv", t.to_csv()))
            written.append(write_atomic(out / f"{t.name}.txt", t.to_text()))
            print(t.to_text())
    for key, rep in results["rq1_rq2"].reports.items():
        written.append(plotting.plot_confusion(rep, out / "figures" / f"confusion_{key.replace('/', '_')}.svg", key))
    if "rq5" in results:
        t = results["rq5"].tables[0]
        written.append(plotting.plot_ablation(t.column("fraction_pct"), t.column("accuracy_pct"),
                                              t.column("precision_pct"), t.column("recall_pct"),
                                              out / "figures" / f"{t.name}.svg"))
    bundle = {
        "version": __version__, "seed": seed, "environment": ev.environment(),
        "tables": {t.name: t.stable().to_json() for r in results.values() for t in r.tables},
        "reports": {f"{n}/{k}": r.to_json(with_costs=False) for n, res in results.items()
                    for k, r in sorted(res.reports.items())},
        "predictions": {f"{n}/{k}": d for n, res in results.items() for k, d in res.digests().items()},
    }
    written.append(write_atomic(out / "bundle.json", ev.dumps_canonical(bundle)))
    costs = {n: {k: {"timing": r.timing, "resources": r.resources} for k, r in sorted(res.reports.items())}
             for n, res in results.items()}
    written.append(write_atomic(out / "costs.json", ev.dumps_canonical(costs)))
    _run_json(out / "run.json", args, [args.features], seed, written)
    return 0


def cmd_predict(args) -> int:
    from .features import FeatureDataset
    from .models import TrainedModel

    model = TrainedModel.load(args.model)
    ds = FeatureDataset.load(args.features)
    proba = model.predict_proba(ds)
    pred = model.codec.decode(proba.argmax(axis=1))
    lines = ["trace_id,t_s,predicted,confidence"]
    lines += [f"{tid},{t},{p},{c:.6g}" for tid, t, p, c in zip(ds.trace_id, ds.t_s, pred, proba.max(axis=1))]
    write_atomic(args.output, "\n".join(lines) + "\n")
    truth = ds.labels(model.target)
    if all(v is not None for v in truth) and len(truth):
        print(f"accuracy {100 * float(np.mean(truth == pred)):.2f}% over {len(ds)} rows")
    _run_json(_provenance_for_file(args.output), args, [args.model, args.features], _seed(args), [Path(args.output)])
    return 0


def cmd_timeline(args) -> int:
    from .capture import load_trace
    from .models import TrainedModel
    from .timeline import ground_truth_seconds, identify_app, infer_timeline, segment_iou

    if args.smooth < 1 or args.min_seg < 0:
        raise UsageError("vrsniff timeline: error: --smooth must be >= 1 and --min-seg >= 0")
    app_model, act_model = TrainedModel.load(args.app_model), TrainedModel.load(args.activity_model)
    trace = _device(load_trace(args.trace), args.device)
    app, conf, hist = identify_app(trace, app_model)
    tl = infer_timeline(trace, act_model, args.smooth, args.min_seg)
    out = Path(args.output)
    doc = {"app": {"label": app, "confidence": conf, "votes": hist}, **tl.to_json()}
    truth = ground_truth_seconds(trace) if trace.intervals else None
    if truth:
        doc["iou"] = [{"label": lab, "iou": v} for lab, v in segment_iou(tl, truth)]
    written = [write_atomic(out / "timeline.json", json.dumps(doc, indent=2) + "\n"),
               write_atomic(out / "timeline.csv", tl.to_csv())]
    if args.plot:
        from .plotting import plot_timeline
        written.append(plot_timeline(tl, out / "timeline.svg", truth, f"{app} ({100 * conf:.0f}% of windows)"))
    print(f"app: {app} ({100 * conf:.1f}% of windows)")
    for s in tl.segments:
        print(f"{s.start_s:>6}-{s.end_s:<6} {s.label}  ({s.mean_confidence:.2f})")
    _run_json(out / "run.json", args, [args.trace, args.app_model, args.activity_model], _seed(args), written)
    return 0


def cmd_reproduce(args) -> int:
    from .reproduce import ReproduceConfig, run

    cfg = ReproduceConfig(seed=_seed(args, 7), preset=args.preset, n_apps=args.apps, session_s=args.session,
                          n_trees=args.trees, threads=args.threads)
    out = Path(args.output)
    bundle = run(cfg, out)
    for name in ("rq1_app_summary", "rq2_activity_summary", "rq3_drop_idle", "rq6_activity_counts",
                 "rq4_timeline_iou"):
        print((out / "reports" / f"{name}.txt").read_text(encoding="utf-8"))
    written = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run.json")
    _run_json(out / "run.json", args, [], cfg.seed, written)
    return 0 if bundle else 2


COMMANDS = {"ingest": cmd_ingest, "detect": cmd_detect, "featurize": cmd_featurize, "synth": cmd_synth,
            "train": cmd_train, "tune": cmd_tune, "eval": cmd_eval, "predict": cmd_predict,
            "timeline": cmd_timeline, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except VrsniffError as exc:
        print(f"vrsniff: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"vrsniff: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
