"""Command-line entry point (``plumescan <subcommand>``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ToolkitConfig, derive_seed, dump_toml, load_config, with_overrides
from .detector import DETECTION_SCHEMA_VERSION, DetectionSet, export_detections, import_detections
from .evaluate import (DEFAULT_THETA, SWEEP_PARAMS, SweepCase, instance_metrics, map_at_iou,
                       match_instances, parse_grid, pixel_metrics, sweep, sweep_csv, union_semantic)
from .forest import MODEL_VERSION, RandomForestModel, rf_predict, rf_train
from .postproc import filter_confidence, run_mode
from .probmap import aggregate, correlation_report
from .qnd import FEATURE_ORDER, QndError, extract_features
from .raster import SGRID_VERSION, load_scene, save_probability, save_scene
from .synthgen import PlumeLabel, generate_scene

log = logging.getLogger("plumescan")

DEFAULT_GRIDS = {"tau": "0:1:0.05", "delta": "0.05:0.6:0.05", "theta": "0.1:0.9:0.1"}
MODE_NAMES = {"baseline": "baseline", "high-sensitivity": "high_sensitivity",
              "high-precision": "high_precision"}


class UsageError(Exception):
    pass


def bundled_model_path() -> Path:
    return Path(str(resources.files("plumescan") / "data" / "qnd_model.json"))


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------

def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def save_labels(labels, path) -> None:
    _write_json(path, [lab.to_json() for lab in labels])


def load_labels(path) -> list[PlumeLabel]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, list):
        raise ValueError(f"{path}: expected a JSON list of labels")
    try:
        return [PlumeLabel.from_json(d) for d in doc]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: label schema violation ({exc})") from None


def load_model(path: str | None) -> RandomForestModel:
    p = Path(path) if path else bundled_model_path()
    try:
        return RandomForestModel.load(p)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{p}: invalid model file ({exc})") from None


def _toolkit(args) -> ToolkitConfig:
    tk = load_config(args.config) if getattr(args, "config", None) else ToolkitConfig()
    mode = getattr(args, "mode", None)
    size_floor = getattr(args, "size_floor", None)
    qnd_model = getattr(args, "qnd_model", None)
    overrides = {
        "run": {"seed": getattr(args, "seed", None)},
        "tiler": {"patch_size": getattr(args, "patch_size", None),
                  "overlap": getattr(args, "overlap", None),
                  "workers": getattr(args, "workers", None)},
        "detector": {"k": getattr(args, "k", None)},
        "postproc": {"mode": MODE_NAMES[mode] if mode else None,
                     "tau": getattr(args, "tau", None),
                     "delta": getattr(args, "delta", None),
                     "fiber_ratio": getattr(args, "fiber_ratio", None),
                     "size_floor": size_floor,
                     "hp_filter": "size" if size_floor is not None else ("qnd" if qnd_model else None)},
        "qnd": {"model": qnd_model},
        "eval": {"theta": getattr(args, "theta", None)},
    }
    return with_overrides(tk, overrides)


def _classifier(tk: ToolkitConfig):
    cfg = tk.pipeline()
    if cfg.mode == "high_precision" and cfg.hp_filter == "qnd":
        return load_model(tk.qnd.model or None)
    return None


def _load_dets(path, scene=None) -> DetectionSet:
    dets = import_detections(path)
    if scene is not None and dets.geometry.shape != scene.shape:
        raise ValueError(f"{path}: detection grid {dets.geometry.shape} does not match scene {scene.shape}")
    return dets


def _metrics_doc(preds, truths, geometry, theta, mode, cfg) -> dict:
    m = match_instances(preds, truths, theta)
    mp = map_at_iou(preds, truths, theta) if truths else None
    rep = instance_metrics(m, mode=mode, thresholds=(cfg.tau, cfg.delta, theta), map_value=mp)
    p, r, f = pixel_metrics(union_semantic(preds, geometry), union_semantic(truths, geometry))
    doc = rep.to_json()
    doc["pixel"] = {"precision": p, "recall": r, "f1": f}
    doc["pairs"] = [[i, j, iou] for i, j, iou in m.pairs]
    return doc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    tk = _toolkit(args)
    scfg = tk.synth_config()
    scene, labels, artifacts = generate_scene(scfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene.sgrid")
    save_labels(labels, out / "labels.json")
    _write_json(out / "artifacts.json", [a.to_json() for a in artifacts])
    print(f"synth: {scene.shape[0]}x{scene.shape[1]} scene, {len(labels)} plumes, "
          f"{len(artifacts)} artifacts -> {out}")


def cmd_run(args) -> None:
    tk = _toolkit(args)
    scene = load_scene(args.scene)
    if args.detector == "oracle":
        from .benchmark import detect
        dets = DetectionSet(scene.geometry, detect(scene, tk))
    elif args.detector.startswith("import:"):
        dets = _load_dets(args.detector[len("import:"):], scene)
    else:
        raise UsageError(f"unknown detector {args.detector!r}; use oracle or import:<file>")
    export_detections(dets, args.out)
    print(f"run: {len(dets)} detections -> {args.out}")


def cmd_postprocess(args) -> None:
    tk = _toolkit(args)
    scene = load_scene(args.scene) if args.scene else None
    dets = _load_dets(args.inp, scene)
    cfg = tk.pipeline()
    if cfg.mode == "high_precision" and cfg.hp_filter == "qnd" and scene is None:
        raise UsageError("high-precision QND filtering needs --scene")
    out = run_mode(dets.instances, scene, cfg, _classifier(tk))
    export_detections(DetectionSet(dets.geometry, tuple(out)), args.out)
    print(f"postprocess[{cfg.mode}]: {len(dets)} -> {len(out)} detections -> {args.out}")


def cmd_qnd_features(args) -> None:
    from .benchmark import build_training_set
    tk = _toolkit(args)
    X, y = build_training_set(args.n_scenes, tk)
    buf = [",".join(FEATURE_ORDER + ("label",))]
    for row, lab in zip(X, y):
        buf.append(",".join(repr(float(v)) for v in row) + ("," + ("plume" if lab else "artifact")))
    _write_text(args.out, "\n".join(buf) + "\n")
    print(f"qnd-features: {len(y)} samples ({int(y.sum())} plume, {int(len(y) - y.sum())} artifact) -> {args.out}")


def read_feature_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty feature file")
    header = rows[0]
    if tuple(header[:-1]) != FEATURE_ORDER or header[-1] != "label":
        raise ValueError(f"{path}: header must be {','.join(FEATURE_ORDER)},label")
    X, y = [], []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} fields")
        try:
            X.append([float(v) for v in row[:-1]])
        except ValueError:
            raise ValueError(f"{path}:{n}: non-numeric feature") from None
        lab = row[-1].strip()
        if lab not in ("plume", "artifact", "1", "0"):
            raise ValueError(f"{path}:{n}: label must be plume or artifact")
        y.append(1 if lab in ("plume", "1") else 0)
    return np.asarray(X, dtype=np.float64).reshape(-1, len(FEATURE_ORDER)), np.asarray(y, dtype=np.int64)


def cmd_qnd_train(args) -> None:
    tk = _toolkit(args)
    X, y = read_feature_csv(args.features)
    n_trees = args.n_trees or tk.qnd.n_trees
    depth = args.max_depth or tk.qnd.max_depth
    seed = args.seed if args.seed is not None else derive_seed(tk.run.seed, "qnd-forest")
    model = rf_train(X, y, n_trees=n_trees, max_depth=depth, seed=seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"qnd-train: {n_trees} trees on {len(y)} samples, OOB accuracy {model.oob_accuracy:.3f} -> {args.out}")


def cmd_qnd_classify(args) -> None:
    tk = _toolkit(args)
    scene = load_scene(args.scene)
    dets = _load_dets(args.inp, scene)
    model = load_model(args.model or tk.qnd.model or None)
    q = tk.qnd
    rows = []
    for i, d in enumerate(dets.instances):
        try:
            f = extract_features(scene, d.mask, q.eps, q.min_pts, q.percentile)
        except QndError as exc:
            rows.append({"index": i, "class": "artifact", "probability": 0.0, "reason": str(exc)})
            continue
        cls, prob = rf_predict(model, f.to_array())
        rows.append({"index": i, "class": cls, "probability": prob,
                     "features": dict(zip(FEATURE_ORDER, f.to_array().tolist()))})
    if args.out:
        _write_json(args.out, {"classifications": rows})
    n_plume = sum(r["class"] == "plume" for r in rows)
    print(f"qnd-classify: {n_plume} plume, {len(rows) - n_plume} artifact")


def _probmap_input(dets, scene, tk: ToolkitConfig, classifier=None):
    if tk.probmap.stage == "pre_nms":
        return filter_confidence(dets, tk.postproc.tau)
    if tk.probmap.stage == "final":
        return run_mode(dets, scene, tk.pipeline(), classifier)
    raise ConfigError(f"unknown probmap stage {tk.probmap.stage!r}")


def cmd_probmap(args) -> None:
    tk = _toolkit(args)
    if args.stage:
        tk = with_overrides(tk, {"probmap": {"stage": args.stage}})
    scene = load_scene(args.scene)
    dets = _load_dets(args.inp, scene)
    prob = aggregate(_probmap_input(dets.instances, scene, tk, _classifier(tk)), scene.geometry)
    save_probability(prob.values, scene.geometry, args.out)
    if args.png:
        from .plotting import plot_probability
        plot_probability(prob.values, args.png)
    try:
        corr = correlation_report(prob, scene)
        summary = f"pearson {corr.pearson:.3f}, spearman {corr.spearman:.3f}, n={corr.n}"
        doc = corr.to_json()
    except ValueError as exc:
        summary, doc = str(exc), {"error": str(exc)}
    if args.report:
        _write_json(args.report, doc)
    print(f"probmap: {int((prob.values > 0).sum())} covered pixels; {summary} -> {args.out}")


def cmd_eval(args) -> None:
    tk = _toolkit(args)
    dets = _load_dets(args.pred)
    truths = load_labels(args.truth)
    theta = tk.eval.theta
    doc = _metrics_doc(list(dets.instances), truths, dets.geometry, theta, "", tk.pipeline())
    if args.report:
        _write_json(args.report, doc)
    print(f"eval: TP {doc['TP']} FP {doc['FP']} FN {doc['FN']}  P {doc['precision']:.3f} "
          f"R {doc['recall']:.3f} F1 {doc['f1']:.3f}")


def _sweep_reports(cases, params, grids, tk, classifier):
    reports = []
    for param in params:
        grid = parse_grid(grids.get(param) or DEFAULT_GRIDS[param])
        reports += sweep(cases, param, grid, tk.pipeline(), tk.eval.theta, classifier)
    return reports


def cmd_sweep(args) -> None:
    tk = _toolkit(args)
    classifier = _classifier(tk)
    if args.benchmark:
        from .benchmark import benchmark_cases
        cases = [SweepCase(c.detections, c.labels, c.scene) for c in benchmark_cases(args.benchmark, tk)]
    else:
        if not (args.inp and args.truth):
            raise UsageError("sweep needs --in and --truth (or --benchmark N)")
        scene = load_scene(args.scene) if args.scene else None
        cases = [SweepCase(_load_dets(args.inp, scene).instances, load_labels(args.truth), scene)]
    params = [p.strip() for p in args.param.split(",")]
    for p in params:
        if p not in SWEEP_PARAMS:
            raise UsageError(f"unknown sweep parameter {p!r}")
    grids = {params[0]: args.grid} if args.grid and len(params) == 1 else {}
    reports = _sweep_reports(cases, params, grids, tk, classifier)
    _write_text(args.out, sweep_csv(reports))
    if args.png:
        from .plotting import plot_sweep
        plot_sweep(reports, args.png)
    print(f"sweep: {len(reports)} grid points -> {args.out}")


def cmd_benchmark(args) -> None:
    from .benchmark import benchmark_cases, evaluate_modes
    tk = _toolkit(args)
    model = load_model(tk.qnd.model or None) if tk.postproc.hp_filter == "qnd" else None
    cases = list(benchmark_cases(args.n_scenes, tk))
    reports = evaluate_modes(cases, tk, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["mode,TP,FP,FN,precision,recall,f1,map"]
    for mode, r in reports.items():
        lines.append(f"{mode},{r.TP},{r.FP},{r.FN},{r.precision!r},{r.recall!r},{r.f1!r},{r.map_at_iou!r}")
        print(f"{mode:17s} TP {r.TP:3d} FP {r.FP:3d} FN {r.FN:3d}  P {r.precision:.3f} "
              f"R {r.recall:.3f} F1 {r.f1:.3f} mAP {r.map_at_iou:.3f}")
    _write_text(out / "modes.csv", "\n".join(lines) + "\n")
    if args.figures:
        from .plotting import plot_modes
        plot_modes(reports, out / "modes.png")


def cmd_pipeline(args) -> None:
    """synth (unless --scene) -> run -> postprocess -> probmap -> eval, into one directory."""
    from .benchmark import detect
    tk = _toolkit(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scene:
        scene = load_scene(args.scene)
        truths = load_labels(args.truth) if args.truth else []
    else:
        if args.truth:
            raise UsageError("--truth requires --scene")
        scene, truths, artifacts = generate_scene(tk.synth_config())
        save_scene(scene, out / "scene.sgrid")
        _write_json(out / "artifacts.json", [a.to_json() for a in artifacts])
    save_labels(truths, out / "labels.json")
    _write_text(out / "config.toml", dump_toml(tk))

    raw = DetectionSet(scene.geometry, detect(scene, tk))
    export_detections(raw, out / "detections_raw.json")
    cfg = tk.pipeline()
    classifier = _classifier(tk)
    final = run_mode(raw.instances, scene, cfg, classifier)
    export_detections(DetectionSet(scene.geometry, tuple(final)), out / "detections.json")

    prob = aggregate(_probmap_input(raw.instances, scene, tk, classifier), scene.geometry)
    save_probability(prob.values, scene.geometry, out / "probability.pgrid")

    report = {"mode": cfg.mode, "n_raw": len(raw), "n_final": len(final),
              "seed": tk.run.seed, "versions": _versions()}
    if truths:
        report["metrics"] = _metrics_doc(final, truths, scene.geometry, tk.eval.theta, cfg.mode, cfg)
    try:
        report["probability_correlation"] = correlation_report(prob, scene).to_json()
    except ValueError as exc:
        report["probability_correlation"] = {"error": str(exc)}
    _write_json(out / "report.json", report)

    sweep_reports = None
    if args.sweep and truths:
        params = [p.strip() for p in args.sweep.split(",")]
        sweep_reports = _sweep_reports([SweepCase(raw.instances, truths, scene)], params, {}, tk, classifier)
        _write_text(out / "sweep.csv", sweep_csv(sweep_reports))
    if args.figures:
        from .plotting import plot_probability, plot_scene, plot_sweep
        plot_scene(scene, out / "scene.png", final, truths, title=f"{cfg.mode}: {len(final)} detections")
        plot_probability(prob.values, out / "probability.png")
        if sweep_reports:
            plot_sweep(sweep_reports, out / "sweep.png")

    msg = f"pipeline[{cfg.mode}]: {len(raw)} raw -> {len(final)} final detections"
    if truths:
        m = report["metrics"]
        msg += f"; TP {m['TP']} FP {m['FP']} FN {m['FN']} P {m['precision']:.3f} R {m['recall']:.3f}"
    print(msg + f" -> {out}")


def _versions() -> dict:
    return {"toolkit": __version__, "detections": DETECTION_SCHEMA_VERSION,
            "sgrid": SGRID_VERSION, "model": MODEL_VERSION}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_postproc_flags(p, with_model: bool = True):
    p.add_argument("--mode", choices=sorted(MODE_NAMES))
    p.add_argument("--tau", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--fiber-ratio", type=float)
    if with_model:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--size-floor", type=float, help="high-precision by mask area instead of QND")
        g.add_argument("--qnd-model", help="QND model JSON (default: bundled model)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plumescan", description=__doc__)
    v = _versions()
    ap.add_argument("--version", action="version",
                    version=f"plumescan {v['toolkit']} (detections schema {v['detections']}, "
                            f"SGRID {v['sgrid']}, QND model {v['model']})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML configuration file")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a labeled synthetic scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("run", cmd_run, "sliding-window detection over a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--detector", default="oracle", help="oracle | import:<detections.json>")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--k", type=float, help="oracle threshold in patch standard deviations")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)

    p = add("postprocess", cmd_postprocess, "apply an operating mode to detections")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--scene")
    _add_postproc_flags(p)
    p.add_argument("--out", required=True)

    p = add("qnd-features", cmd_qnd_features, "build a labeled QND feature CSV from synthetic scenes")
    p.add_argument("--n-scenes", type=int, default=30)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("qnd-train", cmd_qnd_train, "train the plume/artifact random forest")
    p.add_argument("--features", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-trees", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--out", required=True)

    p = add("qnd-classify", cmd_qnd_classify, "classify detections as plume or artifact")
    p.add_argument("--model")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")

    p = add("probmap", cmd_probmap, "confidence-weighted probability map")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--stage", choices=["pre_nms", "final"])
    _add_postproc_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.add_argument("--report")

    p = add("eval", cmd_eval, "instance and pixel metrics against labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--report")

    p = add("sweep", cmd_sweep, "threshold sweep to CSV")
    p.add_argument("--param", required=True, help="tau, delta, theta or a comma list")
    p.add_argument("--grid", help="start:stop:step or comma list")
    p.add_argument("--in", dest="inp")
    p.add_argument("--truth")
    p.add_argument("--scene")
    p.add_argument("--benchmark", type=int, metavar="N", help="sweep over N synthetic benchmark scenes")
    p.add_argument("--theta", type=float)
    p.add_argument("--seed", type=int)
    _add_postproc_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--png")

    p = add("benchmark", cmd_benchmark, "all three modes on the synthetic benchmark")
    p.add_argument("--n-scenes", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--theta", type=float)
    _add_postproc_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true")

    p = add("pipeline", cmd_pipeline, "synth/run/postprocess/probmap/eval end to end")
    p.add_argument("--scene")
    p.add_argument("--truth")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--theta", type=float)
    _add_postproc_flags(p)
    p.add_argument("--sweep", help="comma list of tau,delta,theta to sweep with default grids")
    p.add_argument("--figures", action="store_true", help="render PNG figures next to the outputs")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"plumescan: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        name = exc.filename or ""
        print(f"plumescan: error: {exc.strerror or exc}: {name}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"plumescan: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
