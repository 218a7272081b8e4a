"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad flag, bad config, malformed
data), 2 I/O error (missing or unreadable file).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .core import CLASS_NAMES, Provenance
from .detector import DetectorConfig, detect, load_model, save_model, train_source
from .evaluation import METRICS, EvalConfig, metric_report, pr_curves, write_metrics, write_pr_csv
from .ingest import (
    DatasetError,
    build_all_stores,
    load_manifest,
    load_scenes,
    read_boxes,
    write_boxes,
)
from .parallel import pmap, set_threads
from .ppscore import PPConfig, read_tau, score_scene, write_tau
from .refine import FilterConfig, refine_pseudo_labels
from .selftrain import (
    ROUNDS_HEADER,
    config_from_dict,
    read_rounds_csv,
    run_adaptation,
    write_rounds_csv,
)
from .synthgen import generate_dataset, shift_from_dict, world_from_dict

log = logging.getLogger("traverse_da")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; route it to the validation code instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path) -> object:
    p = Path(path)
    text = p.read_text(encoding="utf-8")  # OSError propagates as an I/O failure
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{p}: not valid JSON ({e})") from None


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def dataclass_from_dict(cls, d, what: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ValueError(f"{what} config must be a JSON object")
    bad = set(d) - {f.name for f in fields(cls)}
    if bad:
        raise ValueError(f"unknown {what} config keys: {sorted(bad)}")
    return cls(**{k: _tuplify(v) for k, v in d.items()})


def _config(args) -> dict:
    return {} if args.config is None else _read_json(args.config)


def _section(cfg, key, cls):
    return dataclass_from_dict(cls, cfg.get(key) if isinstance(cfg, dict) else None, key)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command}: missing required flag --{n.replace('_', '-')}")


def _scenes(root, threads, labelled: bool = False, require_pp: bool = False):
    manifest = load_manifest(root, require_pp=require_pp)
    scenes = load_scenes(manifest, threads)
    if labelled:
        missing = [s.scene_id for s in scenes if s.gt_boxes is None]
        if missing:
            raise DatasetError(f"{root}: scenes without labels: {missing[:5]}")
    return manifest, scenes


# --- subcommands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    """Config: WorldSpec fields, or {"world": {...}, "shift": {...}}."""
    _require(args, "out")
    cfg = _config(args)
    if not isinstance(cfg, dict):
        raise ValueError("world config must be a JSON object")
    if "world" in cfg or "shift" in cfg:
        world = world_from_dict(cfg.get("world", {}))
        shift = shift_from_dict(cfg["shift"]) if cfg.get("shift") is not None else None
    else:
        world, shift = world_from_dict(cfg), None
    if args.seed is not None:
        world = replace(world, seed=args.seed)
    manifest = generate_dataset(world, shift, args.out, threads=args.threads)
    print(f"wrote {len(manifest.scenes)} scenes over {len(manifest.locations)} locations to {args.out}")
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    _require(args, "root")
    manifest = load_manifest(args.root, require_pp=args.require_pp)
    scenes = load_scenes(manifest, args.threads)
    labelled = sum(s.gt_boxes is not None for s in scenes)
    points = sum(len(s.cloud) for s in scenes)
    travs = {lid: len(t) for lid, t in manifest.locations.items()}
    if args.require_pp:
        build_all_stores(manifest, threads=args.threads)
    print(json.dumps({"locations": travs, "scenes": len(scenes), "labelled_scenes": labelled, "points": points}))
    return EXIT_OK


def cmd_ppscore(args) -> int:
    _require(args, "root", "out")
    pp = _section(_config(args), "pp", PPConfig)
    manifest, scenes = _scenes(args.root, args.threads, require_pp=True)
    stores = build_all_stores(manifest, pp.max_traversals, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields_ = pmap(lambda s: score_scene(s, stores, pp, threads=1), scenes, args.threads)
    for s, f in zip(scenes, fields_):
        write_tau(out / f"{s.scene_id}.tau.json", f.tau)
    print(f"scored {len(scenes)} scenes into {out}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    _require(args, "root", "out")
    det = _section(_config(args), "detector", DetectorConfig)
    _, scenes = _scenes(args.root, args.threads, labelled=True)
    model = train_source(scenes, det, threads=args.threads)
    save_model(model, args.out)
    print(f"trained on {len(scenes)} scenes; model written to {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    _require(args, "model", "root", "out")
    det = _section(_config(args), "detector", DetectorConfig)
    model = load_model(args.model)
    _, scenes = _scenes(args.root, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dets = pmap(lambda s: detect(model, s, det), scenes, args.threads)
    for s, d in zip(scenes, dets):
        write_boxes(out / f"{s.scene_id}.boxes.json", d)
    print(f"{sum(map(len, dets))} detections over {len(scenes)} scenes written to {out}")
    return EXIT_OK


def cmd_refine(args) -> int:
    _require(args, "root", "detections", "tau", "out")
    cfg = _config(args)
    fcfg = _section(cfg, "filter", FilterConfig)
    if args.source_model is not None:
        stats = load_model(args.source_model).source_stats
        if stats:
            fcfg = replace(fcfg, source_class_counts=tuple(stats["class_counts"]),
                           source_scene_count=int(stats["scene_count"]))
    _, scenes = _scenes(args.root, args.threads)
    det_dir, tau_dir = Path(args.detections), Path(args.tau)
    detections, points, taus = {}, {}, {}
    for s in scenes:
        detections[s.scene_id] = read_boxes(det_dir / f"{s.scene_id}.boxes.json", Provenance.DETECTION)
        points[s.scene_id] = s.world_cloud().points
        taus[s.scene_id] = read_tau(tau_dir / f"{s.scene_id}.tau.json")
        if len(taus[s.scene_id]) != len(points[s.scene_id]):
            raise DatasetError(f"{tau_dir / (s.scene_id + '.tau.json')}: length does not match the scene cloud")
    pseudo, report = refine_pseudo_labels(detections, points, taus, fcfg, len(scenes),
                                          enable_fbf=not args.no_fbf, enable_pof=not args.no_pof)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, boxes in pseudo.items():
        write_boxes(out / f"{sid}.pseudo.json", boxes)
    report.write(out / "filter_report.json")
    kept = sum(map(len, pseudo.values()))
    print(f"kept {kept} of {sum(map(len, detections.values()))} detections; report in {out / 'filter_report.json'}")
    return EXIT_OK


def cmd_selftrain(args) -> int:
    _require(args, "source_model", "target_root", "out_dir")
    cfg = config_from_dict(_config(args))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    model = load_model(args.source_model)
    manifest, targets = _scenes(args.target_root, args.threads, require_pp=cfg.enable_fbf or cfg.enable_fbs)
    stores = build_all_stores(manifest, cfg.pp.max_traversals, threads=args.threads) if (cfg.enable_fbf or cfg.enable_fbs) else None
    evals = None
    if args.eval_root is not None:
        _, evals = _scenes(args.eval_root, args.threads, labelled=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1) + "\n", encoding="utf-8")

    def on_round(entry, m):
        save_model(m, out / f"round_{entry.round}.model.json")
        log.info("round %d: pseudo-labels %s loss %.6f", entry.round, entry.pseudo_counts, entry.loss)

    _, logs = run_adaptation(model, targets, stores, cfg, evals, threads=args.threads, on_round=on_round)
    if evals is not None:
        write_rounds_csv(out / "rounds.csv", logs)
    with open(out / "pseudo_counts.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("round",) + CLASS_NAMES + ("loss",))
        for entry in logs[1:]:
            w.writerow([entry.round, *entry.pseudo_counts, f"{entry.loss:.6f}"])
    print(f"{cfg.rounds} rounds ({cfg.variant}) written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "model", "root", "out_dir")
    cfg = _config(args)
    det = _section(cfg, "detector", DetectorConfig)
    ecfg = _section(cfg, "eval", EvalConfig)
    model = load_model(args.model)
    _, scenes = _scenes(args.root, args.threads, labelled=True)
    dets = dict(zip((s.scene_id for s in scenes), pmap(lambda s: detect(model, s, det), scenes, args.threads)))
    gts = {s.scene_id: list(s.gt_boxes) for s in scenes}
    poses = {s.scene_id: s.sensor_pose for s in scenes}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = metric_report(dets, gts, poses, ecfg)
    write_metrics(out / "metrics.json", report)
    for cls, curve in pr_curves(dets, gts, poses, ecfg).items():
        write_pr_csv(out / f"pr_{cls}.csv", curve)
    print(json.dumps({c: report[c][ecfg.bin_names[-1]] for c in CLASS_NAMES}))
    return EXIT_OK


TOGGLES = (("PO-F", "enable_pof"), ("FB-F", "enable_fbf"), ("FB-S", "enable_fbs"))


def _fmt(v) -> str:
    return "-" if v in (None, "", "nan") else f"{float(v):.3f}"


def build_report(runs, metrics=None, metric: str = "ap_bev_loose"):
    """Markdown text and long-format rows from one or more rounds.csv files.

    ``runs`` is a list of (name, rows, toggles-or-None).
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    md = [f"# Self-training report ({metric})", ""]
    long_rows = []
    for name, rows, _ in runs:
        for r in rows:
            long_rows.append([name, r["round"], r["class"], r["depth_bin"]] + [r[m] for m in METRICS])
    for cls in CLASS_NAMES:
        bins = []
        for _, rows, _ in runs:
            for r in rows:
                if r["class"] == cls and r["depth_bin"] not in bins:
                    bins.append(r["depth_bin"])
        if not bins:
            continue
        md.append(f"## {cls}")
        md.append("")
        for name, rows, toggles in runs:
            table = {}
            for r in rows:
                if r["class"] == cls:
                    table.setdefault(int(r["round"]), {})[r["depth_bin"]] = r[metric]
            title = name if toggles is None else f"{name} ({', '.join(k for k, on in toggles.items() if on) or 'vanilla'})"
            md.append(f"### {title}")
            md.append("")
            md.append("| round | " + " | ".join(bins) + " |")
            md.append("|---" * (len(bins) + 1) + "|")
            for rnd in sorted(table):
                md.append(f"| {rnd} | " + " | ".join(_fmt(table[rnd].get(b)) for b in bins) + " |")
            md.append("")
        if len(runs) > 1:
            md.append("### Ablation (final round)")
            md.append("")
            md.append("| run | PO-F | FB-F | FB-S | " + " | ".join(bins) + " |")
            md.append("|---" * (len(bins) + 4) + "|")
            for name, rows, toggles in runs:
                last = max((int(r["round"]) for r in rows), default=0)
                vals = {r["depth_bin"]: r[metric] for r in rows if r["class"] == cls and int(r["round"]) == last}
                marks = ["✓" if toggles and toggles.get(k) else ("" if toggles else "?") for k, _ in TOGGLES]
                md.append(f"| {name} | " + " | ".join(marks) + " | " + " | ".join(_fmt(vals.get(b)) for b in bins) + " |")
            md.append("")
    if metrics is not None:
        md.append("## Final evaluation")
        md.append("")
        for cls in CLASS_NAMES:
            if cls not in metrics:
                continue
            bins = list(metrics[cls])
            md.append(f"### {cls}")
            md.append("")
            md.append("| metric | " + " | ".join(bins) + " |")
            md.append("|---" * (len(bins) + 1) + "|")
            for m in METRICS:
                md.append(f"| {m} | " + " | ".join(_fmt(metrics[cls][b].get(m)) for b in bins) + " |")
            md.append("")
    return "\n".join(md), long_rows


def cmd_report(args) -> int:
    _require(args, "rounds", "out_dir")
    runs = []
    for i, path in enumerate(args.rounds):
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"rounds file not found: {p}")
        rows = read_rounds_csv(p)
        toggles = None
        cfg_path = p.parent / "config.json"
        if cfg_path.is_file():
            doc = _read_json(cfg_path)
            toggles = {k: bool(doc.get(field_, True)) for k, field_ in TOGGLES}
        name = args.names[i] if args.names and i < len(args.names) else (p.parent.name or f"run{i}")
        runs.append((name, rows, toggles))
    if args.names and len(args.names) != len(args.rounds):
        raise UsageError("report: --names must give one name per --rounds file")
    metrics = None
    if args.metrics is not None:
        if not Path(args.metrics).is_file():
            raise FileNotFoundError(f"metrics file not found: {args.metrics}")
        metrics = _read_json(args.metrics)
    text, long_rows = build_report(runs, metrics, args.metric)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text + "\n", encoding="utf-8")
    with open(out / "rounds_long.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("run",) + ROUNDS_HEADER)
        w.writerows(long_rows)
    print(f"report written to {out / 'report.md'}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (default: $TRAVERSE_DA_THREADS or 1)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="traverse-da", description="Domain adaptation for LiDAR detection from repeated traversals.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic multi-traversal dataset")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("ingest-check", parents=[common], help="validate a dataset and print a summary")
    c.add_argument("--root")
    c.add_argument("--require-pp", action="store_true", help="also require >= 2 traversals per location")
    c.set_defaults(func=cmd_ingest_check)

    s = sub.add_parser("ppscore", parents=[common], help="write per-scene PP-score sidecars")
    s.add_argument("--root")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ppscore)

    d = sub.add_parser("detect", parents=[common], help="run a model on every scene")
    d.add_argument("--model")
    d.add_argument("--root")
    d.add_argument("--out")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("refine", parents=[common], help="filter detections into pseudo-labels")
    r.add_argument("--root")
    r.add_argument("--detections", help="directory of <scene>.boxes.json")
    r.add_argument("--tau", help="directory of <scene>.tau.json")
    r.add_argument("--source-model", help="take PO-F source statistics from this model")
    r.add_argument("--no-fbf", action="store_true")
    r.add_argument("--no-pof", action="store_true")
    r.add_argument("--out")
    r.set_defaults(func=cmd_refine)

    t = sub.add_parser("train-source", parents=[common], help="fit a detector on labelled scenes")
    t.add_argument("--root")
    t.add_argument("--out", help="model file to write")
    t.set_defaults(func=cmd_train_source)

    a = sub.add_parser("selftrain", parents=[common], help="adapt a source model to an unlabelled target")
    a.add_argument("--source-model")
    a.add_argument("--target-root")
    a.add_argument("--eval-root")
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_selftrain)

    e = sub.add_parser("evaluate", parents=[common], help="score a model on a labelled split")
    e.add_argument("--model")
    e.add_argument("--root")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", parents=[common], help="markdown + CSV summary of self-training runs")
    rp.add_argument("--rounds", nargs="+", help="one or more rounds.csv files")
    rp.add_argument("--names", nargs="+", help="display name per rounds file")
    rp.add_argument("--metrics", help="metrics.json from evaluate")
    rp.add_argument("--metric", default="ap_bev_loose", choices=METRICS)
    rp.add_argument("--out-dir")
    rp.set_defaults(func=cmd_report)
    return p


GLOBAL_DEFAULTS = {"config": None, "seed": None, "threads": None, "verbose": False, "command": None}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for k, v in GLOBAL_DEFAULTS.items():
            if not hasattr(args, k):
                setattr(args, k, v)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("traverse-da: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    finally:
        set_threads(None)


if __name__ == "__main__":
    sys.exit(main())
