"""``petrel`` command-line interface.

Subcommands: generate, train, infer, evaluate, observers, plot. Every command
writes a ``*.manifest.json`` next to its outputs recording the resolved
configuration, and exits non-zero with a single ``petrel: error: ...`` line on
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from petrel import __version__, detection, inference, observer, plotting, synthgen, training
from petrel.raster import load_labels, load_raster, save_labels, save_raster
from petrel.unet import UNetConfig, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("petrel")

PRESETS = {
    "desk": UNetConfig(in_channels=5, depth=2, base_channels=8, input_size=108),
    "paper": UNetConfig(),
}

DEFAULTS = {
    "unet": asdict(PRESETS["desk"]),
    "train": training.TrainConfig().to_dict(),
    "loss": {"gamma": 1.0},
    "dataset": {"per_scene_patches": 70, "labels": "truth"},
}


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _env_seed() -> int | None:
    raw = os.environ.get("PETREL_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise CliError(f"PETREL_SEED must be an integer, got {raw!r}") from exc


def _write_manifest(path: Path, command: str, config: dict, inputs, outputs, seed, started: float) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _validate_outputs(paths) -> None:
    for p in paths:
        p = Path(p)
        if not p.is_file() or p.stat().st_size == 0:
            raise CliError(f"output {p} was not written")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing input {path}")
    return path


def _raster_files(stem: Path) -> list[Path]:
    name = stem.name
    for suffix in (".hdr.json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return [stem.with_name(name + ".hdr.json"), stem.with_name(name + ".bin")]


def _load_heatmap(path) -> np.ndarray:
    _require(_raster_files(Path(path))[0])
    r = load_raster(path)
    if len(r.bands) != 1:
        raise CliError(f"heatmap {path} must have one band, has {len(r.bands)}")
    return r.pixels[0].astype(np.float64)


def _curve_xy(curve) -> list[tuple[float, float]]:
    return [(p.recall, p.precision) for p in curve]


# ----------------------------------------------------------------- generate

def _scene_specs(spec: dict) -> list[dict]:
    scenes = spec["scenes"] if "scenes" in spec else [spec]
    if not scenes:
        raise CliError("spec lists no scenes")
    return scenes


def cmd_generate(args):
    spec_path = _require(args.spec)
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid JSON in {spec_path}: {exc}") from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env_seed = _env_seed()
    written, resolved = [], []
    for k, scene in enumerate(_scene_specs(spec)):
        scene = dict(scene)
        name = scene.pop("name", f"scene{k}")
        observers = scene.pop("observers", [])
        if env_seed is not None:
            scene["seed"] = env_seed + k
        try:
            sspec = synthgen.SceneSpec(**scene)
            models = [(o.get("id", f"obs{i + 1}"),
                       synthgen.ObserverModel(**{key: v for key, v in o.items() if key != "id"}))
                      for i, o in enumerate(observers)]
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid scene spec {name!r}: {exc}") from exc
        raster, truth = synthgen.generate_scene(sspec)
        save_raster(raster, out / name)
        written += _raster_files(out / name)
        save_labels(truth, out / f"{name}.truth.csv")
        written.append(out / f"{name}.truth.csv")
        for obs_id, model in models:
            labels = synthgen.simulate_observer(truth, raster, model, obs_id)
            path = out / f"{name}.{obs_id}.csv"
            save_labels(labels, path)
            written.append(path)
        resolved.append({"name": name, **sspec.to_dict(),
                         "observers": [{"id": i, **asdict(m)} for i, m in models]})
        log.info("scene %s: %d birds, %d observers", name, len(truth), len(models))
    return written, {"scenes": resolved}, [spec_path], out / f"{spec_path.stem}.generate.manifest.json", \
        [s["seed"] for s in resolved]


# -------------------------------------------------------------------- train

def _resolve_train_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.preset:
        cfg["unet"] = asdict(PRESETS[args.preset])
    if args.config:
        try:
            user = json.loads(_require(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"invalid JSON in {args.config}: {exc}") from exc
        for section, values in user.items():
            if section not in cfg:
                raise CliError(f"unknown config section {section!r}")
            cfg[section].update(values)
    env_seed = _env_seed()
    if env_seed is not None:
        cfg["train"]["seed"] = env_seed
    flag_map = {
        "epochs": ("train", "epochs"), "lr": ("train", "learning_rate"),
        "batch_size": ("train", "batch_size"), "seed": ("train", "seed"),
        "test_fraction": ("train", "test_fraction"), "gamma": ("loss", "gamma"),
        "input_size": ("unet", "input_size"), "depth": ("unet", "depth"),
        "base_channels": ("unet", "base_channels"),
        "per_scene_patches": ("dataset", "per_scene_patches"), "labels": ("dataset", "labels"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def _load_scenes(data_dir: Path, labels: str):
    scenes = []
    for hdr in sorted(data_dir.glob("*.hdr.json")):
        name = hdr.name[: -len(".hdr.json")]
        label_path = data_dir / f"{name}.{labels}.csv"
        if label_path.exists():
            scenes.append((name, load_raster(hdr), load_labels(label_path)))
    if not scenes:
        raise CliError(f"no scenes with {labels!r} labels in {data_dir}")
    return scenes


def cmd_train(args):
    data_dir = _require(args.data_dir)
    cfg = _resolve_train_config(args)
    try:
        ucfg = UNetConfig.from_dict(cfg["unet"])
        tcfg = training.TrainConfig(**cfg["train"])
        lcfg = training.FocalLossConfig(**cfg["loss"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    scenes = _load_scenes(data_dir, cfg["dataset"]["labels"])
    if args.exclude_scene and args.exclude_scene not in [s[0] for s in scenes]:
        raise CliError(f"--exclude-scene {args.exclude_scene!r} is not a scene in {data_dir}")
    cfg["dataset"]["exclude_scene"] = args.exclude_scene
    cfg["dataset"]["scenes"] = [s[0] for s in scenes]
    dataset = training.build_dataset(scenes, cfg["dataset"]["per_scene_patches"], ucfg, tcfg,
                                     exclude=args.exclude_scene)
    cfg["dataset"]["stats"] = {
        "train_patches": int(len(dataset.indices("train"))),
        "test_patches": int(len(dataset.indices("test"))),
        "train_positive_fraction": dataset.positive_fraction("train"),
        "test_positive_fraction": dataset.positive_fraction("test"),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = [data_dir] + ([Path(args.config)] if args.config else [])

    if args.sweep_gammas:
        gammas = [float(g) for g in args.sweep_gammas.split(",")]
        cfg["sweep"] = {"gammas": gammas, "replicates": args.replicates}
        rows, runs = training.gamma_sweep(dataset, gammas, args.replicates, ucfg, tcfg)
        training.write_sweep_csv(rows, out)
        runs_path = out.with_name(out.name + ".runs.csv")
        with open(runs_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gamma", "seed", "average_precision"])
            for r in runs:
                w.writerow([repr(float(r["gamma"])), r["seed"], repr(r["ap"])])
        for g in gammas:
            print(f"gamma={g:g} mean_average_precision={training.mean_ap(runs, g):.4f}")
        return [out, runs_path], cfg, inputs, out.with_name(out.name + ".manifest.json"), tcfg.seed

    params, loss_log = training.train(dataset, ucfg, tcfg, lcfg)
    save_checkpoint(params, ucfg, out)
    loss_path = out.with_name(out.name + ".loss.csv")
    training.write_loss_log(loss_log, loss_path)
    load_checkpoint(out, ucfg)
    if loss_log:
        print(f"final mean train loss {loss_log[-1][1]:.6g} after {len(loss_log)} epochs")
    return [out, out.with_name(out.name + ".bin"), loss_path], cfg, inputs, \
        out.with_name(out.name + ".manifest.json"), tcfg.seed


# -------------------------------------------------------------------- infer

def cmd_infer(args):
    ckpt = _require(args.checkpoint)
    params, ucfg = load_checkpoint(ckpt)
    raster = load_raster(_require(_raster_files(Path(args.raster))[0]))
    if len(raster.bands) != ucfg.in_channels:
        raise CliError(f"raster has {len(raster.bands)} bands, checkpoint expects {ucfg.in_channels}")
    plan = inference.plan_tiles(raster.width, raster.height, ucfg, offset=tuple(args.offset))
    heat = inference.infer_scene(params, raster, ucfg, plan)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_raster(inference.heatmap_raster(heat), out)
    files = _raster_files(out)
    load_raster(files[0])
    cfg = {"unet": ucfg.to_dict(), "tiles": len(plan.tiles), "stride": plan.stride,
           "offset": list(args.offset), "pad": list(plan.pad)}
    return files, cfg, [ckpt, args.raster], files[0].with_name(files[0].name.replace(".hdr.json", ".manifest.json")), None


# ----------------------------------------------------------------- evaluate

def _thresholds(extra: float | None) -> list[float]:
    grid = detection.default_thresholds()
    if extra is not None and extra not in grid:
        grid = sorted(grid + [extra])
    return grid


def cmd_evaluate(args):
    heat = _load_heatmap(args.heatmap)
    labels = load_labels(_require(args.labels))
    thresholds = _thresholds(args.threshold)
    curve = detection.pr_curve(heat, labels.points, thresholds, args.radius)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    detection.write_pr_csv(curve, out)
    written = [out]
    if args.threshold is not None:
        p = next(p for p in curve if p.threshold == args.threshold)
        print(f"threshold={p.threshold:g} tp={p.tp} fp={p.fp} fn={p.fn} "
              f"precision={p.precision:.4f} recall={p.recall:.4f} count={detection.count_estimate(p)}")
        if args.detections:
            detection.write_detections_csv(detection.extract_detections(heat, args.threshold), args.detections)
            written.append(Path(args.detections))
    if args.svg:
        Path(args.svg).write_text(plotting.pr_figure({labels.observer_id: _curve_xy(curve)}))
        written.append(Path(args.svg))
    cfg = {"thresholds": thresholds, "radius": args.radius, "operating_threshold": args.threshold}
    return written, cfg, [args.heatmap, args.labels], out.with_name(out.name + ".manifest.json"), None


# ---------------------------------------------------------------- observers

def cmd_observers(args):
    heat = _load_heatmap(args.heatmap) if args.heatmap else None
    label_sets = [load_labels(_require(p)) for p in args.labels]
    frame = (heat.shape[1], heat.shape[0]) if heat is not None else None
    try:
        study = observer.ObserverStudy(label_sets, heat, args.radius, frame=frame)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix = observer.observer_matrix(study)
    matrix_path = out / "observer_matrix.csv"
    observer.write_matrix_csv(study, matrix, matrix_path)
    written = [matrix_path]
    counts = {s.observer_id: len(s) for s in label_sets}
    if heat is not None:
        curves = observer.model_vs_observers(study)
        for name, curve in curves.items():
            path = out / f"pr_{name}.csv"
            detection.write_pr_csv(curve, path)
            written.append(path)
        report = observer.within_range_assessment(study, curves) if len(label_sets) >= 3 else {}
        report["counts"] = counts
        report_path = out / "report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        written.append(report_path)
        svg_path = out / "observers.svg"
        svg_path.write_text(_observer_svg(study.ids, matrix, curves))
        written.append(svg_path)
        if report:
            print(f"model within inter-observer range for {report['n_within_range']} of "
                  f"{report['n_truth_sets']} truth sets")
    cfg = {"radius": args.radius, "observers": study.ids, "counts": counts}
    return written, cfg, [args.heatmap] + list(args.labels), out / "observers.manifest.json", None


def _observer_svg(ids, matrix, curves) -> str:
    points = {}
    for j, name in enumerate(ids):
        points[name] = [(matrix[j, i, 1], matrix[j, i, 0]) for i in range(len(ids)) if i != j]
    return plotting.pr_figure({n: _curve_xy(c) for n, c in curves.items()}, points,
                              "model (lines) and observers (points) per ground-truth set")


# --------------------------------------------------------------------- plot

def cmd_plot(args):
    curves = {}
    for item in args.pr:
        name, _, path = item.rpartition("=")
        path = _require(path)
        curves[name or path.stem] = detection.read_pr_csv(path)
    points = {}
    if args.matrix:
        for row in observer.read_matrix_csv(_require(args.matrix)):
            if row["observer_as_truth"] == row["observer_as_detector"]:
                continue
            points.setdefault(row["observer_as_truth"], []).append((row["recall"], row["precision"]))
    if not curves and not points:
        raise CliError("nothing to plot: pass --pr and/or --matrix")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(plotting.pr_figure({n: _curve_xy(c) for n, c in curves.items()}, points, args.title))
    inputs = list(args.pr) + ([args.matrix] if args.matrix else [])
    return [out], {"title": args.title}, inputs, out.with_name(out.name + ".manifest.json"), None


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petrel", description="Albatross detection pipeline")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"petrel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise scenes and observer labels from a JSON spec")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a U-Net (or run a gamma sweep) on a data directory")
    p.add_argument("data_dir")
    p.add_argument("out", help="checkpoint path, or CSV path with --sweep-gammas")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--input-size", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--per-scene-patches", type=int)
    p.add_argument("--labels", help="label file suffix to train on (default: truth)")
    p.add_argument("--exclude-scene", help="leave this scene out of the dataset")
    p.add_argument("--sweep-gammas", help="comma-separated gammas; writes the sweep CSV to OUT")
    p.add_argument("--replicates", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="tile a raster through a checkpoint into a heatmap")
    p.add_argument("checkpoint")
    p.add_argument("raster")
    p.add_argument("out")
    p.add_argument("--offset", type=int, nargs=2, default=(0, 0), metavar=("DX", "DY"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="precision-recall sweep of a heatmap against labels")
    p.add_argument("heatmap")
    p.add_argument("labels")
    p.add_argument("out")
    p.add_argument("--threshold", type=float, help="operating point to report (e.g. 0.45)")
    p.add_argument("--radius", type=float, default=detection.DEFAULT_RADIUS)
    p.add_argument("--detections", help="write detections at --threshold to this CSV")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("observers", help="observer agreement matrix and model-vs-observer curves")
    p.add_argument("--heatmap")
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--radius", type=float, default=detection.DEFAULT_RADIUS)
    p.set_defaults(func=cmd_observers)

    p = sub.add_parser("plot", help="render PR CSVs and an observer matrix into one SVG")
    p.add_argument("out")
    p.add_argument("--pr", action="append", default=[], metavar="[NAME=]CSV")
    p.add_argument("--matrix")
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            written, cfg, inputs, manifest, seed = args.func(args)
        _validate_outputs(written)
        cfg = {"threads": args.threads, **cfg}
        _write_manifest(manifest, args.command, cfg, inputs, written, seed, started)
    except Exception as exc:  # noqa: BLE001 - one parseable line per failure
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).replace("\n", " ")
        print(f"petrel: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
