"""Single command-line entry point wrapping every workflow.

Subcommands: serve, bench, eval, augment, synth, pnp, calibrate. Each is a
thin wrapper over the library; machine-readable JSON goes to stdout (or the
--out file), diagnostics to stderr, exit code 0 on success.

Configuration is YAML; every scalar can be overridden through environment
variables prefixed ``EDGEPOSE_`` with the config path upper-cased and joined
by underscores (list indices are numeric), e.g.::

    EDGEPOSE_SERVER_BIND=0.0.0.0:9000
    EDGEPOSE_PROXIES_0_BACKEND_NOISE_SIGMA_PX=2.0
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bench import DEFAULT_REPEATS, distance_sweep, emit_report, run_benchmark
from .calibration import FrameGraph
from .dataset import (
    Contrast,
    Dataset,
    HFlip,
    Rotate,
    Scale,
    augment,
    load_dataset,
    save_dataset,
    synth_generate,
    uniform_pose_sampler,
)
from .detector import OracleNoiseModel
from .errors import ConfigError, EdgePoseError
from .geometry import CameraIntrinsics, Pose
from .metrics import ObjectModel, add_accuracy, add_metric, unit_cube_model
from .pnp import Correspondence, solve_pnp
from .server import ProxyConfig, serve

ENV_PREFIX = "EDGEPOSE"

_CONFIG_SCHEMA = {
    "server": {"bind": None},
    "model": None,
    "intrinsics": {"fx": None, "fy": None, "cx": None, "cy": None,
                   "width": None, "height": None, "k1": None, "k2": None},
    "noise": {"sigma_px": None, "dropout_p": None, "distance_noise_gain": None,
              "seed": None},
    "dataset": None,
    "images_root": None,
    "output_dir": None,
    "proxies": [{
        "name": None, "pipeline": None, "model": None, "dataset": None,
        "intrinsics": {"fx": None, "fy": None, "cx": None, "cy": None,
                       "width": None, "height": None, "k1": None, "k2": None},
        "max_in_flight": None, "confidence_threshold": None, "crop_margin": None,
        "backend": {"type": None, "url": None, "timeout_s": None, "delay_ms": None,
                    "fail_image_ids": None,
                    "noise": {"sigma_px": None, "dropout_p": None,
                              "distance_noise_gain": None, "seed": None}},
        "kp_backend": {"type": None, "url": None, "timeout_s": None, "delay_ms": None,
                       "fail_image_ids": None,
                       "noise": {"sigma_px": None, "dropout_p": None,
                                 "distance_noise_gain": None, "seed": None}},
    }],
}


def _validate_keys(node, schema, path: str):
    if schema is None or not isinstance(node, (dict, list)):
        return
    if isinstance(schema, list):
        if not isinstance(node, list):
            raise ConfigError(f"{path}: expected a list")
        for i, item in enumerate(node):
            _validate_keys(item, schema[0], f"{path}[{i}]")
        return
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for key, value in node.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
        _validate_keys(value, schema[key], f"{path + '.' if path else ''}{key}")


def _apply_env_overrides(node, path: list[str]):
    """Replace scalar leaves with EDGEPOSE_<PATH> values where set."""
    if isinstance(node, dict):
        for key, value in node.items():
            node[key] = _apply_env_overrides(value, path + [str(key)])
        return node
    if isinstance(node, list):
        for i, value in enumerate(node):
            node[i] = _apply_env_overrides(value, path + [str(i)])
        return node
    env_name = "_".join([ENV_PREFIX] + [p.upper() for p in path])
    raw = os.environ.get(env_name)
    if raw is None:
        return node
    return yaml.safe_load(raw)


def load_config(path) -> dict:
    """Parse, env-override and key-validate a YAML config file."""
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _validate_keys(raw, _CONFIG_SCHEMA, "")
    return _apply_env_overrides(raw, [])


def _load_intrinsics(spec) -> CameraIntrinsics:
    if isinstance(spec, dict):
        return CameraIntrinsics.from_dict(spec)
    p = Path(spec)
    if p.exists():
        return CameraIntrinsics.from_dict(json.loads(p.read_text()))
    try:
        return CameraIntrinsics.from_dict(json.loads(spec))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"intrinsics {spec!r} is neither a file nor inline JSON") from exc


def _load_model(spec) -> ObjectModel:
    if spec in (None, "", "unit_cube"):
        return unit_cube_model()
    return ObjectModel.load(spec)


def _emit(payload, out: str | None):
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# --- subcommands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    bind = args.bind or cfg.get("server", {}).get("bind", "127.0.0.1:8000")

    proxy_specs = cfg.get("proxies", [])
    if args.proxy:
        for spec in args.proxy:
            name, _, pipeline = spec.partition("=")
            if pipeline not in ("sspe_style", "betapose_style"):
                return _fail(f"--proxy {spec!r}: pipeline must be sspe_style or betapose_style")
            proxy_specs.append({"name": name, "pipeline": pipeline})
    if not proxy_specs:
        print("warning: serving with zero proxies; only /pnp and /health are useful",
              file=sys.stderr)

    default_model = args.model or cfg.get("model")
    default_dataset = args.dataset or cfg.get("dataset")
    default_intr = args.intrinsics or cfg.get("intrinsics")
    default_noise = cfg.get("noise", {})
    if args.noise_sigma is not None:
        default_noise["sigma_px"] = args.noise_sigma
    if args.dropout is not None:
        default_noise["dropout_p"] = args.dropout
    if args.seed is not None:
        default_noise["seed"] = args.seed

    configs = []
    for i, spec in enumerate(proxy_specs):
        where = f"proxies[{i}]"
        try:
            model = _load_model(spec.get("model") or default_model)
            intr_spec = spec.get("intrinsics") or default_intr
            if intr_spec is None:
                return _fail(f"{where}: no intrinsics given (config or --intrinsics)")
            intrinsics = _load_intrinsics(intr_spec)
            ds_path = spec.get("dataset") or default_dataset
            dataset = load_dataset(ds_path) if ds_path else None
            backend = spec.get("backend") or {"type": "oracle", "noise": default_noise}
            configs.append(ProxyConfig(
                name=spec["name"],
                pipeline=spec["pipeline"],
                model=model,
                intrinsics=intrinsics,
                dataset=dataset,
                backend=backend,
                kp_backend=spec.get("kp_backend"),
                max_in_flight=int(spec.get("max_in_flight", 4)),
                confidence_threshold=float(spec.get("confidence_threshold", 0.5)),
                crop_margin=float(spec.get("crop_margin", 0.1)),
            ))
        except (KeyError, OSError, ValueError) as exc:
            return _fail(f"{where}: {exc}")

    if args.ui_dir and not Path(args.ui_dir).is_dir():
        return _fail(f"--ui-dir {args.ui_dir!r} is not a directory")
    handle = serve(configs, bind, ui_dir=args.ui_dir)
    print(f"serving {len(configs)} prox{'y' if len(configs) == 1 else 'ies'} "
          f"on {handle.address} (ctrl-c to stop)", file=sys.stderr)
    if args.ui_dir:
        print(f"annotation UI at {handle.address}/ui/", file=sys.stderr)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
    finally:
        handle.stop()
    return 0


def cmd_bench(args) -> int:
    ds = load_dataset(args.dataset)
    model = _load_model(args.model)
    images_root = args.images_root or str(Path(args.dataset).parent)
    report = run_benchmark(args.server, args.proxy, ds, model,
                           repeats=args.repeats, images_root=images_root,
                           concurrency=args.concurrency)
    if args.sweep_distances:
        distances = [float(d) for d in args.sweep_distances.split(",")]
        k = _load_intrinsics(args.intrinsics) if args.intrinsics else ds.records[0].intrinsics
        noise = OracleNoiseModel(sigma_px=args.noise_sigma or 0.0,
                                 distance_noise_gain=args.distance_noise_gain,
                                 seed=args.seed or 0)
        sweep, best = distance_sweep(None, args.proxy, model, k, distances,
                                     per_distance_n=args.per_distance_n, noise=noise,
                                     seed=args.seed or 0)
        report.distance_sweep = sweep
        report.max_distance_at_50 = best
    text = emit_report(report, args.format, args.out)
    if not args.out:
        print(text)
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    model = _load_model(args.model)
    preds = json.loads(Path(args.preds).read_text())["poses"]
    pairs = []
    skipped_flagged = 0
    missing = 0
    per_record = {}
    for rec in ds.records:
        if rec.chirality_approximate:
            skipped_flagged += 1  # mirrored labels have no exact rigid pose
            continue
        p = preds.get(rec.image_id)
        if p is None:
            missing += 1
            continue
        pred = Pose(q=p["q"], t=p["t"])
        pairs.append((pred, rec.pose))
        per_record[rec.image_id] = add_metric(pred, rec.pose, model)
    if not pairs:
        return _fail("no scorable (prediction, ground-truth) pairs")
    _emit({
        "n_scored": len(pairs),
        "n_missing_predictions": missing,
        "n_skipped_chirality_flagged": skipped_flagged,
        "accuracy": add_accuracy(pairs, model, threshold_fraction=args.threshold),
        "threshold_fraction": args.threshold,
        "mean_add_m": float(np.mean(list(per_record.values()))),
        "per_record_add_m": per_record,
    }, args.out)
    return 0


def _parse_ops(spec: str):
    ops = []
    for token in spec.split(","):
        name, _, val = token.strip().partition(":")
        if name == "rotate":
            ops.append(Rotate(float(val)))
        elif name == "scale":
            ops.append(Scale(float(val)))
        elif name == "hflip":
            ops.append(HFlip())
        elif name == "contrast":
            ops.append(Contrast(float(val)))
        else:
            raise ConfigError(f"unknown augmentation op {name!r} "
                              "(expected rotate:<deg>, scale:<s>, hflip, contrast:<g>)")
    return ops


def cmd_augment(args) -> int:
    from PIL import Image

    ds = load_dataset(args.dataset)
    model = _load_model(args.model)
    ops = _parse_ops(args.ops)
    images_root = Path(args.images_root or Path(args.dataset).parent)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    new_records = []
    rejected = 0
    for rec in ds.records:
        image = Image.open(images_root / rec.image_path)
        image.load()
        for op in ops:
            try:
                aug_rec, aug_img = augment(rec, image, op, model=model)
            except EdgePoseError as exc:
                rejected += 1
                print(f"skipping {rec.image_id} / {op}: {exc}", file=sys.stderr)
                continue
            aug_rec.image_path = f"{aug_rec.image_id}.png"
            aug_img.save(out_dir / aug_rec.image_path)
            new_records.append(aug_rec)
    out_ds = Dataset(records=new_records, model_name=ds.model_name)
    save_dataset(out_ds, out_dir / "annotations.json")
    _emit({"n_augmented": len(new_records), "n_rejected": rejected,
           "out": str(out_dir / "annotations.json")}, args.out)
    return 0


def cmd_synth(args) -> int:
    model = _load_model(args.model)
    k = _load_intrinsics(args.intrinsics)
    lo, _, hi = args.distance_range.partition(":")
    sampler = uniform_pose_sampler((float(lo), float(hi or lo)))
    out_dir = Path(args.out_dir)
    ds = synth_generate(model, k, sampler, n=args.n, seed=args.seed,
                        out_dir=out_dir, render=not args.no_render)
    save_dataset(ds, out_dir / "annotations.json")
    _emit({"n_frames": len(ds), "out": str(out_dir / "annotations.json")}, args.out)
    return 0


def cmd_pnp(args) -> int:
    payload = json.loads(Path(args.corrs).read_text())
    raw = payload["correspondences"] if isinstance(payload, dict) else payload
    corrs = [Correspondence(c["model_point"], c["image_point"],
                            float(c.get("weight", 1.0))) for c in raw]
    k = _load_intrinsics(args.intrinsics)
    result = solve_pnp(corrs, k)
    _emit({
        "pose": {"q": result.pose.q.tolist(), "t": result.pose.t.tolist()},
        "rms_reprojection_error": result.rms_reprojection_error,
        "per_point_errors": result.per_point_errors,
        "candidates_considered": result.candidates_considered,
    }, args.out)
    return 0


def cmd_calibrate(args) -> int:
    edges = json.loads(Path(args.edges).read_text())
    graph = FrameGraph()
    for e in edges["edges"] if isinstance(edges, dict) else edges:
        graph.update_edge(e["from"], e["to"],
                          Pose(q=e["pose"]["q"], t=e["pose"]["t"]),
                          t=float(e.get("t_ms", 0.0)))
    pose, ts = graph.ar_to_map(max_staleness_ms=args.max_staleness_ms)
    out = {"ar_to_map": {"q": pose.q.tolist(), "t": pose.t.tolist()},
           "timestamp_ms": ts}
    try:
        rot_res, trans_res = graph.consistency_check()
        out["cycle_residual"] = {"rotation_rad": rot_res, "translation_m": trans_res}
    except EdgePoseError:
        pass  # no direct AR->Map observation; nothing to cross-check
    _emit(out, args.out)
    return 0


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgepose",
        description="Markerless 6-DoF pose estimation: edge server, benchmark "
                    "harness, dataset tooling.")
    parser.add_argument("--version", action="version", version=f"edgepose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the edge server with configured proxies")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--bind", help="host:port (default 127.0.0.1:8000)")
    p.add_argument("--proxy", action="append",
                   help="name=pipeline (repeatable; pipeline: sspe_style|betapose_style)")
    p.add_argument("--model", help="object model JSON (default: unit cube)")
    p.add_argument("--dataset", help="annotation JSON for oracle backends")
    p.add_argument("--intrinsics", help="intrinsics JSON file or inline JSON")
    p.add_argument("--noise-sigma", type=float, help="oracle keypoint noise (px)")
    p.add_argument("--dropout", type=float, help="oracle keypoint dropout probability")
    p.add_argument("--seed", type=int, help="oracle noise seed")
    p.add_argument("--ui-dir", help="serve the annotation UI bundle at /ui from this directory")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="stream dataset frames at a server and report")
    p.add_argument("--server", required=True, help="server address, host:port")
    p.add_argument("--proxy", required=True, help="proxy name to benchmark")
    p.add_argument("--dataset", required=True, help="annotation JSON with ground truth")
    p.add_argument("--model", help="object model JSON (default: unit cube)")
    p.add_argument("--images-root", help="directory with the frame images "
                                         "(default: dataset directory)")
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS,
                   help="measurements per frame (default 20)")
    p.add_argument("--concurrency", type=int, default=1,
                   help="parallel in-flight frames (throughput mode)")
    p.add_argument("--sweep-distances", help="comma-separated meters for a local "
                                             "distance sweep appended to the report")
    p.add_argument("--per-distance-n", type=int, default=50)
    p.add_argument("--distance-noise-gain", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--intrinsics", help="intrinsics for the sweep")
    p.add_argument("--format", default="json", choices=["json", "csv", "markdown"])
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="score predicted poses against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--preds", required=True,
                   help='JSON {"poses": {image_id: {"q": [...], "t": [...]}}}')
    p.add_argument("--model", help="object model JSON (default: unit cube)")
    p.add_argument("--threshold", type=float, default=0.10,
                   help="ADD threshold as fraction of diameter (default 0.10)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="apply label-consistent augmentations")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="object model JSON (needed for hflip)")
    p.add_argument("--images-root")
    p.add_argument("--ops", required=True,
                   help="comma list: rotate:<deg>,scale:<s>,hflip,contrast:<gamma>")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    p.add_argument("--model", help="object model JSON (default: unit cube)")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distance-range", default="1.0:3.0", help="meters, lo:hi")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-render", action="store_true", help="annotations only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pnp", help="one-shot pose from a correspondence file")
    p.add_argument("--corrs", required=True,
                   help='JSON {"correspondences": [{"model_point": [x,y,z], '
                        '"image_point": [u,v], "weight"?}]}')
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pnp)

    p = sub.add_parser("calibrate", help="compose the AR->Map transform from edges")
    p.add_argument("--edges", required=True,
                   help='JSON {"edges": [{"from", "to", "pose": {"q","t"}, "t_ms"}]}')
    p.add_argument("--max-staleness-ms", type=float, default=float("inf"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EdgePoseError as exc:
        return _fail(f"{exc.code}: {exc}")
    except FileNotFoundError as exc:
        return _fail(f"file not found: {exc.filename}")
    except json.JSONDecodeError as exc:
        return _fail(f"invalid JSON: {exc}")


if __name__ == "__main__":
    sys.exit(main())
