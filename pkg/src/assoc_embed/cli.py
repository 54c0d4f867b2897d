"""Command-line driver.

Subcommands: ``synth``, ``decode-pose``, ``decode-instance``, ``train``,
``eval`` and ``gradcheck``. Every command prints the config hash and writes
deterministic artifacts under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import eval as metrics
from .config import ExperimentConfig, dumps
from .errors import AssocEmbedError, DimensionMismatchError, ParameterError, StorageError, TensorFormatError
from .grid import read_tensor, resize_bilinear, write_tensor
from .instance_decode import BACKGROUND, LabelMap, decode_instances, merge_instance_scales
from .loss import InstanceSamples, PoseGroundTruth, check_instance_gradient, check_pose_gradient
from .pose_decode import Detection, PoseEstimate, decode_pose, merge_scales
from .synth import (
    InstanceScene,
    PoseScene,
    generate_instance_scene,
    generate_pose_scene,
    render_instance_scene,
    render_pose_scene,
    sample_instance_pixels,
)
from .train import train_loop


# file helpers

def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _write_tensor(path: Path, grids) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {path.parent}: {exc}") from exc
    write_tensor(path, grids)


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise TensorFormatError(f"{path} is not valid JSON: {exc}") from exc


def _map(fn, items, jobs: int):
    """Ordered map, optionally across worker processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _scene_name(i: int) -> str:
    return f"scene_{i:04d}"


# synth

def _synth_one(job):
    cfg, i, out = job
    scene_cfg = replace(cfg.scene, seed=cfg.run.seed + i)
    name = _scene_name(i)
    if cfg.run.kind == "pose":
        scene = generate_pose_scene(scene_cfg)
        det, tag = render_pose_scene(scene, scene_cfg)
        grids = np.concatenate([det, tag])
    else:
        scene = generate_instance_scene(scene_cfg)
        det, tag = render_instance_scene(scene, scene_cfg)
        grids = np.stack([det, tag])
    _write_text(out / f"{name}.json", dumps(scene.to_dict()))
    _write_tensor(out / f"{name}.aehm", grids)
    return name


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    count = args.count or cfg.run.count
    names = _map(_synth_one, [(cfg, i, out) for i in range(count)], args.jobs)
    manifest = {"config_hash": cfg.config_hash, "kind": cfg.run.kind, "scenes": names}
    _write_text(out / "manifest.json", dumps(manifest))
    _write_text(out / "config.ini", cfg.to_text())
    return 0


# pose decoding

def _split_pair(grids: np.ndarray, source: str):
    if grids.shape[0] % 2:
        raise DimensionMismatchError(f"{source} holds {grids.shape[0]} grids; expected K detection + K tag grids")
    k = grids.shape[0] // 2
    return grids[:k], grids[k:]


def _load_pose_inputs(paths: list[str], scales: list[str]):
    """Resolve CLI inputs into (det, tags) with tags possibly multi-scale."""
    per_scale = []
    if len(paths) == 2:
        det, tag = read_tensor(paths[0]), read_tensor(paths[1])
        if det.shape[0] != tag.shape[0]:
            raise DimensionMismatchError(f"{paths[0]} has K={det.shape[0]} but {paths[1]} has K={tag.shape[0]}")
        if det.shape != tag.shape:
            raise DimensionMismatchError(f"detection {det.shape} and tag {tag.shape} grids differ in size")
        per_scale.append((det, tag))
    elif len(paths) == 1:
        per_scale.append(_split_pair(read_tensor(paths[0]), paths[0]))
    elif paths:
        raise ParameterError("give DET TAG, a single combined tensor, or --scale files")
    for s in scales:
        per_scale.append(_split_pair(read_tensor(s), s))
    if not per_scale:
        raise ParameterError("no input heatmaps given")
    if len(per_scale) == 1:
        return per_scale[0]
    ks = {d.shape[0] for d, _ in per_scale}
    if len(ks) > 1:
        raise DimensionMismatchError(f"scales disagree on K: {sorted(ks)}")
    tw = max(d.shape[2] for d, _ in per_scale)
    th = max(d.shape[1] for d, _ in per_scale)
    return merge_scales(per_scale, tw, th)


_PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 190]],
    dtype=np.uint8,
)


def render_overlay(det: np.ndarray, people: list[PoseEstimate]) -> bytes:
    """Binary PPM: max detection response in grey, each person's joints in its colour."""
    base = np.clip(np.asarray(det).max(axis=0), 0.0, 1.0) if len(det) else np.zeros((1, 1))
    h, w = base.shape
    img = np.repeat((base * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    for p, person in enumerate(people):
        color = _PALETTE[p % len(_PALETTE)]
        for d in person.detections:
            img[max(d.y - 1, 0) : d.y + 2, max(d.x - 1, 0) : d.x + 2] = color
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def _decode_pose_files(job):
    cfg, inputs, scales, out_json, overlay = job
    det, tags = _load_pose_inputs(inputs, scales)
    people = decode_pose(det, tags, cfg.decode)
    _write_text(out_json, dumps([p.to_dict() for p in people]))
    if overlay is not None:
        _write_bytes(overlay, render_overlay(det, people))
    return len(people)


def cmd_decode_pose(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    if len(args.inputs) == 1 and os.path.isdir(args.inputs[0]):
        src = Path(args.inputs[0])
        jobs = []
        for path in sorted(src.glob("scene_*.aehm")):
            stem = path.stem.replace("scene_", "")
            overlay = out / f"overlay_{stem}.ppm" if args.overlay else None
            jobs.append((cfg, [str(path)], [], out / f"poses_{stem}.json", overlay))
        _map(_decode_pose_files, jobs, args.jobs)
    else:
        overlay = out / "overlay.ppm" if args.overlay else None
        _decode_pose_files((cfg, args.inputs, args.scale, out / "poses.json", overlay))
    return 0


# instance decoding

def _load_instance_scales(paths: list[str], scales: list[str]):
    pairs = []
    if len(paths) == 2:
        det, tag = read_tensor(paths[0]), read_tensor(paths[1])
        if det.shape != tag.shape or det.shape[0] != 1:
            raise DimensionMismatchError("instance decoding expects one detection and one tag grid of equal size")
        pairs.append((det[0], tag[0]))
    elif len(paths) == 1:
        grids = read_tensor(paths[0])
        if grids.shape[0] != 2:
            raise DimensionMismatchError(f"{paths[0]} holds {grids.shape[0]} grids; expected detection + tag")
        pairs.append((grids[0], grids[1]))
    elif paths:
        raise ParameterError("give DET TAG, a single combined tensor, or --scale files")
    for s in scales:
        grids = read_tensor(s)
        if grids.shape[0] != 2:
            raise DimensionMismatchError(f"{s} holds {grids.shape[0]} grids; expected detection + tag")
        pairs.append((grids[0], grids[1]))
    if not pairs:
        raise ParameterError("no input heatmaps given")
    return pairs


def _decode_instance_files(job):
    cfg, inputs, scales, out_labels, out_json = job
    pairs = _load_instance_scales(inputs, scales)
    tw = max(d.shape[1] for d, _ in pairs)
    th = max(d.shape[0] for d, _ in pairs)
    maps = [
        decode_instances(resize_bilinear(d, tw, th), resize_bilinear(t, tw, th), cfg.instance)
        for d, t in pairs
    ]
    result = maps[0] if len(maps) == 1 else merge_instance_scales(maps, cfg.instance.overlap_iou)
    _write_tensor(out_labels, result.labels.astype(np.float32)[None])
    payload = result.to_dict()
    payload["labels"] = out_labels.name
    _write_text(out_json, dumps(payload))
    return result.n_instances


def cmd_decode_instance(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    if len(args.inputs) == 1 and os.path.isdir(args.inputs[0]):
        src = Path(args.inputs[0])
        jobs = []
        for path in sorted(src.glob("scene_*.aehm")):
            stem = path.stem.replace("scene_", "")
            jobs.append((cfg, [str(path)], [], out / f"labels_{stem}.aehm", out / f"instances_{stem}.json"))
        _map(_decode_instance_files, jobs, args.jobs)
    else:
        _decode_instance_files((cfg, args.inputs, args.scale, out / "labels.aehm", out / "instances.json"))
    return 0


# training

def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    tcfg = cfg.train_config()
    if args.steps:
        tcfg = replace(tcfg, steps=args.steps)
    summary = {"config_hash": cfg.config_hash, "kind": cfg.run.kind}
    if cfg.run.kind == "pose":
        scene = generate_pose_scene(cfg.scene)
        dims = (scene.gt.n_joints, scene.height, scene.width)
        field, final = train_loop(scene.gt, dims, tcfg)
        summary["grouping_accuracy"] = metrics.grouping_accuracy_with_gt_detections(field.params, scene.gt, cfg.decode)
    else:
        scene = generate_instance_scene(cfg.scene)
        samples = sample_instance_pixels(scene.masks, cfg.loss.sample_count, cfg.run.seed)
        field, final = train_loop(samples, (scene.height, scene.width), tcfg)
    summary.update(
        initial_loss=field.history[0] if field.history else final,
        final_loss=final,
        steps=field.steps,
    )
    _write_tensor(out / "field.aehm", field.params)
    rows = ["step,loss"] + [f"{i},{loss:.9g}" for i, loss in enumerate(field.history)]
    rows.append(f"{field.steps},{final:.9g}")
    _write_text(out / "loss.csv", "\n".join(rows) + "\n")
    _write_text(out / "train.json", dumps(summary))
    return 0


# evaluation

def _pose_from_json(entries, k: int) -> list[PoseEstimate]:
    people = []
    for e in entries:
        p = PoseEstimate(k)
        for s in e["slots"]:
            if s is not None:
                p.detections.append(Detection(int(s["joint"]), int(s["x"]), int(s["y"]), float(s["score"]), np.zeros(1)))
        p.ref_tag = np.asarray(e.get("ref_tag", [0.0]), dtype=np.float64)
        p.person_score = float(e["person_score"])
        people.append(p)
    return people


def _pairs(pred: str, gt: str, pred_prefix: str):
    pp, gp = Path(pred), Path(gt)
    if gp.is_dir():
        out = []
        for scene in sorted(gp.glob("scene_*.json")):
            stem = scene.stem.replace("scene_", "")
            out.append((pp / f"{pred_prefix}_{stem}.json", scene))
        return out
    return [(pp, gp)]


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    kind = cfg.run.kind
    pairs = _pairs(args.pred, args.gt, "poses" if kind == "pose" else "instances")
    if not pairs:
        raise ParameterError(f"no scenes found under {args.gt}")
    report = {"ap": None, "grouping_accuracy": None, "map_50": None, "map_70": None}
    if kind == "pose":
        thr = cfg.run.dist_threshold_px or metrics.default_distance_threshold(cfg.scene.keypoint_sigma_px)
        scenes, accs = [], []
        for pred_path, gt_path in pairs:
            scene = PoseScene.from_dict(_read_json(gt_path))
            preds = _pose_from_json(_read_json(pred_path), scene.gt.n_joints)
            scenes.append((preds, scene.gt))
            tensor = gt_path.with_suffix(".aehm")
            if tensor.exists():
                _, tags = _split_pair(read_tensor(tensor), str(tensor))
                accs.append(metrics.grouping_accuracy_with_gt_detections(tags, scene.gt, cfg.decode))
        report["ap"] = metrics.pose_ap(scenes, thr)
        if accs:
            report["grouping_accuracy"] = float(np.mean(accs))
    else:
        m50, m70 = [], []
        for pred_path, gt_path in pairs:
            scene = InstanceScene.from_dict(_read_json(gt_path))
            info = _read_json(pred_path)
            labels = read_tensor(pred_path.parent / info["labels"])[0]
            lm = LabelMap(np.where(labels < 0, BACKGROUND, labels).astype(np.int64), info["identifiers"], info["scores"])
            res = metrics.instance_map(lm, scene.masks, (0.5, 0.7))
            m50.append(res[0.5])
            m70.append(res[0.7])
        report["map_50"] = float(np.mean(m50))
        report["map_70"] = float(np.mean(m70))
    report["n_scenes"] = len(pairs)
    report["config_hash"] = cfg.config_hash
    _write_text(Path(args.out) / "metrics.json", dumps(report))
    return 0


# gradient check

def gradcheck_report(cfg: ExperimentConfig) -> dict:
    rng = np.random.default_rng([cfg.run.seed, 7])
    params = cfg.loss
    pose_err, inst_err = 0.0, 0.0
    for _ in range(cfg.run.gradcheck_cases):
        n, k = int(rng.integers(1, 6)), int(rng.integers(3, 18))
        h = w = 16
        tags = rng.standard_normal((k, h, w))
        locs = np.stack([rng.integers(0, w, (n, k)), rng.integers(0, h, (n, k))], axis=-1)
        vis = rng.random((n, k)) < 0.8
        vis[np.arange(n), rng.integers(0, k, n)] = True
        gt = PoseGroundTruth(locs, vis)
        pose_err = max(pose_err, check_pose_gradient(tags, gt, params, cfg.run.gradcheck_eps))

        n_inst = int(rng.integers(1, 6))
        m = params.sample_count
        tag = rng.standard_normal((h, w)) * 1.5
        idx = rng.choice(h * w, size=n_inst * m, replace=False)
        pts = np.stack([idx % w, idx // w], axis=1)
        samples = InstanceSamples([pts[i * m : (i + 1) * m] for i in range(n_inst)])
        inst_err = max(inst_err, check_instance_gradient(tag, samples, params, cfg.run.gradcheck_eps))
    tol = cfg.run.gradcheck_tolerance
    return {
        "config_hash": cfg.config_hash,
        "cases": cfg.run.gradcheck_cases,
        "eps": cfg.run.gradcheck_eps,
        "pose_max_rel_error": pose_err,
        "instance_max_rel_error": inst_err,
        "tolerance": tol,
        "passed": bool(pose_err < tol and inst_err < tol),
    }


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    report = gradcheck_report(cfg)
    text = dumps(report)
    if args.out:
        _write_text(Path(args.out) / "gradcheck.json", text)
    sys.stdout.write(text)
    return 0 if report["passed"] else 1


# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--kind", choices=["pose", "instance"], help="override run.kind")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for batch work")

    parser = argparse.ArgumentParser(prog="assoc-embed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="number of scenes (default: run.count)")
    p.set_defaults(func=cmd_synth)

    for name, func in (("decode-pose", cmd_decode_pose), ("decode-instance", cmd_decode_instance)):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} from AEHM heatmaps")
        p.add_argument("inputs", nargs="*", help="DET TAG, one combined tensor, or a synth directory")
        p.add_argument("--scale", action="append", default=[], help="combined tensor for one extra scale")
        p.add_argument("--out", required=True)
        if name == "decode-pose":
            p.add_argument("--overlay", action="store_true", help="also write a PPM overlay")
        p.set_defaults(func=func)

    p = sub.add_parser("train", parents=[common], help="fit a free tag field by gradient descent")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score predictions against scenes")
    p.add_argument("--pred", required=True, help="prediction file or directory")
    p.add_argument("--gt", required=True, help="scene JSON or synth directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of both losses")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.kind is not None:
        cfg = replace(cfg, run=replace(cfg.run, kind=args.kind))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        print(f"config_hash {cfg.config_hash}")
        return args.func(cfg, args)
    except AssocEmbedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
