"""Command-line pipeline: align, refine, eval, synth.

Exit codes: 0 success, 2 missing or malformed inputs (bundles, configs,
scene specs), 3 degenerate match geometry (too few matches, no RANSAC
consensus), 4 optimization failure (non-finite loss, empty graph). In
--json mode stdout carries a single JSON object and nothing else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import runtime
from .alignment import DegenerateMatchesError, align_scene, apply_alignment, prepare_world_pair
from .core import (
    AffineAlignment,
    CorrespondenceSet,
    RansacConfig,
    RefinementConfig,
    ScenePair,
    ViewBundle,
)
from .graph import GraphBuildError, NonFiniteLossError
from .io import BundleError, load_bundle, load_cameras, load_result, save_result
from .metrics import depth_from_points, eval_depth, eval_pointcloud
from .normals import normals_from_pointmap
from .optimize import run_refinement
from .synth import spec_from_dict, write_bundle


def _load_config(args) -> RefinementConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file missing: {path}")
        cfg = RefinementConfig.from_dict(json.loads(path.read_text()))
    else:
        cfg = RefinementConfig()
    if getattr(args, "no_ransac", False):
        cfg = dataclasses.replace(
            cfg,
            ransac=RansacConfig(
                threshold=cfg.ransac.threshold,
                max_iters=cfg.ransac.max_iters,
                enabled=False,
            ),
        )
    return cfg


def _emit(args, payload: dict, human_lines) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def _write_npy_f32(path: Path, arr: np.ndarray) -> None:
    np.save(path, np.ascontiguousarray(arr, dtype=np.float32))


def _masked(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.where(valid[..., None], points, np.nan)


def _run_alignment(bundle_dir: Path, cfg: RefinementConfig, seed: int):
    pair = load_bundle(bundle_dir, confidence_threshold=cfg.confidence_threshold)
    wpair = prepare_world_pair(pair)
    return align_scene(wpair, cfg, seed=seed)


def _write_alignment_files(out: Path, aligned: ScenePair, alignment, report, info) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "scale": alignment.scale,
        "shift": [float(v) for v in alignment.shift],
        "n_matches": len(aligned.matches),
        "n_used": info.n_used,
        "objective_initial": info.objective_initial,
        "objective_final": info.objective_final,
    }
    if report is not None:
        payload["ransac"] = {
            "inlier_count": report.inlier_count,
            "threshold_used": report.threshold_used,
            "iterations_run": report.iterations_run,
        }
    (out / "alignment.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_npy_f32(
        out / "aligned_points_ref.npy",
        _masked(aligned.ref.pointmap.points, aligned.ref.pointmap.valid),
    )
    _write_npy_f32(
        out / "aligned_points_src.npy",
        _masked(aligned.src.pointmap.points, aligned.src.pointmap.valid),
    )
    np.save(out / "matches_inliers.npy", np.asarray(aligned.matches.inlier, dtype=bool))
    return payload


def cmd_align(args) -> int:
    cfg = _load_config(args)
    bundle_dir = Path(args.bundle_dir)
    aligned, alignment, report, info = _run_alignment(bundle_dir, cfg, args.seed)
    out = Path(args.out) if args.out else bundle_dir
    payload = _write_alignment_files(out, aligned, alignment, report, info)
    lines = [
        f"matches used: {info.n_used}/{len(aligned.matches)}",
        f"scale: {alignment.scale:.12g}",
        "shift: [" + ", ".join(f"{v:.12g}" for v in alignment.shift) + "]",
        f"objective: {info.objective_initial:.12g} -> {info.objective_final:.12g}",
    ]
    if report is not None:
        lines.insert(
            1,
            f"ransac inliers: {report.inlier_count} "
            f"(threshold {report.threshold_used:.6g}, {report.iterations_run} iterations)",
        )
    _emit(args, payload, lines)
    return 0


def _reuse_alignment(bundle_dir: Path, pair: ScenePair) -> tuple[ScenePair, AffineAlignment]:
    """Apply a previously saved alignment instead of re-solving."""
    stored = json.loads((bundle_dir / "alignment.json").read_text())
    alignment = AffineAlignment(
        scale=float(stored["scale"]), shift=np.asarray(stored["shift"], dtype=np.float64)
    )
    flags_path = bundle_dir / "matches_inliers.npy"
    if flags_path.is_file():
        flags = np.load(flags_path).astype(bool)
        if flags.shape != (len(pair.matches),):
            raise BundleError("matches_inliers.npy does not match the matches file")
    else:
        flags = np.ones(len(pair.matches), dtype=bool)
    wpair = prepare_world_pair(pair)
    src_map = apply_alignment(wpair.src.pointmap, alignment)
    src_view = ViewBundle(
        wpair.src.image, src_map, wpair.src.camera,
        normals_from_pointmap(src_map, wpair.src.camera),
    )
    matches = CorrespondenceSet(pair.matches.ref_pixels, pair.matches.src_pixels, flags)
    return ScenePair(wpair.ref, src_view, matches), alignment


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    bundle_dir = Path(args.bundle_dir)
    out = Path(args.out)

    if (bundle_dir / "alignment.json").is_file():
        pair = load_bundle(bundle_dir, confidence_threshold=cfg.confidence_threshold)
        aligned, alignment = _reuse_alignment(bundle_dir, pair)
        report = info = None
    else:
        aligned, alignment, report, info = _run_alignment(bundle_dir, cfg, args.seed)

    result = run_refinement(aligned, cfg)
    state = result.state
    save_result(
        out,
        state,
        {
            "scale": alignment.scale,
            "shift": [float(v) for v in alignment.shift],
            "s_ref": state.s_ref,
            "s_src": state.s_src,
        },
        result.trace,
        aligned,
    )
    # The result directory doubles as an eval input: keep the cameras and the
    # aligned starting point next to the refined arrays.
    shutil.copyfile(bundle_dir / "manifest.json", out / "manifest.json")
    _write_npy_f32(
        out / "aligned_points_ref.npy",
        _masked(aligned.ref.pointmap.points, aligned.ref.pointmap.valid),
    )
    _write_npy_f32(
        out / "aligned_points_src.npy",
        _masked(aligned.src.pointmap.points, aligned.src.pointmap.valid),
    )
    np.save(out / "matches_inliers.npy", np.asarray(aligned.matches.inlier, dtype=bool))

    payload = {
        "out": str(out),
        "scale": alignment.scale,
        "shift": [float(v) for v in alignment.shift],
        "s_ref": state.s_ref,
        "s_src": state.s_src,
        "levels": [
            {
                "level": s.level,
                "iterations": s.iterations,
                "initial_total": s.initial_total,
                "final_total": s.final_total,
            }
            for s in result.levels
        ],
    }
    lines = [f"result written to {out}"]
    for s in result.levels:
        lines.append(
            f"level {s.level}: total {s.initial_total:.6g} -> {s.final_total:.6g}"
            f" ({s.iterations} iterations)"
        )
    _emit(args, payload, lines)
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_path = Path(args.gt_file)
    if not gt_path.is_file():
        raise FileNotFoundError(f"ground truth file missing: {gt_path}")
    result = load_result(pred_dir)
    cam_ref, cam_src = load_cameras(pred_dir)
    gt = np.load(gt_path)

    abs_rels = []
    taus = []
    for view, cam in (("ref", cam_ref), ("src", cam_src)):
        pred_pts = result[f"points_{view}"].astype(np.float64)
        gt_pts = gt[f"true_points_{view}"].astype(np.float64)
        gt_valid = gt[f"true_valid_{view}"].astype(bool)
        pred_depth = depth_from_points(pred_pts, cam)
        gt_depth = np.where(gt_valid, depth_from_points(gt_pts, cam), np.nan)
        r = eval_depth(pred_depth, gt_depth, median_scaling=args.median_scaling)
        abs_rels.append(r.abs_rel)
        taus.append(r.inlier_ratio)

    payload = {
        "abs_rel": float(np.mean(abs_rels)),
        "tau": float(np.mean(taus)),
        "accuracy": None,
        "completeness": None,
        "overall": None,
    }
    if args.pointcloud:
        pred_cloud = np.concatenate(
            [
                result["points_ref"].astype(np.float64)[gt["true_valid_ref"].astype(bool)],
                result["points_src"].astype(np.float64)[gt["true_valid_src"].astype(bool)],
            ]
        )
        gt_cloud = np.concatenate(
            [
                gt["true_points_ref"].astype(np.float64)[gt["true_valid_ref"].astype(bool)],
                gt["true_points_src"].astype(np.float64)[gt["true_valid_src"].astype(bool)],
            ]
        )
        cloud = eval_pointcloud(pred_cloud, gt_cloud)
        payload["accuracy"] = cloud.accuracy
        payload["completeness"] = cloud.completeness
        payload["overall"] = cloud.overall
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    spec_path = Path(args.spec_file)
    if not spec_path.is_file():
        raise FileNotFoundError(f"scene spec missing: {spec_path}")
    spec = spec_from_dict(json.loads(spec_path.read_text()))
    root = write_bundle(spec, args.out)
    manifest = json.loads((root / "manifest.json").read_text())
    n_matches = int(np.load(root / "matches.npy").shape[0])
    payload = {"out": str(root), "views": len(manifest["views"]), "n_matches": n_matches}
    _emit(args, payload, [f"bundle written to {root} ({n_matches} matches)"])
    return 0


def _add_common(sub, config: bool = True):
    sub.add_argument("--threads", type=int, default=None,
                     help="cap internal parallelism (default: MORE_THREADS or 1)")
    sub.add_argument("--json", action="store_true", help="machine-readable stdout")
    if config:
        sub.add_argument("--config", help="JSON file mirroring the refinement config")
        sub.add_argument("--seed", type=int, default=0, help="RANSAC sampling seed")
        sub.add_argument("--no-ransac", action="store_true",
                         help="trust all matches instead of filtering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="more3d", description="Two-view point map alignment and refinement."
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("align", help="solve the scale/shift alignment for a bundle")
    p.add_argument("bundle_dir")
    p.add_argument("--out", help="output directory (default: the bundle directory)")
    _add_common(p)
    p.set_defaults(func=cmd_align)

    p = subs.add_parser("refine", help="align then run graph refinement")
    p.add_argument("bundle_dir")
    p.add_argument("--out", required=True, help="result directory")
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = subs.add_parser("eval", help="score a result directory against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_file")
    p.add_argument("--median-scaling", action="store_true",
                   help="rescale predicted depth to the ground-truth median")
    p.add_argument("--pointcloud", action="store_true",
                   help="also compute cloud accuracy/completeness")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("synth", help="generate a synthetic bundle from a scene spec")
    p.add_argument("spec_file")
    p.add_argument("--out", required=True, help="bundle directory to write")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            runtime.set_threads(args.threads)
        return args.func(args)
    except DegenerateMatchesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (GraphBuildError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
