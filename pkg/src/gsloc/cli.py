"""Command-line interface.

Subcommands: synth, reconstruct, distill, select-landmarks, localize,
render, eval.  Global flags: --seed, --threads, --config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path


def _apply_threads(argv):
    """Cap BLAS threads before numpy gets imported by the heavy modules."""
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv):
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ.setdefault(var, argv[i + 1])


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsloc",
                                description="Gaussian-splat mapping and localization")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    p.add_argument("--config", type=str, default=None, help="config file (.json or key=value)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--queries", type=int, default=None)
    s.add_argument("--synth-config", type=str, default=None,
                   help="JSON file of synthetic-scene settings")

    s = sub.add_parser("reconstruct", help="build a scene model from a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters-scale", type=float, default=1.0)

    s = sub.add_parser("distill", help="fuse the feature volume and train the field")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None)

    s = sub.add_parser("select-landmarks", help="pick salient landmarks")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--radius", type=float, default=None)
    s.add_argument("--tr", type=float, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("localize", help="estimate query poses")
    s.add_argument("--model", required=True)
    s.add_argument("--landmarks", default=None, help="landmark JSON from select-landmarks")
    s.add_argument("--query-dir", required=True)
    s.add_argument("--dataset", required=True, help="reference (training) dataset dir")
    s.add_argument("--pairs", default=None, help="retrieval pairs file")
    s.add_argument("--out", required=True, help="per-frame CSV")

    s = sub.add_parser("render", help="render a view from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--pose", required=True, help="pose file (4x4 per line)")
    s.add_argument("--frame-index", type=int, default=0)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--height", type=int, default=None)
    s.add_argument("--sh-degree", type=int, default=0)
    s.add_argument("--out-prefix", required=True)

    s = sub.add_parser("eval", help="aggregate localization and rendering metrics")
    s.add_argument("--results", required=True, help="CSV from localize")
    s.add_argument("--model", default=None)
    s.add_argument("--query-dir", default=None)
    s.add_argument("--out", required=True, help="JSON report")
    return p


def _load_cfg(args):
    from .config import PipelineConfig, load_config
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synth(args, cfg):
    from .synthetic import SynthConfig, generate_synthetic
    scfg = SynthConfig()
    if args.synth_config:
        overrides = json.loads(Path(args.synth_config).read_text())
        scfg = dataclasses.replace(scfg, **overrides)
    if args.frames:
        scfg.n_frames = args.frames
    if args.queries:
        scfg.n_queries = args.queries
    generate_synthetic(scfg, Path(args.out), seed=cfg.seed)
    print(f"wrote {scfg.n_frames} training and {scfg.n_queries} query frames to {args.out}")
    return 0


def cmd_reconstruct(args, cfg):
    from .dataset import load_dataset
    from .landmarks import build_observations, observation_stats
    from .mapper import reconstruct
    from .model_io import save_model
    cfg = cfg.scaled(args.iters_scale)
    frames = load_dataset(args.dataset)
    t0 = time.time()
    scene = reconstruct(frames, cfg, log_fn=lambda s: print(s, file=sys.stderr))
    obs = build_observations(scene, frames, cfg)
    stats = observation_stats(scene, obs)
    size = save_model(scene, args.out, obs_stats=stats)
    print(f"reconstructed {len(scene.cloud)} primitives in {time.time() - t0:.1f}s; "
          f"model {size / 1e6:.2f} MB -> {args.out}")
    return 0


def cmd_distill(args, cfg):
    from .dataset import load_dataset
    from .field import DescriptorField
    from .model_io import load_model, save_model
    from .volume import FeatureVolume
    import numpy as np
    frames = load_dataset(args.dataset)
    scene, stats = load_model(args.model)
    dfeat = frames[0].feature_map.shape[2]
    vol = FeatureVolume.from_bounds(scene.bounds_min, scene.bounds_max,
                                    cfg.voxel_size, dfeat, cfg.tsdf_trunc_factor)
    for kf in frames:
        vol.integrate_keyframe(kf, cfg.max_depth)
    rng = np.random.default_rng(cfg.seed)
    samples = vol.extract_surface(cfg.surface_samples, rng)
    fieldobj = DescriptorField.create(
        scene.bounds_min, scene.bounds_max, descriptor_dim=dfeat,
        levels=cfg.enc_levels, features_per_level=cfg.enc_features_per_level,
        table_size_log2=cfg.enc_table_size_log2,
        finest_resolution=cfg.enc_finest_resolution,
        coarsest_divisor=cfg.enc_coarsest_divisor, hidden=cfg.mlp_hidden,
        layers=cfg.mlp_layers, seed=cfg.seed)
    steps = args.steps if args.steps is not None else cfg.distill_steps
    log = fieldobj.distill(samples, steps=steps, lr=cfg.distill_lr,
                           batch=cfg.distill_batch, rng=rng,
                           log_fn=lambda s: print(s, file=sys.stderr))
    scene.descriptor_field = fieldobj
    size = save_model(scene, args.out, obs_stats=stats)
    print(f"distilled field over {len(samples.points)} surface samples, "
          f"final cosine {log.final_mean_cosine:.4f}; model {size / 1e6:.2f} MB")
    return 0


def cmd_select_landmarks(args, cfg):
    from .landmarks import saliency_from_stats, select_landmarks
    from .model_io import load_model
    scene, stats = load_model(args.model)
    if stats is None:
        print("model has no observation statistics; rerun reconstruct", file=sys.stderr)
        return 2
    tr = args.tr if args.tr is not None else cfg.geo_tr
    r0 = args.radius if args.radius is not None else cfg.selection_radius
    if not r0:
        r0 = scene.diagonal / 20.0
    idx, totals = saliency_from_stats(scene, stats, tr)
    picked = select_landmarks(scene.cloud.mu[idx], totals, r0, args.count)
    chosen = idx[picked]
    Path(args.out).write_text(json.dumps({
        "indices": chosen.tolist(),
        "positions": scene.cloud.mu[chosen].tolist(),
        "radius": r0, "tr": tr}, indent=2))
    print(f"selected {len(chosen)} landmarks of {idx.size} candidates -> {args.out}")
    return 0


def cmd_localize(args, cfg):
    import numpy as np
    from .dataset import load_dataset, load_pairs
    from .errors import InsufficientMatches
    from .geometry import pose_errors
    from .localize import QueryObservation, localize, thumbnail_descriptor
    from .model_io import load_model
    from .synthetic import detect_keypoints
    from .volume import _sample_feature_map

    scene, _ = load_model(args.model)
    ref_frames = load_dataset(args.dataset)
    queries = load_dataset(args.query_dir)
    pairs = load_pairs(args.pairs) if args.pairs else None
    if args.landmarks:
        chosen = np.array(json.loads(Path(args.landmarks).read_text())["indices"])
    else:
        chosen = np.nonzero(scene.cloud.is_key)[0]
    thumbs = {kf.frame_id: thumbnail_descriptor(kf.color) for kf in ref_frames}
    ref_poses = {kf.frame_id: kf.pose for kf in ref_frames}

    rows = []
    for kf in queries:
        kps, scores = detect_keypoints(kf.score_map, 0.1)
        H, W = kf.score_map.shape
        desc = _sample_feature_map(kf.feature_map, kps.astype(np.float64), W, H) \
            if kps.size else np.zeros((0, kf.feature_map.shape[2]))
        q = QueryObservation(keypoints=kps.astype(np.float64), scores=scores,
                             descriptors=desc, intrinsics=kf.intrinsics,
                             thumbnail=thumbnail_descriptor(kf.color),
                             frame_id=kf.frame_id)
        row = {"frame": kf.frame_id, "converged": 0, "n_matches": 0,
               "n_inliers": 0, "mean_reproj_px": "", "dt_cm": "", "dr_deg": "",
               "tx": "", "ty": "", "tz": "", "qw": "", "qx": "", "qy": "", "qz": ""}
        try:
            res = localize(q, scene, chosen, thumbs, ref_poses, cfg, pairs)
            row["n_matches"] = res.n_matches
            if res.converged:
                est = res.estimate
                dt, dr = pose_errors(est.pose, kf.pose)
                row.update({"converged": 1, "n_inliers": len(est.inliers),
                            "mean_reproj_px": f"{est.mean_reprojection_error:.4f}",
                            "dt_cm": f"{dt:.4f}", "dr_deg": f"{dr:.4f}"})
                row.update({k: f"{v:.9f}" for k, v in zip(
                    ("tx", "ty", "tz"), est.pose.t)})
                row.update({k: f"{v:.9f}" for k, v in zip(
                    ("qw", "qx", "qy", "qz"), est.pose.q)})
        except InsufficientMatches:
            pass
        rows.append(row)
        print(f"frame {kf.frame_id}: converged={row['converged']} "
              f"matches={row['n_matches']} dt={row['dt_cm']} dr={row['dr_deg']}",
              file=sys.stderr)

    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"localized {sum(r['converged'] for r in rows)}/{len(rows)} frames -> {args.out}")
    return 0


def cmd_render(args, cfg):
    import numpy as np
    from .dataset import load_intrinsics, load_poses, save_image, save_raw
    from .model_io import load_model
    from .render import render
    scene, _ = load_model(args.model)
    pose = load_poses(args.pose)[args.frame_index]
    K = load_intrinsics(args.intrinsics)
    if args.width or args.height:
        import dataclasses as dc
        w = args.width or K.width
        h = args.height or K.height
        K = dc.replace(K, width=w, height=h,
                       cx=K.cx * w / K.width, cy=K.cy * h / K.height)
    cfg.sh_degree = args.sh_degree
    maps = render(scene, pose, K, cfg)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_image(np.clip(maps.color, 0, 1), prefix.with_suffix(".png"))
    save_raw(maps.depth, Path(str(prefix) + ".depth.raw"))
    save_raw(maps.score, Path(str(prefix) + ".score.raw"))
    print(f"rendered {K.width}x{K.height} view -> {prefix}.png")
    return 0


def cmd_eval(args, cfg):
    import numpy as np
    from .metrics import EvalReport, FrameResult, compute_psnr_ssim
    rows = list(csv.DictReader(open(args.results)))
    frames = []
    for r in rows:
        frames.append(FrameResult(
            frame_id=int(r["frame"]), converged=r["converged"] == "1",
            dt_cm=float(r["dt_cm"]) if r["dt_cm"] else float("nan"),
            dr_deg=float(r["dr_deg"]) if r["dr_deg"] else float("nan"),
            n_matches=int(r["n_matches"]), n_inliers=int(r["n_inliers"])))
    report = EvalReport.from_frames(frames)
    if args.model and args.query_dir:
        from .dataset import load_dataset
        from .model_io import load_model
        from .render import render
        scene, _ = load_model(args.model)
        report.model_bytes = Path(args.model).stat().st_size
        for kf in load_dataset(args.query_dir):
            maps = render(scene, kf.pose, kf.intrinsics, cfg)
            psnr, ssim = compute_psnr_ssim(np.clip(maps.color, 0, 1), kf.color)
            report.psnr.append(psnr)
            report.ssim.append(ssim)
    Path(args.out).write_text(json.dumps(report.summary(), indent=2))
    print(json.dumps(report.summary(), indent=2))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "reconstruct": cmd_reconstruct,
    "distill": cmd_distill,
    "select-landmarks": cmd_select_landmarks,
    "localize": cmd_localize,
    "render": cmd_render,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    args = _build_parser().parse_args(argv)
    cfg = _load_cfg(args)
    return _COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
