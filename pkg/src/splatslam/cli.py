"""Command-line entry point: synth, run, eval, ablate.

Exit codes: 0 success, 2 bad arguments, 3 data error, 4 runtime failure.
All artifacts of a command land under its --out directory; `run` also
writes the effective merged config there for provenance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import raster
from .config import Hyperparameters
from .data import DataError, load_sequence, save_dataset, save_metrics
from .decode import decode_labels
from .field import load_checkpoint, save_checkpoint
from .geom import Intrinsics, Pose, load_trajectory, pose_inverse, save_trajectory
from .losses import ssim
from .metrics import ate_rmse, bias_report, miou, psnr
from .raster import render
from .slam import run_sequence


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=0, help="cap render worker threads")


def _parse_size(s: str) -> tuple[int, int]:
    try:
        w, h = s.lower().split("x")
        return int(w), int(h)
    except Exception:
        raise argparse.ArgumentTypeError(f"bad --size {s!r}, expected WxH") from None


def default_intrinsics(width: int, height: int) -> Intrinsics:
    f = 0.78125 * width  # ~65 degree horizontal field of view
    return Intrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    w, h = args.size
    k = default_intrinsics(w, h)
    scene = datamod.synth_plane_scene(args.seed, args.classes)
    poses = datamod.synth_trajectory(args.traj, args.frames)
    frames = []
    for i, pose in enumerate(poses):
        fr = datamod.raycast_render(scene, pose, k)
        fr.id = i
        frames.append(fr)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(args.out, frames, k, args.depth_scale, args.classes, poses)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _effective_hyper(args) -> Hyperparameters:
    hyper = cfgmod.profile(args.profile)
    if args.config:
        hyper = cfgmod.load_config(args.config)
    if args.no_dsr:
        hyper.use_dsr = False
        hyper.weights.lambda_big_m = 0.0
        hyper.weights.lambda_small_m = 0.0
    if args.no_rskm:
        hyper.sampler = "lckm"
    if args.no_obs_mask:
        hyper.use_obs_mask = False
    if args.no_unobs_mask:
        hyper.use_unobs_mask = False
    if args.prune:
        hyper.prune_enabled = True
    if args.seed is not None:
        hyper.seed = args.seed
    if args.deterministic:
        hyper.deterministic = True
    if args.threads:
        hyper.threads = args.threads
    return hyper


def cmd_run(args) -> int:
    hyper = _effective_hyper(args)
    if hyper.threads:
        raster.set_threads(hyper.threads)
    have_sem = os.path.isdir(os.path.join(args.data, "semantic"))
    frames, k, depth_scale, k_sem, _gt = load_sequence(args.data, semantics_required=False)
    if not have_sem:
        print("no semantic directory: disabling semantic terms")
        hyper.weights.lambda_s_m = 0.0
        hyper.weights.lambda_s_t = 0.0
    os.makedirs(args.out, exist_ok=True)
    cfgmod.save_config(os.path.join(args.out, "config.json"), hyper)

    result = run_sequence(frames, hyper, k, k_sem, progress=not args.quiet)

    save_trajectory(
        os.path.join(args.out, "traj_est.txt"),
        [fr.id for fr in frames],
        result.trajectory,
    )
    save_checkpoint(os.path.join(args.out, "checkpoint.sgf"), result.field, result.decoder)
    with open(os.path.join(args.out, "log.jsonl"), "w") as f:
        for entry in result.per_frame:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    kf_meta = [
        {"frame_id": kf.frame_id, "map_iters": result.iter_counts.get(kf.frame_id, 0)}
        for kf in result.keyframes
    ]
    with open(os.path.join(args.out, "keyframes.json"), "w") as f:
        json.dump(kf_meta, f, indent=2, sort_keys=True)

    rdir = os.path.join(args.out, "renders")
    os.makedirs(rdir, exist_ok=True)
    pose_by_id = {fr.id: p for fr, p in zip(frames, result.trajectory)}
    for kf in result.keyframes:
        out = render(result.field, pose_by_id[kf.frame_id], k)
        datamod.write_color_png(os.path.join(rdir, f"{kf.frame_id:05d}_color.png"), out.color)
        datamod.write_depth_png(
            os.path.join(rdir, f"{kf.frame_id:05d}_depth.png"), out.depth, depth_scale
        )
        _, labels = decode_labels(out.features, result.decoder)
        datamod.write_label_png(os.path.join(rdir, f"{kf.frame_id:05d}_label.png"), labels, k_sem)
    print(f"run complete: N={result.field.n} Gaussians, outputs in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def evaluate_run(run_dir: str, data_dir: str, plot_path: str | None = None) -> dict:
    """Compute the metrics document for a finished run directory."""
    frames, k, _scale, k_sem, gt = load_sequence(data_dir)
    field, decoder = load_checkpoint(os.path.join(run_dir, "checkpoint.sgf"))
    ids, poses = load_trajectory(os.path.join(run_dir, "traj_est.txt"))
    with open(os.path.join(run_dir, "keyframes.json")) as f:
        kf_meta = json.load(f)
    pose_by_id = dict(zip(ids, poses))
    frame_by_id = {fr.id: fr for fr in frames}

    per_frame = []
    psnrs, ssims, depth_l1s, iters, kf_ids, kf_poses = [], [], [], [], [], []
    pred_labels, gt_labels = [], []
    for meta in kf_meta:
        fid = meta["frame_id"]
        fr = frame_by_id[fid]
        pose = pose_by_id[fid]
        out = render(field, pose, k)
        p = psnr(out.color, fr.rgb)
        s = ssim(np.clip(out.color, 0, 1), fr.rgb)
        valid = fr.depth > 0
        dl1 = float(np.abs(out.depth - fr.depth)[valid].mean()) if valid.any() else 0.0
        if decoder is not None:
            _, labels = decode_labels(out.features, decoder)
            pred_labels.append(labels.ravel())
            gt_labels.append(fr.labels.ravel())
        psnrs.append(p)
        ssims.append(s)
        depth_l1s.append(dl1)
        iters.append(meta["map_iters"])
        kf_ids.append(fid)
        kf_poses.append(pose)
        per_frame.append(
            {
                "frame_id": fid,
                "psnr_db": p,
                "ssim": s,
                "depth_l1_m": dl1,
                "map_iters": meta["map_iters"],
            }
        )

    miou_val = 0.0
    if pred_labels:
        _, miou_val = miou(
            np.concatenate(pred_labels), np.concatenate(gt_labels), k_sem
        )
    ate = None
    if gt is not None:
        ate = ate_rmse(poses, [frame_by_id[i].gt_pose for i in ids])
    rep = bias_report(psnrs, iters, kf_ids, kf_poses)

    metrics = {
        "ate_rmse_m": ate,
        "psnr_mean_db": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
        "depth_l1_mean_m": float(np.mean(depth_l1s)),
        "miou": miou_val,
        "mu_psnr": rep.mu_psnr,
        "sigma_psnr": rep.sigma_psnr,
        "per_frame": per_frame,
    }
    if plot_path is not None:
        _bias_plot(rep, plot_path)
    return metrics


def _bias_plot(rep, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [pose_inverse(r.pose).t[0] for r in rep.rows]
    zs = [pose_inverse(r.pose).t[2] for r in rep.rows]
    cs = [r.psnr for r in rep.rows]
    its = np.asarray([r.iterations for r in rep.rows], dtype=float)
    sizes = 30.0 + 270.0 * its / max(its.max(), 1.0)
    fig, ax = plt.subplots(figsize=(6, 5))
    sc = ax.scatter(xs, zs, c=cs, s=sizes, cmap="viridis", edgecolor="k", linewidth=0.5)
    fig.colorbar(sc, ax=ax, label="keyframe PSNR [dB]")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_title(
        f"keyframe quality: mu={rep.mu_psnr:.2f} dB, sigma={rep.sigma_psnr:.2f} dB"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    plot = os.path.join(args.out, "bias_scatter.png")
    metrics = evaluate_run(args.run, args.data, plot_path=plot)
    save_metrics(os.path.join(args.out, "metrics.json"), metrics)
    print(json.dumps({kk: vv for kk, vv in metrics.items() if kk != "per_frame"}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_obs_mask", "no_unobs_mask", "no_dsr", "lckm")


def variant_hyper(base: Hyperparameters, variant: str) -> Hyperparameters:
    hyper = Hyperparameters.from_dict(base.to_dict())
    if variant == "no_obs_mask":
        hyper.use_obs_mask = False
    elif variant == "no_unobs_mask":
        hyper.use_unobs_mask = False
    elif variant == "no_dsr":
        hyper.use_dsr = False
        hyper.weights.lambda_big_m = 0.0
        hyper.weights.lambda_small_m = 0.0
    elif variant == "lckm":
        hyper.sampler = "lckm"
    elif variant != "full":
        raise ValueError(f"unknown variant {variant}")
    return hyper


def run_and_evaluate(data_dir: str, out_dir: str, hyper: Hyperparameters) -> dict:
    """One full run + evaluation, writing the usual artifacts to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.save_config(os.path.join(out_dir, "config.json"), hyper)
    frames, k, depth_scale, k_sem, _gt = load_sequence(data_dir)
    result = run_sequence(frames, hyper, k, k_sem)
    save_trajectory(
        os.path.join(out_dir, "traj_est.txt"), [fr.id for fr in frames], result.trajectory
    )
    save_checkpoint(os.path.join(out_dir, "checkpoint.sgf"), result.field, result.decoder)
    with open(os.path.join(out_dir, "log.jsonl"), "w") as f:
        for entry in result.per_frame:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    kf_meta = [
        {"frame_id": kf.frame_id, "map_iters": result.iter_counts.get(kf.frame_id, 0)}
        for kf in result.keyframes
    ]
    with open(os.path.join(out_dir, "keyframes.json"), "w") as f:
        json.dump(kf_meta, f, indent=2, sort_keys=True)
    metrics = evaluate_run(out_dir, data_dir)
    save_metrics(os.path.join(out_dir, "metrics.json"), metrics)
    return metrics


def cmd_ablate(args) -> int:
    if args.threads:
        raster.set_threads(args.threads)
    base = cfgmod.load_config(args.config) if args.config else cfgmod.profile(args.profile)
    if args.seed is not None:
        base.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    rows = {}
    for variant in ABLATION_VARIANTS:
        hyper = variant_hyper(base, variant)
        out_dir = os.path.join(args.out, variant)
        print(f"[ablate] running variant {variant} ...", flush=True)
        metrics = run_and_evaluate(args.data, out_dir, hyper)
        rows[variant] = {
            "psnr_db": metrics["psnr_mean_db"],
            "ssim": metrics["ssim_mean"],
            "depth_l1_m": metrics["depth_l1_mean_m"],
            "ate_rmse_m": metrics["ate_rmse_m"],
            "miou": metrics["miou"],
            "mu_psnr": metrics["mu_psnr"],
            "sigma_psnr": metrics["sigma_psnr"],
        }
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
    header = f"{'variant':<14}{'PSNR':>8}{'SSIM':>8}{'Depth-L1':>10}{'ATE':>10}{'mIoU':>8}{'sigma':>8}"
    lines = [header, "-" * len(header)]
    for variant, r in rows.items():
        ate = "n/a" if r["ate_rmse_m"] is None else f"{r['ate_rmse_m']:.4f}"
        lines.append(
            f"{variant:<14}{r['psnr_db']:>8.2f}{r['ssim']:>8.3f}{r['depth_l1_m']:>10.4f}"
            f"{ate:>10}{r['miou']:>8.3f}{r['sigma_psnr']:>8.2f}"
        )
    table = "\n".join(lines)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatslam", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic RGB-D-semantic dataset")
    ps.add_argument("--seed", type=int, default=1)
    ps.add_argument("--frames", type=int, default=50)
    ps.add_argument("--classes", type=int, default=5)
    ps.add_argument("--traj", choices=("static", "arc", "lissajous"), default="arc")
    ps.add_argument("--size", type=_parse_size, default=(320, 240))
    ps.add_argument("--depth-scale", type=float, default=6553.5)
    _add_common(ps)
    ps.set_defaults(fn=cmd_synth)

    pr = sub.add_parser("run", help="track and map a dataset")
    pr.add_argument("--data", required=True)
    pr.add_argument("--config", default=None, help="JSON config overriding the profile")
    pr.add_argument("--profile", choices=("replica", "scannet"), default="replica")
    pr.add_argument("--no-dsr", action="store_true")
    pr.add_argument("--no-rskm", action="store_true", help="use covisibility (LCKM) sampling")
    pr.add_argument("--no-obs-mask", action="store_true")
    pr.add_argument("--no-unobs-mask", action="store_true")
    pr.add_argument("--prune", action="store_true")
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--deterministic", action="store_true")
    pr.add_argument("--quiet", action="store_true")
    _add_common(pr)
    pr.set_defaults(fn=cmd_run)

    pe = sub.add_parser("eval", help="evaluate a finished run against ground truth")
    pe.add_argument("--run", required=True, help="run output directory")
    pe.add_argument("--data", required=True)
    _add_common(pe)
    pe.set_defaults(fn=cmd_eval)

    pa = sub.add_parser("ablate", help="run the ablation matrix on one dataset")
    pa.add_argument("--data", required=True)
    pa.add_argument("--profile", choices=("replica", "scannet"), default="replica")
    pa.add_argument("--config", default=None, help="JSON config overriding the profile")
    pa.add_argument("--seed", type=int, default=None)
    _add_common(pa)
    pa.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 0):
        raster.set_threads(args.threads)
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
