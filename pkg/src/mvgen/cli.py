"""Command-line pipeline: synth, ingest, cluster, train, sample, invert,
novel-views, eval.

Each stage reads and writes plain files, so any step can be re-run alone.
All randomness flows from one --seed; re-running a command with the same
flags and inputs reproduces its outputs byte for byte (the only timestamp
lives in the single completion line on stderr).  Exit codes: 0 success,
1 validation error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import tomlkit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .checkpoint import load_checkpoint
from .clustering import cluster_dataset, load_poses, save_poses
from .config import RunConfig, echo_run_config, load_run_config, with_overrides
from .evaluate import classify_view, evaluate_views, load_views_dir, write_report
from .features import read_features
from .images import read_image, write_image
from .manifest import build_manifest, load_manifest, save_manifest
from .rng import derive_seed, seeded_normal_array
from .sampling import ViewRequest, ddim_invert, ddim_sample, generate_novel_views
from .synthetic import SyntheticSpec, generate_synthetic
from .training import load_optimizer_state, train


def _log(message: str) -> None:
    print(f"[{time.strftime('%Y-%m-%dT%H:%M:%S')}] {message}", file=sys.stderr)


def _resolve_config(args, overrides: dict) -> RunConfig:
    base = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    return with_overrides(base, overrides)


def _write_json(path, tree: dict) -> None:
    Path(path).write_text(json.dumps(tree, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    tree = {}
    if args.spec is not None:
        with open(args.spec, "rb") as fh:
            tree = dict(tomllib.load(fh))
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ValueError(f"unknown synthetic-spec keys: {unknown}")
    if args.seed is not None:
        tree["seed"] = args.seed
    spec = SyntheticSpec(**tree)
    out = Path(args.out)
    manifest = generate_synthetic(spec, out)
    (out / "spec.toml").write_text(tomlkit.dumps(dataclasses.asdict(spec)),
                                   encoding="utf-8")
    _log(f"synth: {len(manifest.entries)} images under {out}")
    return 0


def cmd_ingest(args) -> int:
    manifest = build_manifest(args.root, args.image_size, args.patch_size,
                              features=args.features)
    if args.features is not None:
        grids = read_features(Path(args.root) / args.features)
        have = {g.image_id for g in grids}
        missing = [e.image_id for e in manifest.entries if e.image_id not in have]
        if missing:
            raise ValueError(f"feature file lacks ids: {missing[:5]}"
                             + ("..." if len(missing) > 5 else ""))
    out = Path(args.out) if args.out else Path(args.root) / "manifest.json"
    save_manifest(manifest, out)
    _log(f"ingest: {len(manifest.entries)} images -> {out}")
    return 0


def cmd_cluster(args) -> int:
    config = _resolve_config(args, {"seed": args.seed,
                                    "clustering.clusters": args.k})
    grids = read_features(args.features)
    knobs = config.clustering
    result = cluster_dataset(grids, m=knobs.clusters, seed=config.seed,
                             batch_size=knobs.batch_size,
                             max_iters=knobs.max_iters, tol=knobs.tol)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_poses(out, result)
    echo_run_config(config, out.parent)
    _log(f"cluster: {len(result.assignment.labels)} images into "
         f"{knobs.clusters} poses -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args, {
        "seed": args.seed,
        "training.iterations": args.iterations,
        "training.batch_size": args.batch_size,
        "training.lr": args.lr,
        "training.checkpoint_every": args.checkpoint_every,
    })
    data = Path(args.data)
    manifest = load_manifest(data / "manifest.json")
    images = {e.image_id: read_image(data / e.image) for e in manifest.entries}
    poses = load_poses(args.poses)
    resume = None
    if args.resume is not None:
        ckpt0 = load_checkpoint(args.resume)
        sidecar = Path(args.resume).with_suffix(".opt.npz")
        resume = (ckpt0, load_optimizer_state(sidecar, lr=config.training.lr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    knobs = config.training
    ckpt = train(images, poses.assignment, config.unet, config.schedule.build(),
                 knobs.iterations, batch_size=knobs.batch_size, lr=knobs.lr,
                 seed=config.seed, checkpoint_every=knobs.checkpoint_every,
                 out_dir=out, log_path=out / "loss.csv", resume=resume)
    echo_run_config(config, out)
    _log(f"train: reached step {ckpt.step} -> {out}")
    return 0


def cmd_sample(args) -> int:
    config = _resolve_config(args, {"seed": args.seed, "sampler.steps": args.steps})
    ckpt = load_checkpoint(args.ckpt)
    size = ckpt.config.image_size
    if not 0 <= args.pose < ckpt.config.pose_count:
        raise ValueError(f"pose {args.pose} out of range "
                         f"[0, {ckpt.config.pose_count})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(args.count):
        noise = seeded_normal_array((3, size, size),
                                    derive_seed(config.seed, "sample", args.pose, i),
                                    dtype=np.float64)
        image = ddim_sample(ckpt, noise, args.pose, config.sampler)
        name = f"sample_{args.pose:03d}_{i:02d}.png"
        write_image(out / name, image)
        files.append(name)
    _write_json(out / "metadata.json", {
        "pose": args.pose, "seed": config.seed,
        "steps": config.sampler.steps, "files": files,
    })
    echo_run_config(config, out)
    _log(f"sample: {len(files)} images for pose {args.pose} -> {out}")
    return 0


def cmd_invert(args) -> int:
    config = _resolve_config(args, {"seed": args.seed, "sampler.steps": args.steps})
    ckpt = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    noise, _ = ddim_invert(ckpt, image, args.pose, config.sampler)
    recon = ddim_sample(ckpt, noise, args.pose, config.sampler)
    mae = float(np.abs(recon - image).mean())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "noise.npy", noise)
    write_image(out / "recon.png", recon)
    _write_json(out / "metadata.json", {
        "image": str(args.image), "pose": args.pose,
        "steps": config.sampler.steps, "round_trip_mae": round(mae, 6),
    })
    echo_run_config(config, out)
    _log(f"invert: round-trip MAE {mae:.4f} -> {out}")
    return 0


def cmd_novel_views(args) -> int:
    config = _resolve_config(args, {
        "seed": args.seed,
        "sampler.steps": args.steps,
        "sampler.gamma": args.gamma,
    })
    ckpt = load_checkpoint(args.ckpt)
    poses = load_poses(args.poses)
    count = ckpt.config.pose_count
    if args.targets == "all":
        targets = tuple(range(count))
    else:
        targets = tuple(int(tok) for tok in args.targets.split(","))
    size = ckpt.config.image_size
    if args.ref_image is not None:
        image = read_image(args.ref_image)
        ref_pose = args.ref_pose
        if ref_pose is None:
            ref_pose = classify_view(image, poses)
            if ref_pose < 0:
                raise ValueError("could not infer a reference pose from "
                                 f"{args.ref_image} (no foreground found); "
                                 "pass --ref-pose")
        request = ViewRequest(targets=targets, reference_pose=ref_pose,
                              reference_image=image)
    else:
        if args.ref_pose is None:
            raise ValueError("--ref-pose is required when --ref-image is not given")
        noise = seeded_normal_array((3, size, size),
                                    derive_seed(config.seed, "reference"),
                                    dtype=np.float64)
        request = ViewRequest(targets=targets, reference_pose=args.ref_pose,
                              reference_noise=noise)
    views = generate_novel_views(ckpt, request, config.sampler, seed=config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for target, view in zip(targets, views):
        name = f"view_{target:03d}.png"
        write_image(out / name, view)
        entries.append({"target": target, "file": name})
    _write_json(out / "metadata.json", {
        "gamma": config.sampler.gamma,
        "steps": config.sampler.steps,
        "share_initial_noise": config.sampler.share_initial_noise,
        "reference_pose": request.reference_pose,
        "reference_image": str(args.ref_image) if args.ref_image else None,
        "views": entries,
    })
    echo_run_config(config, out)
    _log(f"novel-views: {len(entries)} views from pose {request.reference_pose} -> {out}")
    return 0


def cmd_eval(args) -> int:
    poses = load_poses(args.poses)
    views = load_views_dir(args.views_dir)
    report = evaluate_views(views, poses)
    write_report(report, args.out)
    agree = report["agreement"]
    _log(f"eval: {agree['matched']}/{agree['total']} pose agreement, "
         f"histogram divergence {report['histogram_divergence']['mean']:.4f} "
         f"-> {args.out}")
    return 0


# -------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """argparse flags usage problems as exit 2; here they are validation (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvgen", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None,
                       help="root seed (overrides config file)")
        p.add_argument("--config", default=None, help="run-config TOML file")
        return p

    p = add("synth", cmd_synth, "render the synthetic cuboid dataset")
    p.add_argument("--spec", default=None, help="synthetic-spec TOML file")
    p.add_argument("--out", required=True)

    p = add("ingest", cmd_ingest, "build a manifest over a directory of images")
    p.add_argument("--root", required=True, help="dataset root containing images/")
    p.add_argument("--image-size", type=int, required=True)
    p.add_argument("--patch-size", type=int, required=True)
    p.add_argument("--features", default=None,
                   help="feature file (relative to root) to link and check")
    p.add_argument("--out", default=None, help="default: <root>/manifest.json")

    p = add("cluster", cmd_cluster, "discover pose clusters from features")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=None, help="cluster count")
    p.add_argument("--out", required=True, help="poses JSON path")

    p = add("train", cmd_train, "train the pose-conditioned denoiser")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--poses", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "plain pose-conditioned samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("invert", cmd_invert, "recover an image's generating noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--pose", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("novel-views", cmd_novel_views, "consistent views of one object")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--ref-image", default=None)
    p.add_argument("--ref-pose", type=int, default=None)
    p.add_argument("--targets", default="all",
                   help='comma-separated pose labels, or "all"')
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "pose-agreement and color-consistency report")
    p.add_argument("--views-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--poses", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage error or --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError,
            IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
