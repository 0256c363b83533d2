"""Consistency report over a directory of generated views.

Two desk-scale proxies: does each view classify back to the pose it was
asked for, and how far apart are the views' foreground color histograms
(identical renders score exactly zero divergence).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .clustering import (MaskRejected, PoseClusteringResult, assign_pose,
                         describe_grid, foreground_mask)
from .features import FeatureGrid
from .images import read_image
from .synthetic import features_from_image

HIST_BINS = 8  # per channel; joint histogram has HIST_BINS**3 cells


def classify_view(image: np.ndarray, poses: PoseClusteringResult) -> int:
    """Pose label for a generated image, or -1 when no foreground is found."""
    feat = features_from_image(image, poses.patch_size)
    grid = FeatureGrid(image_id="view", grid=feat, patch_size=poses.patch_size)
    try:
        desc = describe_grid(grid, poses.pca1, poses.pca2, poses.target_box)
    except (MaskRejected, ValueError):
        return -1
    return assign_pose(desc, poses.assignment)


def foreground_histogram(image: np.ndarray, poses: PoseClusteringResult) -> np.ndarray:
    """Normalized joint RGB histogram over foreground pixels.

    Foreground comes from the same PC1 mask the descriptor pipeline uses,
    upsampled from patches to pixels; if the mask rejects the image the
    whole frame is counted instead, keeping the report total.
    """
    image = np.asarray(image, dtype=np.float64)
    feat = features_from_image(image, poses.patch_size)
    grid = FeatureGrid(image_id="view", grid=feat, patch_size=poses.patch_size)
    try:
        mask = foreground_mask(grid, poses.pca1).mask
        pixel_mask = np.kron(mask, np.ones((poses.patch_size, poses.patch_size), dtype=bool))
    except MaskRejected:
        pixel_mask = np.ones(image.shape[1:], dtype=bool)
    rgb = (image.transpose(1, 2, 0)[pixel_mask] + 1.0) / 2.0
    cells = np.clip((rgb * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    flat = (cells[:, 0] * HIST_BINS + cells[:, 1]) * HIST_BINS + cells[:, 2]
    hist = np.bincount(flat, minlength=HIST_BINS ** 3).astype(np.float64)
    return hist / hist.sum()


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JS divergence in nats; zero iff the histograms are identical."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def evaluate_views(views: dict[int, np.ndarray], poses: PoseClusteringResult) -> dict:
    """Report tree for a set of {target pose: image} views."""
    if not views:
        raise ValueError("no views to evaluate")
    targets = sorted(views)
    assigned = {t: classify_view(views[t], poses) for t in targets}
    hists = [foreground_histogram(views[t], poses) for t in targets]
    divergences = []
    for i in range(len(targets)):
        for j in range(i + 1, len(targets)):
            divergences.append(jensen_shannon(hists[i], hists[j]))
    report = {
        "views": [
            {"target": t, "assigned": assigned[t], "match": assigned[t] == t}
            for t in targets
        ],
        "agreement": {
            "matched": sum(1 for t in targets if assigned[t] == t),
            "total": len(targets),
        },
        "histogram_divergence": {
            "mean": float(np.mean(divergences)) if divergences else 0.0,
            "max": float(np.max(divergences)) if divergences else 0.0,
        },
    }
    return report


def load_views_dir(views_dir) -> dict[int, np.ndarray]:
    """Read view_*.png files back into {target pose: image}.

    Targets come from metadata.json when present (as written by the
    novel-views command), otherwise from the view_NNN.png filenames.
    """
    views_dir = Path(views_dir)
    meta_path = views_dir / "metadata.json"
    views: dict[int, np.ndarray] = {}
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        for entry in meta["views"]:
            views[int(entry["target"])] = read_image(views_dir / entry["file"])
        return views
    for path in sorted(views_dir.glob("view_*.png")):
        stem = path.stem.split("_", 1)[1]
        if not stem.isdigit():
            raise ValueError(f"cannot parse target pose from {path.name!r}")
        views[int(stem)] = read_image(path)
    return views


def write_report(report: dict, path) -> None:
    Path(path).write_text(
        json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
