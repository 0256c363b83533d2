"""Consistency check for an emitted feature file.

Re-parses with this package's own reader and summarizes what it finds, so
a bad write (truncation, shape drift, duplicate ids) surfaces before the
file travels to the generation pipeline.
"""

from __future__ import annotations

import numpy as np

from .mrgf import FormatError, read_records


def verify(path) -> dict:
    """Parse ``path`` and return a report; raises FormatError when broken.

    The report carries the record count, grid shape, patch size, and a
    per-record L2-norm summary (min/mean/max), which is a cheap smell test:
    a record of zeros or NaNs means the featurizer saw garbage.
    """
    records, patch = read_records(path)
    norms = np.array([float(np.linalg.norm(grid)) for _, grid in records])
    if not np.isfinite(norms).all():
        bad = [rid for (rid, _), n in zip(records, norms) if not np.isfinite(n)]
        raise FormatError(f"non-finite features in records: {bad[:5]}")
    return {
        "records": len(records),
        "grid_shape": list(records[0][1].shape),
        "patch_size": patch,
        "norms": {"min": float(norms.min()), "mean": float(norms.mean()),
                  "max": float(norms.max())},
    }


def format_report(report: dict) -> str:
    h, w, c = report["grid_shape"]
    n = report["norms"]
    return (f"OK: {report['records']} records, grid {h}x{w}x{c}, "
            f"patch {report['patch_size']}, "
            f"record norms min {n['min']:.4g} mean {n['mean']:.4g} max {n['max']:.4g}")
