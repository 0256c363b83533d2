"""Principal component analysis, exact and incremental.

The incremental path merges one batch at a time into a running SVD with a
mean-correction row (the sequential Karhunen-Loeve scheme), so the running
mean is exact and the subspace tracks the exact top-k eigenspace.

Sign convention everywhere: the largest-magnitude entry of each component
is positive, which makes fits deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PcaModel:
    mean: np.ndarray                # (c,)
    components: np.ndarray          # (k, c), orthonormal rows
    explained_variance: np.ndarray  # (k,), nonincreasing
    samples_seen: int

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "samples_seen": int(self.samples_seen),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            components=np.asarray(d["components"], dtype=np.float64),
            explained_variance=np.asarray(d["explained_variance"], dtype=np.float64),
            samples_seen=int(d["samples_seen"]),
        )


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for row in out:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return out


def fit_pca_exact(samples: np.ndarray, k: int) -> PcaModel:
    """Top-k PCA of (n, c) samples via SVD of the centered matrix."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"samples must be 2-D, got shape {x.shape}")
    n, c = x.shape
    if k > c:
        raise ValueError(f"k={k} exceeds feature dimension {c}")
    if n < k:
        raise ValueError(f"need at least {k} samples, got {n}")
    mean = x.mean(axis=0)
    _, svals, vt = np.linalg.svd(x - mean, full_matrices=False)
    denom = max(n - 1, 1)
    return PcaModel(
        mean=mean,
        components=_fix_signs(vt[:k]),
        explained_variance=(svals[:k] ** 2) / denom,
        samples_seen=n,
    )


class IncrementalPca:
    """Streaming PCA refined one sample batch at a time."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._mean: np.ndarray | None = None
        self._svals: np.ndarray | None = None   # singular values of the running factorization
        self._comps: np.ndarray | None = None   # (r, c)
        self._n = 0

    @property
    def samples_seen(self) -> int:
        return self._n

    def partial_fit(self, batch: np.ndarray) -> "IncrementalPca":
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"batch must be nonempty 2-D, got shape {x.shape}")
        nb, c = x.shape
        if self.k > c:
            raise ValueError(f"k={self.k} exceeds feature dimension {c}")
        mean_b = x.mean(axis=0)
        if self._n == 0:
            stacked = x - mean_b
            new_mean = mean_b
        else:
            if c != self._comps.shape[1]:
                raise ValueError("batch dimensionality changed mid-stream")
            correction = np.sqrt(self._n * nb / (self._n + nb)) * (self._mean - mean_b)
            stacked = np.vstack(
                [self._svals[:, None] * self._comps, x - mean_b, correction[None, :]]
            )
            new_mean = (self._n * self._mean + nb * mean_b) / (self._n + nb)
        _, svals, vt = np.linalg.svd(stacked, full_matrices=False)
        r = min(self.k, len(svals))
        self._svals = svals[:r]
        self._comps = vt[:r]
        self._mean = new_mean
        self._n += nb
        return self

    def model(self) -> PcaModel:
        if self._n == 0:
            raise ValueError("no samples seen")
        if self._comps.shape[0] < self.k:
            raise ValueError(
                f"only {self._n} samples seen, cannot produce {self.k} components"
            )
        denom = max(self._n - 1, 1)
        return PcaModel(
            mean=self._mean.copy(),
            components=_fix_signs(self._comps),
            explained_variance=(self._svals**2) / denom,
            samples_seen=self._n,
        )


def fit_pca_incremental(batches, k: int, batch_size: int = 256) -> PcaModel:
    """Fit PCA over a stream of batches; a single 2-D array is chunked."""
    ipca = IncrementalPca(k)
    if isinstance(batches, np.ndarray):
        if batches.ndim != 2:
            raise ValueError("array input must be 2-D")
        arr = batches
        batches = (arr[i : i + batch_size] for i in range(0, len(arr), batch_size))
    for batch in batches:
        ipca.partial_fit(batch)
    return ipca.model()


def project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Coordinates of ``x`` (shape (..., c)) in the component basis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs model dim {model.dim}")
    return (x - model.mean) @ model.components.T
