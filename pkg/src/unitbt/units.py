"""Discrete speech units: frame features, k-means codebook, reduce/expand codec."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numcore
from .errors import ContractError, DegenerateInputError, DimensionError, EmptyInputError

FRAME = 320  # samples per unit frame (50 Hz at 16 kHz)
DEFAULT_FEATURE_DIM = 32
_PROJECTION_SEED = 20230710


@dataclass(frozen=True)
class ReducedUnits:
    units: tuple[int, ...]
    durations: tuple[int, ...]

    def __post_init__(self):
        if len(self.units) != len(self.durations):
            raise ContractError("units and durations differ in length")


@dataclass
class KMeansCodebook:
    centroids: np.ndarray  # (K, F)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        numcore.save_checkpoint(path, {f"centroid.{k}": c for k, c in enumerate(self.centroids)})

    @classmethod
    def load(cls, path) -> "KMeansCodebook":
        arrays = numcore.load_checkpoint(path)
        rows = [arrays[f"centroid.{k}"] for k in range(len(arrays))]
        return cls(np.stack(rows))


@lru_cache(maxsize=8)
def _projection(dim: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    return rng.standard_normal((FRAME, dim - 2)) / np.sqrt(FRAME)


def extract_frames(x, dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Map each non-overlapping 320-sample window to a ``dim``-vector.

    Columns are: window mean, window energy (mean square), then ``dim - 2``
    fixed random projections. Trailing samples that do not fill a window are
    dropped, so the frame count is ``len(x) // 320``.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0] // FRAME
    if T < 1:
        raise EmptyInputError(f"waveform of {x.shape[0]} samples is shorter than one frame")
    if dim < 3:
        raise ContractError("feature dim must be at least 3")
    win = x[: T * FRAME].reshape(T, FRAME)
    feats = np.empty((T, dim))
    feats[:, 0] = win.mean(axis=1)
    feats[:, 1] = (win * win).mean(axis=1)
    feats[:, 2:] = win @ _projection(dim)
    return feats


def _sq_dists(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (
        (frames * frames).sum(axis=1)[:, None]
        - 2.0 * frames @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _assign(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum: ties go to the lowest index
    return np.argmin(_sq_dists(frames, centroids), axis=1)


def kmeans_fit(frames, K: int, iters: int = 50, seed: int = 0, history: list | None = None) -> KMeansCodebook:
    """Lloyd's algorithm with k-means++ seeding.

    If ``history`` is given, the inertia after every assignment step is
    appended to it.
    """
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInputError("kmeans_fit needs a non-empty (N, F) frame matrix")
    if K < 1:
        raise ContractError("K must be >= 1")
    n_distinct = np.unique(X, axis=0).shape[0]
    if K > n_distinct:
        raise DegenerateInputError(f"K={K} exceeds the {n_distinct} distinct frames")
    rng = np.random.default_rng(seed)

    centroids = np.empty((K, X.shape[1]))
    centroids[0] = X[rng.integers(X.shape[0])]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen centroid; pick an unused distinct one
            idx = next(i for i in range(X.shape[0]) if not np.any(np.all(centroids[:k] == X[i], axis=1)))
        else:
            idx = rng.choice(X.shape[0], p=closest / total)
        centroids[k] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centroids[k : k + 1])[:, 0])

    for _ in range(iters):
        d = _sq_dists(X, centroids)
        labels = np.argmin(d, axis=1)
        if history is not None:
            history.append(float(d[np.arange(X.shape[0]), labels].sum()))
        new = centroids.copy()
        for k in range(K):
            members = X[labels == k]
            if members.shape[0]:
                new[k] = members.mean(axis=0)
        if np.array_equal(new, centroids):
            break
        centroids = new
    return KMeansCodebook(centroids)


def quantize(frames, codebook: KMeansCodebook) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != codebook.dim:
        raise DimensionError(f"frame dim {frames.shape[1]} != codebook dim {codebook.dim}")
    return _assign(frames, codebook.centroids).astype(np.int64)


def reduce(z) -> ReducedUnits:
    """Collapse runs of equal adjacent units, recording run lengths."""
    z = np.asarray(z, dtype=np.int64)
    if z.size == 0:
        raise EmptyInputError("cannot reduce an empty unit sequence")
    starts = np.flatnonzero(np.r_[True, z[1:] != z[:-1]])
    lengths = np.diff(np.r_[starts, z.size])
    return ReducedUnits(tuple(int(u) for u in z[starts]), tuple(int(d) for d in lengths))


def expand(r: ReducedUnits | tuple, durations=None) -> np.ndarray:
    if durations is None:
        units, durations = r.units, r.durations
    else:
        units = r
    units = np.asarray(units, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if units.shape != durations.shape:
        raise ContractError("units and durations differ in length")
    if np.any(durations < 1):
        raise ContractError("durations must be >= 1")
    return np.repeat(units, durations)
