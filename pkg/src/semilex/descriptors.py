"""Keypoint descriptors for the local-consistency metric.

The default descriptor is deliberately simple: difference-of-Gaussians
keypoints with gradient-orientation histograms, i.e. the classic recipe
without octaves or rotation normalisation (tokens here are roughly upright
28x28 glyphs or small component crops).

A descriptor is a 4x4 grid of 8-bin orientation histograms over a 16x16
patch, magnitude-weighted, L2-normalised and scaled by ``DESCRIPTOR_SCALE``.
The scale puts typical matched-feature distances for same-style strokes a few
units below the default consistency tolerance of 10 and cross-style distances
above it.  Distance values are therefore descriptor-relative; swapping in a
different descriptor changes the working range but no contracts.

Matching between two descriptor sets keeps mutual nearest neighbours; the
number of mutual pairs is the ``m`` of the mean-feature-distance metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._kernels import pairwise_sqdist

PATCH = 16
GRID = 4
N_BINS = 8
DESCRIPTOR_DIM = GRID * GRID * N_BINS
DESCRIPTOR_SCALE = 12.0
MAX_KEYPOINTS = 24
DOG_SIGMA_FINE = 1.0
DOG_SIGMA_COARSE = 1.6
DOG_THRESHOLD = 0.01

__all__ = [
    "DESCRIPTOR_DIM",
    "DESCRIPTOR_SCALE",
    "LocalDescriptor",
    "extract",
    "detect_keypoints",
    "match_mutual",
    "mean_feature_distance",
]


@dataclass(frozen=True)
class LocalDescriptor:
    """Descriptor vectors for one token image (possibly none)."""

    vectors: np.ndarray  # (m, DESCRIPTOR_DIM) float64
    keypoints: np.ndarray = field(default=None)  # (m, 2) row, col
    method: str = "dog-orient8"

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            vec = vec.reshape(0, DESCRIPTOR_DIM) if vec.size == 0 else np.atleast_2d(vec)
        object.__setattr__(self, "vectors", vec)
        if self.keypoints is None:
            object.__setattr__(self, "keypoints", np.zeros((vec.shape[0], 2), dtype=np.int64))

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def detect_keypoints(image: np.ndarray,
                     threshold: float = DOG_THRESHOLD,
                     max_keypoints: int = MAX_KEYPOINTS) -> np.ndarray:
    """Difference-of-Gaussians extrema, strongest responses first.

    Returns an (m, 2) array of (row, col) positions ordered by descending
    absolute response, ties broken row-major.
    """
    img = np.asarray(image, dtype=np.float64)
    dog = ndimage.gaussian_filter(img, DOG_SIGMA_FINE) - ndimage.gaussian_filter(img, DOG_SIGMA_COARSE)
    mag = np.abs(dog)
    peak = ndimage.maximum_filter(mag, size=3, mode="constant")
    rows, cols = np.nonzero((mag >= peak) & (mag >= threshold))
    if rows.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    resp = mag[rows, cols]
    order = np.lexsort((cols, rows, -resp))
    keep = order[:max_keypoints]
    return np.stack([rows[keep], cols[keep]], axis=1).astype(np.int64)


def extract(image: np.ndarray,
            threshold: float = DOG_THRESHOLD,
            max_keypoints: int = MAX_KEYPOINTS) -> LocalDescriptor:
    """Compute the descriptor set of one grayscale token image.

    Patches extending past the image border contribute nothing there (the
    gradient field is zero-padded).
    """
    img = np.asarray(image, dtype=np.float64)
    keypoints = detect_keypoints(img, threshold=threshold, max_keypoints=max_keypoints)
    if keypoints.shape[0] == 0:
        return LocalDescriptor(vectors=np.zeros((0, DESCRIPTOR_DIM)), keypoints=keypoints)
    smoothed = ndimage.gaussian_filter(img, DOG_SIGMA_FINE)
    gy, gx = np.gradient(smoothed)
    half = PATCH // 2
    mag = np.pad(np.hypot(gy, gx), half)
    ang = np.pad(np.arctan2(gy, gx), half)  # [-pi, pi]
    sub = PATCH // GRID
    cell = np.arange(PATCH) // sub
    cell_idx = cell[:, None] * GRID + cell[None, :]
    vectors = np.empty((keypoints.shape[0], DESCRIPTOR_DIM), dtype=np.float64)
    for i, (r, c) in enumerate(keypoints):
        mpatch = mag[r:r + PATCH, c:c + PATCH]
        apatch = ang[r:r + PATCH, c:c + PATCH]
        bins = (((apatch + np.pi) / (2.0 * np.pi)) * N_BINS).astype(np.int64) % N_BINS
        vec = np.bincount((cell_idx * N_BINS + bins).ravel(),
                          weights=mpatch.ravel(), minlength=DESCRIPTOR_DIM)
        norm = np.linalg.norm(vec)
        if norm > 1e-12:
            vec = vec / norm * DESCRIPTOR_SCALE
        vectors[i] = vec
    return LocalDescriptor(vectors=vectors, keypoints=keypoints)


def match_mutual(a: np.ndarray, b: np.ndarray):
    """Mutual-nearest-neighbour pairs between two descriptor sets.

    Returns (pairs, distances): pairs is (m, 2) of row indices into a and b,
    distances the Euclidean distance per pair.  Ties resolve to the lowest
    index on either side, so matching is deterministic.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    d2 = pairwise_sqdist(a, b)
    fwd = d2.argmin(axis=1)
    bwd = d2.argmin(axis=0)
    rows = np.arange(a.shape[0])
    mutual = bwd[fwd] == rows
    pairs = np.stack([rows[mutual], fwd[mutual]], axis=1).astype(np.int64)
    dist = np.sqrt(d2[pairs[:, 0], pairs[:, 1]])
    return pairs, dist


def mean_feature_distance(a: LocalDescriptor, b: LocalDescriptor):
    """Mean distance over the mutual matches of two descriptor sets.

    Returns (match_count, mean_distance); mean_distance is None when no
    features match.
    """
    pairs, dist = match_mutual(a.vectors, b.vectors)
    if pairs.shape[0] == 0:
        return 0, None
    # Summing in sorted order makes the mean independent of match enumeration
    # order, so the metric is exactly symmetric.
    return int(pairs.shape[0]), float(np.sort(dist).mean())
