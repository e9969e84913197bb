"""Fused volumetric tokens from per-axis slice features.

Slice features from three orthogonal sweeps of a cubic volume are pooled
into cubic patches aligned with the 2D patch size, projected to a low
dimension with a shared Gaussian random matrix, permuted into a common
(x, y, z) order, and concatenated.  The fused tokens drop into the same
mutual-scoring machinery as 2D patch tokens; cubes dominated by empty
voxels can be masked out of graph construction downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from batchad.data import l2_normalize
from batchad.errors import DataError

AXES = ("axial", "coronal", "sagittal")

# inverse permutation taking a pooled [slice, row, col] stack to (x, y, z)
_CANONICAL_ORDER = {
    "axial": (0, 1, 2, 3),
    "coronal": (1, 0, 2, 3),
    "sagittal": (1, 2, 0, 3),
}


def slice_volume(volume, axis):
    """2D slices of a cubic volume along one of the canonical axes."""
    if axis not in AXES:
        raise DataError(f"axis must be one of {AXES}, got {axis!r}")
    vol = np.asarray(volume)
    if vol.ndim != 3 or len(set(vol.shape)) != 1:
        raise DataError(f"expected a cubic volume, got shape {vol.shape}")
    return np.moveaxis(vol, AXES.index(axis), 0)


def pool_axis(stack, p):
    """Average consecutive groups of p slices into cubic-patch tokens.

    ``stack`` is [H, N_p, N_p, D] with H = p * N_p; the pooled tokens are
    row-normalized afterwards.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4:
        raise DataError(f"expected [H, N_p, N_p, D] stack, got shape {stack.shape}")
    h, n_p, n_p2, dim = stack.shape
    if n_p != n_p2:
        raise DataError(f"in-plane grid must be square, got {n_p}x{n_p2}")
    if h != p * n_p:
        raise DataError(f"{h} slices do not split into {n_p} groups of {p}")
    pooled = stack.reshape(n_p, p, n_p, n_p, dim).mean(axis=1)
    flat, _ = l2_normalize(pooled.reshape(-1, dim))
    return flat.reshape(n_p, n_p, n_p, dim)


def permute_to_canonical(pooled, axis):
    """Reorder a pooled stack so index (x, y, z) means the same cube."""
    if axis not in AXES:
        raise DataError(f"axis must be one of {AXES}, got {axis!r}")
    pooled = np.asarray(pooled)
    if pooled.ndim != 4:
        raise DataError(f"expected 4D pooled tensor, got shape {pooled.shape}")
    return np.transpose(pooled, _CANONICAL_ORDER[axis])


def make_projection(dim, k, seed=0):
    """Gaussian projection matrix [D, k] with variance 1/k entries.

    The same seed yields the same matrix, so one projection is shared
    across all volumes of a dataset.
    """
    if k >= dim:
        raise DataError(f"projection size {k} must be smaller than {dim}")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.normal(0.0, 1.0 / np.sqrt(k), size=(dim, k))


def random_project(tokens, k, seed=0):
    """Project tokens (last axis = features) to k dims."""
    tokens = np.asarray(tokens, dtype=np.float64)
    r = make_projection(tokens.shape[-1], k, seed)
    return tokens @ r


@dataclass
class FusedVolumeTokens:
    grid_shape: tuple
    tokens: np.ndarray             # [N_p^3, 3k]
    void_fractions: np.ndarray = None

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


def fuse_axes(projected_stacks, normalize=True, void_fractions=None):
    """Concatenate per-axis projected tokens at each cube position.

    All three stacks must already be in canonical (x, y, z) order and share
    one shape; fused rows are row-normalized by default so squared-distance
    scoring matches the 2D path.
    """
    shapes = {np.asarray(s).shape for s in projected_stacks}
    if len(shapes) != 1:
        raise DataError(f"stacks disagree on shape: {sorted(shapes)}")
    fused = np.concatenate([np.asarray(s, dtype=np.float64)
                            for s in projected_stacks], axis=-1)
    grid_shape = fused.shape[:-1]
    flat = fused.reshape(-1, fused.shape[-1])
    if normalize:
        flat, _ = l2_normalize(flat)
    vf = None
    if void_fractions is not None:
        vf = np.asarray(void_fractions, dtype=np.float64).reshape(-1)
        if vf.size != flat.shape[0]:
            raise DataError("void fractions do not match the token grid")
    return FusedVolumeTokens(grid_shape=grid_shape, tokens=flat,
                             void_fractions=vf)


def void_fraction(voxel_mask, p):
    """Fraction of empty voxels in each p-cube of a volume mask.

    ``voxel_mask`` is nonzero on foreground voxels; the volume side must be
    divisible by p.
    """
    mask = np.asarray(voxel_mask) != 0
    if mask.ndim != 3:
        raise DataError(f"expected a 3D mask, got shape {mask.shape}")
    for s in mask.shape:
        if s % p:
            raise DataError(f"mask side {s} not divisible by pool size {p}")
    nx, ny, nz = (s // p for s in mask.shape)
    blocks = mask.reshape(nx, p, ny, p, nz, p)
    filled = blocks.mean(axis=(1, 3, 5))
    return 1.0 - filled
