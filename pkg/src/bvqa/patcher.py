"""Sliding-window patch extraction.

Patch offsets along one axis are 0, S, 2S, ... for stride S while the patch
still fits, plus a final offset of dim - patch if it is not already in the
list, so the far edge is always covered (the last two windows may overlap
more than the others). Frames smaller than the patch in either dimension
are padded by edge replication on the bottom/right before windowing.

Patches are emitted in raster order: rows top to bottom, and left to right
within a row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_PATCH = 224
DEFAULT_STRIDE = 196


def patch_positions(dim: int, patch: int = DEFAULT_PATCH,
                    stride: int = DEFAULT_STRIDE) -> list[int]:
    """Window offsets along one axis of length dim."""
    if patch < 1 or stride < 1:
        raise ConfigError(f"patch_positions: patch and stride must be >= 1, "
                          f"got patch={patch} stride={stride}")
    if stride > patch:
        raise ConfigError(f"patch_positions: stride {stride} larger than patch "
                          f"{patch} would leave uncovered pixels")
    if dim < patch:
        raise ShapeError(f"patch_positions: dim {dim} smaller than patch {patch}, "
                         f"padding required")
    positions = list(range(0, dim - patch + 1, stride))
    tail = dim - patch
    if positions[-1] != tail:
        positions.append(tail)
    return positions


@dataclass
class PatchGrid:
    """Placement record for one frame's patches, in emission order."""

    patch: int
    stride: int
    frame_hw: tuple[int, int]       # size after any padding
    positions: list[tuple[int, int]]  # (x, y) top-left corners, raster order

    @property
    def n_patches(self) -> int:
        return len(self.positions)


def pad_to_patch(frame: np.ndarray, patch: int) -> np.ndarray:
    """Edge-replicate the bottom/right so both sides are >= patch."""
    h, w = frame.shape[:2]
    pad_h = max(0, patch - h)
    pad_w = max(0, patch - w)
    if pad_h == 0 and pad_w == 0:
        return frame
    pad = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (frame.ndim - 2)
    return np.pad(frame, pad, mode="edge")


def extract_patches(frame: np.ndarray, patch: int = DEFAULT_PATCH,
                    stride: int = DEFAULT_STRIDE) -> tuple[np.ndarray, PatchGrid]:
    """Cut one frame (H, W[, C]) into overlapping square patches.

    Returns (patches, grid) with patches of shape (N, patch, patch[, C]).
    """
    if frame.ndim not in (2, 3):
        raise ShapeError(f"extract_patches: expected (H, W[, C]) frame, "
                         f"got shape {frame.shape}")
    frame = pad_to_patch(frame, patch)
    h, w = frame.shape[:2]
    ys = patch_positions(h, patch, stride)
    xs = patch_positions(w, patch, stride)
    positions = [(x, y) for y in ys for x in xs]
    patches = np.stack([frame[y:y + patch, x:x + patch] for x, y in positions])
    grid = PatchGrid(patch=patch, stride=stride, frame_hw=(h, w),
                     positions=positions)
    return patches, grid
