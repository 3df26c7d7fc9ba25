"""Carotid segmentation on the reference frame and IDIF extraction.

The chain is threshold -> connected islands -> keep the largest few ->
merge. Islands are numbered by decreasing size with ties broken by the
smallest x-fastest voxel index, so labels do not depend on scan order.
"""
import math
from dataclasses import dataclass
from numbers import Real
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage
from scipy.ndimage import binary_dilation, generate_binary_structure

from .errors import EmptySegmentation
from .volume import TAC, LabeledMask, Mask, Region, check_same_grid

# connectivity -> rank argument of generate_binary_structure
CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


class SegConfig(BaseModel):
    """Threshold and island rules.

    ``fraction`` is relative to the reference-frame maximum; ``absolute`` is
    in kBq/mL. Kept islands smaller than ``cleanup_fraction`` times the
    largest kept island are dropped as stray clusters.
    """
    threshold_mode: Literal["fraction", "absolute"] = "fraction"
    fraction: float = Field(0.6, gt=0, le=1)
    absolute: Optional[float] = Field(None, ge=0)
    connectivity: Literal[6, 18, 26] = 26
    min_island_size: int = Field(20, ge=1)
    top_k: int = Field(2, ge=1)
    cleanup_fraction: float = Field(0.1, ge=0, lt=1)

    @model_validator(mode="after")
    def _absolute_needs_value(self):
        if self.threshold_mode == "absolute" and self.absolute is None:
            raise ValueError("threshold_mode 'absolute' requires 'absolute'")
        return self

    def threshold_for(self, frame3d):
        if self.threshold_mode == "absolute":
            return float(self.absolute)
        return self.fraction * max(float(np.max(frame3d)), 0.0)


class IdifConfig(BaseModel):
    """How the carotid and peri-carotid curves are averaged."""
    strategy: Literal["mean", "hottest"] = "mean"
    percent: float = Field(10.0, gt=0, le=100)
    shell_inner: int = Field(1, ge=0)
    shell_outer: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _shell_order(self):
        if self.shell_outer <= self.shell_inner:
            raise ValueError("shell_outer must exceed shell_inner")
        return self


@dataclass(frozen=True)
class SegResult:
    """Merged carotid mask and island bookkeeping.

    Attributes:
        mask: union of kept islands
        island_sizes: sizes of all islands, largest first
        kept: ids of kept islands
        removed_count: number of islands discarded
        threshold: intensity threshold used (NaN if not known)
    """
    mask: Mask
    island_sizes: tuple
    kept: tuple
    removed_count: int
    threshold: float = math.nan

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "island_sizes": list(self.island_sizes),
            "kept": list(self.kept),
            "removed_count": self.removed_count,
            "voxels": self.mask.count,
        }


def binarize_volume(vol3d, threshold=0.5):
    """Mask of voxels with value >= threshold."""
    return Mask(np.asarray(vol3d) >= threshold)


def threshold_mask(frame3d, cfg=None):
    """Voxels of the frame at or above the threshold.

    Args:
        frame3d: reference frame
        cfg: SegConfig, or a plain threshold in kBq/mL
    """
    if not isinstance(cfg, Real):
        cfg = (cfg or SegConfig()).threshold_for(frame3d)
    return binarize_volume(frame3d, cfg)


def label_islands(mask, connectivity=26):
    """Connected components of a mask, largest first.

    Args:
        mask: Mask
        connectivity: 6, 18 or 26

    Returns:
        LabeledMask with ids 1..n and names ``island_01``...
    """
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    raw, n = ndimage.label(mask.data, structure=structure)
    if n == 0:
        return LabeledMask(np.zeros(mask.dims, dtype=np.int32), {})
    ids = np.arange(1, n + 1)
    sizes = np.bincount(raw.ravel(), minlength=n + 1)[1:]
    linear = np.arange(raw.size).reshape(raw.shape, order="F")
    first = np.asarray(ndimage.minimum(linear, labels=raw, index=ids))
    order = np.lexsort((first, -sizes))
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = ids
    table = {int(j + 1): Region(f"island_{j + 1:02d}", int(sizes[o])) for j, o in enumerate(order)}
    return LabeledMask(remap[raw], table)


def filter_and_merge(islands, cfg=None, *, threshold=math.nan):
    """Keep the top_k largest islands of at least min_island_size voxels and merge them.

    Raises:
        EmptySegmentation: If no island survives
    """
    cfg = cfg or SegConfig()
    ranked = sorted(islands.table.items(), key=lambda item: (-item[1].size, item[0]))
    kept = [(rid, r.size) for rid, r in ranked if r.size >= cfg.min_island_size][:cfg.top_k]
    if kept and cfg.cleanup_fraction > 0:
        largest = kept[0][1]
        kept = [(rid, size) for rid, size in kept if size >= cfg.cleanup_fraction * largest]
    if not kept:
        raise EmptySegmentation(
            f"no island reaches {cfg.min_island_size} voxels "
            f"(sizes {[r.size for _, r in ranked][:10]})")
    ids = tuple(rid for rid, _ in kept)
    return SegResult(
        mask=Mask(np.isin(islands.labels, ids)),
        island_sizes=tuple(r.size for _, r in ranked),
        kept=ids,
        removed_count=len(ranked) - len(ids),
        threshold=threshold,
    )


def segment_carotids(frame3d, cfg=None):
    """Threshold, label and filter a reference frame."""
    cfg = cfg or SegConfig()
    threshold = cfg.threshold_for(frame3d)
    islands = label_islands(threshold_mask(frame3d, threshold), cfg.connectivity)
    return filter_and_merge(islands, cfg, threshold=threshold)


def extract_idif(vol, mask, strategy="mean", percent=10.0):
    """Average TAC over a mask.

    Args:
        vol: DynVolume
        mask: Mask on the same spatial grid
        strategy: "mean" over all voxels, or "hottest" for the mean of the
            top ``percent`` % of voxels in each frame (at least one voxel)

    Raises:
        GridMismatch: If mask and volume dims differ
        EmptySegmentation: If the mask is empty
    """
    check_same_grid(vol.spatial_dims, mask.dims, "mask and volume")
    values = vol.data[mask.data]
    if values.shape[0] == 0:
        raise EmptySegmentation("mask is empty")
    if strategy == "mean":
        curve = values.mean(axis=0)
    elif strategy == "hottest":
        m = max(1, math.ceil(percent / 100.0 * values.shape[0]))
        curve = np.sort(values, axis=0)[-m:].mean(axis=0)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return TAC(vol.mid_times, curve)


def pericarotid_shell(mask, inner=1, outer=3):
    """Voxels within ``outer`` face-steps of the mask but beyond ``inner``."""
    structure = generate_binary_structure(3, 1)
    grown = binary_dilation(mask.data, structure=structure, iterations=outer)
    core = binary_dilation(mask.data, structure=structure, iterations=inner) if inner else mask.data
    return Mask(grown & ~core)
