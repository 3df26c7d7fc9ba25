"""Reference-frame selection from early-frame intensity sums."""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from .volume import Box

# The crop is an ordinary inclusive box.
CropBox = Box

# A local maximum of the differences needs neighbours on both sides
MIN_SUMS = 3


class FrameSelectConfig(BaseModel):
    """How many early frames to scan and which region to sum over.

    ``crop`` overrides the central crop computed from ``crop_fraction``.
    """
    n_frames: int = Field(10, ge=MIN_SUMS)
    crop_fraction: float = Field(0.5, gt=0, le=1)
    crop: Optional[CropBox] = None


@dataclass(frozen=True)
class FrameSelection:
    """Chosen reference frame and the evidence behind it.

    Attributes:
        index: selected frame (0-based)
        sums: summed crop intensity of each scanned frame
        differences: consecutive sum differences (first entry is sums[0])
        clamped: True when no interior local maximum existed and the
            largest difference was used instead
    """
    index: int
    sums: tuple
    differences: tuple
    clamped: bool = False
    crop: Optional[CropBox] = None

    def to_dict(self):
        return {
            "index": self.index,
            "sums": list(self.sums),
            "differences": list(self.differences),
            "clamped": self.clamped,
            "crop": None if self.crop is None else {"lo": list(self.crop.lo), "hi": list(self.crop.hi)},
        }


def default_crop(dims, fraction=0.5):
    """Central box covering ``fraction`` of each spatial axis."""
    lo, hi = [], []
    for n in dims[:3]:
        size = max(1, int(round(n * fraction)))
        start = min(int(round(n * (1 - fraction) / 2)), n - size)
        lo.append(start)
        hi.append(start + size - 1)
    return CropBox(lo=tuple(lo), hi=tuple(hi))


def summed_intensity(vol, crop=None, n_frames=10):
    """Sum of voxel values inside the crop for each of the first n frames.

    Raises:
        CropOutOfBounds: If the crop reaches outside the volume
        ValueError: If n_frames exceeds the number of frames
    """
    if n_frames > vol.nt:
        raise ValueError(f"n_frames {n_frames} exceeds the {vol.nt} frames in the volume")
    crop = crop or default_crop(vol.spatial_dims)
    crop.check_within(vol.spatial_dims)
    block = vol.data[crop.slices + (slice(0, n_frames),)]
    return block.sum(axis=(0, 1, 2))


def select_reference_frame(sums, crop=None):
    """Pick the frame before the first local maximum of the sum differences.

    With d[0] = sums[0] and d[i] = sums[i] - sums[i-1], the selected frame is
    i - 1 for the smallest i with d[i-1] < d[i] > d[i+1]. Without such an i
    the frame at the largest difference is returned and ``clamped`` is set.

    Raises:
        ValueError: If fewer than 3 sums are given
    """
    sums = np.asarray(sums, dtype=np.float64)
    if sums.size < MIN_SUMS:
        raise ValueError(f"need at least {MIN_SUMS} frame sums, got {sums.size}")
    diffs = np.concatenate(([sums[0]], np.diff(sums)))
    for i in range(1, diffs.size - 1):
        if diffs[i - 1] < diffs[i] > diffs[i + 1]:
            return FrameSelection(i - 1, tuple(sums), tuple(diffs), False, crop)
    index = min(max(int(np.argmax(diffs)), 0), sums.size - 1)
    return FrameSelection(index, tuple(sums), tuple(diffs), True, crop)


def select_frame(vol, cfg=None):
    """Run summed_intensity and select_reference_frame with a config."""
    cfg = cfg or FrameSelectConfig()
    crop = cfg.crop or default_crop(vol.spatial_dims, cfg.crop_fraction)
    sums = summed_intensity(vol, crop, cfg.n_frames)
    return select_reference_frame(sums, crop)
