"""Synthetic dynamic PET volumes with known carotids, kinetics and input.

The phantom has three tissue classes: a neck block crossed by two vertical
carotid cylinders, a brain block divided into a left/right atlas, and air.
Every curve comes from the same forward model that kinetics.py fits, so
truth and model agree to rounding.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter

from .blood import FengParams
from .kinetics import TwoTissueParams, forward_curves
from .terminal import show_params
from .volume import (
    TAC,
    Box,
    DynVolume,
    FrameSchedule,
    LabeledMask,
    Mask,
    save_labels,
    save_mask,
    save_volume,
    tac_to_csv,
    write_json,
)

NECK = 1
CAROTID = 2
# brain voxels carry class BRAIN_BASE + atlas id
BRAIN_BASE = 10

DEFAULT_FRAMES = [(18, 10.0), (10, 60.0), (10, 288.0)]


class PhantomConfig(BaseModel):
    """Geometry, kinetics and acquisition of the synthetic phantom.

    Boxes use inclusive voxel bounds. ``atlas_grid`` is the number of blocks
    per hemisphere along x, y and z.
    """
    model_config = ConfigDict(frozen=True)

    dims: tuple[int, int, int] = (64, 64, 48)
    voxel_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    frames: list[tuple[int, float]] = Field(default_factory=lambda: list(DEFAULT_FRAMES))
    feng: FengParams = FengParams()

    neck_box: Box = Box(lo=(10, 14, 0), hi=(53, 45, 23))
    neck: TwoTissueParams = TwoTissueParams(K1=0.05, k2=0.25, k3=0.02, k4=0.0)
    neck_vb: float = Field(0.05, ge=0, le=0.2)

    carotid_centers: list[tuple[int, int]] = Field(default_factory=lambda: [(22, 30), (42, 30)])
    carotid_z: tuple[int, int] = (6, 17)
    carotid_radius_mm: float = Field(2.5, gt=0)

    brain_box: Box = Box(lo=(6, 6, 28), hi=(57, 57, 46))
    atlas_grid: tuple[int, int, int] = (2, 3, 3)
    brain: TwoTissueParams = TwoTissueParams(K1=0.1, k2=0.15, k3=0.05, k4=0.0)
    brain_vb: float = Field(0.04, ge=0, le=0.2)
    hypo_region: int | None = 14
    hypo: TwoTissueParams = TwoTissueParams(K1=0.08, k2=0.15, k3=0.45 / 13, k4=0.0)

    psf_sigma_mm: float = Field(2.0, ge=0)
    noise_cv: float = Field(0.02, ge=0)
    oversample: int = Field(8, ge=1)
    seed: int = Field(7, ge=0)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_geometry(self):
        if any(n < 1 for n in self.dims):
            raise ValueError(f"dims must be positive: {self.dims}")
        if any(v <= 0 for v in self.voxel_mm):
            raise ValueError(f"voxel_mm must be positive: {self.voxel_mm}")
        if not self.frames or any(c < 1 or d <= 0 for c, d in self.frames):
            raise ValueError("frames must be non-empty (count >= 1, duration > 0) blocks")
        for name in ("neck_box", "brain_box"):
            if not getattr(self, name).within(self.dims):
                raise ValueError(f"{name} lies outside dims {self.dims}")
        if self.neck_box.overlaps(self.brain_box):
            raise ValueError("neck_box and brain_box overlap")
        lo, hi = self.neck_box.lo, self.neck_box.hi
        rx = int(self.carotid_radius_mm // self.voxel_mm[0])
        ry = int(self.carotid_radius_mm // self.voxel_mm[1])
        for cx, cy in self.carotid_centers:
            if not (lo[0] <= cx - rx and cx + rx <= hi[0] and lo[1] <= cy - ry and cy + ry <= hi[1]):
                raise ValueError(f"carotid at {(cx, cy)} with carotid_radius_mm "
                                 f"{self.carotid_radius_mm} leaves neck_box")
        z0, z1 = self.carotid_z
        if not lo[2] <= z0 <= z1 <= hi[2]:
            raise ValueError(f"carotid_z {self.carotid_z} leaves neck_box")
        gx, gy, gz = self.atlas_grid
        shape = self.brain_box.shape
        if min(self.atlas_grid) < 1 or shape[0] // 2 < gx or shape[1] < gy or shape[2] < gz:
            raise ValueError(f"atlas_grid {self.atlas_grid} does not fit brain_box {shape}")
        if self.hypo_region is not None and not 1 <= self.hypo_region <= self.n_regions:
            raise ValueError(f"hypo_region must lie in [1, {self.n_regions}]")
        return self

    @property
    def n_regions(self):
        return 2 * math.prod(self.atlas_grid)

    @property
    def schedule(self):
        return FrameSchedule.from_blocks(self.frames)


@dataclass(frozen=True)
class PhantomBundle:
    """A generated phantom and everything known about it.

    Attributes:
        volume: the noisy, blurred dynamic volume
        carotid: ground-truth carotid lumen
        atlas: 36-region brain atlas (ids 1..18 left, 19..36 right by default)
        truth_cp: plasma input sampled at the frame mid-times
        truth_params: kinetics per atlas region name plus "neck"
        truth_vb: blood volume fraction per region name plus "neck"
        bolus_frame: frame where truth_cp peaks
    """
    volume: DynVolume
    carotid: Mask
    atlas: LabeledMask
    truth_cp: TAC
    truth_params: dict = field(default_factory=dict)
    truth_vb: dict = field(default_factory=dict)
    bolus_frame: int = 0
    config: PhantomConfig | None = None

    def truth_ki(self, name):
        return self.truth_params[name].ki

    def __repr__(self):
        return f"PhantomBundle(dims={self.volume.dims}, bolus_frame={self.bolus_frame})"


def gaussian_blur(vol3d, sigma_mm, voxel_mm=(1.0, 1.0, 1.0)):
    """Isotropic Gaussian PSF; sigma 0 returns an unchanged copy."""
    vol3d = np.asarray(vol3d, dtype=np.float64)
    if sigma_mm == 0:
        return vol3d.copy()
    sigma = [sigma_mm / v for v in voxel_mm]
    return gaussian_filter(vol3d, sigma=sigma, mode="constant", cval=0.0, truncate=4.0)


def _bins(lo, hi, n):
    return np.array_split(np.arange(lo, hi + 1), n)


def build_atlas(cfg):
    """Label the brain box into left/right blocks.

    Returns:
        LabeledMask with names like ``left_01`` and side tags
    """
    labels = np.zeros(cfg.dims, dtype=np.int32)
    gx, gy, gz = cfg.atlas_grid
    per_side = gx * gy * gz
    lo, hi = cfg.brain_box.lo, cfg.brain_box.hi
    halves = _bins(lo[0], hi[0], 2)
    names, sides = {}, {}
    for s, side in enumerate(("left", "right")):
        xbins = np.array_split(halves[s], gx)
        for ix, xs in enumerate(xbins):
            for iy, ys in enumerate(_bins(lo[1], hi[1], gy)):
                for iz, zs in enumerate(_bins(lo[2], hi[2], gz)):
                    local = ix * gy * gz + iy * gz + iz + 1
                    rid = s * per_side + local
                    labels[xs[0]:xs[-1] + 1, ys[0]:ys[-1] + 1, zs[0]:zs[-1] + 1] = rid
                    names[rid] = f"{side}_{local:02d}"
                    sides[rid] = side
    return LabeledMask.from_labels(labels, names, sides)


def build_carotids(cfg):
    """Vertical cylinders; a voxel is inside if its centre is within the radius."""
    nx, ny, nz = cfg.dims
    x, y = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    disk = np.zeros((nx, ny), dtype=bool)
    for cx, cy in cfg.carotid_centers:
        d2 = ((x - cx) * cfg.voxel_mm[0]) ** 2 + ((y - cy) * cfg.voxel_mm[1]) ** 2
        disk |= d2 <= cfg.carotid_radius_mm ** 2
    mask = np.zeros(cfg.dims, dtype=bool)
    z0, z1 = cfg.carotid_z
    mask[:, :, z0:z1 + 1] = disk[:, :, np.newaxis]
    return Mask(mask)


def _frame(f, classes, curves, cfg, cv):
    image = curves[:, f][classes]
    image = gaussian_blur(image, cfg.psf_sigma_mm, cfg.voxel_mm)
    if cv[f] > 0:
        rng = np.random.default_rng([cfg.seed, f])
        image = image * (1.0 + cv[f] * rng.standard_normal(image.shape))
    return np.maximum(image, 0.0)


def generate_phantom(cfg=None, seed=None, *, file=None):
    """Generate a phantom bundle.

    The same config and seed always produce the same bytes, whatever
    ``cfg.threads`` is: each frame draws from its own generator seeded by
    (seed, frame index).

    Args:
        cfg: PhantomConfig (defaults if None)
        seed: overrides cfg.seed when given
        file: where to print a parameter summary (None for silent)

    Returns:
        PhantomBundle
    """
    cfg = cfg or PhantomConfig()
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": int(seed)})
    schedule = cfg.schedule
    times = schedule.mid_times

    atlas = build_atlas(cfg)
    carotid = build_carotids(cfg)
    classes = np.zeros(cfg.dims, dtype=np.int64)
    nb = cfg.neck_box.slices
    classes[nb] = NECK
    classes[carotid.data] = CAROTID
    inside = atlas.labels > 0
    classes[inside] = BRAIN_BASE + atlas.labels[inside]

    # one curve per class; unused rows stay zero
    curves = np.zeros((BRAIN_BASE + cfg.n_regions + 1, len(schedule)))
    truth_params, truth_vb = {"neck": cfg.neck}, {"neck": cfg.neck_vb}
    cp, ct = forward_curves(cfg.feng, cfg.neck, times, cfg.oversample)
    curves[CAROTID] = cp
    curves[NECK] = (1 - cfg.neck_vb) * ct + cfg.neck_vb * cp
    by_kinetics = {}
    for rid, region in atlas.table.items():
        kinetics = cfg.hypo if rid == cfg.hypo_region else cfg.brain
        if kinetics not in by_kinetics:
            by_kinetics[kinetics] = forward_curves(cfg.feng, kinetics, times, cfg.oversample)[1]
        curves[BRAIN_BASE + rid] = (1 - cfg.brain_vb) * by_kinetics[kinetics] + cfg.brain_vb * cp
        truth_params[region.name] = kinetics
        truth_vb[region.name] = cfg.brain_vb

    cv = cfg.noise_cv * np.sqrt(60.0 / np.asarray(schedule.durations_s))
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        frames = list(pool.map(lambda f: _frame(f, classes, curves, cfg, cv), range(len(schedule))))
    volume = DynVolume(np.stack(frames, axis=-1), cfg.voxel_mm, schedule)

    bundle = PhantomBundle(
        volume=volume,
        carotid=carotid,
        atlas=atlas,
        truth_cp=TAC(times, cp),
        truth_params=truth_params,
        truth_vb=truth_vb,
        bolus_frame=int(np.argmax(cp)),
        config=cfg,
    )
    show_params(file=file, dims=cfg.dims, frames=len(schedule), seed=cfg.seed,
                carotid_voxels=carotid.count, regions=len(atlas.table),
                hypo_region=cfg.hypo_region, bolus_frame=bundle.bolus_frame)
    return bundle


def write_bundle(bundle, out_dir):
    """Write the phantom's five artifacts into out_dir.

    Returns:
        dict of artifact name -> list of file paths
    """
    out = Path(out_dir)
    cfg = bundle.config or PhantomConfig()
    voxel = bundle.volume.voxel_mm
    artifacts = {
        "volume": save_volume(bundle.volume, out / "volume"),
        "carotid_truth": save_mask(bundle.carotid, out / "carotid_truth", voxel),
        "atlas": save_labels(bundle.atlas, out / "atlas", voxel),
    }
    tac_to_csv(bundle.truth_cp, out / "truth_cp.csv")
    artifacts["truth_cp"] = (out / "truth_cp.csv",)
    hypo = bundle.atlas.table.get(cfg.hypo_region) if cfg.hypo_region else None
    truth = {
        "seed": cfg.seed,
        "bolus_frame": bundle.bolus_frame,
        "hypo_region": hypo.name if hypo else None,
        "feng": cfg.feng.model_dump(),
        "regions": {
            name: {**p.model_dump(), "ki": p.ki, "vb": bundle.truth_vb[name]}
            for name, p in bundle.truth_params.items()
        },
        "config": json.loads(cfg.model_dump_json()),
    }
    write_json(out / "truth.json", truth)
    artifacts["truth"] = (out / "truth.json",)
    return {k: [str(p) for p in v] for k, v in artifacts.items()}
