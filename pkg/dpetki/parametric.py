"""Patlak graphical analysis, voxelwise Ki maps and regional z-scores."""
import io
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.integrate import cumulative_trapezoid

from .errors import DegenerateInput, GridMismatch, InsufficientPoints
from .terminal import warn
from .volume import Mask, atomic_write, check_same_grid, read_raw, write_json, write_raw

KIMAP_PLANES = ("ki", "intercept", "r2")


class PatlakConfig(BaseModel):
    """Patlak settings; t_star in minutes."""
    t_star: float = Field(10.0, ge=0)
    eps: float = Field(1e-6, gt=0)
    chunk: int = Field(4096, ge=1)


class ZScoreConfig(BaseModel):
    cutoff: float = -2.0
    expected_regions: Optional[int] = Field(36, ge=1)


@dataclass(frozen=True)
class PatlakPoints:
    """Patlak coordinates for samples where the input exceeds eps."""
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class PatlakFit:
    ki: float
    intercept: float
    r2: float
    n_points: int


def _check_times(a, b, what):
    if a.size != b.size or not np.allclose(a, b, rtol=1e-6, atol=0):
        raise GridMismatch(f"{what}: time grids differ")


def _normalized_integral(cp):
    """Running integral of cp from t = 0 (first sample held back to 0)."""
    t, u = cp.with_origin()
    integral = cumulative_trapezoid(u, t, initial=0.0)
    return integral[t.size - len(cp):]


def patlak_points(ct, cp, eps=1e-6):
    """Transform a tissue TAC to Patlak coordinates.

    x = integral(cp)/cp and y = ct/cp; samples with cp <= eps are skipped.

    Raises:
        GridMismatch: If the curves have different times
    """
    _check_times(ct.times, cp.times, "tissue and input")
    integral = _normalized_integral(cp)
    keep = cp.values > eps
    return PatlakPoints(cp.times[keep], integral[keep] / cp.values[keep],
                        ct.values[keep] / cp.values[keep])


def _row_sums(a):
    # column by column, so a row's sum never depends on the other rows in a
    total = np.zeros(a.shape[0])
    for column in a.T:
        total += column
    return total


def _ols(x, Y):
    """Least-squares line for each row of Y against x.

    Returns:
        (slope, intercept, r2) arrays with one entry per row
    """
    xm = x.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0:
        raise DegenerateInput("Patlak x values are all equal")
    ym = _row_sums(Y) / x.size
    dy = Y - ym[:, np.newaxis]
    slope = _row_sums(dy * dx) / sxx
    intercept = ym - slope * xm
    ss_res = _row_sums((dy - slope[:, np.newaxis] * dx) ** 2)
    ss_tot = _row_sums(dy ** 2)
    r2 = np.ones_like(slope)
    varying = ss_tot > 0
    r2[varying] = 1.0 - ss_res[varying] / ss_tot[varying]
    return slope, intercept, r2


def patlak_fit(points, t_star=10.0):
    """Linear fit of the Patlak points after t_star.

    Raises:
        InsufficientPoints: If fewer than 2 points lie after t_star
    """
    late = points.times > t_star
    n = int(late.sum())
    if n < 2:
        raise InsufficientPoints(f"{n} Patlak points after t* = {t_star} min, need 2")
    slope, intercept, r2 = _ols(points.x[late], points.y[np.newaxis, late])
    return PatlakFit(float(slope[0]), float(intercept[0]), float(r2[0]), n)


@dataclass(frozen=True)
class KiMap:
    """Voxelwise Patlak results; invalid voxels hold NaN.

    Attributes:
        ki, intercept, r2: float arrays (nx, ny, nz)
        valid: voxels inside the mask with a non-zero TAC
        t_star: start of the linear phase in minutes
    """
    ki: np.ndarray
    intercept: np.ndarray
    r2: np.ndarray
    valid: Mask
    t_star: float = 10.0

    @property
    def dims(self):
        return self.ki.shape

    def __repr__(self):
        return f"KiMap(dims={self.dims}, valid={self.valid.count})"


def ki_map(vol, mcif, brain_mask, t_star=10.0, eps=1e-6, *, threads=1, chunk=4096):
    """Patlak Ki for every voxel of brain_mask.

    Voxels are fitted in chunks, possibly in parallel, and written back by
    position, so the map is the same for any thread count.

    Raises:
        GridMismatch: If mcif and the volume disagree on times or the mask
            on dims
        InsufficientPoints: If fewer than 2 frames lie after t_star
    """
    _check_times(vol.mid_times, mcif.times, "volume and input function")
    check_same_grid(vol.spatial_dims, brain_mask.dims, "brain mask and volume")
    integral = _normalized_integral(mcif)
    cp = mcif.values
    sel = (cp > eps) & (mcif.times > t_star)
    if int(sel.sum()) < 2:
        raise InsufficientPoints(f"{int(sel.sum())} frames after t* = {t_star} min, need 2")
    x = integral[sel] / cp[sel]

    coords = np.nonzero(brain_mask.data)
    Y = vol.data[coords]
    nonzero = np.any(Y != 0, axis=1)
    coords = tuple(c[nonzero] for c in coords)
    Y = Y[nonzero][:, sel] / cp[sel]

    def fit(start):
        return _ols(x, Y[start:start + chunk])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fit, range(0, Y.shape[0], chunk)))

    planes = {name: np.full(vol.spatial_dims, np.nan) for name in KIMAP_PLANES}
    if parts:
        for name, values in zip(KIMAP_PLANES, zip(*parts)):
            planes[name][coords] = np.concatenate(values)
    valid = np.zeros(vol.spatial_dims, dtype=bool)
    valid[coords] = True
    return KiMap(planes["ki"], planes["intercept"], planes["r2"], Mask(valid), float(t_star))


def save_kimap(kimap, path, voxel_mm=(1.0, 1.0, 1.0)):
    data = np.stack([kimap.ki, kimap.intercept, kimap.r2], axis=-1)
    return write_raw(path, data, {
        "kind": "kimap", "voxel_mm": list(voxel_mm),
        "planes": list(KIMAP_PLANES), "t_star_min": kimap.t_star,
    })


def load_kimap(path):
    array, sidecar = read_raw(path, kind="kimap")
    ki, intercept, r2 = (array[..., i] for i in range(len(KIMAP_PLANES)))
    return KiMap(ki, intercept, r2, Mask(np.isfinite(ki)), float(sidecar.get("t_star_min", 10.0)))


@dataclass(frozen=True)
class RegionZ:
    id: int
    name: str
    side: Optional[str]
    n_voxels: int
    mean: float
    z: Optional[float]
    flagged: bool


@dataclass(frozen=True)
class RegionReport:
    """Regional Ki means, z-scores and hypometabolism flags.

    ``sigma`` is the population standard deviation of the finite region
    means. When it is 0 every z is 0 and ``degenerate`` is set.
    """
    rows: tuple
    mu: float
    sigma: float
    cutoff: float
    degenerate: bool = False
    warnings: tuple = field(default_factory=tuple)

    @property
    def flagged(self):
        return [r.name for r in self.rows if r.flagged]

    def to_frame(self):
        return pd.DataFrame([r.__dict__ for r in self.rows],
                            columns=["id", "name", "side", "n_voxels", "mean", "z", "flagged"])

    def to_dict(self):
        return {
            "mu": self.mu, "sigma": self.sigma, "cutoff": self.cutoff,
            "degenerate": self.degenerate, "flagged": self.flagged,
            "regions": [r.__dict__ for r in self.rows],
        }


def regional_zscores(kimap, atlas, cutoff=-2.0, expected_regions=None, *, file=sys.stderr):
    """z-score each atlas region's mean Ki against all regions.

    Regions without finite Ki voxels get a NaN mean and no z, and do not
    enter mu or sigma. A region is flagged when z < cutoff.
    """
    check_same_grid(kimap.dims, atlas.dims, "atlas and Ki map")
    warnings = []
    if expected_regions is not None and len(atlas.table) != expected_regions:
        warnings.append(f"atlas has {len(atlas.table)} regions, expected {expected_regions}")
        warn(warnings[-1], file=file)

    labels = atlas.labels.ravel()
    ki = kimap.ki.ravel()
    finite = np.isfinite(ki) & (labels > 0)
    size = max(atlas.ids, default=0) + 1
    sums = np.bincount(labels[finite], weights=ki[finite], minlength=size)
    counts = np.bincount(labels[finite], minlength=size)

    means = {rid: (sums[rid] / counts[rid] if counts[rid] else math.nan) for rid in atlas.ids}
    finite_means = np.array([m for m in means.values() if math.isfinite(m)])
    mu = float(finite_means.mean()) if finite_means.size else math.nan
    sigma = float(finite_means.std()) if finite_means.size else math.nan
    # identical means can leave a rounding-level std
    if finite_means.size and np.ptp(finite_means) == 0:
        sigma = 0.0
    degenerate = not sigma > 0

    rows = []
    for rid, region in atlas.table.items():
        mean = float(means[rid])
        if not math.isfinite(mean):
            z = None
        elif degenerate:
            z = 0.0
        else:
            z = (mean - mu) / sigma
        rows.append(RegionZ(rid, region.name, region.side, int(counts[rid]), mean, z,
                            z is not None and not degenerate and z < cutoff))
    return RegionReport(tuple(rows), mu, sigma, cutoff, degenerate, tuple(warnings))


def save_region_report(report, csv_path, json_path):
    buffer = io.StringIO()
    report.to_frame().to_csv(buffer, index=False, float_format="%.9g", lineterminator="\n")
    atomic_write(csv_path, buffer.getvalue())
    write_json(json_path, report.to_dict())
