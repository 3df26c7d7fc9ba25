"""Two-tissue compartment model, MCIF forward model and multi-start fit.

The solver treats the input curve as piecewise linear between samples and
integrates each compartment exactly, so no ODE step size is involved. The
fit works in the unit cube spanned by the parameter bounds.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import least_squares, minimize
from scipy.stats import qmc

from .blood import FengParams, feng_curve
from .errors import DegenerateInput, GridMismatch
from .terminal import show_params
from .volume import TAC

PARAM_NAMES = (
    "A1", "A2", "A3", "lambda1", "lambda2", "lambda3", "tau",
    "K1", "k2", "k3", "k4",
    "rc", "sp_bt", "sp_tb", "vb",
)

DEFAULT_BOUNDS = {
    "A1": (50.0, 2000.0),
    "A2": (0.0, 100.0),
    "A3": (0.0, 100.0),
    "lambda1": (-10.0, -1.0),
    "lambda2": (-0.9, -0.03),
    "lambda3": (-0.025, -1e-4),
    "tau": (0.0, 2.0),
    "K1": (0.0, 2.0),
    "k2": (0.0, 2.0),
    "k3": (0.0, 2.0),
    "k4": (0.0, 2.0),
    "rc": (0.0, 1.0),
    "sp_bt": (0.0, 1.0),
    "sp_tb": (0.0, 1.0),
    "vb": (0.0, 0.2),
}

MIN_FRAMES = len(PARAM_NAMES)

# Tissue blood-volume fraction never exceeds this
VB_MAX = 0.2

RC, SP_BT = PARAM_NAMES.index("rc"), PARAM_NAMES.index("sp_bt")

# Below this |alpha * h| the exponential integrals use their Taylor series
SERIES_LIMIT = 1e-3
# Above this alpha * span the cumulative form could overflow
VECTOR_SPAN_LIMIT = 1200.0
# Eigenvalue gap treated as a repeated root
DEGENERATE_GAP = 1e-9


class TwoTissueParams(BaseModel):
    """Rate constants of the two-tissue model (1/min, K1 in mL/g/min)."""
    model_config = ConfigDict(frozen=True)

    K1: float = Field(ge=0)
    k2: float = Field(ge=0)
    k3: float = Field(ge=0)
    k4: float = Field(0.0, ge=0)

    @property
    def ki(self):
        """Net influx rate K1*k3/(k2+k3); 0 when k2+k3 is 0."""
        denom = self.k2 + self.k3
        return self.K1 * self.k3 / denom if denom > 0 else 0.0


class MeasurementParams(BaseModel):
    """Recovery, spill-over and blood-volume fractions."""
    model_config = ConfigDict(frozen=True)

    rc: float = Field(1.0, ge=0, le=1)
    sp_bt: float = Field(0.0, ge=0, le=1)
    sp_tb: float = Field(0.0, ge=0, le=1)
    vb: float = Field(0.0, ge=0, le=VB_MAX)


class MCIFParams(BaseModel):
    """The 15 parameters estimated jointly by fit_mcif."""
    model_config = ConfigDict(frozen=True)

    feng: FengParams
    tissue: TwoTissueParams
    measurement: MeasurementParams

    def to_vector(self):
        t, m = self.tissue, self.measurement
        return np.array(self.feng.as_tuple() + (t.K1, t.k2, t.k3, t.k4, m.rc, m.sp_bt, m.sp_tb, m.vb))

    @classmethod
    def from_vector(cls, x):
        x = [float(v) for v in x]
        return cls(
            feng=FengParams(**dict(zip(PARAM_NAMES[:7], x[:7]))),
            tissue=TwoTissueParams(**dict(zip(PARAM_NAMES[7:11], x[7:11]))),
            measurement=MeasurementParams(**dict(zip(PARAM_NAMES[11:], x[11:]))),
        )

    def to_flat(self):
        return dict(zip(PARAM_NAMES, self.to_vector().tolist()))


# ---------------------------------------------------------------------------
# Two-tissue solver
# ---------------------------------------------------------------------------

def _phi(x):
    """phi1 = (1-e^-x)/x and phi2 = (1-e^-x(1+x))/x^2, stable near 0."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < SERIES_LIMIT
    xs = np.where(small, 1.0, x)
    em1 = -np.expm1(-xs)
    phi1 = np.where(small, 1 - x / 2 + x**2 / 6 - x**3 / 24 + x**4 / 120, em1 / xs)
    phi2 = np.where(small, 0.5 - x / 3 + x**2 / 8 - x**3 / 30 + x**4 / 144,
                    (em1 - xs * np.exp(-xs)) / xs**2)
    return phi1, phi2


def exp_convolve(t, u, alpha):
    """Exact integral of e^{-alpha (t - s)} u(s) ds from t[0] to each t[i].

    ``u`` is taken as piecewise linear between the samples.
    """
    t = np.asarray(t, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    y = np.zeros_like(t)
    if t.size < 2:
        return y
    h = np.diff(t)
    phi1, phi2 = _phi(alpha * h)
    inc = h * (u[1:] * phi1 - (u[1:] - u[:-1]) * phi2)
    span = alpha * (t[-1] - t[0])
    if span < VECTOR_SPAN_LIMIT:
        # weights centred on the interval midpoint keep exponents within +-600
        w = np.exp(alpha * (t[1:] - (t[0] + t[-1]) / 2))
        y[1:] = np.cumsum(inc * w) / w
    else:
        decay = np.exp(-alpha * h)
        acc = 0.0
        for i in range(inc.size):
            acc = acc * decay[i] + inc[i]
            y[i + 1] = acc
    return y


def compartments(t, cp, K1, k2, k3, k4):
    """Free (C1) and bound (C2) tracer for input cp sampled at t (t[0] = 0)."""
    s = k2 + k3 + k4
    root = math.sqrt(max((k2 + k3 - k4) ** 2 + 4 * k3 * k4, 0.0))
    a2 = (s + root) / 2
    a1 = k2 * k4 / a2 if a2 > 0 else 0.0
    gap = a2 - a1
    if gap < DEGENERATE_GAP:
        return K1 * exp_convolve(t, cp, a1), np.zeros_like(np.asarray(t, dtype=np.float64))
    e1, e2 = exp_convolve(t, cp, a1), exp_convolve(t, cp, a2)
    c1 = K1 / gap * ((k4 - a1) * e1 + (a2 - k4) * e2)
    c2 = K1 * k3 / gap * (e1 - e2)
    return c1, c2


def solve_2tc(params, cp):
    """Free, bound and total tissue concentration on the sample times of ``cp``.

    Before its first sample the input is held at its first value back to
    t = 0.

    Args:
        params: TwoTissueParams
        cp: plasma TAC

    Returns:
        (c1, c2, ct) TACs on cp.times
    """
    t, u = cp.with_origin()
    c1, c2 = compartments(t, u, params.K1, params.k2, params.k3, params.k4)
    k = t.size - len(cp)
    return TAC(cp.times, c1[k:]), TAC(cp.times, c2[k:]), TAC(cp.times, (c1 + c2)[k:])


def refine_grid(times, oversample=8):
    """Grid from t = 0 with ``oversample`` steps per interval.

    Returns:
        (fine grid, indices of ``times`` in the fine grid)
    """
    times = np.asarray(times, dtype=np.float64)
    knots = np.concatenate(([0.0], times)) if times[0] > 0 else times
    steps = np.linspace(0.0, 1.0, oversample + 1)[:-1]
    fine = np.concatenate([a + (b - a) * steps for a, b in zip(knots[:-1], knots[1:])]
                          + [knots[-1:]])
    idx = np.arange(knots.size) * oversample
    return fine, idx[knots.size - times.size:]


def forward_curves(feng, tissue, times, oversample=8):
    """Plasma input and tissue (C1 + C2) curves sampled at ``times``."""
    fine, idx = refine_grid(times, oversample)
    cp = feng_curve(fine, *feng.as_tuple())
    c1, c2 = compartments(fine, cp, tissue.K1, tissue.k2, tissue.k3, tissue.k4)
    return cp[idx], (c1 + c2)[idx]


def _observe(x, fine, idx):
    cp = feng_curve(fine, *x[:7])
    c1, c2 = compartments(fine, cp, *x[7:11])
    cp, ct = cp[idx], (c1 + c2)[idx]
    rc, sp_bt, sp_tb, vb = x[11:]
    idif = rc * cp + sp_bt * ct
    tissue = (1 - vb) * ct + vb * cp + sp_tb * (cp - ct)
    return np.maximum(idif, 0.0), np.maximum(tissue, 0.0)


def model_observations(params, times, oversample=8):
    """Predicted image-derived input and surrounding-tissue curves.

    Returns:
        (idif TAC, tissue TAC) on ``times``, both clamped at 0
    """
    times = np.asarray(times, dtype=np.float64)
    fine, idx = refine_grid(times, oversample)
    idif, tissue = _observe(params.to_vector(), fine, idx)
    return TAC(times, idif), TAC(times, tissue)


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------

class FitConfig(BaseModel):
    """Settings for fit_mcif.

    ``bounds`` overrides entries of DEFAULT_BOUNDS by parameter name.
    With ``tie_spillover`` the IDIF is a convex mix of blood and its
    surroundings (sp_bt = 1 - rc). Without it, scaling the input can be
    absorbed by K1 and the measurement terms, and the input amplitude is
    not determined by the two curves.
    """
    bounds: dict[str, tuple[float, float]] = Field(default_factory=dict)
    tie_spillover: bool = True
    w_idif: float = Field(1.0, ge=0)
    w_tissue: float = Field(1.0, ge=0)
    n_starts: int = Field(8, ge=1)
    seed: int = 7
    max_evals: int = Field(5000, ge=100)
    cycle_evals: int = Field(1500, ge=50)
    rel_tol: float = Field(1e-8, gt=0)
    oversample: int = Field(8, ge=1)
    polish: bool = True
    polish_top: int = Field(3, ge=1)
    polish_evals: int = Field(400, ge=1)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_bounds(self):
        unknown = sorted(set(self.bounds) - set(PARAM_NAMES))
        if unknown:
            raise ValueError(f"unknown parameters in bounds: {unknown}")
        if self.w_idif + self.w_tissue <= 0:
            raise ValueError("w_idif + w_tissue must be positive")
        b = {**DEFAULT_BOUNDS, **self.bounds}
        for name, (lo, hi) in b.items():
            if not lo <= hi:
                raise ValueError(f"bounds for {name}: {lo} > {hi}")
        if b["A1"][0] <= 0:
            raise ValueError("bounds for A1 must be positive")
        if not (b["lambda1"][1] < b["lambda2"][0]
                and b["lambda2"][1] < b["lambda3"][0]
                and b["lambda3"][1] < 0):
            raise ValueError("lambda bounds must be disjoint, increasing and negative")
        for name in ("A2", "A3", "tau", "K1", "k2", "k3", "k4"):
            if b[name][0] < 0:
                raise ValueError(f"bounds for {name} must be >= 0")
        for name in ("rc", "sp_bt", "sp_tb"):
            if b[name][0] < 0 or b[name][1] > 1:
                raise ValueError(f"bounds for {name} must lie in [0, 1]")
        if b["vb"][0] < 0 or b["vb"][1] > VB_MAX:
            raise ValueError(f"bounds for vb must lie in [0, {VB_MAX}]")
        return self

    def bound_arrays(self):
        b = {**DEFAULT_BOUNDS, **self.bounds}
        lo = np.array([b[n][0] for n in PARAM_NAMES])
        hi = np.array([b[n][1] for n in PARAM_NAMES])
        return lo, hi

    def free_mask(self):
        """Parameters the optimizer moves; sp_bt follows rc when tied."""
        free = np.ones(len(PARAM_NAMES), dtype=bool)
        if self.tie_spillover:
            free[SP_BT] = False
        return free


@dataclass(frozen=True)
class FitResult:
    """Outcome of fit_mcif.

    Attributes:
        params: best parameter set
        mcif: the fitted input function on the frame times
        loss: weighted residual loss of ``params``
        converged: True if the winning start met its tolerance
        loss_trajectory: best-so-far loss of the winning start (non-increasing)
        best_start: index of the winning start
        start_losses: loss at each initial point
        final_losses: loss of each start after optimization
        n_evals: total objective evaluations over all starts
        rmse_idif, rmse_tissue: unweighted residual RMSE of each curve
    """
    params: MCIFParams
    mcif: TAC
    loss: float
    converged: bool
    loss_trajectory: tuple = field(default_factory=tuple)
    best_start: int = 0
    start_losses: tuple = field(default_factory=tuple)
    final_losses: tuple = field(default_factory=tuple)
    n_evals: int = 0
    rmse_idif: float = math.nan
    rmse_tissue: float = math.nan

    def to_dict(self):
        return {
            "params": self.params.to_flat(),
            "ki_tissue": self.params.tissue.ki,
            "loss": self.loss,
            "converged": self.converged,
            "best_start": self.best_start,
            "start_losses": list(self.start_losses),
            "final_losses": list(self.final_losses),
            "n_evals": self.n_evals,
            "rmse_idif": self.rmse_idif,
            "rmse_tissue": self.rmse_tissue,
            "loss_trajectory": list(self.loss_trajectory),
        }

    def __repr__(self):
        return f"FitResult(loss={self.loss:.4g}, converged={self.converged})"


class _Objective:
    """Counts evaluations and records the best loss seen so far."""

    def __init__(self, residuals):
        self.residuals = residuals
        self.evals = 0
        self.best = math.inf
        self.best_x = None
        self.history = []

    def __call__(self, u):
        r = self.residuals(u)
        loss = float(r @ r)
        self.evals += 1
        if loss < self.best:
            self.best = loss
            self.best_x = np.array(u, copy=True)
            self.history.append(loss)
        return loss


@dataclass
class _Start:
    index: int
    start_loss: float
    x: np.ndarray
    loss: float
    converged: bool
    evals: int
    history: list


def _simplex(u, step):
    n = u.size
    simplex = np.tile(u, (n + 1, 1))
    for i in range(n):
        simplex[i + 1, i] += step if u[i] + step <= 1.0 else -step
    return simplex


def _run_start(index, u0, residuals, cfg):
    objective = _Objective(residuals)
    start_loss = objective(u0)
    u, previous, step = np.array(u0), start_loss, 0.1
    converged = False
    while objective.evals < cfg.max_evals:
        budget = min(cfg.cycle_evals, cfg.max_evals - objective.evals)
        minimize(objective, u, method="Nelder-Mead", bounds=[(0.0, 1.0)] * u.size,
                 options={"maxfev": budget, "initial_simplex": _simplex(u, step),
                          "xatol": 1e-10, "fatol": cfg.rel_tol * previous,
                          "adaptive": True})
        u, current = objective.best_x, objective.best
        if previous - current <= cfg.rel_tol * max(previous, 1e-300):
            converged = True
            break
        previous, step = current, 0.05
    return _Start(index, start_loss, objective.best_x, objective.best, converged,
                  objective.evals, objective.history)


def _polish(start, residuals, cfg):
    if not cfg.polish:
        return start
    result = least_squares(residuals, np.clip(start.x, 0.0, 1.0), bounds=(0.0, 1.0),
                           method="trf", jac="2-point", max_nfev=cfg.polish_evals,
                           ftol=1e-10, xtol=1e-10, gtol=1e-10)
    loss = float(result.fun @ result.fun)
    evals = start.evals + int(result.nfev)
    if loss < start.loss:
        return _Start(start.index, start.start_loss, result.x, loss,
                      start.converged or result.status > 0, evals, start.history + [loss])
    return _Start(start.index, start.start_loss, start.x, start.loss,
                  start.converged or result.status > 0, evals, start.history)


def _check_curves(idif, tissue):
    if len(idif) != len(tissue) or not np.allclose(idif.times, tissue.times, rtol=1e-6, atol=0):
        raise GridMismatch("IDIF and tissue curves are not on the same time grid")
    if len(idif) < MIN_FRAMES:
        raise DegenerateInput(f"need at least {MIN_FRAMES} frames, got {len(idif)}")
    if not np.any(idif.values) or not np.any(tissue.values):
        raise DegenerateInput("IDIF or tissue curve is all zero")


def fit_mcif(idif, tissue, cfg=None, *, file=None):
    """Fit the input function and measurement model to an IDIF and tissue TAC.

    Starts are Latin-hypercube points over the bounds. Each start runs
    Nelder-Mead cycles until the relative loss change drops below
    ``cfg.rel_tol`` or ``cfg.max_evals`` is spent; the best starts are then
    refined with a bounded least-squares step. Results do not depend on
    ``cfg.threads``.

    Args:
        idif: measured image-derived input TAC
        tissue: measured surrounding-tissue TAC on the same times
        cfg: FitConfig (defaults if None)
        file: where to print per-start progress (None for silent)

    Returns:
        FitResult

    Raises:
        GridMismatch: If the two curves have different times
        DegenerateInput: If a curve is all zero or too short
    """
    cfg = cfg or FitConfig()
    _check_curves(idif, tissue)
    lo, hi = cfg.bound_arrays()
    fine, idx = refine_grid(idif.times, cfg.oversample)
    # each curve's squared error is relative to its own squared norm
    n = len(idif)
    scale = np.concatenate([
        np.full(n, math.sqrt(cfg.w_idif / float(idif.values @ idif.values))),
        np.full(n, math.sqrt(cfg.w_tissue / float(tissue.values @ tissue.values))),
    ])
    measured = np.concatenate([idif.values, tissue.values])

    free = cfg.free_mask()

    def expand(u):
        x = lo.copy()
        x[free] = lo[free] + np.clip(u, 0.0, 1.0) * (hi[free] - lo[free])
        if cfg.tie_spillover:
            x[SP_BT] = min(max(1.0 - x[RC], lo[SP_BT]), hi[SP_BT])
        return x

    def residuals(u):
        model_idif, model_tissue = _observe(expand(u), fine, idx)
        return scale * (np.concatenate([model_idif, model_tissue]) - measured)

    sampler = qmc.LatinHypercube(d=int(free.sum()), rng=np.random.default_rng(cfg.seed))
    points = sampler.random(cfg.n_starts)

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        starts = list(pool.map(lambda i: _run_start(i, points[i], residuals, cfg),
                               range(cfg.n_starts)))

    # polish the best few; ties go to the lower start index
    order = sorted(range(len(starts)), key=lambda i: (starts[i].loss, i))
    top = order[:min(cfg.polish_top, len(starts))]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        polished = list(pool.map(lambda i: _polish(starts[i], residuals, cfg), top))
    for s in polished:
        starts[s.index] = s
    best = min(starts, key=lambda s: (s.loss, s.index))

    params = MCIFParams.from_vector(expand(best.x))
    mcif = TAC(idif.times, feng_curve(idif.times, *params.feng.as_tuple()))
    model_idif, model_tissue = _observe(params.to_vector(), fine, idx)
    result = FitResult(
        params=params,
        mcif=mcif,
        loss=best.loss,
        converged=best.converged,
        loss_trajectory=tuple(best.history),
        best_start=best.index,
        start_losses=tuple(s.start_loss for s in starts),
        final_losses=tuple(s.loss for s in starts),
        n_evals=sum(s.evals for s in starts),
        rmse_idif=float(np.sqrt(np.mean((model_idif - idif.values) ** 2))),
        rmse_tissue=float(np.sqrt(np.mean((model_tissue - tissue.values) ** 2))),
    )
    if file is not None:
        for s in starts:
            status = "converged" if s.converged else "budget"
            print(f"  start {s.index}: {s.start_loss:.4g} -> {s.loss:.4g} "
                  f"({s.evals} evals, {status})", file=file)
        show_params(file=file, loss=f"{result.loss:.6g}", converged=result.converged,
                    best_start=result.best_start, evals=result.n_evals)
    return result
