"""Stage wiring, run reports and the command implementations behind the CLI.

Every ``cmd_*`` function returns a process exit code:

    0  success
    2  bad configuration, unreadable or malformed input, grid mismatch
    3  carotid segmentation came out empty
    4  the MCIF fit did not converge (all artifacts are still written)
"""
import functools
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, ValidationError

from . import metrics
from .errors import ConfigError, DpetError, EmptySegmentation, GridMismatch, LengthMismatch
from .frames import FrameSelectConfig, select_frame
from .kinetics import FitConfig, fit_mcif
from .parametric import (
    PatlakConfig,
    ZScoreConfig,
    ki_map,
    load_kimap,
    regional_zscores,
    save_kimap,
    save_region_report,
)
from .phantom import PhantomConfig, generate_phantom, write_bundle
from .segment import (
    IdifConfig,
    SegConfig,
    extract_idif,
    pericarotid_shell,
    segment_carotids,
)
from .terminal import error, show_params, stage, warn
from .volume import (
    check_same_grid,
    load_labels,
    load_mask,
    load_volume,
    save_mask,
    tac_from_csv,
    tac_to_csv,
    write_json,
)

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 4


class PipelineConfig(BaseModel):
    """Inputs, outputs and per-stage settings of a full run."""
    volume: Path
    atlas: Path
    out_dir: Path = Path("out")
    seed: int = Field(7, ge=0)
    threads: int = Field(1, ge=1)
    frame_select: FrameSelectConfig = FrameSelectConfig()
    seg: SegConfig = SegConfig()
    idif: IdifConfig = IdifConfig()
    fit: FitConfig = FitConfig()
    patlak: PatlakConfig = PatlakConfig()
    zscore: ZScoreConfig = ZScoreConfig()

    def pipeline_hash(self):
        """sha256 of the canonical config (without paths and threads) and seed."""
        body = self.model_dump(mode="json", exclude={"volume", "atlas", "out_dir", "threads"})
        text = json.dumps(body, sort_keys=True) + f"|seed={self.seed}"
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class StageRecord:
    name: str
    status: str = "pending"
    seconds: float = 0.0
    parameters: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


@dataclass
class RunReport:
    """What a run did, stage by stage.

    Attributes:
        pipeline_hash: hash of config and seed
        stages: StageRecord list in execution order
        warnings: every warning raised during the run
        summary: headline numbers (reference frame, fit, flagged regions)
        exit_code: the code the CLI returns
        error: message of the error that stopped the run, if any
    """
    pipeline_hash: str
    seed: int
    threads: int
    schema_version: int = SCHEMA_VERSION
    stages: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    error: Optional[str] = None

    @property
    def artifacts(self):
        return [a for s in self.stages for a in s.artifacts]

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "pipeline_hash": self.pipeline_hash,
            "seed": self.seed,
            "threads": self.threads,
            "exit_code": self.exit_code,
            "error": self.error,
            "summary": self.summary,
            "warnings": self.warnings,
            "artifacts": self.artifacts,
            "stages": [s.__dict__ for s in self.stages],
        }


def exit_code_for(exc):
    if isinstance(exc, DpetError):
        return exc.exit_code
    return EXIT_CONFIG


class _Run:
    def __init__(self, cfg, report, file, err):
        self.cfg = cfg
        self.report = report
        self.file = file
        self.err = err
        self.out = Path(cfg.out_dir)

    def warn(self, record, message):
        record.warnings.append(message)
        self.report.warnings.append(f"{record.name}: {message}")
        warn(message, file=self.err)

    @contextmanager
    def stage(self, name, **parameters):
        record = StageRecord(name, parameters=parameters)
        self.report.stages.append(record)
        stage(name, file=self.file)
        start = time.perf_counter()
        try:
            yield record
        except Exception:
            record.status = "failed"
            for path in record.artifacts:
                Path(path).unlink(missing_ok=True)
            record.artifacts.clear()
            raise
        else:
            record.status = "ok"
        finally:
            record.seconds = round(time.perf_counter() - start, 6)

    def written(self, record, paths):
        record.artifacts.extend(str(p) for p in paths)


def _input_exists(path):
    path = Path(path)
    if path.suffix == ".nii":
        return path.is_file()
    base = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    return all(base.with_name(base.name + s).is_file() for s in (".raw", ".json"))


def _prepare(cfg):
    for name in ("volume", "atlas"):
        if not _input_exists(getattr(cfg, name)):
            raise ConfigError(f"{name}: {getattr(cfg, name)} does not exist")
    try:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"out_dir: cannot create {cfg.out_dir}: {e}") from e
    if not os.access(cfg.out_dir, os.W_OK):
        raise ConfigError(f"out_dir: {cfg.out_dir} is not writable")


def run_pipeline(cfg, *, file=sys.stdout, err=sys.stderr):
    """Run frame selection through regional z-scores and write every artifact.

    Errors stop the run; the report (including the failing stage) is still
    written to ``run_report.json`` when the output directory is usable.

    Returns:
        RunReport with exit_code set
    """
    report = RunReport(cfg.pipeline_hash(), cfg.seed, cfg.threads)
    run = _Run(cfg, report, file, err)
    show_params(file=file, volume=cfg.volume, atlas=cfg.atlas, out_dir=cfg.out_dir,
                seed=cfg.seed, threads=cfg.threads, hash=report.pipeline_hash[:12])
    out_ready = False
    try:
        _prepare(cfg)
        out_ready = True
        _run_stages(run)
    except (DpetError, ValueError, OSError) as e:
        report.exit_code = exit_code_for(e)
        report.error = str(e)
        error(str(e), file=err)
    if out_ready:
        try:
            write_json(run.out / "run_report.json", report.to_dict())
        except DpetError as e:
            error(str(e), file=err)
            report.exit_code = report.exit_code or e.exit_code
    return report


def _run_stages(run):
    cfg, out, report = run.cfg, run.out, run.report

    with run.stage("load", volume=str(cfg.volume), atlas=str(cfg.atlas)) as rec:
        vol = load_volume(cfg.volume, file=None)
        atlas = load_labels(cfg.atlas)
        check_same_grid(vol.spatial_dims, atlas.dims, "atlas and volume")
        if vol.nonfinite:
            run.warn(rec, f"{vol.nonfinite} non-finite voxels set to 0")
        if vol.clamped:
            run.warn(rec, f"{vol.clamped} negative voxels clamped to 0")

    with run.stage("frame-select", **cfg.frame_select.model_dump(mode="json")) as rec:
        selection = select_frame(vol, cfg.frame_select)
        if selection.clamped:
            run.warn(rec, f"no local maximum in frame differences, using frame {selection.index}")
        write_json(out / "frame_select.json", selection.to_dict())
        run.written(rec, [out / "frame_select.json"])
        show_params(file=run.file, reference_frame=selection.index)

    with run.stage("segment", frame=selection.index, **cfg.seg.model_dump(mode="json")) as rec:
        seg = segment_carotids(vol.frame(selection.index), cfg.seg)
        run.written(rec, save_mask(seg.mask, out / "carotid_mask", vol.voxel_mm))
        write_json(out / "segmentation.json", {"reference_frame": selection.index, **seg.to_dict()})
        run.written(rec, [out / "segmentation.json"])
        show_params(file=run.file, voxels=seg.mask.count, removed_islands=seg.removed_count)

    with run.stage("idif", **cfg.idif.model_dump(mode="json")) as rec:
        idif = extract_idif(vol, seg.mask, cfg.idif.strategy, cfg.idif.percent)
        shell = pericarotid_shell(seg.mask, cfg.idif.shell_inner, cfg.idif.shell_outer)
        if shell.count == 0:
            raise EmptySegmentation("peri-carotid shell is empty")
        tissue = extract_idif(vol, shell, "mean")
        tac_to_csv(idif, out / "idif.csv")
        tac_to_csv(tissue, out / "tissue.csv")
        run.written(rec, [out / "idif.csv", out / "tissue.csv"])

    fit_cfg = cfg.fit.model_copy(update={"seed": cfg.seed, "threads": cfg.threads})
    with run.stage("fit-mcif", **fit_cfg.model_dump(mode="json")) as rec:
        fit = fit_mcif(idif, tissue, fit_cfg, file=run.file)
        tac_to_csv(fit.mcif, out / "mcif.csv")
        write_json(out / "fit.json", fit.to_dict())
        run.written(rec, [out / "mcif.csv", out / "fit.json"])
        if not fit.converged:
            run.warn(rec, f"fit did not converge within {fit_cfg.max_evals} evaluations per start")

    with run.stage("patlak", threads=cfg.threads, **cfg.patlak.model_dump(mode="json")) as rec:
        kimap = ki_map(vol, fit.mcif, atlas.to_mask(), cfg.patlak.t_star, cfg.patlak.eps,
                       threads=cfg.threads, chunk=cfg.patlak.chunk)
        run.written(rec, save_kimap(kimap, out / "kimap", vol.voxel_mm))

    with run.stage("zscore", **cfg.zscore.model_dump(mode="json")) as rec:
        regions = regional_zscores(kimap, atlas, cfg.zscore.cutoff, cfg.zscore.expected_regions,
                                   file=None)
        for message in regions.warnings:
            run.warn(rec, message)
        save_region_report(regions, out / "regions.csv", out / "regions.json")
        run.written(rec, [out / "regions.csv", out / "regions.json"])
        show_params(file=run.file, flagged=", ".join(regions.flagged) or "none")

    report.summary = {
        "reference_frame": selection.index,
        "frame_select_clamped": selection.clamped,
        "carotid_voxels": seg.mask.count,
        "removed_islands": seg.removed_count,
        "fit_loss": fit.loss,
        "fit_converged": fit.converged,
        "flagged_regions": regions.flagged,
        "region_mu": regions.mu,
        "region_sigma": regions.sigma,
    }
    report.exit_code = EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_config(model, path):
    if path is None:
        return model()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    return model.model_validate_json(text)


def _guarded(func):
    """Map exceptions raised by a command to exit codes."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        # resolved per call so redirected streams are honoured
        kwargs.setdefault("file", sys.stdout)
        err = kwargs.setdefault("err", sys.stderr)
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            error(f"invalid configuration:\n{e}", file=err)
            return EXIT_CONFIG
        except (DpetError, ValueError, OSError) as e:
            error(str(e), file=err)
            return exit_code_for(e)
    return wrapper


def _emit(obj, file):
    if file is not None:
        print(json.dumps(obj, indent=2), file=file)


def _out_dir(out):
    path = Path(out or "out")
    path.mkdir(parents=True, exist_ok=True)
    return path


@_guarded
def cmd_phantom(config=None, out=None, *, seed=None, threads=None, file=sys.stdout, err=sys.stderr):
    """Generate a phantom and write its five artifacts."""
    cfg = _load_config(PhantomConfig, config)
    if threads is not None:
        cfg = cfg.model_copy(update={"threads": threads})
    bundle = generate_phantom(cfg, seed, file=file)
    artifacts = write_bundle(bundle, _out_dir(out))
    _emit({"artifacts": artifacts}, file)
    return EXIT_OK


@_guarded
def cmd_run(config, out=None, *, seed=None, threads=None, file=sys.stdout, err=sys.stderr):
    """Run the whole pipeline from a PipelineConfig JSON file."""
    cfg = _load_config(PipelineConfig, config)
    overrides = {k: v for k, v in (("out_dir", out), ("seed", seed), ("threads", threads))
                 if v is not None}
    if overrides:
        cfg = PipelineConfig.model_validate({**cfg.model_dump(), **overrides})
    report = run_pipeline(cfg, file=file, err=err)
    return report.exit_code


@_guarded
def cmd_frame_select(volume, out=None, *, n_frames=10, crop_fraction=0.5,
                     file=sys.stdout, err=sys.stderr):
    """Select the reference frame of a volume."""
    cfg = FrameSelectConfig(n_frames=n_frames, crop_fraction=crop_fraction)
    selection = select_frame(load_volume(volume, file=err), cfg)
    if out is not None:
        write_json(_out_dir(out) / "frame_select.json", selection.to_dict())
    _emit(selection.to_dict(), file)
    return EXIT_OK


@_guarded
def cmd_segment(volume, out=None, *, frame=None, config=None, file=sys.stdout, err=sys.stderr):
    """Segment the carotids on one frame (auto-selected if not given)."""
    cfg = _load_config(SegConfig, config)
    vol = load_volume(volume, file=err)
    index = select_frame(vol).index if frame is None else frame
    if not 0 <= index < vol.nt:
        raise ConfigError(f"frame {index} outside 0..{vol.nt - 1}")
    seg = segment_carotids(vol.frame(index), cfg)
    out_dir = _out_dir(out)
    save_mask(seg.mask, out_dir / "carotid_mask", vol.voxel_mm)
    result = {"reference_frame": index, **seg.to_dict()}
    write_json(out_dir / "segmentation.json", result)
    _emit(result, file)
    return EXIT_OK


@_guarded
def cmd_idif(volume, mask, out=None, *, config=None, file=sys.stdout, err=sys.stderr):
    """Extract the IDIF and the peri-carotid tissue curve."""
    cfg = _load_config(IdifConfig, config)
    vol = load_volume(volume, file=err)
    carotid = load_mask(mask)
    idif = extract_idif(vol, carotid, cfg.strategy, cfg.percent)
    tissue = extract_idif(vol, pericarotid_shell(carotid, cfg.shell_inner, cfg.shell_outer))
    out_dir = _out_dir(out)
    tac_to_csv(idif, out_dir / "idif.csv")
    tac_to_csv(tissue, out_dir / "tissue.csv")
    _emit({"idif_peak": float(idif.values.max()), "tissue_peak": float(tissue.values.max())}, file)
    return EXIT_OK


@_guarded
def cmd_fit_mcif(idif, tissue, out=None, *, config=None, seed=None, threads=None,
                 file=sys.stdout, err=sys.stderr):
    """Fit the MCIF to IDIF and tissue CSV files."""
    cfg = _load_config(FitConfig, config)
    overrides = {k: v for k, v in (("seed", seed), ("threads", threads)) if v is not None}
    if overrides:
        cfg = cfg.model_copy(update=overrides)
    fit = fit_mcif(tac_from_csv(idif), tac_from_csv(tissue), cfg, file=file)
    out_dir = _out_dir(out)
    tac_to_csv(fit.mcif, out_dir / "mcif.csv")
    write_json(out_dir / "fit.json", fit.to_dict())
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


@_guarded
def cmd_patlak(volume, mcif, mask, out=None, *, t_star=10.0, threads=None,
               file=sys.stdout, err=sys.stderr):
    """Compute a Ki map inside a mask or atlas."""
    vol = load_volume(volume, file=err)
    try:
        brain = load_labels(mask).to_mask()
    except DpetError:
        brain = load_mask(mask)
    kimap = ki_map(vol, tac_from_csv(mcif), brain, t_star, threads=threads or 1)
    save_kimap(kimap, _out_dir(out) / "kimap", vol.voxel_mm)
    _emit({"valid_voxels": kimap.valid.count, "t_star": t_star}, file)
    return EXIT_OK


@_guarded
def cmd_zscore(kimap, atlas, out=None, *, cutoff=-2.0, expected_regions=36,
               file=sys.stdout, err=sys.stderr):
    """Regional z-scores of a Ki map."""
    regions = regional_zscores(load_kimap(kimap), load_labels(atlas), cutoff,
                               expected_regions, file=err)
    out_dir = _out_dir(out)
    save_region_report(regions, out_dir / "regions.csv", out_dir / "regions.json")
    _emit({"mu": regions.mu, "sigma": regions.sigma, "flagged": regions.flagged}, file)
    return EXIT_OK


def _metric_row(kind, pred, truth):
    if kind == "mask":
        p, g = load_mask(pred), load_mask(truth)
        check_same_grid(g.dims, p.dims, f"{pred} and {truth}")
        return metrics.mask_report(g.data, p.data)
    p, g = tac_from_csv(pred), tac_from_csv(truth)
    if len(p) != len(g):
        raise LengthMismatch(f"{pred} has {len(p)} samples, {truth} has {len(g)}")
    if not (p.times == g.times).all():
        raise GridMismatch(f"{pred} and {truth} have different times")
    return metrics.tac_report(g.values, p.values)


@_guarded
def cmd_metrics(pred, truth, kind="mask", out=None, *, file=sys.stdout, err=sys.stderr):
    """Score predictions against truth; several pairs add mean/std rows."""
    preds = [pred] if isinstance(pred, (str, Path)) else list(pred)
    truths = [truth] if isinstance(truth, (str, Path)) else list(truth)
    if len(preds) != len(truths):
        raise ConfigError(f"{len(preds)} predictions but {len(truths)} truths")
    rows = [_metric_row(kind, p, t) for p, t in zip(preds, truths)]
    result = {"kind": kind, "rows": rows}
    if len(rows) > 1:
        summary = {k: metrics.summarize_folds([r[k] for r in rows]) for k in rows[0]}
        result["mean"] = {k: v[0] for k, v in summary.items()}
        result["std"] = {k: v[1] for k, v in summary.items()}
    if out is not None:
        write_json(_out_dir(out) / "metrics.json", result)
    _emit(result, file)
    return EXIT_OK
