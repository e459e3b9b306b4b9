"""End-to-end assessment: registration, IQA, 2D CC taxonomy, 3D graph
metrics, statistics and report emission.

The report bundle (``report.csv``, ``report.json``, ``significance.csv``,
``manifest.json``) is byte-stable for identical config and inputs.
Wall-clock timings go to ``timings.json``, which is not part of the bundle.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cc, iqa, skelgraph, stats
from .mosaic import extract_patches, homogenize_background, stitch
from .register import SearchWindow, register_stack
from .segment import BinarizeParams, HysteresisThresholds, binarize_pipeline
from .vesselness import ScaleRange, VesselnessParams, n_threads
from .volume import ImageStack, load_stack

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPORT_FIELDS = ("region", "model", "resolution", "metric", "value", "ci_lo", "ci_hi")
BUNDLE_FILES = ("report.csv", "report.json", "significance.csv", "manifest.json")
CC_METRICS = ("matching_pct", "missing_pct", "false_positives", "merged", "split", "wd_area")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "register": False,
    "max_shift_px": 15.0,
    "max_angle_deg": 2.0,
    "homogenize": None,
    "patch_size": 128,
    "overlap": 0.25,
    "scales": "2:0.5:24",
    "tau": 0.5,
    "threshold_mode": "fixed",
    "low": 0.1,
    "high": 0.3,
    "z_factor": 3.5,
    "min_area": cc.MIN_AREA,
    "area_bin": cc.AREA_BIN,
    "connectivity": 8,
    "tubule_min_diameter_um": skelgraph.TUBULE_MIN_DIAMETER_UM,
    "direction_axis": None,
    "prune_length": skelgraph.PRUNE_LENGTH,
    "length_window": skelgraph.LENGTH_WINDOW,
    "extend_boundary": False,
    "metrics": list(iqa.METRICS),
    "stages": ["iqa", "cc", "graph"],
    "seed": 0,
    "cache": True,
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Parsed configuration.

    ``gt`` maps region -> GT stack path. ``generated`` lists dicts with
    ``region``, ``model``, ``resolution`` and ``path``. All other keys and
    their defaults are listed in :data:`DEFAULTS`.
    """

    gt: Dict[str, str]
    generated: List[dict]
    output_dir: str
    params: dict = field(default_factory=dict)
    spacing: Optional[Tuple[float, float, float]] = None

    @classmethod
    def from_json(cls, d, base: Optional[Path] = None) -> "PipelineConfig":
        if isinstance(d, (str, Path)):
            p = Path(d)
            base = p.parent
            d = json.loads(p.read_text())
        d = dict(d)
        ver = d.pop("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise PipelineError("config", f"unsupported schema_version {ver}")
        try:
            gt = d.pop("gt")
            gen = d.pop("generated")
            out = d.pop("output_dir")
        except KeyError as exc:
            raise PipelineError("config", f"missing key {exc}") from None
        spacing = d.pop("spacing", None)
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise PipelineError("config", f"unknown keys {sorted(unknown)}")
        params = {k: v for k, v in DEFAULTS.items() if k != "schema_version"}
        params.update(d)

        def rel(p):
            p = Path(p)
            return str(p if p.is_absolute() or base is None else base / p)

        gt = {str(k): rel(v) for k, v in gt.items()}
        gen = [dict(g, path=rel(g["path"]), resolution=str(g.get("resolution", ""))) for g in gen]
        for g in gen:
            for key in ("region", "model", "path"):
                if key not in g:
                    raise PipelineError("config", f"generated entry missing {key!r}")
        return cls(gt, gen, rel(out), params, None if spacing is None else tuple(spacing))

    def binarize_params(self, dim: int) -> BinarizeParams:
        p = self.params
        return BinarizeParams(
            vesselness=VesselnessParams(ScaleRange.parse(p["scales"]), float(p["tau"])),
            dim=dim,
            threshold_mode=p["threshold_mode"],
            thresholds=HysteresisThresholds(float(p["low"]), float(p["high"])),
            z_factor=p["z_factor"],
        )

    def resolved(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "gt": self.gt, "generated": self.generated,
             "output_dir": self.output_dir, "spacing": None if self.spacing is None else list(self.spacing)}
        d.update(self.params)
        return d


def validate(cfg: PipelineConfig):
    """Check every referenced path before any compute."""
    missing = [p for p in list(cfg.gt.values()) + [g["path"] for g in cfg.generated]
               if not Path(p).exists() and not Path(p).with_suffix(".json").exists()]
    if missing:
        raise PipelineError("validate", f"missing stacks: {missing}")
    for g in cfg.generated:
        if g["region"] not in cfg.gt:
            raise PipelineError("validate", f"no GT stack for region {g['region']!r}")
    keys = [(g["region"], g["model"], g["resolution"]) for g in cfg.generated]
    if len(set(keys)) != len(keys):
        raise PipelineError("validate", "duplicate (region, model, resolution) entries")
    bad = set(cfg.params["metrics"]) - set(iqa.METRICS)
    if bad:
        raise PipelineError("validate", f"unknown metrics {sorted(bad)}")
    bad = set(cfg.params["stages"]) - {"iqa", "cc", "graph"}
    if bad:
        raise PipelineError("validate", f"unknown stages {sorted(bad)}")


def _hash_array(a: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(repr(a.shape).encode())
    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _hash_key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


class _Cache:
    """Content-hash keyed stage outputs (npz for masks, json for metrics)."""

    def __init__(self, root: Optional[Path]):
        self.root = root
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)

    def mask(self, key: str, fn):
        if self.root is None:
            return fn()
        p = self.root / f"{key}.npz"
        if p.exists():
            with np.load(p) as z:
                return np.unpackbits(z["bits"])[: int(np.prod(z["shape"]))].reshape(z["shape"]).astype(bool), json.loads(str(z["meta"]))
        bits, meta = fn()
        tmp = p.with_name(f"{p.name}.{threading.get_ident()}.tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, bits=np.packbits(bits), shape=np.array(bits.shape), meta=json.dumps(meta))
        tmp.replace(p)
        return bits, meta

    def record(self, key: str, fn):
        if self.root is None:
            return fn()
        p = self.root / f"{key}.json"
        if p.exists():
            return json.loads(p.read_text())
        val = fn()
        tmp = p.with_name(f"{p.name}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(val, sort_keys=True))
        tmp.replace(p)
        return val


class _Timer:
    def __init__(self):
        self.times: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str, tag: str):
        t0 = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, f"{tag}: {type(exc).__name__}: {exc}") from exc
        finally:
            self.times[f"{name}:{tag}"] = self.times.get(f"{name}:{tag}", 0.0) + time.perf_counter() - t0


def _load(path: str, spacing) -> ImageStack:
    return load_stack(path, spacing=spacing)


def _homogenize_stack(voxels: np.ndarray, mode: str, patch: int, overlap: float) -> np.ndarray:
    out = np.empty(voxels.shape, dtype=np.float32)
    for k in range(voxels.shape[0]):
        grid, patches = extract_patches(voxels[k], patch, overlap)
        fixed, _ = homogenize_background(patches, mode=mode)
        out[k] = stitch(grid, fixed)
    return out


def _binary_2d(cfg, cache, stack: ImageStack):
    params = cfg.binarize_params(2)
    key = _hash_key("binarize2d", _hash_array(stack.voxels), list(stack.spacing), params.to_json())

    def run():
        b = binarize_pipeline(stack, params)
        return b.bits, b.meta

    return cache.mask(key, run)


def _graph(cfg, cache, stack: ImageStack):
    params = cfg.binarize_params(3)
    p = cfg.params
    gp = {k: p[k] for k in ("tubule_min_diameter_um", "direction_axis", "prune_length",
                            "length_window", "extend_boundary")}
    key = _hash_key("graph", _hash_array(stack.voxels), list(stack.spacing), params.to_json(), gp)

    def run():
        b = binarize_pipeline(stack, params)
        _, m = skelgraph.analyze_binary(
            b.bits, b.spacing, gp["tubule_min_diameter_um"], gp["prune_length"],
            gp["extend_boundary"], gp["direction_axis"], gp["length_window"])
        return {"metrics": m.as_dict(), "binarize": b.meta}

    return cache.record(key, run)


def _cc_rows(cfg, gen_bits, gt_bits) -> Dict[str, Optional[float]]:
    p = cfg.params
    per = {k: [] for k in CC_METRICS}
    for k in range(gt_bits.shape[0]):
        row = cc.compare_images(gen_bits[k], gt_bits[k], p["min_area"], p["area_bin"], p["connectivity"])
        for m in CC_METRICS:
            if row[m] is not None:
                per[m].append(float(row[m]))
    return {m: (float(np.mean(v)) if v else None) for m, v in per.items()}


def _record(region, model, res, metric, value, flag="") -> dict:
    v = None if value is None else float(value)
    return {"region": region, "model": model, "resolution": res, "metric": metric,
            "value": v, "ci_lo": None, "ci_hi": None, "flag": flag}


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def aggregate(records: List[dict]) -> List[dict]:
    """Across-region mean, 95% t interval and sample variance per
    (model, resolution, metric); region is reported as ``all``."""
    groups: Dict[Tuple[str, str, str], List[float]] = {}
    for r in records:
        if r["region"] == "all" or r["value"] is None:
            continue
        groups.setdefault((r["model"], r["resolution"], r["metric"]), []).append(r["value"])
    out = []
    for (model, res, metric), vals in sorted(groups.items()):
        if len(vals) < 2 or len(vals) > 31:
            continue
        mean, lo, hi = stats.mean_ci(vals)
        rec = _record("all", model, res, metric, mean)
        rec.update(ci_lo=lo, ci_hi=hi, variance=stats.variance(vals), n=len(vals))
        out.append(rec)
    return out


def _sort_key(r):
    return (r["metric"], r["resolution"], r["model"], r["region"])


def emit_report(records: List[dict], out_dir, significance: Optional[List[dict]] = None,
                extra: Optional[dict] = None) -> List[Path]:
    """Write ``report.csv``, ``report.json`` and ``significance.csv``.

    Rows are sorted by (metric, resolution, model, region); floats use
    ``repr`` so identical inputs give byte-identical files.
    """
    if not records:
        raise ValueError("emit_report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(records, key=_sort_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow([r["region"], r["model"], r["resolution"], r["metric"],
                    _fmt(r["value"]), _fmt(r.get("ci_lo")), _fmt(r.get("ci_hi"))])
    (out / "report.csv").write_text(buf.getvalue())
    sig = significance or []
    buf = io.StringIO()
    fields = ("metric", "resolution", "model_a", "model_b", "friedman_chi2", "friedman_p", "nemenyi")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for s in sig:
        w.writerow([_fmt(s[f]) if isinstance(s[f], float) else s[f] for f in fields])
    (out / "significance.csv").write_text(buf.getvalue())
    doc = {"records": rows, "significance": sig}
    if extra:
        doc.update(extra)
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return [out / "report.csv", out / "report.json", out / "significance.csv"]


def software_versions() -> dict:
    out = {"poreval": _version()}
    for pkg in ("numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _version() -> str:
    from . import __version__

    return __version__


def _write_manifest(out: Path, cfg: PipelineConfig, status: str, inputs: dict, failed: Optional[str] = None):
    doc = {
        "status": status,
        "failed_stage": failed,
        "config": cfg.resolved(),
        "software": software_versions(),
        "inputs": inputs,
        "bundle": list(BUNDLE_FILES),
    }
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def run_pipeline(config, threads: Optional[int] = None) -> dict:
    """Run the full assessment described by ``config`` (dict, path or
    :class:`PipelineConfig`).

    Returns a dict with ``records``, ``significance``, ``output_dir`` and
    ``timings``. Any failing stage raises :class:`PipelineError` after the
    manifest has been written with ``status: FAILED``.
    """
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_json(config)
    validate(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.params
    cache = _Cache(out / "cache" if p["cache"] else None)
    timer = _Timer()
    inputs: Dict[str, str] = {}
    workers = threads or n_threads()
    try:
        with timer.stage("load", "all"):
            gts = {r: _load(path, cfg.spacing) for r, path in sorted(cfg.gt.items())}
            gens = {}
            for g in cfg.generated:
                gens[(g["region"], g["model"], g["resolution"])] = _load(g["path"], cfg.spacing)
            for r, s in gts.items():
                inputs[f"gt/{r}"] = _hash_array(s.voxels)
            for k, s in gens.items():
                inputs["gen/" + "/".join(k)] = _hash_array(s.voxels)
                if s.voxels.shape != gts[k[0]].voxels.shape:
                    raise PipelineError("validate", f"{k}: dims {s.dims} differ from GT {gts[k[0]].dims}")
            small = min(s.voxels.shape[1:] for s in gts.values())
            need = {"ms_ssim": iqa.SSIM_WIN * 2 ** (len(iqa.MS_SSIM_WEIGHTS) - 1), "ssim": iqa.SSIM_WIN, "haarpsi": 8}
            for m in p["metrics"] if "iqa" in p["stages"] else []:
                if m in need and min(small) < need[m]:
                    raise PipelineError("validate", f"metric {m} needs slices of at least {need[m]} px, got {small}")

        stages = set(p["stages"])
        gt_bits: Dict[str, np.ndarray] = {}
        gt_graph: Dict[str, dict] = {}
        for r, s in gts.items():
            if "cc" in stages:
                with timer.stage("binarize2d", f"gt/{r}"):
                    gt_bits[r] = _binary_2d(cfg, cache, s)[0]
            if "graph" in stages:
                with timer.stage("graph", f"gt/{r}"):
                    gt_graph[r] = _graph(cfg, cache, s)

        def unit(key):
            region, model, res = key
            tag = "/".join(key)
            gt = gts[region]
            gen = gens[key]
            recs = []
            mask = None
            if p["register"]:
                with timer.stage("register", tag):
                    t, vox, valid = register_stack(
                        gen.voxels, gt.voxels, SearchWindow(p["max_shift_px"], p["max_angle_deg"]))
                    gen = gen.replace(voxels=vox, intensity_range=(
                        min(gen.intensity_range[0], float(vox.min())), max(gen.intensity_range[1], float(vox.max()))))
                    mask = valid
                    recs.append(_record(region, model, res, "reg_theta_deg", t.theta))
                    recs.append(_record(region, model, res, "reg_tx_px", t.tx))
                    recs.append(_record(region, model, res, "reg_ty_px", t.ty))
            if p["homogenize"]:
                with timer.stage("homogenize", tag):
                    vox = _homogenize_stack(gen.voxels, p["homogenize"], p["patch_size"], p["overlap"])
                    lo = min(gen.intensity_range[0], float(vox.min()))
                    gen = gen.replace(voxels=vox, intensity_range=(lo, gen.intensity_range[1]))
            if "iqa" in stages:
                with timer.stage("iqa", tag):
                    for m in p["metrics"]:
                        rec = iqa.stack_score(m, gen, gt, data_range=gt.data_range,
                                              value_range=gt.intensity_range, mask=mask)
                        recs.append(_record(region, model, res, m, rec.value, rec.flag))
            if "cc" in stages:
                with timer.stage("binarize2d", tag):
                    bits = _binary_2d(cfg, cache, gen)[0]
                with timer.stage("cc", tag):
                    for m, v in _cc_rows(cfg, bits, gt_bits[region]).items():
                        recs.append(_record(region, model, res, f"cc_{m}", v, "" if v is not None else "undefined"))
            if "graph" in stages:
                with timer.stage("graph", tag):
                    gm = _graph(cfg, cache, gen)
                    ratios = skelgraph.metric_ratios(
                        skelgraph.GraphMetrics(**gm["metrics"]), skelgraph.GraphMetrics(**gt_graph[region]["metrics"]))
                    for f, v in ratios.items():
                        recs.append(_record(region, model, res, f"graph_ratio_{f}", v, "" if v is not None else "undefined"))
            return recs

        keys = sorted(gens)
        if workers > 1 and len(keys) > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(unit, keys))
        else:
            results = [unit(k) for k in keys]
        records = [r for rs in results for r in rs]

        with timer.stage("stats", "all"):
            sig = stats.significance_table(records)
            records = records + aggregate(records)
        with timer.stage("report", "all"):
            extra = {
                "gt_graph_metrics": {r: g["metrics"] for r, g in sorted(gt_graph.items())},
                "thresholds": {r: g["binarize"]["thresholds"] for r, g in sorted(gt_graph.items())},
            }
            emit_report(records, out, sig, extra)
    except PipelineError as exc:
        _write_manifest(out, cfg, "FAILED", inputs, exc.stage)
        (out / "timings.json").write_text(json.dumps(timer.times, sort_keys=True, indent=1))
        raise
    _write_manifest(out, cfg, "OK", inputs)
    (out / "timings.json").write_text(json.dumps(timer.times, sort_keys=True, indent=1))
    return {"records": records, "significance": sig, "output_dir": str(out), "timings": timer.times}
