"""Command-line interface: ``poreval <subcommand> ...``.

Stacks are read and written as ``.json`` header + ``.raw`` payload pairs
(or PGM slice directories on input). Binary volumes are stored as ``u8``
stacks with foreground 255. ``POREVAL_THREADS`` sets the worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import cc, iqa, skelgraph, stats
from .mosaic import PatchGrid, extract_patches, homogenize_background, stitch
from .phantom import PhantomParams, degrade, generate_network, ground_truth_metrics, render
from .pipeline import PipelineError, run_pipeline
from .register import SearchWindow, register_stack
from .segment import BinarizeParams, HysteresisThresholds, binarize_pipeline, resolve_z_factor
from .vesselness import ScaleRange, VesselnessParams, jerman_vesselness
from .volume import BinaryVolume, ImageStack, load_stack, resample_z, save_stack

log = logging.getLogger("poreval")


def _triple(text: str):
    v = tuple(float(t) for t in text.split(","))
    if len(v) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated values")
    return v


def _z_factor(text: str):
    return text if text == "auto" else float(text)


def _save_binary(bits: np.ndarray, spacing, path) -> Path:
    return save_stack(ImageStack(bits.astype(np.float32) * 255.0, spacing, (0.0, 255.0)), path, "u8")


def _load_binary(path) -> BinaryVolume:
    s = load_stack(path)
    return BinaryVolume(s.voxels > 0, s.spacing)


def _write_csv(rows: List[dict], path: Optional[str]):
    if not rows:
        text = ""
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
        text = buf.getvalue()
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _vesselness_args(p: argparse.ArgumentParser):
    p.add_argument("--scales", default="2:0.5:24", help="FWHM range MIN:STEP:MAX in voxels (default 2:0.5:24)")
    p.add_argument("--tau", type=float, default=0.5, help="Jerman sensitivity tau (default 0.5)")
    p.add_argument("--dark-on-bright", action="store_true", help="detect dark tubes on a bright background")
    p.add_argument("--dim", type=int, choices=(2, 3), default=3, help="2 = per-slice filter, 3 = volume (default 3)")
    p.add_argument("--z-factor", type=_z_factor, default=3.5,
                   help="Z resampling factor before 3D filtering, or 'auto' = sz/sx (default 3.5)")


def _vparams(a) -> VesselnessParams:
    return VesselnessParams(ScaleRange.parse(a.scales), a.tau, not a.dark_on_bright)


def cmd_register(a):
    mv = load_stack(a.moving)
    fx = load_stack(a.fixed)
    t, vox, valid = register_stack(mv.voxels, fx.voxels, SearchWindow(a.max_shift, a.max_angle), a.bins)
    lo = min(mv.intensity_range[0], float(vox.min()))
    save_stack(ImageStack(vox, mv.spacing, (lo, mv.intensity_range[1])), a.output, "f32")
    doc = {"transform": t.to_json(), "valid_pixels": int(valid.sum())}
    Path(a.output).with_suffix(".transform.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    print(json.dumps(doc["transform"], sort_keys=True))


def cmd_stitch(a):
    if a.extract:
        s = load_stack(a.input)
        if s.voxels.shape[0] != 1:
            raise SystemExit("--extract expects a single-slice stack")
        grid, patches = extract_patches(s.voxels[0], a.patch, a.overlap)
        save_stack(ImageStack(patches, s.spacing, s.intensity_range), a.output, "f32")
        Path(a.output).with_suffix(".grid.json").write_text(json.dumps(grid.to_json(), indent=1))
        print(f"{len(grid.origins)} patches, stride {grid.stride}")
        return
    if not a.grid:
        raise SystemExit("stitching needs --grid")
    g = json.loads(Path(a.grid).read_text())
    grid = PatchGrid(g["patch_size"], g["stride"], tuple(tuple(o) for o in g["origins"]), tuple(g["source_dims"]))
    s = load_stack(a.input)
    img = stitch(grid, s.voxels)
    save_stack(ImageStack(img.astype(np.float32), s.spacing), a.output, "f32")


def cmd_homogenize(a):
    s = load_stack(a.input)
    out, entries = homogenize_background(list(s.voxels), mode=a.mode, fraction=a.fraction)
    vox = np.stack(out).astype(np.float32)
    save_stack(ImageStack(vox, s.spacing), a.output, "f32")
    Path(a.output).with_suffix(".homogenize.json").write_text(json.dumps(entries, sort_keys=True, indent=1))


def cmd_vesselness(a):
    s = load_stack(a.input)
    if a.dim == 3:
        f = resolve_z_factor(a.z_factor, s.spacing)
        if s.voxels.shape[0] > 1 and f != 1:
            s = resample_z(s, f)
        vol = s.voxels[0] if s.voxels.shape[0] == 1 else s.voxels
        r = jerman_vesselness(vol, _vparams(a), dim=vol.ndim).reshape(s.voxels.shape)
    else:
        r = jerman_vesselness(s.voxels, _vparams(a), dim=2)
    save_stack(ImageStack(r.astype(np.float32), s.spacing, (0.0, 1.0)), a.output, "f32")


def cmd_binarize(a):
    s = load_stack(a.input)
    params = BinarizeParams(_vparams(a), a.dim, a.threshold_mode, HysteresisThresholds(a.low, a.high), a.z_factor)
    b = binarize_pipeline(s, params)
    _save_binary(b.bits, b.spacing, a.output)
    meta = dict(params.to_json(), **b.meta)
    Path(a.output).with_suffix(".binarize.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def cmd_cc_compare(a):
    gen = _load_binary(a.generated).bits
    gt = _load_binary(a.gt).bits
    if gen.shape != gt.shape:
        raise SystemExit(f"shape mismatch {gen.shape} vs {gt.shape}")
    ks = range(gt.shape[0]) if a.slices == "all" else [gt.shape[0] // 2]
    rows = []
    for k in ks:
        row = cc.compare_images(gen[k], gt[k], a.min_area, a.bin, a.connectivity)
        row.pop("convention")
        rows.append(dict(slice=k, **row))
    _write_csv(rows, a.output)


def cmd_graph(a):
    b = _load_binary(a.input)
    axis = None if a.direction_axis is None else _triple(a.direction_axis)
    g, m = skelgraph.analyze_binary(b.bits, b.spacing, a.tubule_min_diameter, a.prune_length,
                                    a.extend_boundary, axis, a.length_window)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.json").write_text(skelgraph.graph_json(g))
    rows = [dict(source="generated", **m.as_dict())]
    if a.gt:
        gb = _load_binary(a.gt)
        _, gm = skelgraph.analyze_binary(gb.bits, gb.spacing, a.tubule_min_diameter, a.prune_length,
                                         a.extend_boundary, axis, a.length_window)
        rows.append(dict(source="gt", **gm.as_dict()))
        ratios = skelgraph.metric_ratios(m, gm)
        rows.append(dict(source="ratio", **{k: ratios.get(k) for k in m.as_dict()}))
    _write_csv(rows, str(out / "metrics.csv"))
    print(f"nodes {len(g.nodes)} edges {len(g.edges)} handshake {'ok' if skelgraph.handshake_ok(g) else 'FAILED'}")


def cmd_iqa(a):
    rows = []
    if a.generated and a.gt:
        gen = load_stack(a.generated)
        gt = load_stack(a.gt)
        for m in a.metrics.split(","):
            r = iqa.stack_score(m, gen, gt, data_range=gt.data_range, value_range=gt.intensity_range,
                                region=a.region, model=a.model, resolution=a.resolution)
            rows.append(r.to_json())
    if a.features_a and a.features_b:
        fa, fb = iqa.load_features(a.features_a), iqa.load_features(a.features_b)
        for name, val in (("fid", iqa.frechet_distance(fa, fb)), ("kid", iqa.kid(fa, fb))):
            rows.append(iqa.MetricRecord(a.region, a.model, a.resolution, name, val, "per-stack",
                                         n_slices=0).to_json())
    if not rows:
        raise SystemExit("iqa needs GENERATED and GT stacks and/or --features-a/--features-b")
    _write_csv(rows, a.output)


def cmd_stats(a):
    with open(a.input, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    recs = []
    for r in rows:
        v = r.get("value", "")
        if v in ("", None) or r.get("region") == "all":
            continue
        recs.append({"region": r["region"], "model": r["model"], "resolution": r.get("resolution", ""),
                     "metric": r["metric"], "value": float(v)})
    if a.metric:
        keep = set(a.metric.split(","))
        recs = [r for r in recs if r["metric"] in keep]
    sig = stats.significance_table(recs)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(sig, str(out / "significance.csv"))
    groups = {}
    for r in recs:
        groups.setdefault((r["metric"], r["resolution"], r["model"]), []).append(r["value"])
    ci_rows = []
    for (metric, res, model), vals in sorted(groups.items()):
        if len(vals) >= 2:
            mean, lo, hi = stats.mean_ci(vals)
            ci_rows.append({"metric": metric, "resolution": res, "model": model, "n": len(vals),
                            "mean": mean, "ci_lo": lo, "ci_hi": hi, "variance": stats.variance(vals)})
    _write_csv(ci_rows, str(out / "ci.csv"))
    lines = []
    for s in sig:
        lines.append(f"{s['metric']:<28} {s['resolution']:<5} {s['model_a']:>12} vs {s['model_b']:<12} "
                     f"chi2={s['friedman_chi2']:.4g} p={s['friedman_p']:.4g} {s['nemenyi']}")
    text = "\n".join(lines) + ("\n" if lines else "")
    (out / "significance.txt").write_text(text)
    sys.stdout.write(text)


def cmd_phantom(a):
    params = PhantomParams(dims=tuple(int(v) for v in _triple(a.dims)), spacing=_triple(a.spacing),
                           n_tubules=a.tubules, n_branches=a.branches)
    spec = generate_network(params, a.seed)
    psf = None if a.no_psf else (a.psf_lateral, a.psf_axial)
    clean = render(spec, psf, a.snr)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    save_stack(clean, out / "clean.json", "f32")
    if a.factor > 1:
        save_stack(degrade(clean, a.factor, a.noise_sd, a.seed), out / f"degraded_x{a.factor}.json", "f32")
    (out / "spec.json").write_text(spec.dumps())
    _write_csv([ground_truth_metrics(spec).as_dict()], str(out / "gt_metrics.csv"))


def cmd_pipeline(a):
    try:
        res = run_pipeline(a.config)
    except PipelineError as exc:
        log.error("%s", exc)
        raise SystemExit(2)
    print(f"wrote report to {res['output_dir']} ({len(res['records'])} records)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poreval", description="Assessment of generated porosity image stacks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="rigid MI registration of a stack to a reference")
    p.add_argument("moving")
    p.add_argument("fixed")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--max-shift", type=float, default=15.0, help="translation bound in pixels (default 15)")
    p.add_argument("--max-angle", type=float, default=2.0, help="rotation bound in degrees (default 2)")
    p.add_argument("--bins", type=int, default=64, help="MI histogram bins (default 64)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("stitch", help="cut an image into patches (--extract) or stitch patches back")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--extract", action="store_true")
    p.add_argument("--grid", help="grid JSON written by --extract")
    p.add_argument("--patch", type=int, default=128, help="patch size (default 128)")
    p.add_argument("--overlap", type=float, default=0.25, help="overlap fraction (default 0.25)")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("homogenize", help="equalize patch backgrounds (one patch per slice)")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=("average", "minimum"), default="average")
    p.add_argument("--fraction", type=float, default=0.10, help="darkest fraction defining background (default 0.1)")
    p.set_defaults(func=cmd_homogenize)

    p = sub.add_parser("vesselness", help="multiscale Jerman vesselness")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _vesselness_args(p)
    p.set_defaults(func=cmd_vesselness)

    p = sub.add_parser("binarize", help="vesselness + hysteresis thresholds")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _vesselness_args(p)
    p.add_argument("--threshold-mode", choices=("fixed", "auto", "cyclegan"), default="fixed",
                   help="fixed = --low/--high, cyclegan = 0.3/0.5, auto = multi-Otsu / 2 (default fixed)")
    p.add_argument("--low", type=float, default=0.1, help="hysteresis low threshold (default 0.1)")
    p.add_argument("--high", type=float, default=0.3, help="hysteresis high threshold (default 0.3)")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("cc-compare", help="connected-component taxonomy per slice")
    p.add_argument("generated")
    p.add_argument("gt")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--min-area", type=int, default=cc.MIN_AREA, help="minimum component area (default 16)")
    p.add_argument("--bin", type=float, default=cc.AREA_BIN, help="area histogram bin width (default 100)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--slices", choices=("all", "middle"), default="all")
    p.set_defaults(func=cmd_cc_compare)

    p = sub.add_parser("graph", help="skeleton graph and metrics of a binary volume")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--gt", help="GT binary volume for metric ratios")
    p.add_argument("--tubule-min-diameter", type=float, default=skelgraph.TUBULE_MIN_DIAMETER_UM,
                   help="tubule/branch diameter split in um (default 1.0)")
    p.add_argument("--direction-axis", help="optional tubule axis x,y,z")
    p.add_argument("--prune-length", type=float, default=skelgraph.PRUNE_LENGTH,
                   help="spur length to prune, voxel steps (default 2)")
    p.add_argument("--length-window", type=int, default=skelgraph.LENGTH_WINDOW,
                   help="polyline smoothing window for lengths, 0 = raw steps (default 5)")
    p.add_argument("--extend-boundary", action="store_true")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("iqa", help="full-reference metrics and feature distances")
    p.add_argument("generated", nargs="?")
    p.add_argument("gt", nargs="?")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--metrics", default=",".join(iqa.METRICS))
    p.add_argument("--features-a")
    p.add_argument("--features-b")
    p.add_argument("--region", default="")
    p.add_argument("--model", default="")
    p.add_argument("--resolution", default="")
    p.set_defaults(func=cmd_iqa)

    p = sub.add_parser("stats", help="Friedman/Nemenyi table and confidence intervals")
    p.add_argument("input", help="CSV with region,model,resolution,metric,value columns")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--metric", help="comma-separated metrics to keep")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("phantom", help="synthetic network, clean and degraded renders")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="256,256,64", help="nx,ny,nz (default 256,256,64)")
    p.add_argument("--spacing", default="100,100,350", help="sx,sy,sz in nm (default 100,100,350)")
    p.add_argument("--tubules", type=int, default=3)
    p.add_argument("--branches", type=int, default=4)
    p.add_argument("--no-psf", action="store_true")
    p.add_argument("--psf-lateral", type=float, default=200.0)
    p.add_argument("--psf-axial", type=float, default=600.0)
    p.add_argument("--snr", type=float, default=math.inf)
    p.add_argument("--factor", type=int, choices=(1, 2, 4, 8), default=8)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pipeline", help="run the full assessment from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        # bad input (format, size, missing file): one line, exit status 2
        print(f"poreval {args.command}: error: {exc}", file=sys.stderr)
        raise SystemExit(2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
