"""Batch front-end: phantom generation, surface-distance and quality
reports, the correlation report, and a self-contained end-to-end demo.

Exit codes: 0 ok, 2 argument error, 3 I/O error, 4 geometry mismatch,
5 join failure. Every command is deterministic given --seed; JSON outputs
embed seed, configuration, and tool version. CSV output is locale
independent (period decimal separator, no grouping). Multi-subject work
fans out across threads (capped by REFAUDIT_THREADS); rows keep input
order regardless of completion order.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ddim import CascadeConfig, SlabSpec, cascade_reface
from .deface import QUICKSHEAR_VERSION, quickshear
from .denoisers import VolumeDenoiser, mirror_fill
from .errors import FormatError, GeometryMismatchError, JoinError
from .masks import HEAD_MASK_VERSION, head_mask
from .quality import QUALITY_CONVENTIONS, quality_report
from .stats import (
    STATS_CONVENTIONS,
    bootstrap,
    correlation_report,
    ObservationTable,
    read_predictions_csv,
    significance_stars,
    wilcoxon_signed_rank,
)
from .surface import face_distance_report
from .phantom import generate_cohort
from .volume import downsample, read_mask_file, read_nifti_file, write_mask_file, write_nifti_file

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_IO = 3
EXIT_GEOMETRY = 4
EXIT_JOIN = 5

CONVENTIONS = {
    "head_mask": HEAD_MASK_VERSION,
    "quickshear": QUICKSHEAR_VERSION,
    **QUALITY_CONVENTIONS,
    **STATS_CONVENTIONS,
}


def thread_count() -> int:
    cap = os.environ.get("REFAUDIT_THREADS")
    if cap:
        return max(1, int(cap))
    return min(os.cpu_count() or 1, 8)


def _base_metadata(seed) -> dict:
    return {"tool": "refaudit", "version": __version__, "seed": seed,
            "conventions": dict(CONVENTIONS)}


def _ensure_out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _OutDirError(f"invalid output directory {out}: {exc}") from exc
    if not out.is_dir():
        raise _OutDirError(f"invalid output directory {out}: not a directory")
    return out


class _OutDirError(ValueError):
    pass


def _fmt(x: float, decimals: int = 3) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{decimals}f}"


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    out = _ensure_out_dir(args.out_dir)
    cohort = generate_cohort(args.count, args.seed)

    def write_case(case):
        write_nifti_file(case.volume, out / f"{case.subject_id}.nii.gz")
        if args.write_brain_masks:
            write_mask_file(case.brain, out / f"{case.subject_id}_brain.nii.gz")
        record = {**_base_metadata(args.seed), "subject_id": case.subject_id,
                  "geometry": case.geometry.to_json_dict()}
        (out / f"{case.subject_id}.json").write_text(
            json.dumps(record, indent=2, sort_keys=True) + "\n"
        )

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        list(pool.map(write_case, cohort))
    manifest = {**_base_metadata(args.seed), "kind": "phantom-cohort",
                "count": args.count,
                "subjects": [c.subject_id for c in cohort]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# masd


def _read_distance_table(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "method", "masd_mm"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"distance CSV missing columns: {sorted(missing)}")
        for r in reader:
            rows.append((r["subject_id"], r["method"], float(r["masd_mm"])))
    return rows


def cmd_masd(args) -> int:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if args.table:
        rows = _read_distance_table(args.table)
        by_method: dict = {}
        for sid, method, d in rows:
            by_method.setdefault(method, {})[sid] = d
        writer.writerow(["kind", "method", "peer", "n", "mean", "ci_low", "ci_high", "cell", "w", "p"])
        summaries = {}
        for method in sorted(by_method):
            vals = np.array(list(by_method[method].values()))
            s = bootstrap(vals, np.mean, n_boot=args.boot, seed=args.seed)
            summaries[method] = s
            writer.writerow(
                ["masd", method, "", len(vals), _fmt(s.mean), _fmt(s.ci_low),
                 _fmt(s.ci_high), s.format(), "", ""]
            )
        if args.compare:
            a, b = args.compare
            if a not in by_method or b not in by_method:
                raise ValueError(f"--compare methods {a!r}/{b!r} not both present")
            # Wilcoxon pairs per-subject distances of the two methods
            shared = sorted(set(by_method[a]) & set(by_method[b]))
            da = np.array([by_method[a][s] for s in shared])
            db = np.array([by_method[b][s] for s in shared])
            w, p = wilcoxon_signed_rank(da, db)
            writer.writerow(
                ["wilcoxon", a, b, len(shared), "", "", "", significance_stars(p),
                 _fmt(w, 1), f"{p:.6g}"]
            )
        if args.summary:
            summary = {**_base_metadata(args.seed), "kind": "masd-aggregate",
                       "n_boot": args.boot,
                       "methods": {m: s.format() for m, s in summaries.items()}}
            Path(args.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    if not (args.original and args.candidate):
        raise ValueError("masd needs ORIGINAL and CANDIDATE paths (or --table)")
    original = read_nifti_file(args.original)
    candidate = read_nifti_file(args.candidate)
    d = face_distance_report(original, candidate, directed=args.directed)
    writer.writerow(["subject_id", "method", "masd_mm"])
    writer.writerow([args.subject_id, args.method, _fmt(d)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# quality


def cmd_quality(args) -> int:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if args.table:
        with open(args.table, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        metrics = ["psnr_head", "psnr_face", "ssim_head", "ssim_face"]
        writer.writerow(["image", "metric", "n", "mean", "ci_low", "ci_high", "cell"])
        images = sorted({r["image"] for r in rows})
        for image in images:
            for metric in metrics:
                vals = np.array([float(r[metric]) for r in rows if r["image"] == image])
                s = bootstrap(vals, np.mean, n_boot=args.boot, seed=args.seed)
                writer.writerow([image, metric, len(vals), _fmt(s.mean, 2),
                                 _fmt(s.ci_low, 2), _fmt(s.ci_high, 2), s.format()])
        return EXIT_OK

    if not (args.original and args.defaced and args.refaced and args.removed):
        raise ValueError("quality needs ORIGINAL DEFACED REFACED and --removed MASK")
    original = read_nifti_file(args.original)
    defaced = read_nifti_file(args.defaced)
    refaced = read_nifti_file(args.refaced)
    removed = [read_mask_file(p) for p in args.removed]
    records = quality_report(original, defaced, refaced, removed)
    writer.writerow(["subject_id", "image", "psnr_head", "psnr_face", "ssim_head", "ssim_face"])
    for rec in records:
        writer.writerow([args.subject_id, rec.image, _fmt(rec.psnr_head, 2),
                         _fmt(rec.psnr_face, 2), _fmt(rec.ssim_head, 4), _fmt(rec.ssim_face, 4)])
    if args.summary:
        summary = {**_base_metadata(args.seed), "kind": "quality-report",
                   "masks_used": list(args.removed),
                   "records": [rec.__dict__ for rec in records]}
        Path(args.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# correlate


def cmd_correlate(args) -> int:
    table = ObservationTable.from_csv(args.observations)
    predictions = read_predictions_csv(args.predictions)
    report = correlation_report(predictions, table, seed=args.seed, n_boot=args.boot)
    doc = {**_base_metadata(args.seed), "kind": "correlation-report",
           **report.to_json_dict()}
    doc["n_boot"] = args.boot
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo


def _demo_subject(case, out, config, buffer_mm):
    vol, brain = case.volume, case.brain
    head = head_mask(vol)
    defaced, removed = quickshear(vol, brain, buffer_mm=buffer_mm, head=head)

    oracle_low = VolumeDenoiser(downsample(vol, config.downsample_factor))
    refaced_oracle = cascade_reface(defaced, removed, oracle_low, VolumeDenoiser(vol), config)

    filled = mirror_fill(defaced, removed)
    stub_low = VolumeDenoiser(downsample(filled, config.downsample_factor))
    refaced_stub = cascade_reface(defaced, removed, stub_low, VolumeDenoiser(filled), config)

    sid = case.subject_id
    write_nifti_file(vol, out / f"{sid}_original.nii.gz")
    write_nifti_file(defaced, out / f"{sid}_defaced.nii.gz")
    write_mask_file(removed, out / f"{sid}_removed.nii.gz")
    write_nifti_file(refaced_oracle, out / f"{sid}_refaced_oracle.nii.gz")
    write_nifti_file(refaced_stub, out / f"{sid}_refaced_stub.nii.gz")

    masd_rows = [
        (sid, "defaced", face_distance_report(vol, defaced)),
        (sid, "refaced-oracle", face_distance_report(vol, refaced_oracle)),
        (sid, "refaced-stub", face_distance_report(vol, refaced_stub)),
    ]
    quality_rows = []
    for kind, refaced in (("oracle", refaced_oracle), ("stub", refaced_stub)):
        for rec in quality_report(vol, defaced, refaced, removed):
            if kind == "oracle" and rec.image == "defaced":
                continue  # defaced-vs-original does not depend on the denoiser
            quality_rows.append((sid, f"{rec.image}-{kind}" if rec.image == "refaced" else rec.image, rec))
    return masd_rows, quality_rows


def cmd_demo(args) -> int:
    out = _ensure_out_dir(args.out_dir)
    config = CascadeConfig(
        sample_steps=args.steps,
        eta=args.eta,
        downsample_factor=(args.downsample,) * 3,
        slab=SlabSpec(size=args.slab_size, overlap=args.overlap),
        seed=args.seed,
    )
    cohort = generate_cohort(args.count, args.seed)

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(
            pool.map(lambda c: _demo_subject(c, out, config, args.buffer_mm), cohort)
        )

    with open(out / "masd.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "method", "masd_mm"])
        for masd_rows, _ in results:
            for sid, method, d in masd_rows:
                w.writerow([sid, method, _fmt(d)])
    with open(out / "quality.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "image", "psnr_head", "psnr_face", "ssim_head", "ssim_face"])
        for _, quality_rows in results:
            for sid, image, rec in quality_rows:
                w.writerow([sid, image, _fmt(rec.psnr_head, 2), _fmt(rec.psnr_face, 2),
                            _fmt(rec.ssim_head, 4), _fmt(rec.ssim_face, 4)])

    aggregates = {}
    for method in ("defaced", "refaced-oracle", "refaced-stub"):
        vals = np.array([d for masd_rows, _ in results for s, m, d in masd_rows if m == method])
        if len(vals) >= 2:
            aggregates[method] = bootstrap(vals, np.mean, n_boot=args.boot, seed=args.seed).format()
        else:
            aggregates[method] = f"{vals[0]:.2f}"

    manifest = {
        **_base_metadata(args.seed),
        "kind": "demo-run",
        "count": args.count,
        "buffer_mm": args.buffer_mm,
        "n_boot": args.boot,
        "sampler_config": config.to_json_dict(),
        "masd_cells": aggregates,
        "subjects": [c.subject_id for c in cohort],
        "files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refaudit",
        description="Defacing/refacing risk-audit toolkit on synthetic head phantoms.",
    )
    parser.add_argument("--version", action="version", version=f"refaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom cohort")
    p.add_argument("out_dir")
    p.add_argument("-n", "--count", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--write-brain-masks", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("masd", help="face surface distance (single pair or cohort table)")
    p.add_argument("original", nargs="?")
    p.add_argument("candidate", nargs="?")
    p.add_argument("--subject-id", default="subject")
    p.add_argument("--method", default="candidate")
    p.add_argument("--directed", action="store_true")
    p.add_argument("--table", help="CSV of subject_id,method,masd_mm to aggregate")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"),
                   help="Wilcoxon on per-subject paired distances of two methods")
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary", help="write a JSON summary here")
    p.set_defaults(func=cmd_masd)

    p = sub.add_parser("quality", help="masked PSNR/SSIM report")
    p.add_argument("original", nargs="?")
    p.add_argument("defaced", nargs="?")
    p.add_argument("refaced", nargs="?")
    p.add_argument("--removed", action="append", default=[],
                   help="changed-area mask NIfTI (repeatable; intersection is used)")
    p.add_argument("--subject-id", default="subject")
    p.add_argument("--table", help="CSV of per-subject quality rows to aggregate")
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary", help="write a JSON summary here")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("correlate", help="prediction-vs-residual correlation report")
    p.add_argument("observations")
    p.add_argument("predictions")
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("demo", help="end-to-end phantom walkthrough")
    p.add_argument("out_dir")
    p.add_argument("-n", "--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--buffer-mm", type=float, default=10.0)
    p.add_argument("--downsample", type=int, default=2)
    p.add_argument("--slab-size", type=int, default=8)
    p.add_argument("--overlap", type=int, default=4)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--boot", type=int, default=1000)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except JoinError as exc:
        print(f"refaudit: join error: {exc}", file=sys.stderr)
        return EXIT_JOIN
    except GeometryMismatchError as exc:
        print(f"refaudit: geometry mismatch: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except (FormatError, OSError) as exc:
        print(f"refaudit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"refaudit: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT


if __name__ == "__main__":
    sys.exit(main())
