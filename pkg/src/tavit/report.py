"""Per-patient metric rows, aggregates with p-values, and violin-plot data."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .volume_io import atomic_write_bytes

SYNTHESIS_METRICS = ("NMSE", "PSNR", "NCC", "SSIM")
SEGMENTATION_METRICS = ("DSC", "J", "RMSD")
DEFAULT_BASELINE = "tavit-t1w-flair"


@dataclass(frozen=True)
class Row:
    variant: str
    patient: str
    region: str
    metric: str
    value: float


@dataclass
class Aggregate:
    variant: str
    region: str
    metric: str
    mean: float
    std: float
    p_vs_baseline: float


@dataclass
class MetricReport:
    rows: list[Row]
    aggregates: list[Aggregate]
    baseline: str
    variants: list[str] = field(default_factory=list)

    def values(self, variant: str, region: str, metric: str) -> dict[str, float]:
        return {r.patient: r.value for r in self.rows
                if r.variant == variant and r.region == region and r.metric == metric}

    def has_nan(self) -> bool:
        return any(not np.isfinite(r.value) for r in self.rows) or any(
            not np.isfinite(a.mean) for a in self.aggregates)


def synthesis_metrics(pred: np.ndarray, ref: np.ndarray, labels: np.ndarray, region: str) -> dict[str, float]:
    """Metrics on region-masked copies of prediction and reference (both in [0, 1])."""
    x = M.mask_region(pred, labels, region)
    y = M.mask_region(ref, labels, region)
    return {
        "NMSE": M.nmse(x, y),
        "PSNR": M.psnr(x, y),
        "NCC": M.ncc(x, y),
        "SSIM": M.ssim(x, y),
    }


def segmentation_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, region: str) -> dict[str, float]:
    g = M.region_mask(gt_labels, region)
    p = M.region_mask(pred_labels, region)
    return {"DSC": M.dsc(g, p), "J": M.jaccard(g, p), "RMSD": M.rmsd(p.astype(float), g.astype(float))}


def _has_region(labels: np.ndarray, region: str) -> bool:
    return bool(M.region_mask(labels, region).any())


def _aggregate(rows: list[Row], variants: list[str], baseline: str, metric_names) -> list[Aggregate]:
    table: dict[tuple[str, str, str], dict[str, float]] = {}
    for r in rows:
        table.setdefault((r.variant, r.region, r.metric), {})[r.patient] = r.value
    regions = sorted({r.region for r in rows}, key=lambda s: (s not in M.REGIONS, s))
    out = []
    for v in variants:
        for region in regions:
            for metric in metric_names:
                vals = table.get((v, region, metric))
                if not vals:
                    continue
                pids = sorted(vals)
                arr = np.array([vals[p] for p in pids])
                std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
                base = table.get((baseline, region, metric), {})
                p = float("nan")
                if v == baseline:
                    p = 1.0
                elif len(pids) >= 2 and all(q in base for q in pids):
                    p = M.paired_ttest(arr, np.array([base[q] for q in pids]))
                out.append(Aggregate(v, region, metric, float(np.mean(arr)), std, p))
    return out


def build_report(predictions: dict[str, dict[str, np.ndarray]], references: dict[str, np.ndarray],
                 seg_gt: dict[str, np.ndarray], baseline: str | None = None) -> MetricReport:
    """Evaluate every variant on every patient and region.

    ``predictions`` maps variant -> patient -> volume; references and labels
    are keyed by patient. Patients without any tumor voxels get no
    whole_tumor rows, since every intensity metric there is undefined.
    """
    variants = list(predictions)
    if not variants:
        raise ValueError("no variants to evaluate")
    baseline = baseline if baseline is not None else (DEFAULT_BASELINE if DEFAULT_BASELINE in variants else variants[0])
    if baseline not in predictions:
        raise ValueError(f"baseline variant {baseline!r} not among {variants}")
    patients = sorted(references)
    if set(seg_gt) != set(patients):
        raise ValueError("reference volumes and segmentation maps cover different patients")
    for v in variants:
        if set(predictions[v]) != set(patients):
            missing = sorted(set(patients) ^ set(predictions[v]))
            raise ValueError(f"variant {v!r} does not match the reference patient set (differs on {missing[:5]})")
    rows = []
    for v in variants:
        for pid in patients:
            for region in M.REGIONS:
                if not _has_region(seg_gt[pid], region):
                    continue
                vals = synthesis_metrics(predictions[v][pid], references[pid], seg_gt[pid], region)
                rows.extend(Row(v, pid, region, m, vals[m]) for m in SYNTHESIS_METRICS)
    return MetricReport(rows, _aggregate(rows, variants, baseline, SYNTHESIS_METRICS), baseline, variants)


def build_segmentation_report(pred_labels: dict[str, np.ndarray], gt_labels: dict[str, np.ndarray],
                              variant: str = "mprvit-seg") -> MetricReport:
    if set(pred_labels) != set(gt_labels):
        raise ValueError("predicted and ground-truth segmentations cover different patients")
    rows = []
    for pid in sorted(gt_labels):
        for region in M.REGIONS:
            vals = segmentation_metrics(pred_labels[pid], gt_labels[pid], region)
            rows.extend(Row(variant, pid, region, m, vals[m]) for m in SEGMENTATION_METRICS)
    return MetricReport(rows, _aggregate(rows, [variant], variant, SEGMENTATION_METRICS), variant, [variant])


# CSV emission ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def rows_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    buf.write("variant,patient,region,metric,value\n")
    for r in report.rows:
        buf.write(f"{r.variant},{r.patient},{r.region},{r.metric},{_fmt(r.value)}\n")
    return buf.getvalue()


def aggregates_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    buf.write("variant,region,metric,mean,std,p_vs_baseline\n")
    for a in report.aggregates:
        buf.write(f"{a.variant},{a.region},{a.metric},{_fmt(a.mean)},{_fmt(a.std)},{_fmt(a.p_vs_baseline)}\n")
    return buf.getvalue()


def violin_csvs(report: MetricReport) -> dict[str, str]:
    """One table per (metric, region): a row per patient, a column per variant."""
    out = {}
    keys = sorted({(r.metric, r.region) for r in report.rows})
    for metric, region in keys:
        cols = {v: report.values(v, region, metric) for v in report.variants}
        pids = sorted(set().union(*[set(c) for c in cols.values()]))
        buf = io.StringIO()
        buf.write(",".join(["patient", *report.variants]) + "\n")
        for pid in pids:
            cells = [_fmt(cols[v][pid]) if pid in cols[v] else "" for v in report.variants]
            buf.write(",".join([pid, *cells]) + "\n")
        out[f"violin_{metric}_{region}.csv"] = buf.getvalue()
    return out


def write_report(report: MetricReport, out_dir, prefix: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    files = {f"{prefix}metrics.csv": rows_csv(report), f"{prefix}aggregates.csv": aggregates_csv(report)}
    files.update({prefix + k: v for k, v in violin_csvs(report).items()})
    paths = []
    for name, text in files.items():
        path = out_dir / name
        atomic_write_bytes(path, text.encode())
        paths.append(path)
    return paths
