"""The on-disk workflow behind the command line.

Layout::

    <data_dir>/manifest.txt      patient, split, modality, relative path
    <data_dir>/split.txt         patient, split
    <data_dir>/dataset_hash.txt
    <data_dir>/volumes/<pid>_<MOD>.tav

    <out_dir>/<stage>/model.tavc, loss.csv, config.txt
    <out_dir>/latent/latents/<pid>_{gt,pred}.tav
    <out_dir>/seg_pred/<pid>.tav
    <out_dir>/predictions/<variant>/<pid>.tav
    <out_dir>/report/*.csv
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import ConfigMismatchError, load_checkpoint, save_checkpoint
from .config import VARIANTS, RunConfig
from .models import build_latent_encoder, build_model, build_mprvit, extract_latent, predict
from .report import build_report, build_segmentation_report, write_report
from .train import subsample_slices, train_stage, write_history
from .volume_io import KIND_LABELS, atomic_write_bytes, read_array, write_array

log = logging.getLogger(__name__)

MODALITY_FILES = ("T1W", "FLAIR", "T1C", "SEG")
STAGE_DIRS = {"segmentation": "seg", "latent": "latent"}


class ValidationError(ValueError):
    """Bad inputs or missing prerequisites, detected before any output is written."""


class RunFailure(RuntimeError):
    """The work itself failed (non-finite losses or metrics)."""


def variant_modalities(variant: str) -> tuple[str, ...]:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return ("T1W",) if variant == "tavit-t1w" else ("T1W", "FLAIR")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# dataset ---------------------------------------------------------------------

def patient_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def dataset_hash(data_dir: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    files = [data_dir / "manifest.txt", data_dir / "split.txt"]
    files += sorted((data_dir / "volumes").glob("*.tav"))
    for f in files:
        h.update(f.relative_to(data_dir).as_posix().encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def gen_data(cfg: RunConfig) -> str:
    data_dir = Path(cfg.data_dir)
    if data_dir.exists() and not data_dir.is_dir():
        raise ValidationError(f"data directory {data_dir} is not a directory")
    shape = (2 * cfg.slices, 2 * cfg.image_size, 2 * cfg.image_size)
    ids = [f"P{i:03d}" for i in range(cfg.patients)]
    split = D.split_patients(ids, cfg.split, cfg.seed)
    assign = split.assignment()
    manifest = ["# patient split modality path"]
    for i, pid in enumerate(ids):
        p = D.preprocess(D.generate_phantom(patient_seed(cfg.seed, i), shape, pid, cfg.tumor_prob))
        for mod in MODALITY_FILES:
            rel = f"volumes/{pid}_{mod}.tav"
            if mod == "SEG":
                write_array(data_dir / rel, p.seg.labels, KIND_LABELS)
            else:
                write_array(data_dir / rel, {"T1W": p.t1w, "FLAIR": p.flair, "T1C": p.t1c}[mod].data)
            manifest.append(f"{pid} {assign[pid]} {mod} {rel}")
    _write_text(data_dir / "manifest.txt", "\n".join(manifest) + "\n")
    _write_text(data_dir / "split.txt", "".join(f"{pid} {assign[pid]}\n" for pid in ids))
    _write_text(data_dir / "config.txt", cfg.to_text())
    digest = dataset_hash(data_dir)
    _write_text(data_dir / "dataset_hash.txt", digest + "\n")
    return digest


@dataclass
class Dataset:
    patients: dict[str, D.Patient]
    split: D.DatasetSplit

    def of(self, name: str) -> list[D.Patient]:
        return [self.patients[pid] for pid in self.split.of(name)]


def read_manifest(data_dir: Path) -> tuple[dict[str, dict[str, str]], dict[str, str]]:
    path = data_dir / "manifest.txt"
    if not path.exists():
        raise ValidationError(f"no dataset at {data_dir} (missing manifest.txt); run gen-data first")
    files: dict[str, dict[str, str]] = {}
    splits: dict[str, str] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValidationError(f"manifest line {n} malformed: {line!r}")
        pid, split, mod, rel = parts
        files.setdefault(pid, {})[mod] = rel
        splits[pid] = split
    return files, splits


def load_dataset(cfg: RunConfig) -> Dataset:
    data_dir = Path(cfg.data_dir)
    files, splits = read_manifest(data_dir)
    want = (cfg.slices, cfg.image_size, cfg.image_size)
    patients = {}
    for pid in sorted(files):
        arrays = {}
        for mod in MODALITY_FILES:
            if mod not in files[pid]:
                raise ValidationError(f"manifest lists no {mod} volume for {pid}")
            _, arr = read_array(data_dir / files[pid][mod])
            if arr.shape != want:
                raise ValidationError(
                    f"{pid} {mod} has extents {arr.shape}, config expects {want}; regenerate the dataset")
            arrays[mod] = arr
        patients[pid] = D.Patient(
            pid, D.Volume(arrays["T1W"], "T1W", pid), D.Volume(arrays["FLAIR"], "FLAIR", pid),
            D.Volume(arrays["T1C"], "T1C", pid), D.SegMap(arrays["SEG"], pid))
    groups = {s: sorted(p for p, v in splits.items() if v == s) for s in ("train", "val", "test")}
    return Dataset(patients, D.DatasetSplit(groups["train"], groups["val"], groups["test"]))


# training --------------------------------------------------------------------

def stage_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def _require(path: Path, stage: str) -> None:
    if not path.exists():
        raise ValidationError(f"prerequisite stage '{stage}' has not been run: {path} is missing")


def _val_subset(cfg: RunConfig, slices: D.SliceSet) -> D.SliceSet:
    return subsample_slices(slices, cfg.val_slices_per_patient, np.random.default_rng([cfg.seed, 7]))


def _fit(cfg: RunConfig, model, stage: str, train_set, val_set, out: Path) -> None:
    plan = cfg.plan(stage)
    result = train_stage(model, plan, train_set, _val_subset(cfg, val_set))
    save_checkpoint(model, out / "model.tavc", epoch=result.best_epoch, root_seed=cfg.seed,
                    optimizer=result.optimizer, extra={"stage": stage})
    write_history(out / "loss.csv", result.history)
    _write_text(out / "config.txt", cfg.to_text())


def train_segmentation(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg)
    model = build_mprvit(cfg.model_config("segmentation"))
    out = stage_dir(cfg, "seg")
    mods = ("T1W", "FLAIR")
    _fit(cfg, model, "segmentation",
         D.build_slices(ds.of("train"), "segmentation", "train", mods),
         D.build_slices(ds.of("val"), "segmentation", "val", mods), out)
    return out


def predict_segmentation(model, patient: D.Patient) -> np.ndarray:
    x, _ = D.stage_inputs(patient, "segmentation", ("T1W", "FLAIR"))
    return D.seg_decode(predict(model, x)[:, 0], patient.patient_id).labels


def train_latent(cfg: RunConfig) -> Path:
    seg_ckpt = stage_dir(cfg, "seg") / "model.tavc"
    _require(seg_ckpt, "seg")
    ds = load_dataset(cfg)
    segmenter = load_checkpoint(seg_ckpt, expect=cfg.model_config("segmentation"))
    encoder = build_latent_encoder(cfg.model_config("latent"))
    out = stage_dir(cfg, "latent")
    _fit(cfg, encoder, "latent",
         D.build_slices(ds.of("train"), "latent", "train"),
         D.build_slices(ds.of("val"), "latent", "val"), out)

    # ground-truth latents for every patient; predicted-segmentation latents for test
    for pid, p in ds.patients.items():
        write_array(out / "latents" / f"{pid}_gt.tav", extract_latent(encoder, D.seg_encode(p.seg)[:, None]))
    for p in ds.of("test"):
        labels = predict_segmentation(segmenter, p)
        write_array(stage_dir(cfg, "seg_pred") / f"{p.patient_id}.tav", labels, KIND_LABELS)
        write_array(out / "latents" / f"{p.patient_id}_pred.tav",
                    extract_latent(encoder, D.seg_encode(labels)[:, None]))
    return out


def load_latents(cfg: RunConfig, ds: Dataset, splits=("train", "val", "test")) -> dict:
    lat_dir = stage_dir(cfg, "latent") / "latents"
    _require(lat_dir, "latent")
    latents = {}
    for split in splits:
        kind = D.latent_kind(split)
        for pid in ds.split.of(split):
            path = lat_dir / f"{pid}_{kind}.tav"
            _require(path, "latent")
            latents[(pid, kind)] = read_array(path)[1]
    return latents


def train_synthesis(cfg: RunConfig, variant: str) -> Path:
    mods = variant_modalities(variant)
    mcfg = cfg.model_config(variant)
    conditioned = mcfg.conditioning == "adaln_zero"
    if conditioned:
        _require(stage_dir(cfg, "latent") / "latents", "latent")
    ds = load_dataset(cfg)
    latents = load_latents(cfg, ds, ("train", "val")) if conditioned else None
    model = build_model(mcfg)
    out = stage_dir(cfg, variant)
    _fit(cfg, model, "synthesis",
         D.build_slices(ds.of("train"), "synthesis", "train", mods, latents, conditioned),
         D.build_slices(ds.of("val"), "synthesis", "val", mods, latents, conditioned), out)
    return out


# inference and evaluation ------------------------------------------------------

def infer(cfg: RunConfig, variant: str, split: str = "test", checkpoint: str | None = None) -> list[Path]:
    mods = variant_modalities(variant)
    ckpt = Path(checkpoint) if checkpoint else stage_dir(cfg, variant) / "model.tavc"
    _require(ckpt, f"train tavit --variant {variant}")
    try:
        model = load_checkpoint(ckpt, expect=cfg.model_config(variant))
    except ConfigMismatchError as exc:
        raise ValidationError(str(exc)) from exc
    ds = load_dataset(cfg)
    latents = load_latents(cfg, ds, (split,)) if model.conditioned else None
    kind = D.latent_kind(split)
    written = []
    for p in ds.of(split):
        x, _ = D.stage_inputs(p, "synthesis", mods)
        lat = latents[(p.patient_id, kind)] if latents is not None else None
        vol = D.from_model_range(predict(model, x, lat)[:, 0])
        path = Path(cfg.out_dir) / "predictions" / variant / f"{p.patient_id}.tav"
        write_array(path, vol.astype(np.float32))
        written.append(path)
    return written


def evaluate(cfg: RunConfig, variants: list[str] | None = None) -> Path:
    pred_root = Path(cfg.out_dir) / "predictions"
    if not variants:
        variants = [v for v in VARIANTS if (pred_root / v).is_dir()]
    if not variants:
        raise ValidationError(f"no predictions under {pred_root}; run infer first")
    ds = load_dataset(cfg)
    test = ds.split.of("test")
    predictions = {}
    for v in variants:
        vdir = pred_root / v
        _require(vdir, f"infer --variant {v}")
        found = sorted(f.stem for f in vdir.glob("*.tav"))
        if found != sorted(test):
            raise ValidationError(f"predictions for {v} cover {found}, test split is {sorted(test)}")
        predictions[v] = {pid: read_array(vdir / f"{pid}.tav")[1] for pid in test}
    refs = {pid: ds.patients[pid].t1c.data for pid in test}
    segs = {pid: ds.patients[pid].seg.labels for pid in test}
    report = build_report(predictions, refs, segs)
    out = Path(cfg.out_dir) / "report"
    write_report(report, out)
    bad = report.has_nan()
    seg_dir = stage_dir(cfg, "seg_pred")
    if seg_dir.is_dir():
        pred_labels = {pid: read_array(seg_dir / f"{pid}.tav")[1] for pid in test}
        seg_report = build_segmentation_report(pred_labels, segs)
        write_report(seg_report, out, prefix="segmentation_")
        bad = bad or seg_report.has_nan()
    if bad:
        raise RunFailure("a metric evaluated to NaN; see the report CSVs")
    return out


def summarize(cfg: RunConfig) -> str:
    """Plain-text table of the aggregate CSVs."""
    out = Path(cfg.out_dir) / "report"
    lines = []
    for name in ("aggregates.csv", "segmentation_aggregates.csv"):
        path = out / name
        if not path.exists():
            if name == "aggregates.csv":
                raise ValidationError(f"{path} missing; run evaluate first")
            continue
        rows = [r.split(",") for r in path.read_text().splitlines()[1:]]
        lines.append(f"{'variant':<18}{'region':<13}{'metric':<7}{'mean':>12}{'std':>12}{'p':>12}")
        for v, region, metric, mean, std, p in rows:
            lines.append(f"{v:<18}{region:<13}{metric:<7}{float(mean):>12.5g}{float(std):>12.4g}{float(p):>12.4g}")
        lines.append("")
    text = "\n".join(lines)
    _write_text(out / "summary.txt", text)
    return text
