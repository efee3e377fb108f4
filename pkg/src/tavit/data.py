"""Synthetic phantoms, preprocessing, splitting and slice batching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .tensor import Tensor

MODALITIES = ("T1W", "FLAIR", "T1C")

BACKGROUND, NECROTIC, BRAIN, EDEMA, ENHANCING = 0, 1, 2, 3, 4
LABEL_NAMES = {
    BACKGROUND: "background",
    NECROTIC: "necrotic core",
    BRAIN: "brain",
    EDEMA: "edema",
    ENHANCING: "enhancing tumor",
}
TUMOR_LABELS = (NECROTIC, EDEMA, ENHANCING)

# T1C contrast rule: additive offsets on top of T1W inside each tumor class
T1C_OFFSETS = {ENHANCING: 0.4, NECROTIC: -0.3, EDEMA: 0.1}
T1C_FLAIR_WEIGHT = 0.1

# Scalp fat is the brightest tissue in every modality. A fixed scalp intensity
# pins each volume's min-max normalization, so a single slice carries the
# volume's intensity scale.
SCALP_INTENSITY = 1.25
SCALP_SHELL = (1.1, 1.22)

PAPER_SPLIT_FRACTIONS = (400 / 501, 50 / 501, 51 / 501)


@dataclass
class Volume:
    data: np.ndarray
    modality: str
    patient_id: str = ""

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.data = np.asarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class SegMap:
    labels: np.ndarray
    patient_id: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() > 4):
            raise ValueError("segmentation labels must lie in {0..4}")
        self.labels = labels.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape


@dataclass
class Patient:
    """One phantom patient: the three intensity volumes and the label map."""

    patient_id: str
    t1w: Volume
    flair: Volume
    t1c: Volume
    seg: SegMap

    @property
    def has_tumor(self) -> bool:
        return bool(np.isin(self.seg.labels, TUMOR_LABELS).any())


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def _smooth_noise(rng: np.random.Generator, shape, sigma_frac: float) -> np.ndarray:
    sig = [max(s * sigma_frac, 1.0) for s in shape]
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sig, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def generate_phantom(seed: int, shape: tuple[int, int, int] = (64, 128, 128), patient_id: str | None = None,
                     tumor_prob: float = 0.9) -> Patient:
    """Deterministic brain phantom with an optional nested tumor.

    The brain is an ellipsoid with smooth texture. A tumor (probability
    ``tumor_prob``) is a perturbed ellipsoid: necrotic core inside an
    enhancing rim inside edema, clipped to the brain. A bright scalp shell
    surrounds the brain. T1C is T1W plus fixed per-class offsets inside the
    tumor and a small FLAIR-proportional term in healthy brain. All volumes
    are min-max normalized to [0, 1].
    """
    rng = np.random.default_rng(seed)
    pid = patient_id if patient_id is not None else f"P{seed:05d}"
    d, h, w = shape
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")

    rz, ry, rx = rng.uniform(1.0, 1.15), rng.uniform(0.72, 0.86), rng.uniform(0.6, 0.74)
    cy, cx = rng.uniform(-0.05, 0.05, size=2)
    brain_r = np.sqrt((z / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
    brain = brain_r <= 1.0

    texture = _smooth_noise(rng, shape, 1 / 24)
    labels = np.where(brain, BRAIN, BACKGROUND).astype(np.uint8)

    if rng.random() < tumor_prob:
        # tumor center well inside the brain
        tz = rng.uniform(-0.4, 0.4) * rz
        ty = cy + rng.uniform(-0.45, 0.45) * ry
        tx = cx + rng.uniform(-0.45, 0.45) * rx
        radius = rng.uniform(0.25, 0.4)
        zscale = rng.uniform(1.2, 1.8)
        rho = np.sqrt(((z - tz) / (radius * zscale)) ** 2 + ((y - ty) / radius) ** 2 + ((x - tx) / radius) ** 2)
        rho = rho * (1 + 0.12 * _smooth_noise(rng, shape, 1 / 16))
        core = rng.uniform(0.2, 0.4)
        rim = core + rng.uniform(0.2, 0.3)
        tumor = brain & (rho < 1.0)
        labels[tumor] = EDEMA
        labels[brain & (rho < rim)] = ENHANCING
        labels[brain & (rho < core)] = NECROTIC

    healthy = labels == BRAIN
    t1w = np.zeros(shape)
    flair = np.zeros(shape)
    t1w[brain] = 0.65 + 0.06 * texture[brain] - 0.05 * brain_r[brain] ** 2
    flair[brain] = 0.45 + 0.05 * texture[brain] + 0.05 * brain_r[brain] ** 2
    for label, (dt1, fl) in {EDEMA: (-0.10, 0.85), ENHANCING: (-0.12, 0.70), NECROTIC: (-0.35, 0.55)}.items():
        m = labels == label
        t1w[m] += dt1
        flair[m] = fl + 0.04 * texture[m]

    t1c = t1w.copy()
    t1c[healthy] += T1C_FLAIR_WEIGHT * flair[healthy]
    for label, offset in T1C_OFFSETS.items():
        t1c[labels == label] += offset

    scalp = (brain_r >= SCALP_SHELL[0]) & (brain_r <= SCALP_SHELL[1])
    for vol in (t1w, flair, t1c):
        vol[scalp] = SCALP_INTENSITY
        np.clip(vol, 0.0, SCALP_INTENSITY, out=vol)

    return Patient(
        patient_id=pid,
        t1w=Volume(_minmax(t1w), "T1W", pid),
        flair=Volume(_minmax(flair), "FLAIR", pid),
        t1c=Volume(_minmax(t1c), "T1C", pid),
        seg=SegMap(labels, pid),
    )


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0))


def _downsample_axis(arr: np.ndarray, axis: int, factor: int, a: float) -> np.ndarray:
    n = arr.shape[axis]
    m = n // factor
    centers = (np.arange(m) + 0.5) * factor - 0.5
    base = np.floor(centers).astype(int)
    out = 0.0
    for off in (-1, 0, 1, 2):
        idx = base + off
        wts = cubic_kernel(centers - idx, a)
        taken = np.take(arr, np.clip(idx, 0, n - 1), axis=axis)
        shape = [1] * arr.ndim
        shape[axis] = m
        out = out + taken * wts.reshape(shape)
    return out


def bicubic_downsample(vol, factor: int = 2, a: float = -0.5, clamp: bool = True):
    """Cubic-convolution downsampling along every axis, edge-clamped.

    Accepts a :class:`Volume` or a plain array; returns the same kind. With
    ``clamp`` the result is clipped to [0, 1] to remove kernel overshoot.
    """
    arr = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float64)
    if any(s % factor for s in arr.shape):
        raise ValueError(f"extents {arr.shape} are not divisible by {factor}")
    out = arr.astype(np.float64)
    for axis in range(out.ndim):
        out = _downsample_axis(out, axis, factor, a)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    if isinstance(vol, Volume):
        return Volume(out.astype(np.float32), vol.modality, vol.patient_id)
    return out


def downsample_labels(seg: SegMap, factor: int = 2) -> SegMap:
    """Block-majority downsampling of a label map."""
    lab = seg.labels
    if any(s % factor for s in lab.shape):
        raise ValueError(f"extents {lab.shape} are not divisible by {factor}")
    d, h, w = (s // factor for s in lab.shape)
    blocks = lab.reshape(d, factor, h, factor, w, factor)
    counts = np.stack([(blocks == k).sum(axis=(1, 3, 5)) for k in range(5)], axis=0)
    return SegMap(counts.argmax(axis=0).astype(np.uint8), seg.patient_id)


def preprocess(patient: Patient, factor: int = 2) -> Patient:
    """Downsample every volume of a patient by ``factor``."""
    return Patient(
        patient.patient_id,
        bicubic_downsample(patient.t1w, factor),
        bicubic_downsample(patient.flair, factor),
        bicubic_downsample(patient.t1c, factor),
        downsample_labels(patient.seg, factor),
    )


def to_model_range(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return (np.asarray(x, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def from_model_range(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return ((np.asarray(x, dtype=np.float32) + 1.0) * 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# segmentation intensity encoding
# ---------------------------------------------------------------------------


def seg_encode(seg) -> np.ndarray:
    """Labels {0,1,2,3,4} -> intensities {-1,-0.5,0,0.5,1}."""
    labels = seg.labels if isinstance(seg, SegMap) else np.asarray(seg)
    if labels.size and (labels.min() < 0 or labels.max() > 4 or not np.all(labels == np.round(labels))):
        raise ValueError("segmentation labels must be integers in {0..4}")
    return (labels.astype(np.float32) * 0.5 - 1.0).astype(np.float32)


def seg_decode(img, patient_id: str = "") -> SegMap:
    """Snap intensities to the nearest label level."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    labels = np.clip(np.rint((arr + 1.0) * 2.0), 0, 4).astype(np.uint8)
    return SegMap(labels, patient_id)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment_flip(arrays: Sequence[np.ndarray], rng: np.random.Generator, p: float = 0.5) -> list[np.ndarray]:
    """Left-right flip every array together with probability ``p``."""
    if rng.random() < p:
        return [np.ascontiguousarray(a[..., ::-1]) for a in arrays]
    return list(arrays)


def augment_flip_batch(arrays: Sequence[np.ndarray | None], rng: np.random.Generator, p: float = 0.5) -> list:
    """Per-sample joint flips over a batch; each array has the batch first."""
    n = next(a for a in arrays if a is not None).shape[0]
    flips = rng.random(n) < p
    out = []
    for a in arrays:
        if a is None:
            out.append(None)
            continue
        b = a.copy()
        b[flips] = b[flips][..., ::-1]
        out.append(b)
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        all_ids = self.train + self.val + self.test
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("splits overlap or contain duplicate patients")

    def of(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def assignment(self) -> dict[str, str]:
        return {pid: name for name in ("train", "val", "test") for pid in self.of(name)}


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [round(total * f, 9) for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_patients(ids: Sequence[str], fractions: Sequence[float] = (0.75, 0.125, 0.125), seed: int = 0) -> DatasetSplit:
    """Shuffle patients with ``seed`` and cut them into train/val/test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("need three non-negative split fractions")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids are not unique")
    if len(ids) < 3:
        raise ValueError(f"need at least 3 patients for three splits, got {len(ids)}")
    counts = largest_remainder(len(ids), fractions)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return DatasetSplit(shuffled[:a], shuffled[a:b], shuffled[b:])


# ---------------------------------------------------------------------------
# slices and batches
# ---------------------------------------------------------------------------

STAGES = ("segmentation", "latent", "synthesis")


@dataclass
class SliceSet:
    """2-D axial slices for one stage and split, batch-first arrays."""

    inputs: np.ndarray
    targets: np.ndarray
    segs: np.ndarray
    latents: np.ndarray | None = None
    patient_ids: list[str] = field(default_factory=list)
    slice_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class Batch:
    inputs: np.ndarray
    target: np.ndarray
    seg: np.ndarray
    latent: np.ndarray | None


def stage_inputs(patient: Patient, stage: str, modalities: Sequence[str] = ("T1W", "FLAIR")) -> tuple[np.ndarray, np.ndarray]:
    """(inputs (S,C,H,W), target (S,1,H,W)) in model range for one patient."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    seg = seg_encode(patient.seg)[:, None]
    if stage == "latent":
        return seg, seg
    vols = {"T1W": patient.t1w, "FLAIR": patient.flair}
    x = np.stack([to_model_range(vols[m].data) for m in modalities], axis=1)
    if stage == "segmentation":
        return x, seg
    return x, to_model_range(patient.t1c.data)[:, None]


def latent_kind(split: str) -> str:
    """Ground-truth latents for train/val, predicted-segmentation latents for test."""
    return "pred" if split == "test" else "gt"


def build_slices(patients: Sequence[Patient], stage: str, split: str = "train",
                 modalities: Sequence[str] = ("T1W", "FLAIR"),
                 latents: Mapping[tuple[str, str], np.ndarray] | None = None,
                 need_latents: bool = False) -> SliceSet:
    """Stack every axial slice of ``patients`` for ``stage``.

    When ``need_latents`` is set (synthesis with conditioning), each patient
    must have an entry ``latents[(patient_id, latent_kind(split))]``.
    """
    xs, ys, ss, ls, pids, sidx = [], [], [], [], [], []
    kind = latent_kind(split)
    for p in patients:
        x, y = stage_inputs(p, stage, modalities)
        xs.append(x)
        ys.append(y)
        ss.append(p.seg.labels)
        pids.extend([p.patient_id] * len(x))
        sidx.append(np.arange(len(x)))
        if need_latents:
            key = (p.patient_id, kind)
            if latents is None or key not in latents:
                raise KeyError(f"missing {kind} latents for patient {p.patient_id} ({split} split)")
            lat = latents[key]
            if len(lat) != len(x):
                raise ValueError(f"latents for {p.patient_id} cover {len(lat)} slices, volume has {len(x)}")
            ls.append(lat)
    if not xs:
        raise ValueError(f"no patients in the {split} split")
    return SliceSet(
        inputs=np.concatenate(xs), targets=np.concatenate(ys), segs=np.concatenate(ss),
        latents=np.concatenate(ls) if need_latents else None, patient_ids=pids,
        slice_index=np.concatenate(sidx))


def batch_slices(slices: SliceSet, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Yield batches in a fixed order, or a seeded shuffle when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(slices)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        yield Batch(
            slices.inputs[idx], slices.targets[idx], slices.segs[idx],
            None if slices.latents is None else slices.latents[idx])
