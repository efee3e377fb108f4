"""L1 training loop with AdamW and validation-driven early stopping."""

from __future__ import annotations

import copy
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import STAGES, SliceSet, augment_flip_batch, batch_slices
from .models import HybridViT
from .optim import AdamW, AdamWState
from .volume_io import atomic_write_bytes

log = logging.getLogger(__name__)


@dataclass
class TrainPlan:
    stage: str = "synthesis"
    epochs: int = 20
    batch_size: int = 8
    patience: int = 10
    augment: bool = True
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-6
    weight_decay: float = 1e-2
    seed: int = 0
    slices_per_patient: int = 0  # 0 trains on every slice each epoch

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ValueError("epochs and batch_size must be positive, patience non-negative")
        if self.slices_per_patient < 0:
            raise ValueError("slices_per_patient must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_l1: float
    val_l1: float


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    history: list[EpochRecord]
    optimizer: AdamWState
    stopped_early: bool = False
    initial_val_l1: float = float("nan")
    extra: dict = field(default_factory=dict)


def early_stop(val_history, patience: int) -> bool:
    """True iff the best validation loss is more than ``patience`` epochs old."""
    vals = [r.val_l1 if isinstance(r, EpochRecord) else float(r) for r in val_history]
    if not vals:
        raise ValueError("early_stop needs a non-empty history")
    best = int(np.argmin(vals))
    return (len(vals) - 1) - best > patience


def _batch_arrays(batch, dtype):
    lat = None if batch.latent is None else batch.latent.astype(dtype, copy=False)
    return batch.inputs.astype(dtype, copy=False), batch.target.astype(dtype, copy=False), lat


def subsample_slices(slices: SliceSet, per_patient: int, rng: np.random.Generator) -> SliceSet:
    """Keep ``per_patient`` randomly chosen slices of every patient (all if fewer)."""
    if per_patient <= 0:
        return slices
    pids = np.asarray(slices.patient_ids)
    keep = []
    for pid in dict.fromkeys(slices.patient_ids):
        idx = np.flatnonzero(pids == pid)
        if len(idx) > per_patient:
            idx = np.sort(rng.choice(idx, per_patient, replace=False))
        keep.append(idx)
    return take_slices(slices, np.concatenate(keep))


def take_slices(slices: SliceSet, idx: np.ndarray) -> SliceSet:
    return SliceSet(
        inputs=slices.inputs[idx], targets=slices.targets[idx], segs=slices.segs[idx],
        latents=None if slices.latents is None else slices.latents[idx],
        patient_ids=[slices.patient_ids[i] for i in idx],
        slice_index=None if slices.slice_index is None else slices.slice_index[idx])


def evaluate_l1(model: HybridViT, slices: SliceSet, batch_size: int) -> float:
    """Mean absolute error over every element of the split, in eval mode."""
    was_training = model.training
    model.eval()
    dtype = model.head.weight.dtype
    total, count = 0.0, 0
    try:
        with T.no_grad():
            for batch in batch_slices(slices, batch_size):
                x, y, lat = _batch_arrays(batch, dtype)
                pred = model(x, lat).data
                total += float(np.abs(pred.astype(np.float64) - y).sum())
                count += y.size
    finally:
        model.train(was_training)
    return total / count


def train_stage(model: HybridViT, plan: TrainPlan, train: SliceSet, val: SliceSet) -> TrainResult:
    """Train ``model`` in place and restore the best-validation weights at the end."""
    plan.validate()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_stage needs non-empty train and validation splits")
    if model.conditioned and (train.latents is None or val.latents is None):
        raise ValueError("conditioned model needs latents in both train and validation slices")
    dtype = model.head.weight.dtype
    opt = AdamW(model.parameters(), lr=plan.lr, betas=plan.betas, eps=plan.eps, weight_decay=plan.weight_decay)
    history: list[EpochRecord] = []
    initial = evaluate_l1(model, val, plan.batch_size)
    best_state = copy.deepcopy(model.state_dict())
    best_opt = copy.deepcopy(opt.state)
    best_epoch, best_val = 0, np.inf
    stopped = False

    for epoch in range(1, plan.epochs + 1):
        model.train()
        order_rng = np.random.default_rng([plan.seed, epoch, 0])
        flip_rng = np.random.default_rng([plan.seed, epoch, 1])
        epoch_set = subsample_slices(train, plan.slices_per_patient, np.random.default_rng([plan.seed, epoch, 2]))
        total, count = 0.0, 0
        for batch in batch_slices(epoch_set, plan.batch_size, order_rng):
            x, y, lat = _batch_arrays(batch, dtype)
            if plan.augment:
                x, y, lat = augment_flip_batch([x, y, lat], flip_rng)
            loss = T.l1_loss(model(x, lat), T.Tensor(y))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(x)
            count += len(x)
        train_l1 = total / count
        if not np.isfinite(train_l1):
            raise FloatingPointError(f"training loss became {train_l1} at epoch {epoch}")
        val_l1 = evaluate_l1(model, val, plan.batch_size)
        history.append(EpochRecord(epoch, train_l1, val_l1))
        log.info("%s epoch %d train_l1 %.6f val_l1 %.6f", plan.stage, epoch, train_l1, val_l1)
        if val_l1 < best_val:
            best_val, best_epoch = val_l1, epoch
            best_state = copy.deepcopy(model.state_dict())
            best_opt = copy.deepcopy(opt.state)
        if early_stop(history, plan.patience):
            stopped = True
            break

    model.load_state_dict(best_state)
    return TrainResult(best_state=best_state, best_epoch=best_epoch, history=history,
                       optimizer=best_opt, stopped_early=stopped, initial_val_l1=initial)


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    buf.write("epoch,train_l1,val_l1\n")
    for r in history:
        buf.write(f"{r.epoch},{r.train_l1!r},{r.val_l1!r}\n")
    return buf.getvalue()


def write_history(path, history: list[EpochRecord]) -> None:
    atomic_write_bytes(path, history_csv(history).encode())
