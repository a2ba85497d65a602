"""Weakly supervised time-bin pretraining."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np
import torch

from eegd3 import dsp
from eegd3.io import Collection, Trial
from eegd3.model import Checkpoint, Decomposer, ModelConfig
from eegd3.sequencing import SequenceMappings, bin_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceDetected(TrainingError):
    pass


class EmptyDataset(TrainingError):
    pass


class TooFewSubjects(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    window_seconds: float = 1.5
    n_bins: int = 16
    seed: int = 0
    bandpass: tuple[float, float] | None = (8.0, 40.0)
    filter_order: int = 3
    smoothing: float = 0.1
    gamma: float = 0.5
    # "window": band-pass each sampled window; "trial": filter whole trials once
    filter_mode: str = "window"
    # windows drawn per (oversampled) trial in one epoch
    windows_per_trial: int = 1
    # fixed number of windows per epoch (sleep setup); overrides the trial count
    windows_per_epoch: int | None = None

    def __post_init__(self):
        if self.bandpass is not None:
            self.bandpass = tuple(self.bandpass)
        if self.filter_mode not in ("window", "trial"):
            raise ValueError(f"filter_mode must be 'window' or 'trial', got {self.filter_mode!r}")
        for name in ("epochs", "batch_size", "learning_rate", "window_seconds", "n_bins", "windows_per_trial"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FoldSplit:
    n_folds: int
    assignment: dict[str, int]

    def validation(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def training(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.validation(k)) for k in range(self.n_folds)]


def split_folds(subjects, n_folds: int, seed: int = 0) -> FoldSplit:
    """Assign subjects to folds whose sizes differ by at most one."""
    subjects = sorted(set(subjects))
    if n_folds < 1 or n_folds > len(subjects):
        raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldSplit(n_folds, {subjects[i]: k % n_folds for k, i in enumerate(order)})


def assign_bin(valid_span: tuple[float, float], center: float, n_bins: int) -> int:
    """Time bin of a window centre; the valid span is cut into equal bins.

    Span and centre share one unit (seconds or samples).
    """
    lo, hi = valid_span
    width = (hi - lo) / n_bins
    b = int(math.floor((center - lo) / width))
    return min(max(b, 0), n_bins - 1)


def bin_width(valid_seconds: float, n_bins: int) -> float:
    return valid_seconds / n_bins


@dataclass
class SleepBinSchedule:
    duration_seconds: float
    n_bins: int
    window_seconds: float
    bin_seconds: float
    windows_per_bin: int
    windows_per_recording: int


def sleep_bin_setup(duration_seconds: float, n_bins: int = 32, window_seconds: float = 30.0,
                    max_seconds: float = 8 * 3600.0) -> SleepBinSchedule:
    """Whole-night bins: the (clipped) recording is split into ``n_bins`` bins."""
    duration = min(duration_seconds, max_seconds)
    width = duration / n_bins
    per_bin = int(round(width / window_seconds))
    return SleepBinSchedule(duration, n_bins, window_seconds, width, per_bin, per_bin * n_bins)


def clip_around_midpoint(n_samples: int, fs: float, max_seconds: float = 8 * 3600.0) -> tuple[int, int]:
    """Sample span of at most ``max_seconds`` centred on the recording midpoint."""
    keep = min(n_samples, int(round(max_seconds * fs)))
    start = (n_samples - keep) // 2
    return start, start + keep


def _condition_weights(collection: Collection, dataset_id: str, trials: list[Trial]) -> np.ndarray | None:
    weights = collection.manifest.datasets.get(dataset_id, {}).get("condition_weights")
    if not weights:
        return None
    w = np.array([float(weights.get(t.condition, 1.0)) for t in trials])
    return w / w.sum()


def epoch_plan(collection: Collection, config: TrainConfig, rng: np.random.Generator):
    """(dataset_id, trial index) draws for one epoch.

    Datasets are oversampled to equal counts; within a dataset trials are
    drawn uniformly (or by condition weight when the manifest sets one).
    """
    ids = collection.dataset_ids
    if not ids:
        raise EmptyDataset("no datasets registered")
    for ds in ids:
        if not collection.tables[ds].trials:
            raise EmptyDataset(f"dataset {ds!r} has no trials")
    if config.windows_per_epoch:
        per_ds = int(math.ceil(config.windows_per_epoch / len(ids)))
    else:
        per_ds = max(len(collection.tables[ds].trials) for ds in ids) * config.windows_per_trial
    draws = []
    for ds in ids:
        trials = collection.tables[ds].trials
        p = _condition_weights(collection, ds, trials)
        idx = rng.choice(len(trials), size=per_ds, replace=True, p=p)
        draws.extend((ds, int(i)) for i in idx)
    order = rng.permutation(len(draws))
    return [draws[i] for i in order]


class WindowSource:
    """Cuts and preprocesses windows from a collection, with an optional
    cache of trial-level filtered data."""

    def __init__(self, collection: Collection, config: TrainConfig):
        self.collection = collection
        self.config = config
        self._sos = {}
        self._filtered = {}

    def _sos_for(self, fs):
        if self.config.bandpass is None:
            return None
        if fs not in self._sos:
            self._sos[fs] = dsp.bandpass_sos(*self.config.bandpass, fs, self.config.filter_order)
        return self._sos[fs]

    def trial_array(self, dataset_id: str, index: int) -> np.ndarray:
        trial = self.collection.tables[dataset_id].trials[index]
        x = self.collection.trial_data(trial)
        if self.config.filter_mode == "trial" and self.config.bandpass is not None:
            key = (dataset_id, index)
            if key not in self._filtered:
                fs = self.collection.fs(dataset_id)
                y = np.zeros_like(x, dtype=np.float64)
                lo, hi = trial.valid_start, trial.valid_end
                y[:, lo:hi] = dsp.bandpass_array(x[:, lo:hi], fs, *self.config.bandpass,
                                                 self.config.filter_order, sos=self._sos_for(fs))
                self._filtered[key] = y
            return self._filtered[key]
        return x

    def finish(self, x: np.ndarray, fs: float) -> np.ndarray:
        """Band-pass (window mode) and standardise + CAR a raw window."""
        band = self.config.bandpass if self.config.filter_mode == "window" else None
        return dsp.prepare_window(x, fs, band, self.config.filter_order, sos=self._sos_for(fs) if band else None)


def make_epoch_stream(collection: Collection, config: TrainConfig, rng: np.random.Generator,
                      source: WindowSource | None = None) -> Iterator[tuple[np.ndarray, str, int]]:
    """Yield ``(window, dataset_id, bin)`` for one epoch of oversampled draws."""
    source = source or WindowSource(collection, config)
    for ds, i in epoch_plan(collection, config, rng):
        trial = collection.tables[ds].trials[i]
        fs = collection.fs(ds)
        data = source.trial_array(ds, i)
        win = dsp.sample_window(data, fs, config.window_seconds, rng,
                                (trial.valid_start, trial.valid_end), trial)
        center = win.start + win.n_times / 2
        b = assign_bin((trial.valid_start, trial.valid_end), center, config.n_bins)
        yield source.finish(win.samples, fs), ds, b


def _batches(stream, batch_size):
    batch = []
    for item in stream:
        batch.append(item)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def _collate(batch, mappings: SequenceMappings, dtype):
    x = torch.as_tensor(np.stack([b[0] for b in batch]), dtype=dtype)
    ds = torch.as_tensor([mappings.index(b[1]) for b in batch])
    y = torch.as_tensor([b[2] for b in batch])
    return x, ds, y


def pretrain(collection: Collection, model_config: ModelConfig, train_config: TrainConfig,
             progress=None) -> Checkpoint:
    """Train the decomposer and per-dataset mappings on the time-bin task.

    ``collection`` should already be restricted to training subjects.
    Returns a checkpoint whose metadata holds the loss curve
    (epoch, mean loss, bin accuracy) and the epoch definition.
    """
    cfg = train_config
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = Decomposer(model_config)
    mappings = SequenceMappings(collection.dataset_ids, model_config.n_components, cfg.n_bins, cfg.gamma)
    params = list(model.parameters()) + list(mappings.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            betas=(0.9, 0.999), eps=1e-8)
    source = WindowSource(collection, cfg)
    dtype = torch.float32
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, correct, count = 0.0, 0, 0
        for batch in _batches(make_epoch_stream(collection, cfg, rng, source), cfg.batch_size):
            x, ds, y = _collate(batch, mappings, dtype)
            z = model(x)
            p = mappings(z, ds)
            target = torch.nn.functional.one_hot(y, cfg.n_bins)
            loss = bin_loss(p, target, cfg.smoothing)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.project_()
            n = len(batch)
            total += loss.item() * n
            correct += int((p.argmax(-1) == y).sum())
            count += n
        row = {"epoch": epoch, "loss": total / count, "bin_accuracy": correct / count}
        curve.append(row)
        log.info("epoch %d loss %.5f acc %.4f", epoch, row["loss"], row["bin_accuracy"])
        if progress is not None:
            progress(row)
    model.eval()
    meta = {
        "train_config": asdict(cfg),
        "loss_curve": curve,
        "epoch_definition": (
            f"{cfg.windows_per_epoch} windows" if cfg.windows_per_epoch else
            f"max trials per dataset x {len(collection.dataset_ids)} datasets x {cfg.windows_per_trial} windows"
        ),
        "subjects": collection.subjects(),
    }
    return Checkpoint(model, mappings, meta)


@torch.no_grad()
def evaluate_bins(checkpoint: Checkpoint, collection: Collection, config: TrainConfig,
                  n_draws: int = 2000, seed: int = 1234) -> dict:
    """Loss and top-1 bin accuracy on randomly drawn windows (eval mode)."""
    model, mappings = checkpoint.model, checkpoint.mappings
    model.eval()
    rng = np.random.default_rng(seed)
    eval_cfg = TrainConfig(**{**asdict(config), "windows_per_epoch": n_draws})
    losses, correct, count = [], 0, 0
    for batch in _batches(make_epoch_stream(collection, eval_cfg, rng), 256):
        x, ds, y = _collate(batch, mappings, next(model.parameters()).dtype)
        p = mappings(model(x), ds)
        losses.append(bin_loss(p, torch.nn.functional.one_hot(y, config.n_bins), config.smoothing).item() * len(batch))
        correct += int((p.argmax(-1) == y).sum())
        count += len(batch)
    return {"loss": sum(losses) / count, "bin_accuracy": correct / count, "n": count}
