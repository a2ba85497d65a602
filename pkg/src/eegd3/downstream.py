"""Linear probes on frozen latent components and the few-shot harness."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from eegd3 import dsp
from eegd3.model import Checkpoint

L1_EPS = 1e-8


class EmptyInput(ValueError):
    pass


class BudgetExceedsPool(ValueError):
    pass


@dataclass
class ProbeConfig:
    components: list[int] = field(default_factory=list)
    n_classes: int = 2
    steps: int | None = None  # fixed update steps; None -> epochs over the data
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    dropout: float = 0.25
    normalize: str = "column"  # sleep probe L1 normalisation: column | row | none
    seed: int = 0


def metrics(predictions, labels) -> dict:
    """Accuracy, UAR (mean per-class recall) and macro F1.

    Recall is averaged over classes present in ``labels``; F1 over classes
    present in either array.
    """
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.size == 0 or lab.size == 0:
        raise EmptyInput("no predictions")
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    recalls, f1s = [], []
    for c in np.union1d(pred, lab):
        tp = np.sum((pred == c) & (lab == c))
        fp = np.sum((pred == c) & (lab != c))
        fn = np.sum((pred != c) & (lab == c))
        if tp + fn:
            recalls.append(tp / (tp + fn))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return {
        "accuracy": float(np.mean(pred == lab)),
        "uar": float(np.mean(recalls)),
        "f1": float(np.mean(f1s)),
    }


def n_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class MotorProbe(nn.Module):
    """Two latent components to two class logits: 2*2 weights + 2 biases."""

    def __init__(self):
        super().__init__()
        self.linear = nn.Linear(2, 2)

    def forward(self, z):
        return self.linear(z)


def l1_normalize(weight: torch.Tensor, mode: str = "column") -> torch.Tensor:
    """Divide each column (one per input component) by its absolute sum over
    the outputs; ``row`` normalises over inputs instead. Zero columns stay zero."""
    if mode == "none":
        return weight
    dim = 0 if mode == "column" else 1
    return weight / weight.abs().sum(dim=dim, keepdim=True).clamp_min(L1_EPS)


class SleepProbe(nn.Module):
    """Affine batch norm + dropout + L1-normalised linear layer (40 parameters for 5x5)."""

    def __init__(self, n_inputs: int = 5, n_classes: int = 5, dropout: float = 0.25, normalize: str = "column"):
        super().__init__()
        self.norm = nn.BatchNorm1d(n_inputs, affine=True)
        self.drop = nn.Dropout(dropout)
        self.linear = nn.Linear(n_inputs, n_classes)
        self.normalize = normalize

    def forward(self, z):
        w = l1_normalize(self.linear.weight, self.normalize)
        return nn.functional.linear(self.drop(self.norm(z)), w, self.linear.bias)


def _fit(probe: nn.Module, x: np.ndarray, y: np.ndarray, config: ProbeConfig, loss_kind: str) -> nn.Module:
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.long)
    opt = torch.optim.AdamW(probe.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    n = len(xt)
    if config.steps is not None:
        plan = [rng.integers(0, n, size=config.batch_size) for _ in range(config.steps)]
    else:
        plan = []
        for _ in range(config.epochs):
            perm = rng.permutation(n)
            plan.extend(perm[i:i + config.batch_size] for i in range(0, n, config.batch_size))
    probe.train()
    for idx in plan:
        if len(idx) < 2 and any(isinstance(m, nn.BatchNorm1d) for m in probe.modules()):
            continue
        logits = probe(xt[idx])
        if loss_kind == "bce":
            target = nn.functional.one_hot(yt[idx], logits.shape[-1]).float()
            loss = nn.functional.binary_cross_entropy_with_logits(logits, target)
        else:
            loss = nn.functional.cross_entropy(logits, yt[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    probe.eval()
    return probe


def train_motor_probe(latents, labels, config: ProbeConfig | None = None) -> MotorProbe:
    """Fit the 6-parameter binary probe on two frozen components.

    ``latents`` may hold all C components when ``config.components`` names
    the two to use.
    """
    config = config or ProbeConfig(n_classes=2)
    x = np.asarray(latents, dtype=np.float64)
    if config.components:
        x = x[:, config.components]
    if x.shape[1] != 2:
        raise ValueError(f"motor probe takes exactly 2 components, got {x.shape[1]}")
    torch.manual_seed(config.seed)
    return _fit(MotorProbe(), x, np.asarray(labels), config, "bce")


def train_sleep_probe(latents, labels, config: ProbeConfig | None = None) -> SleepProbe:
    """Fit the 40-parameter probe for 2000 update steps by default."""
    config = config or ProbeConfig(n_classes=5, steps=2000)
    if config.steps is None:
        config = ProbeConfig(**{**config.__dict__, "steps": 2000})
    x = np.asarray(latents, dtype=np.float64)
    if config.components:
        x = x[:, config.components]
    torch.manual_seed(config.seed)
    probe = SleepProbe(x.shape[1], config.n_classes, config.dropout, config.normalize)
    return _fit(probe, x, np.asarray(labels), config, "ce")


@torch.no_grad()
def predict(probe: nn.Module, latents, components=None) -> np.ndarray:
    x = np.asarray(latents, dtype=np.float64)
    if components:
        x = x[:, components]
    probe.eval()
    return probe(torch.as_tensor(x, dtype=torch.float32)).argmax(-1).numpy()


def sample_budget(labels, budget, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``budget`` examples per class; ``budget="full"`` takes
    everything and oversamples minority classes to the majority count."""
    labels = np.asarray(labels)
    pools = [np.flatnonzero(labels == c) for c in range(n_classes)]
    if budget == "full":
        top = max(len(p) for p in pools)
        return np.concatenate([
            np.concatenate([p, rng.choice(p, top - len(p), replace=True)]) if len(p) else p
            for p in pools
        ])
    for c, p in enumerate(pools):
        if len(p) < budget:
            raise BudgetExceedsPool(f"class {c} has {len(p)} examples, budget is {budget}")
    return np.concatenate([rng.choice(p, budget, replace=False) for p in pools])


@dataclass
class FoldData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def fewshot_curve(folds: list[FoldData], budgets, config: ProbeConfig | None = None,
                  repeats: int = 1, seed: int = 0) -> dict:
    """Sleep probe metrics per budget: ``{budget: {metric: (mean, std)}}``.

    Each (fold, repeat) cell draws its own labelled subset from the fold's
    training pool; mean and std are over folds (repeats are averaged first).
    """
    config = config or ProbeConfig(n_classes=5, steps=2000)
    out = {}
    for budget in budgets:
        per_fold = []
        for k, fold in enumerate(folds):
            cells = []
            for r in range(repeats):
                rng = dsp.seed_for(seed, 1000 * k + r)
                idx = sample_budget(fold.train_y, budget, config.n_classes, rng)
                cfg = ProbeConfig(**{**config.__dict__, "seed": seed + 1000 * k + r})
                probe = train_sleep_probe(fold.train_x[idx], fold.train_y[idx], cfg)
                cells.append(metrics(predict(probe, fold.val_x, cfg.components), fold.val_y))
            per_fold.append({m: float(np.mean([c[m] for c in cells])) for m in cells[0]})
        out[budget] = {m: (float(np.mean([f[m] for f in per_fold])), float(np.std([f[m] for f in per_fold])))
                       for m in per_fold[0]}
    return out


def write_results_csv(path, results: dict, method: str = "frozen latents + linear probe") -> None:
    """Table layout: one row per (metric, method, budget) with mean and std."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "method", "budget", "mean", "std"])
        for metric in ("accuracy", "uar", "f1"):
            for budget, row in results.items():
                mean, std = row[metric]
                w.writerow([metric, method, budget, f"{mean:.6f}", f"{std:.6f}"])


@torch.no_grad()
def epoch_features(checkpoint: Checkpoint, data: np.ndarray, fs: float, epoch_samples: int,
                   bandpass=None, filter_order: int = 3, batch_size: int = 256) -> np.ndarray:
    """Latent vector of every consecutive non-overlapping epoch of a recording.

    ``bandpass`` is applied to the whole recording first (the sleep setup
    filters at recording level); each epoch is then standardised + CAR.
    """
    model = checkpoint.model
    model.eval()
    x = np.asarray(data, dtype=np.float64)
    if bandpass is not None:
        x = dsp.bandpass_array(x, fs, *bandpass, filter_order)
    n = x.shape[1] // epoch_samples
    epochs = x[:, :n * epoch_samples].reshape(x.shape[0], n, epoch_samples).transpose(1, 0, 2)
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, n, batch_size):
        w = dsp.standardize_then_car(epochs[i:i + batch_size])
        outs.append(model(torch.as_tensor(w, dtype=dtype)).double().numpy())
    return np.concatenate(outs)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
