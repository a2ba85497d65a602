"""Grouped decomposer: C independent sub-networks, one scalar latent each.

Layer stack per forward pass (shapes without the batch axis)::

    input                   (E, T)
    Gaussian filter         (C, E, T)
    spatial depthwise conv  (C*D, T)           groups=C
    BN, leaky ReLU
    separable conv k1       (C*D*F1, T)        groups=C
    BN, leaky ReLU, avgpool (C*D*F1, T//pool)
    dropout
    separable conv k2       (C*D*F1*F2, T//pool)
    BN, leaky ReLU
    global average pool     (C*D*F1*F2,)
    dropout
    grouped pointwise conv  (C,)
    sigmoid
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from eegd3.filterbank import GeneralizedGaussianFilter
from eegd3.io import read_tensor, write_tensor
from eegd3.sequencing import SequenceMappings


class ShapeMismatch(ValueError):
    pass


class ConfigError(ValueError):
    pass


def from_dict(cls, data: dict):
    """Build a config dataclass, rejecting keys it does not define."""
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ModelConfig:
    n_electrodes: int = 28
    n_times: int = 240
    fs: float = 160.0
    n_components: int = 16
    depth: int = 2  # D spatial filters per component
    f1: int = 2
    f2: int = 2
    kernel1: int = 81
    pool1: int = 4
    kernel2: int = 21
    dropout: float = 0.25
    leaky_slope: float = 0.01
    mu_init: float = 24.0
    h_init: float = 48.0
    beta_init: float = 2.0

    def __post_init__(self):
        for k in (self.kernel1, self.kernel2):
            if k % 2 != 1:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        if self.n_times // self.pool1 < 1:
            raise ConfigError("window shorter than the pooling kernel")

    @property
    def pad1(self) -> int:
        return (self.kernel1 - 1) // 2

    @property
    def pad2(self) -> int:
        return (self.kernel2 - 1) // 2


class SeparableConv1d(nn.Sequential):
    """Depthwise temporal conv followed by a grouped pointwise expansion."""

    def __init__(self, channels: int, multiplier: int, kernel: int, groups: int):
        super().__init__(
            nn.Conv1d(channels, channels, kernel, padding=(kernel - 1) // 2, groups=channels, bias=False),
            nn.Conv1d(channels, channels * multiplier, 1, groups=groups, bias=False),
        )


class Decomposer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        C, D = cfg.n_components, cfg.depth
        ch1 = C * D
        ch2 = ch1 * cfg.f1
        ch3 = ch2 * cfg.f2
        self.filter = GeneralizedGaussianFilter(C, cfg.fs, cfg.mu_init, cfg.h_init, cfg.beta_init)
        self.spatial = nn.Conv2d(C, ch1, (cfg.n_electrodes, 1), groups=C, bias=False)
        self.bn1 = nn.BatchNorm1d(ch1)
        self.sep1 = SeparableConv1d(ch1, cfg.f1, cfg.kernel1, groups=C)
        self.bn2 = nn.BatchNorm1d(ch2)
        self.pool = nn.AvgPool1d(cfg.pool1)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.sep2 = SeparableConv1d(ch2, cfg.f2, cfg.kernel2, groups=C)
        self.bn3 = nn.BatchNorm1d(ch3)
        self.drop2 = nn.Dropout(cfg.dropout)
        self.reduce = nn.Conv1d(ch3, C, 1, groups=C)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x: torch.Tensor, return_shapes: bool = False):
        cfg = self.config
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if x.shape[1] != cfg.n_electrodes:
            raise ShapeMismatch(f"expected {cfg.n_electrodes} electrodes, got {x.shape[1]}")
        shapes = []
        x = self.filter(x)
        shapes.append(tuple(x.shape[1:]))
        x = self.spatial(x).squeeze(2)
        shapes.append(tuple(x.shape[1:]))
        x = self.act(self.bn1(x))
        x = self.act(self.bn2(self.sep1(x)))
        shapes.append(tuple(x.shape[1:]))
        x = self.drop1(self.pool(x))
        shapes.append(tuple(x.shape[1:]))
        x = self.act(self.bn3(self.sep2(x)))
        shapes.append(tuple(x.shape[1:]))
        x = self.drop2(x.mean(-1))
        shapes.append(tuple(x.shape[1:]))
        z = torch.sigmoid(self.reduce(x.unsqueeze(-1)).squeeze(-1))
        shapes.append(tuple(z.shape[1:]))
        if return_shapes:
            return z, shapes
        return z

    def group_parameters(self, component: int) -> dict[str, torch.Tensor]:
        """Views of every parameter/buffer slice owned by one component."""
        cfg = self.config
        C = cfg.n_components
        out = {}
        for name, t in list(self.named_parameters()) + list(self.named_buffers()):
            if t.ndim == 0:
                continue
            n = t.shape[0]
            if n % C:
                raise AssertionError(f"{name} with leading size {n} not divisible into {C} groups")
            size = n // C
            out[name] = t[component * size:(component + 1) * size]
        return out

    def spatial_relevance(self) -> np.ndarray:
        return spatial_relevance(self.spatial.weight.detach().cpu().double().numpy(), self.config.n_components)

    def project_(self):
        self.filter.project_()


def spatial_relevance(weights: np.ndarray, n_components: int) -> np.ndarray:
    """Mean absolute spatial weight per component and electrode, ``[C, E]``.

    ``weights`` is the depthwise spatial kernel ``[C*D, 1, E, 1]`` (or any
    array reshapeable to ``[C, D, E]``).
    """
    w = np.abs(np.asarray(weights, dtype=np.float64))
    E = w.shape[-2] if w.ndim == 4 else w.shape[-1]
    return w.reshape(n_components, -1, E).mean(axis=1)


def forward_latent(model: Decomposer, window, mode: str = "eval") -> np.ndarray:
    """Latent vector of a single preprocessed ``[E, T]`` window."""
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    model.train(mode == "train")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(window), dtype=dtype)
    with torch.no_grad():
        return model(x)[0].cpu().numpy()


class Checkpoint:
    """Trained decomposer plus its sequence mappings and run metadata."""

    def __init__(self, model: Decomposer, mappings: SequenceMappings | None = None,
                 metadata: dict | None = None):
        self.model = model
        self.mappings = mappings
        self.metadata = metadata or {}

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        state = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.mappings is not None:
            state["mappings.weight"] = self.mappings.weight.detach()
        table = []
        for name, t in state.items():
            arr = t.detach().cpu().numpy()
            digest = write_tensor(directory, name, arr.astype(np.float32))
            table.append({"name": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", ""),
                          "sha256": digest})
        doc = {
            "config": asdict(self.config),
            "tensors": table,
            "mappings": None if self.mappings is None else {
                "dataset_ids": self.mappings.dataset_ids,
                "n_bins": self.mappings.n_bins,
                "gamma": self.mappings.gamma,
            },
            "metadata": self.metadata,
        }
        (directory / "params.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        doc = json.loads((directory / "params.json").read_text())
        model = Decomposer(from_dict(ModelConfig, doc["config"]))
        mappings = None
        if doc.get("mappings"):
            m = doc["mappings"]
            mappings = SequenceMappings(m["dataset_ids"], model.config.n_components, m["n_bins"], m["gamma"])
        expected = {f"model.{k}": tuple(v.shape) for k, v in model.state_dict().items()}
        if mappings is not None:
            expected["mappings.weight"] = tuple(mappings.weight.shape)
        found = {t["name"]: t for t in doc["tensors"]}
        if set(found) != set(expected):
            raise ShapeMismatch(f"checkpoint tensors differ from model: {sorted(set(found) ^ set(expected))}")
        state = {}
        for name, shape in expected.items():
            if tuple(found[name]["shape"]) != shape:
                raise ShapeMismatch(f"{name}: stored shape {found[name]['shape']}, model expects {list(shape)}")
            arr = read_tensor(directory, name, found[name]["sha256"])
            dtype = getattr(torch, found[name]["dtype"])
            state[name] = torch.from_numpy(arr).to(dtype)
        model.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})
        if mappings is not None:
            with torch.no_grad():
                mappings.weight.copy_(state["mappings.weight"])
        model.eval()
        return cls(model, mappings, doc.get("metadata", {}))
