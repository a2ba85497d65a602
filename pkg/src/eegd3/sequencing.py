"""Per-dataset sequence mappings from latent components to time-bin predictions."""
from __future__ import annotations

import csv

import torch
from torch import nn

DEFAULT_GAMMA = 0.5
PROB_CLIP = 1e-7


class UnknownDataset(KeyError):
    pass


def mgu(x: torch.Tensor, gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """Mixed Gaussian unit: a Laplacian and a Gaussian saturation blended by
    ``gamma``. Even, zero at the origin, tends to 1, slope ``gamma`` at 0+."""
    return gamma * (1 - torch.exp(-x.abs())) + (1 - gamma) * (1 - torch.exp(-x * x))


def seminormalize_row(m: torch.Tensor, gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """MGU each entry, then divide rows whose sum exceeds one by that sum.

    Operates on the last axis, so a whole ``[Y, C]`` matrix can be passed.
    """
    m_hat = mgu(m, gamma)
    return m_hat / (torch.relu(m_hat.sum(-1, keepdim=True) - 1) + 1)


def bin_loss(p: torch.Tensor, y: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    """Mean binary cross-entropy over the Y outputs against the smoothed
    one-hot target ``y (1 - eps) + eps / 2``.

    Leading batch axes are averaged as well.
    """
    y = y.to(p.dtype) * (1 - smoothing) + smoothing / 2
    p = p.clamp(PROB_CLIP, 1 - PROB_CLIP)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


class SequenceMappings(nn.Module):
    """One raw ``[Y, C]`` mapping matrix per dataset id."""

    def __init__(self, dataset_ids, n_components: int, n_bins: int,
                 gamma: float = DEFAULT_GAMMA, init_std: float = 0.1):
        super().__init__()
        self.dataset_ids = list(dataset_ids)
        self.n_components = n_components
        self.n_bins = n_bins
        self.gamma = gamma
        self.weight = nn.Parameter(torch.randn(len(self.dataset_ids), n_bins, n_components) * init_std)
        self._index = {d: i for i, d in enumerate(self.dataset_ids)}

    def index(self, dataset_id: str) -> int:
        try:
            return self._index[dataset_id]
        except KeyError:
            raise UnknownDataset(dataset_id) from None

    def normalized(self) -> torch.Tensor:
        """Semi-normalised mappings ``[n_datasets, Y, C]``."""
        return seminormalize_row(self.weight, self.gamma)

    def forward(self, z: torch.Tensor, dataset_index: torch.Tensor) -> torch.Tensor:
        """Predictions ``[B, Y]`` for latents ``[B, C]`` and per-sample dataset indices."""
        m = self.normalized()[dataset_index]
        return torch.einsum("byc,bc->by", m, z)


def forward_bins(z: torch.Tensor, dataset_id: str, mappings: SequenceMappings) -> torch.Tensor:
    """Time-bin prediction for a single latent vector ``z`` of length C."""
    m = mappings.normalized()[mappings.index(dataset_id)]
    return m @ z


def export_mappings_csv(path, mappings: SequenceMappings) -> None:
    """Write the semi-normalised rows as ``dataset_id,bin,c0..cN`` heatmap data."""
    m = mappings.normalized().detach().double().cpu().numpy()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset_id", "bin"] + [f"c{c}" for c in range(mappings.n_components)])
        for d, ds in enumerate(mappings.dataset_ids):
            for y in range(mappings.n_bins):
                w.writerow([ds, y] + [f"{v:.9f}" for v in m[d, y]])
