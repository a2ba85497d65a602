"""Trainable generalised Gaussian band-pass filters applied in the frequency domain.

Each latent component owns one filter with centre ``mu`` (Hz), full width at
half maximum ``h`` (Hz) and shape exponent ``beta``. Writing the distance from
the centre in half-widths, ``v = 2 |f - mu| / h``, the magnitude response is

    F(f) = exp(-ln2 * v ** beta)

which is the usual ``exp(-(|f - mu| / alpha) ** beta)`` with
``alpha = h / (2 ln(2) ** (1 / beta))`` and makes ``F(mu +- h/2) = 1/2`` hold
for every shape.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

LN2 = math.log(2.0)

BETA_MIN, BETA_MAX = 1.0, 16.0
H_MIN = 1.0


@dataclass
class GaussianFilterParams:
    mu: np.ndarray
    h: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.h = np.atleast_1d(np.asarray(self.h, dtype=np.float64))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))

    @property
    def alpha(self) -> np.ndarray:
        return self.h / (2 * LN2 ** (1 / self.beta))

    def __len__(self):
        return len(self.mu)


def magnitude_response(params: GaussianFilterParams, freqs) -> np.ndarray:
    """``[C, F]`` response of every component filter on the given frequencies."""
    freqs = np.asarray(freqs, dtype=np.float64)
    v = 2 * np.abs(freqs[None, :] - params.mu[:, None]) / params.h[:, None]
    return np.exp(-LN2 * v ** params.beta[:, None])


def _response_and_grads(mu, h, beta, freqs):
    # all [C, F]; derivatives of F wrt mu, h, beta
    d = freqs[None, :] - mu[:, None]
    v = 2 * d.abs() / h[:, None]
    b = beta[:, None]
    vb = v.pow(b)
    resp = torch.exp(-LN2 * vb)
    k = resp * LN2
    # d/dmu: v**(b-1) is singular at v=0 for b<1, which the clamp rules out
    d_mu = k * b * v.pow(b - 1) * torch.sign(d) * (2 / h[:, None])
    d_h = k * b * vb / h[:, None]
    log_v = torch.where(v > 0, torch.log(torch.where(v > 0, v, torch.ones_like(v))), torch.zeros_like(v))
    d_beta = -k * vb * log_v
    return resp, d_mu, d_h, d_beta


class GaussianResponse(torch.autograd.Function):
    """Magnitude response with closed-form parameter derivatives."""

    @staticmethod
    def forward(ctx, mu, h, beta, freqs):
        resp, d_mu, d_h, d_beta = _response_and_grads(mu, h, beta, freqs)
        ctx.save_for_backward(d_mu, d_h, d_beta)
        return resp

    @staticmethod
    def backward(ctx, grad):
        d_mu, d_h, d_beta = ctx.saved_tensors
        return (grad * d_mu).sum(-1), (grad * d_h).sum(-1), (grad * d_beta).sum(-1), None


def response(mu: torch.Tensor, h: torch.Tensor, beta: torch.Tensor, freqs: torch.Tensor) -> torch.Tensor:
    return GaussianResponse.apply(mu, h, beta, freqs)


class GeneralizedGaussianFilter(nn.Module):
    """One generalised Gaussian filter per component, applied via rFFT.

    Input ``[B, E, T]``, output ``[B, C, E, T]``. The phase is untouched; the
    rFFT bin frequencies are the evaluation grid.
    """

    def __init__(self, n_components: int, fs: float, mu_init: float = 24.0,
                 h_init: float = 48.0, beta_init: float = 2.0):
        super().__init__()
        self.n_components = n_components
        self.fs = float(fs)
        self.mu = nn.Parameter(torch.full((n_components,), float(mu_init)))
        self.h = nn.Parameter(torch.full((n_components,), float(h_init)))
        self.beta = nn.Parameter(torch.full((n_components,), float(beta_init)))

    def clamped(self):
        """Parameters as used in the forward pass; the clamp passes zero
        gradient outside its bounds."""
        return (
            self.mu.clamp(0.0, self.fs / 2),
            self.h.clamp(H_MIN, self.fs),
            self.beta.clamp(BETA_MIN, BETA_MAX),
        )

    def response(self, n_times: int) -> torch.Tensor:
        freqs = torch.fft.rfftfreq(n_times, d=1.0 / self.fs, dtype=self.mu.dtype)
        return response(*self.clamped(), freqs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[-1]
        spec = torch.fft.rfft(x, dim=-1)
        resp = self.response(T)
        out = spec.unsqueeze(1) * resp[None, :, None, :]
        return torch.fft.irfft(out, n=T, dim=-1)

    @torch.no_grad()
    def project_(self):
        """Pull parameters back into their valid ranges after an optimiser step."""
        self.mu.clamp_(0.0, self.fs / 2)
        self.h.clamp_(H_MIN, self.fs)
        self.beta.clamp_(BETA_MIN, BETA_MAX)

    def params(self) -> GaussianFilterParams:
        mu, h, beta = (p.detach().cpu().double().numpy() for p in self.clamped())
        return GaussianFilterParams(mu, h, beta)


def apply_filter(window: np.ndarray, params: GaussianFilterParams, fs: float) -> np.ndarray:
    """Filter an ``[E, T]`` window with every component: ``[C, E, T]``."""
    window = np.asarray(window, dtype=np.float64)
    T = window.shape[-1]
    resp = magnitude_response(params, np.fft.rfftfreq(T, d=1.0 / fs))
    spec = np.fft.rfft(window, axis=-1)
    return np.fft.irfft(spec[None] * resp[:, None, :], n=T, axis=-1)


def filter_gradients(window: np.ndarray, params: GaussianFilterParams, fs: float, loss_fn) -> dict:
    """Gradients of ``loss_fn(filtered)`` wrt mu, h and beta in float64.

    ``loss_fn`` maps the ``[C, E, T]`` filtered tensor to a scalar tensor.
    """
    layer = GeneralizedGaussianFilter(len(params), fs).double()
    with torch.no_grad():
        layer.mu.copy_(torch.from_numpy(params.mu))
        layer.h.copy_(torch.from_numpy(params.h))
        layer.beta.copy_(torch.from_numpy(params.beta))
    x = torch.as_tensor(np.asarray(window, dtype=np.float64))[None]
    loss = loss_fn(layer(x)[0])
    loss.backward()
    return {
        "mu": layer.mu.grad.numpy().copy(),
        "h": layer.h.grad.numpy().copy(),
        "beta": layer.beta.grad.numpy().copy(),
    }


def export_response_csv(path, params: GaussianFilterParams, fs: float, n_points: int = 513) -> None:
    """Write ``component,freq_hz,response`` rows on a grid over [0, fs/2]."""
    freqs = np.linspace(0.0, fs / 2, n_points)
    resp = magnitude_response(params, freqs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "freq_hz", "response"])
        for c in range(len(params)):
            for f, r in zip(freqs, resp[c]):
                w.writerow([c, f"{f:.6f}", f"{r:.9f}"])
