"""Post-hoc characterisation of trained components."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats
from scipy.optimize import linear_sum_assignment

from eegd3 import dsp
from eegd3.model import Checkpoint

DEFAULT_STRIDE = 16


class LengthMismatch(ValueError):
    pass


class TooFewTrials(ValueError):
    pass


@dataclass
class LatentTimecourse:
    values: np.ndarray  # [C, S]
    centers: np.ndarray  # seconds, relative to the trial start
    trial: object = None


def window_starts(valid_span: tuple[int, int], n_times: int, stride: int) -> np.ndarray:
    lo, hi = valid_span
    if hi - lo < n_times:
        raise dsp.TrialTooShort(f"valid span of {hi - lo} samples shorter than window of {n_times}")
    return np.arange(lo, hi - n_times + 1, stride)


@torch.no_grad()
def timecourse(checkpoint: Checkpoint, trial_data: np.ndarray, fs: float, stride: int = DEFAULT_STRIDE,
               valid_span: tuple[int, int] | None = None, bandpass=(8.0, 40.0), filter_order: int = 3,
               trial=None, batch_size: int = 256) -> LatentTimecourse:
    """Slide the model over a trial; each value is placed at its window centre."""
    model = checkpoint.model
    model.eval()
    T = model.config.n_times
    span = valid_span if valid_span is not None else (0, trial_data.shape[-1])
    starts = window_starts(span, T, stride)
    sos = dsp.bandpass_sos(*bandpass, fs, filter_order) if bandpass is not None else None
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, len(starts), batch_size):
        chunk = np.stack([trial_data[:, s:s + T] for s in starts[i:i + batch_size]])
        x = dsp.prepare_window(chunk, fs, bandpass, filter_order, sos=sos)
        outs.append(model(torch.as_tensor(x, dtype=dtype)).double().numpy())
    values = np.concatenate(outs).T
    return LatentTimecourse(values, (starts + T / 2) / fs, trial)


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population moments.

    Two constant series carry no concordance information and give 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"series lengths differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise LengthMismatch("need at least two samples")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    if vx == 0 and vy == 0:
        return 0.0
    cov = ((x - mx) * (y - my)).mean()
    return float(2 * cov / (vx + vy + (mx - my) ** 2))


def ccc_matrix(series: np.ndarray) -> np.ndarray:
    """Pairwise CCC between the rows of ``[N, S]``."""
    s = np.asarray(series, dtype=np.float64)
    m = s.mean(axis=1)
    d = s - m[:, None]
    cov = d @ d.T / s.shape[1]
    var = np.diag(cov)
    denom = var[:, None] + var[None, :] + (m[:, None] - m[None, :]) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, 2 * cov / denom, 0.0)
    return out


def timecourse_consistency(series) -> float:
    """Mean CCC over all unordered trial pairs of one component, ``[N, S]``."""
    s = np.asarray(series, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise TooFewTrials(f"need at least 2 trials, got {n}")
    m = ccc_matrix(s)
    return float(m[np.tril_indices(n, -1)].sum() / ((n * n - n) / 2))


def consistency_by_recording(values: np.ndarray, groups) -> float:
    """TC per recording (group label per trial), then averaged over recordings."""
    groups = np.asarray(groups)
    tcs = [timecourse_consistency(values[groups == g]) for g in np.unique(groups)
           if np.sum(groups == g) >= 2]
    if not tcs:
        raise TooFewTrials("no recording with at least 2 trials")
    return float(np.mean(tcs))


@dataclass
class SignificanceResult:
    t: np.ndarray
    p: np.ndarray
    reference: float
    significant: np.ndarray
    note: str = "reference = grand mean over electrodes and folds"


def electrode_significance(relevance: np.ndarray, reference: float | None = None,
                           alpha: float = 0.01) -> SignificanceResult:
    """One-sided one-sample t-test per electrode across folds.

    ``relevance`` is ``[K folds, E]`` for a single component. The alternative
    is that an electrode's expected relevance exceeds ``reference``, by
    default the grand mean of the whole array. Zero-variance electrodes get
    p = 0.5 when equal to the reference, else 0 or 1 by direction.
    """
    r = np.asarray(relevance, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 2:
        raise ValueError("need a [folds, electrodes] array with at least 2 folds")
    ref = float(r.mean()) if reference is None else float(reference)
    t = np.empty(r.shape[1])
    p = np.empty(r.shape[1])
    for e in range(r.shape[1]):
        col = r[:, e]
        if np.ptp(col) == 0:
            diff = col[0] - ref
            t[e] = 0.0 if diff == 0 else np.copysign(np.inf, diff)
            p[e] = 0.5 if diff == 0 else (0.0 if diff > 0 else 1.0)
        else:
            res = stats.ttest_1samp(col, ref, alternative="greater")
            t[e], p[e] = res.statistic, res.pvalue
    return SignificanceResult(t, p, ref, p < alpha)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    return float((dx * dy).sum() / denom) if denom > 0 else 0.0


def phase_surrogates(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``[n, len(x)]`` series with the amplitude spectrum of ``x`` and uniform
    random phases. DC (and the Nyquist bin for even lengths) keep their
    original value so the mean is preserved and the output stays real."""
    x = np.asarray(x, dtype=np.float64)
    spec = np.fft.rfft(x)
    phases = rng.uniform(0, 2 * np.pi, size=(n, spec.size))
    phases[:, 0] = 0.0
    if x.size % 2 == 0:
        phases[:, -1] = 0.0
    return np.fft.irfft(spec[None] * np.exp(1j * phases), n=x.size, axis=-1)


def surrogate_correlation(component, indicator, n_surrogates: int = 1000,
                          rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Pearson r and its random-phase surrogate p-value, ``(k + 1) / (n + 1)``."""
    if n_surrogates < 100:
        raise ValueError("use at least 100 surrogates")
    component = np.asarray(component, dtype=np.float64)
    indicator = np.asarray(indicator, dtype=np.float64)
    if component.shape != indicator.shape:
        raise LengthMismatch("series lengths differ")
    rng = rng or np.random.default_rng()
    r = pearson(component, indicator)
    surr = phase_surrogates(component, n_surrogates, rng)
    d = surr - surr.mean(axis=1, keepdims=True)
    di = indicator - indicator.mean()
    denom = np.sqrt((d * d).sum(axis=1) * (di * di).sum())
    rs = np.divide(d @ di, denom, out=np.zeros(n_surrogates), where=denom > 0)
    k = int(np.sum(np.abs(rs) >= abs(r)))
    return r, (k + 1) / (n_surrogates + 1)


def correlation_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation between rows of ``a`` ``[C, S]`` and rows of ``b`` ``[K, S]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt((da * da).sum(axis=1))
    nb = np.sqrt((db * db).sum(axis=1))
    denom = na[:, None] * nb[None, :]
    return np.divide(da @ db.T, denom, out=np.zeros(denom.shape), where=denom > 0)


def match_components(fold_timecourses, reference: np.ndarray | None = None) -> list[np.ndarray]:
    """Align component order across folds.

    Each element of ``fold_timecourses`` is ``[C, S]`` (mean condition
    timecourses, conditions concatenated along S). Returns, per fold, the
    permutation ``perm`` such that ``fold[perm[c]]`` matches reference
    component ``c``; the reference defaults to the first fold.
    """
    folds = [np.asarray(f, dtype=np.float64) for f in fold_timecourses]
    ref = folds[0] if reference is None else np.asarray(reference, dtype=np.float64)
    perms = []
    for f in folds:
        corr = correlation_matrix(ref, f)
        rows, cols = linear_sum_assignment(corr, maximize=True)
        perm = np.empty(len(rows), dtype=int)
        perm[rows] = cols
        perms.append(perm)
    return perms


def write_timecourse_csv(path, tcs: list[LatentTimecourse], labels: list[str]) -> None:
    """Long-format rows ``trial,center_s,component,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "center_s", "component", "value"])
        for label, tc in zip(labels, tcs):
            for c in range(tc.values.shape[0]):
                for t, v in zip(tc.centers, tc.values[c]):
                    w.writerow([label, f"{t:.4f}", c, f"{v:.7f}"])


# 2-D scalp positions (unit head circle, nose up) for topography export
ELECTRODE_POSITIONS = {
    "Fp1": (-0.31, 0.95), "Fpz": (0.0, 1.0), "Fp2": (0.31, 0.95),
    "F7": (-0.81, 0.59), "F3": (-0.42, 0.52), "Fz": (0.0, 0.5), "F4": (0.42, 0.52), "F8": (0.81, 0.59),
    "FC5": (-0.68, 0.26), "FC1": (-0.22, 0.25), "FC2": (0.22, 0.25), "FC6": (0.68, 0.26),
    "T7": (-1.0, 0.0), "C3": (-0.5, 0.0), "Cz": (0.0, 0.0), "C4": (0.5, 0.0), "T8": (1.0, 0.0),
    "CP5": (-0.68, -0.26), "CP1": (-0.22, -0.25), "CP2": (0.22, -0.25), "CP6": (0.68, -0.26),
    "P7": (-0.81, -0.59), "P3": (-0.42, -0.52), "Pz": (0.0, -0.5), "P4": (0.42, -0.52), "P8": (0.81, -0.59),
    "O1": (-0.31, -0.95), "Oz": (0.0, -1.0), "O2": (0.31, -0.95),
}


def write_topography_csv(path, relevance: np.ndarray, electrodes: list[str]) -> None:
    """``component,electrode,x,y,value`` rows; x/y empty for unknown labels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "electrode", "x", "y", "value"])
        for c in range(relevance.shape[0]):
            for e, name in enumerate(electrodes):
                x, y = ELECTRODE_POSITIONS.get(name, ("", ""))
                w.writerow([c, name, x, y, f"{relevance[c, e]:.9f}"])
