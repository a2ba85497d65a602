"""Synthetic EEG with known source envelopes, a disentanglement scoreboard,
and the blink reconstruction probe.

Every source is a unit-norm spatial pattern times an envelope-modulated
carrier. The default motor scene has four sources (blink, ERP, ERD, ERS) and
two datasets whose action duration and blink-burst timing differ. A second
generator produces whole-night style recordings with five hidden states.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from eegd3 import dsp
from eegd3.interpret import correlation_matrix, pearson, timecourse
from eegd3.io import (Collection, DatasetManifest, RecordingBuffer, Trial, TrialTable, read_tensor,
                      write_store, write_tensor)
from eegd3.model import Checkpoint

MOTOR_MONTAGE = ["Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "C3", "Cz", "C4",
                 "T7", "T8", "P3", "Pz", "P4", "Oz"]
SLEEP_MONTAGE = ["Fz", "C3", "Cz", "C4", "P3", "Pz", "P4", "Oz"]

# scalp coordinates used to build smooth spatial patterns
_POS = {
    "Fp1": (-0.31, 0.95), "Fp2": (0.31, 0.95), "F7": (-0.81, 0.59), "F3": (-0.42, 0.52),
    "Fz": (0.0, 0.5), "F4": (0.42, 0.52), "F8": (0.81, 0.59), "C3": (-0.5, 0.0),
    "Cz": (0.0, 0.0), "C4": (0.5, 0.0), "T7": (-1.0, 0.0), "T8": (1.0, 0.0),
    "P3": (-0.42, -0.52), "Pz": (0.0, -0.5), "P4": (0.42, -0.52), "Oz": (0.0, -1.0),
}


def spatial_pattern(montage: list[str], centers, width: float = 0.35) -> np.ndarray:
    """Unit-norm sum of Gaussian blobs centred at the given scalp points."""
    pos = np.array([_POS[e] for e in montage])
    w = np.zeros(len(montage))
    for c in centers:
        d2 = ((pos - np.asarray(c)) ** 2).sum(axis=1)
        w += np.exp(-d2 / (2 * width ** 2))
    return w / np.linalg.norm(w)


def band_noise(n: int, fs: float, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian noise with all spectral content inside ``band``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / fs)
    spec[(f < band[0]) | (f > band[1])] = 0
    x = np.fft.irfft(spec, n=n)
    return x / (x.std() + 1e-12)


def pink_noise(shape: tuple[int, int], fs: float, rng: np.random.Generator, f_min: float = 0.5) -> np.ndarray:
    """Independent 1/f (power) noise per row, unit variance."""
    n = shape[-1]
    f = np.fft.rfftfreq(n, 1 / fs)
    amp = 1 / np.sqrt(np.maximum(f, f_min))
    amp[0] = 0
    phases = rng.uniform(0, 2 * np.pi, size=(shape[0], f.size))
    x = np.fft.irfft(amp * np.exp(1j * phases), n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _smooth_box(t, start, end, tau):
    return 1 / (1 + np.exp(-(t - start) / tau)) / (1 + np.exp(-(end - t) / tau))


def blink_template(fs: float, duration: float = 0.5) -> np.ndarray:
    """Fast-rise, slow-decay deflection with a small late undershoot."""
    t = np.arange(int(round(duration * fs))) / fs
    up = (t / 0.04) * np.exp(1 - t / 0.04)
    down = 0.25 * (t / 0.18) * np.exp(1 - t / 0.18)
    x = up - down
    return x / np.abs(x).max()


@dataclass
class SourceSpec:
    """One synthetic source.

    ``kind`` selects the envelope: ``blink`` (baseline, suppressed during the
    action, post-trial burst), ``erp`` (cue-locked bump), ``erd`` (power dip
    during the action), ``ers`` (post-action rebound). ``carrier`` is
    ``band`` (band-limited noise in ``band``), ``gabor`` (phase-locked
    oscillation at ``band[0]``) or ``pulses`` (blink pulse train).
    """

    name: str
    kind: str
    carrier: str
    band: tuple[float, float]
    centers: list
    amplitude: float = 1.0
    width: float = 0.35


@dataclass
class DatasetSchedule:
    """Within-trial timing (seconds) of one synthetic dataset."""

    name: str
    cue: float = 2.0
    action_end: float = 6.0
    burst_start: float = 6.5
    burst_end: float = 8.0
    jitter: float = 0.1


def default_sources() -> list[SourceSpec]:
    return [
        SourceSpec("blink", "blink", "pulses", (1.0, 6.0), [(-0.2, 1.1), (0.2, 1.1)], amplitude=3.0, width=0.3),
        SourceSpec("erp", "erp", "gabor", (8.0, 8.0), [(0.0, -0.75)], amplitude=1.5),
        SourceSpec("erd", "erd", "band", (15.0, 30.0), [(-0.5, 0.0)], amplitude=1.0, width=0.3),
        SourceSpec("ers", "ers", "band", (15.0, 25.0), [(0.5, 0.1)], amplitude=1.5, width=0.3),
    ]


def default_schedules() -> list[DatasetSchedule]:
    return [
        DatasetSchedule("synthA", cue=2.0, action_end=6.0, burst_start=6.5, burst_end=8.0),
        DatasetSchedule("synthB", cue=2.0, action_end=4.5, burst_start=7.5, burst_end=9.0),
    ]


@dataclass
class SynthConfig:
    subjects_per_dataset: int = 8
    trials_per_subject: int = 40
    trial_seconds: float = 9.5
    fs: float = 160.0
    snr_db: float = 0.0
    seed: int = 0
    blink_rate: float = 1.5
    erd_depth: float = 0.9
    sources: list[SourceSpec] = field(default_factory=default_sources)
    schedules: list[DatasetSchedule] = field(default_factory=default_schedules)
    montage: list[str] = field(default_factory=lambda: list(MOTOR_MONTAGE))

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]
        self.schedules = [s if isinstance(s, DatasetSchedule) else DatasetSchedule(**s) for s in self.schedules]
        for s in self.sources:
            s.band = tuple(s.band)
            s.centers = [tuple(c) for c in s.centers]

    @property
    def n_datasets(self) -> int:
        return len(self.schedules)


def envelope(kind: str, t: np.ndarray, sched: DatasetSchedule, shift: float, erd_depth: float = 0.9) -> np.ndarray:
    cue = sched.cue + shift
    end = sched.action_end + shift
    if kind == "erp":
        return np.exp(-0.5 * ((t - cue - 0.35) / 0.2) ** 2)
    if kind == "erd":
        return 1 - erd_depth * _smooth_box(t, cue + 0.5, end, 0.15)
    if kind == "ers":
        return _smooth_box(t, end + 0.3, end + 1.8, 0.15)
    if kind == "blink":
        base = 0.15 * (1 - _smooth_box(t, cue - 0.3, end + 0.2, 0.1))
        burst = _smooth_box(t, sched.burst_start + shift, sched.burst_end + shift, 0.1)
        return np.clip(base + burst, 0, 1)
    raise ValueError(f"unknown envelope kind {kind!r}")


def _carrier(spec: SourceSpec, n: int, fs: float, t: np.ndarray, sched, shift, rate, rng):
    if spec.carrier == "band":
        return band_noise(n, fs, spec.band, rng), []
    if spec.carrier == "gabor":
        return np.cos(2 * np.pi * spec.band[0] * (t - sched.cue - shift - 0.35)) * np.sqrt(2), []
    if spec.carrier == "pulses":
        tmpl = blink_template(fs)
        x = np.zeros(n + tmpl.size)
        onsets = []
        pos = rng.uniform(0, 1 / rate)
        while pos * fs < n:
            i = int(pos * fs)
            x[i:i + tmpl.size] += tmpl
            onsets.append(i)
            pos += rng.uniform(0.6, 1.4) / rate
        return x[:n] * 2.0, onsets
    raise ValueError(f"unknown carrier {spec.carrier!r}")


def _trial(config: SynthConfig, sched: DatasetSchedule, patterns, rng):
    fs = config.fs
    n = int(round(config.trial_seconds * fs))
    t = np.arange(n) / fs
    shift = rng.normal(0, sched.jitter)
    env = np.empty((len(config.sources), n))
    clean = np.zeros((len(config.montage), n))
    blinks = []
    for k, spec in enumerate(config.sources):
        env[k] = envelope(spec.kind, t, sched, shift, config.erd_depth)
        carrier, onsets = _carrier(spec, n, fs, t, sched, shift, config.blink_rate, rng)
        clean += np.outer(patterns[k], spec.amplitude * env[k] * carrier)
        if spec.kind == "blink":
            blinks.extend((i, float(env[k][i])) for i in onsets)
    return clean, env, blinks


def generate(config: SynthConfig, out_dir=None):
    """Generate the motor scene.

    Returns ``(collection, truth)`` where ``truth`` maps a recording name to
    ``{"envelopes": [n_trials, n_sources, L], "blinks": [[(sample, env), ...]]}``.
    When ``out_dir`` is given the store is written there with envelopes under
    ``truth/``.
    """
    patterns = np.array([spatial_pattern(config.montage, s.centers, s.width) for s in config.sources])
    fs = config.fs
    n = int(round(config.trial_seconds * fs))
    tables, buffers, truth = [], {}, {}
    for d, sched in enumerate(config.schedules):
        table = TrialTable(sched.name, config.trial_seconds)
        for s in range(config.subjects_per_dataset):
            rng = dsp.seed_for(config.seed, d * 10_000 + s)
            subject = f"{sched.name}-s{s:02d}"
            gain = rng.uniform(0.8, 1.2)
            trials_clean, envs, blinks = [], [], []
            for _ in range(config.trials_per_subject):
                clean, env, bl = _trial(config, sched, patterns, rng)
                trials_clean.append(clean * gain)
                envs.append(env)
                blinks.append(bl)
            clean = np.concatenate(trials_clean, axis=1)
            power = np.mean(clean ** 2)
            noise_power = power / 10 ** (config.snr_db / 10)
            noise = pink_noise(clean.shape, fs, rng) * np.sqrt(noise_power)
            data = (clean + noise).astype(np.float32)
            buffers[subject] = RecordingBuffer(data, fs, config.montage, subject_id=subject, reference="CAR")
            for i in range(config.trials_per_subject):
                table.trials.append(Trial(subject, i * n, n, subject, condition="task"))
            truth[subject] = {"envelopes": np.stack(envs).astype(np.float32), "blinks": blinks,
                              "dataset_id": sched.name}
        tables.append(table)
    datasets = {sched.name: {"unit": "unitless", "reference": "CAR"} for sched in config.schedules}
    notes = json.dumps({"generator": "motor", "config": _jsonable(asdict(config)),
                        "sources": [s.name for s in config.sources]})
    return _finish(tables, buffers, truth, datasets, notes, out_dir, [s.name for s in config.sources])


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


def _finish(tables, buffers, truth, datasets, notes, out_dir, source_names):
    truth["_sources"] = list(source_names)
    if out_dir is None:
        manifest = DatasetManifest(dict(datasets), notes=notes)
        for t in tables:
            first = buffers[t.trials[0].recording]
            manifest.datasets[t.dataset_id] = {
                **datasets.get(t.dataset_id, {}), "electrodes": first.channel_names, "fs": float(first.fs),
                "trial_seconds": t.trial_seconds, "files": sorted({tr.recording for tr in t.trials}),
            }
        return Collection(manifest, {t.dataset_id: t for t in tables}, buffers), truth
    write_store(out_dir, tables, buffers, datasets, notes=notes)
    write_truth(Path(out_dir) / "truth", truth)
    return Collection.load(out_dir), truth


def write_truth(directory, truth: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"sources": truth["_sources"], "recordings": {}}
    for name in sorted(k for k in truth if k != "_sources"):
        entry = truth[name]
        digest = write_tensor(directory, name, entry["envelopes"])
        rec = {k: v for k, v in entry.items() if k != "envelopes"}
        rec["sha256"] = digest
        index["recordings"][name] = rec
    (directory / "truth.json").write_text(json.dumps(index, indent=1, sort_keys=True, default=list))


def read_truth(directory) -> dict:
    directory = Path(directory)
    index = json.loads((directory / "truth.json").read_text())
    out = {}
    for name, rec in index["recordings"].items():
        entry = {k: v for k, v in rec.items() if k != "sha256"}
        entry["envelopes"] = read_tensor(directory, name, rec["sha256"])
        out[name] = entry
    out["_sources"] = index["sources"]
    return out


# ---------------------------------------------------------------- scoring


def window_average(env: np.ndarray, starts: np.ndarray, n_times: int) -> np.ndarray:
    """Mean of each envelope row over every window ``[start, start + n_times)``."""
    c = np.concatenate([np.zeros((env.shape[0], 1)), np.cumsum(env, axis=1)], axis=1)
    return (c[:, starts + n_times] - c[:, starts]) / n_times


@dataclass
class DisentanglementScore:
    matched_r: np.ndarray  # per source |r| of its matched component
    assignment: np.ndarray  # component index per source
    corr: np.ndarray  # [C, K] Pearson between components and sources
    source_names: list

    @property
    def mean_r(self) -> float:
        return float(self.matched_r.mean())


def match_to_truth(timecourses: np.ndarray, envelopes: np.ndarray, source_names=None) -> DisentanglementScore:
    """Hungarian-match components ``[C, S]`` to true envelopes ``[K, S]`` by |r|.

    Both arrays hold the series of all evaluated trials concatenated along S.
    """
    corr = correlation_matrix(timecourses, envelopes)
    rows, cols = linear_sum_assignment(np.abs(corr), maximize=True)
    assign = np.full(envelopes.shape[0], -1)
    assign[cols] = rows
    matched = np.array([abs(corr[assign[k], k]) if assign[k] >= 0 else 0.0 for k in range(envelopes.shape[0])])
    return DisentanglementScore(matched, assign, corr, list(source_names or range(envelopes.shape[0])))


def collect_timecourses(checkpoint: Checkpoint, collection: Collection, truth: dict, subjects,
                        stride: int = 16, bandpass=(8.0, 40.0)):
    """Concatenated component timecourses and window-averaged envelopes over
    all trials of the given subjects."""
    T = checkpoint.config.n_times
    comps, envs = [], []
    keep = set(subjects)
    for ds in collection.dataset_ids:
        fs = collection.fs(ds)
        for trial in collection.tables[ds].trials:
            if trial.subject_id not in keep:
                continue
            rec = truth[trial.recording]
            i = trial.start // trial.length
            tc = timecourse(checkpoint, collection.trial_data(trial), fs, stride,
                            (trial.valid_start, trial.valid_end), bandpass)
            starts = np.arange(trial.valid_start, trial.valid_end - T + 1, stride)
            comps.append(tc.values)
            envs.append(window_average(rec["envelopes"][i].astype(np.float64), starts, T))
    return np.concatenate(comps, axis=1), np.concatenate(envs, axis=1)


def score_disentanglement(checkpoint: Checkpoint, collection: Collection, truth: dict, subjects,
                          stride: int = 16, bandpass=(8.0, 40.0)) -> DisentanglementScore:
    comps, envs = collect_timecourses(checkpoint, collection, truth, subjects, stride, bandpass)
    return match_to_truth(comps, envs, truth.get("_sources"))


# ---------------------------------------------------------------- sleep scene


@dataclass
class SleepSynthConfig:
    n_subjects: int = 20
    n_bins: int = 32
    epochs_per_bin: int = 8
    epoch_seconds: float = 10.0
    fs: float = 64.0
    snr_db: float = -5.0
    min_dwell: int = 8
    max_dwell: int = 24
    off_level: float = 0.4
    seed: int = 0
    montage: list[str] = field(default_factory=lambda: list(SLEEP_MONTAGE))

    @property
    def n_epochs(self) -> int:
        return self.n_bins * self.epochs_per_bin


SLEEP_STATES = ("W", "REM", "N1", "N2", "N3")
# (band Hz, scalp centre) of the source that marks each hidden state
SLEEP_SOURCES = {
    "W": ((8.0, 12.0), (0.0, -0.9)),
    "REM": ((18.0, 26.0), (0.0, 0.5)),
    "N1": ((4.0, 7.0), (-0.5, 0.0)),
    "N2": ((12.0, 15.0), (0.5, 0.0)),
    "N3": ((0.7, 2.5), (0.0, 0.1)),
}


def state_schedule(config: SleepSynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Hidden state index per epoch, as dwell segments with no self-repeats."""
    states = []
    prev = -1
    while len(states) < config.n_epochs:
        s = int(rng.choice([k for k in range(len(SLEEP_STATES)) if k != prev]))
        states.extend([s] * int(rng.integers(config.min_dwell, config.max_dwell + 1)))
        prev = s
    return np.array(states[:config.n_epochs])


def generate_sleep(config: SleepSynthConfig, out_dir=None):
    """Whole-night style recordings; each recording is its own dataset.

    Returns ``(collection, truth)``; ``truth[recording]`` holds the per-epoch
    ``states`` and the per-sample source ``envelopes`` ``[1, 5, L]``.
    """
    fs = config.fs
    ep = int(round(config.epoch_seconds * fs))
    n = ep * config.n_epochs
    t_ep = np.arange(config.n_epochs)
    patterns = np.array([spatial_pattern(config.montage, [SLEEP_SOURCES[s][1]], 0.4) for s in SLEEP_STATES])
    tables, buffers, truth = [], {}, {}
    for r in range(config.n_subjects):
        rng = dsp.seed_for(config.seed, 50_000 + r)
        name = f"night{r:02d}"
        states = state_schedule(config, rng)
        onehot = (states[None, :] == np.arange(len(SLEEP_STATES))[:, None]).astype(float)
        level = config.off_level + (1 - config.off_level) * onehot
        # sample-level envelope, linearly interpolated between epoch centres
        centers = (t_ep + 0.5) * ep
        env = np.array([np.interp(np.arange(n), centers, row) for row in level])
        clean = np.zeros((len(config.montage), n))
        for k, st in enumerate(SLEEP_STATES):
            clean += np.outer(patterns[k], env[k] * band_noise(n, fs, SLEEP_SOURCES[st][0], rng))
        noise = pink_noise(clean.shape, fs, rng) * np.sqrt(np.mean(clean ** 2) / 10 ** (config.snr_db / 10))
        buffers[name] = RecordingBuffer((clean + noise).astype(np.float32), fs, config.montage,
                                        subject_id=name, reference="CAR")
        seconds = n / fs
        tables.append(TrialTable(name, seconds, [Trial(name, 0, n, name)]))
        truth[name] = {"envelopes": env[None].astype(np.float32), "states": states.tolist(), "dataset_id": name}
    datasets = {t.dataset_id: {"unit": "unitless", "reference": "CAR"} for t in tables}
    notes = json.dumps({"generator": "sleep", "config": _jsonable(asdict(config)), "states": list(SLEEP_STATES)})
    return _finish(tables, buffers, truth, datasets, notes, out_dir, SLEEP_STATES)


# ---------------------------------------------------------------- blink probe


class BlinkReconstructor(nn.Module):
    """Two wide temporal convolutions separated by a leaky ReLU."""

    def __init__(self, hidden: int = 8, kernel: int = 161, leaky_slope: float = 0.01):
        super().__init__()
        pad = (kernel - 1) // 2
        self.net = nn.Sequential(
            nn.Conv1d(1, hidden, kernel, padding=pad),
            nn.LeakyReLU(leaky_slope),
            nn.Conv1d(hidden, 1, kernel, padding=pad),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class BlinkProbeConfig:
    channel: str = "Fp1"
    input_band: tuple[float, float] = (8.0, 40.0)
    target_band: tuple[float, float] = (0.5, 45.0)
    segment_seconds: float = 4.0
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 1e-3
    event_half_width: float = 0.5
    min_event_envelope: float = 0.5
    seed: int = 0


def blink_signals(collection: Collection, subjects, config: BlinkProbeConfig):
    """Per subject: (filtered input, wideband target) of the frontal channel,
    each scaled by the wideband signal's standard deviation."""
    out = {}
    keep = set(subjects)
    for name, buf in collection.buffers.items():
        if buf.subject_id not in keep:
            continue
        x = buf.samples[buf.channel_names.index(config.channel)].astype(np.float64)
        target = dsp.bandpass_array(x, buf.fs, *config.target_band)
        inp = dsp.bandpass_array(x, buf.fs, *config.input_band)
        scale = target.std()
        out[name] = (inp / scale, target / scale)
    return out


def initial_reconstructor(config: BlinkProbeConfig | None = None) -> BlinkReconstructor:
    """The reconstructor exactly as training starts from it (the untrained baseline)."""
    config = config or BlinkProbeConfig()
    torch.manual_seed(config.seed)
    return BlinkReconstructor()


def blink_probe_train(collection: Collection, subjects, config: BlinkProbeConfig | None = None,
                      identity: bool = False):
    """Train the reconstructor to undo the input band-pass (MSE, AdamW).

    With ``identity`` the target is the input itself (sanity check).
    Returns ``(model, losses)``.
    """
    config = config or BlinkProbeConfig()
    rng = np.random.default_rng(config.seed)
    signals = blink_signals(collection, subjects, config)
    names = sorted(signals)
    fs = collection.buffers[names[0]].fs
    seg = int(round(config.segment_seconds * fs))
    model = initial_reconstructor(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    losses = []
    for _ in range(config.steps):
        xs, ys = [], []
        for _ in range(config.batch_size):
            inp, target = signals[names[rng.integers(len(names))]]
            s = int(rng.integers(0, inp.size - seg + 1))
            xs.append(inp[s:s + seg])
            ys.append(inp[s:s + seg] if identity else target[s:s + seg])
        x = torch.as_tensor(np.stack(xs)[:, None], dtype=torch.float32)
        y = torch.as_tensor(np.stack(ys)[:, None], dtype=torch.float32)
        loss = nn.functional.mse_loss(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return model, losses


@torch.no_grad()
def blink_probe_eval(model: BlinkReconstructor, collection: Collection, truth: dict, subjects,
                     config: BlinkProbeConfig | None = None, identity: bool = False) -> dict:
    """Mean Pearson r between reconstruction and wideband target in windows of
    +-``event_half_width`` around each blink peak of the given subjects."""
    config = config or BlinkProbeConfig()
    signals = blink_signals(collection, subjects, config)
    rs = []
    examples = []
    for name in sorted(signals):
        inp, target = signals[name]
        if identity:
            target = inp
        rec = model(torch.as_tensor(inp[None, None], dtype=torch.float32))[0, 0].double().numpy()
        buf = collection.buffers[name]
        fs = buf.fs
        half = int(round(config.event_half_width * fs))
        peak = int(round(0.07 * fs))
        trials = [t for tab in collection.tables.values() for t in tab.trials if t.recording == name]
        for ti, trial in enumerate(sorted(trials, key=lambda t: t.start)):
            for onset, level in truth[name]["blinks"][ti]:
                if level < config.min_event_envelope:
                    continue
                c = trial.start + onset + peak
                if c - half < 0 or c + half > inp.size:
                    continue
                sl = slice(c - half, c + half)
                rs.append(pearson(rec[sl], target[sl]))
                if len(examples) < 8:
                    examples.append((target[sl].copy(), inp[sl].copy(), rec[sl].copy()))
    return {"r": float(np.mean(rs)) if rs else float("nan"), "n_events": len(rs), "per_event": rs,
            "examples": examples}
