"""Command-line entry point: ``eegd3 <command> [--config PATH] [--out DIR] ...``.

Every command writes its artifacts plus a ``run.json`` (resolved config,
config hash, seed, git revision) under ``--out``. Plots are SVG files next
to the CSV they were drawn from.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from eegd3 import downstream, dsp, interpret, synthbench
from eegd3.filterbank import magnitude_response
from eegd3.io import Collection
from eegd3.model import Checkpoint, ConfigError, ModelConfig, from_dict
from eegd3.sequencing import export_mappings_csv
from eegd3.training import TrainConfig, pretrain, split_folds

log = logging.getLogger("eegd3")

STORE_ENV = "EEGD3_STORE"
COMMANDS = ("synth", "pretrain", "interpret", "consistency", "downstream", "fewshot", "blinkprobe")

# Section defaults. Model/training keys mirror ModelConfig/TrainConfig;
# null model sizes are filled in from the store.
DEFAULTS = {
    "seed": 0,
    "io": {"store": None, "checkpoints": None},
    "dsp": {"bandpass": [8.0, 40.0], "filter_order": 3, "filter_mode": "window"},
    "model": {"n_components": 6, "n_electrodes": None, "fs": None, "n_times": None},
    "training": {"epochs": 20, "n_bins": 16, "window_seconds": 1.5, "n_folds": 4},
    "interpret": {"stride": 16, "n_surrogates": 1000, "alpha": 0.01},
    "downstream": {"components": None, "budgets": [1, 2, 4, 10, 100], "repeats": 1,
                   "probe_steps": 2000, "epoch_seconds": None, "windows": None,
                   "blink_steps": 1000},
    "synth": {"kind": "motor", "params": {}},
}

PRESETS = {
    "motor": {},
    "sleep": {
        "dsp": {"bandpass": [0.5, 30.0], "filter_mode": "trial"},
        "model": {"n_components": 5, "mu_init": 12.0, "h_init": 24.0},
        "training": {"epochs": 30, "n_bins": 32, "window_seconds": 10.0, "windows_per_epoch": 2048,
                     "n_folds": 5},
        "downstream": {"epoch_seconds": 10.0},
        "synth": {"kind": "sleep"},
    },
}

_SECTION_KEYS = {
    "io": {"store", "checkpoints"},
    "dsp": {"bandpass", "filter_order", "filter_mode"},
    "model": {f.name for f in fields(ModelConfig)},
    "training": {f.name for f in fields(TrainConfig)} - {"bandpass", "filter_order", "filter_mode", "seed"}
    | {"n_folds"},
    "interpret": {"stride", "n_surrogates", "alpha"},
    "downstream": {"components", "budgets", "repeats", "probe_steps", "epoch_seconds", "windows",
                   "blink_steps"},
    "synth": {"kind", "params"},
}


class CliError(RuntimeError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(config: dict, check_params: bool = True) -> None:
    """Reject unknown sections and keys; check a few value types.

    ``synth.params`` depends on ``synth.kind``, which a preset may supply, so
    a partial document is checked with ``check_params=False``.
    """
    unknown = set(config) - set(_SECTION_KEYS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, allowed in _SECTION_KEYS.items():
        body = config.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
    if not isinstance(config.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    if not check_params:
        return
    kind = config.get("synth", {}).get("kind", "motor")
    if kind not in ("motor", "sleep"):
        raise ConfigError(f"synth.kind must be 'motor' or 'sleep', got {kind!r}")
    params = config.get("synth", {}).get("params", {})
    cls = synthbench.SynthConfig if kind == "motor" else synthbench.SleepSynthConfig
    bad = set(params) - {f.name for f in fields(cls)}
    if bad:
        raise ConfigError(f"unknown keys in synth.params: {sorted(bad)}")


def resolve_config(path=None, preset: str | None = None, seed: int | None = None) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if preset:
        config = _merge(config, PRESETS[preset])
    if path:
        user = json.loads(Path(path).read_text())
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        validate(user, check_params=False)
        config = _merge(config, user)
    if seed is not None:
        config["seed"] = seed
    validate(config)
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.TimeoutExpired):
        return None
    return out.stdout.strip() or None


def write_run_json(out: Path, command: str, config: dict, args: argparse.Namespace) -> None:
    doc = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config["seed"],
        "fold": args.fold,
        "git_revision": git_revision(),
    }
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


# ------------------------------------------------------------------ helpers


def store_path(config: dict, out: Path) -> Path:
    """Resolve the input store and record it in ``config`` (and so in run.json)."""
    found = None
    for cand in (config["io"].get("store"), os.environ.get(STORE_ENV)):
        if cand:
            found = Path(cand)
            break
    if found is None and (out / "store" / "manifest.json").exists():
        found = out / "store"
    if found is None and config["io"].get("checkpoints"):
        run = Path(config["io"]["checkpoints"]) / "run.json"
        if run.exists():
            prior = json.loads(run.read_text())["config"]["io"].get("store")
            found = Path(prior) if prior else None
    if found is None:
        raise CliError("no store given: set io.store in the config or the EEGD3_STORE variable")
    config["io"]["store"] = str(found)
    return found


def load_truth(store: Path) -> dict | None:
    if (store / "truth" / "truth.json").exists():
        return synthbench.read_truth(store / "truth")
    return None


def train_config(config: dict) -> TrainConfig:
    body = {k: v for k, v in config["training"].items() if k != "n_folds"}
    body.update(config["dsp"])
    body["seed"] = config["seed"]
    return from_dict(TrainConfig, body)


def model_config(config: dict, collection: Collection) -> ModelConfig:
    body = dict(config["model"])
    ds = collection.dataset_ids[0]
    fs = collection.fs(ds)
    if body.get("n_electrodes") is None:
        body["n_electrodes"] = len(collection.manifest.datasets[ds]["electrodes"])
    if body.get("fs") is None:
        body["fs"] = fs
    if body.get("n_times") is None:
        body["n_times"] = dsp.window_length(config["training"]["window_seconds"], fs)
    return from_dict(ModelConfig, body)


def folds_to_run(config: dict, args) -> list[int]:
    n = config["training"]["n_folds"]
    if args.fold is None:
        return list(range(n))
    if not 0 <= args.fold < n:
        raise CliError(f"--fold {args.fold} outside [0, {n})")
    return [args.fold]


def fold_split(config: dict, collection: Collection):
    return split_folds(collection.subjects(), config["training"]["n_folds"], seed=config["seed"])


def checkpoint_dir(config: dict, out: Path, fold: int, reading: bool = False) -> Path:
    """Checkpoints are written under ``out``; readers use ``io.checkpoints``
    (a previous pretrain output directory) when it is set."""
    root = out
    if reading and config["io"].get("checkpoints"):
        root = Path(config["io"]["checkpoints"])
    return root / "checkpoints" / f"fold{fold}"


def load_checkpoints(config: dict, out: Path, folds: list[int]) -> dict[int, Checkpoint]:
    cks = {}
    for k in folds:
        d = checkpoint_dir(config, out, k, reading=True)
        if not (d / "params.json").exists():
            raise CliError(f"missing checkpoint {d}; run pretrain first")
        cks[k] = Checkpoint.load(d)
    return cks


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "eegd3"
    return plt


def save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()
    _pyplot().close(fig)


# ------------------------------------------------------------------ commands


def cmd_synth(config: dict, out: Path, args) -> None:
    params = dict(config["synth"]["params"])
    params.setdefault("seed", config["seed"])
    store = out / "store"
    if config["synth"]["kind"] == "motor":
        col, _ = synthbench.generate(from_dict(synthbench.SynthConfig, params), store)
    else:
        col, _ = synthbench.generate_sleep(from_dict(synthbench.SleepSynthConfig, params), store)
    rows = [(ds, len(col.tables[ds].trials), col.fs(ds)) for ds in col.dataset_ids]
    write_rows(out / "datasets.csv", ["dataset_id", "n_trials", "fs"], rows)


def _pretrain_fold(store: str, config: dict, out: str, fold: int) -> list[dict]:
    torch.set_num_threads(1)
    collection = Collection.load(store)
    split = fold_split(config, collection)
    train = collection.restrict(split.training(fold))
    ck = pretrain(train, model_config(config, collection), train_config(config))
    ck.metadata["fold"] = fold
    ck.metadata["validation_subjects"] = split.validation(fold)
    ck.save(checkpoint_dir(config, Path(out), fold))
    return ck.metadata["loss_curve"]


def cmd_pretrain(config: dict, out: Path, args) -> None:
    store = store_path(config, out)
    collection = Collection.load(store)
    split = fold_split(config, collection)
    folds = folds_to_run(config, args)
    (out / "split.json").write_text(json.dumps(split.assignment, indent=1, sort_keys=True))
    jobs = max(1, args.jobs)
    if jobs == 1 or len(folds) == 1:
        curves = [_pretrain_fold(str(store), config, str(out), k) for k in folds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            curves = list(pool.map(_pretrain_fold, [str(store)] * len(folds), [config] * len(folds),
                                   [str(out)] * len(folds), folds))
    rows = [(k, r["epoch"], r["loss"], r["bin_accuracy"]) for k, curve in zip(folds, curves) for r in curve]
    write_rows(out / "loss_curve.csv", ["fold", "epoch", "loss", "bin_accuracy"], rows)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    for k, curve in zip(folds, curves):
        ax.plot([r["epoch"] for r in curve], [r["loss"] for r in curve], label=f"fold {k}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    save_svg(fig, out / "loss_curve.svg")


def _validation_timecourses(ck: Checkpoint, collection: Collection, subjects, config: dict):
    """Per dataset: ``[n_trials, C, S]`` timecourses of the given subjects plus
    window centres and trial recordings."""
    keep = set(subjects)
    band = config["dsp"]["bandpass"]
    out = {}
    for ds in collection.dataset_ids:
        fs = collection.fs(ds)
        vals, recs, centers = [], [], None
        for trial in collection.tables[ds].trials:
            if trial.subject_id not in keep:
                continue
            tc = interpret.timecourse(ck, collection.trial_data(trial), fs, config["interpret"]["stride"],
                                      (trial.valid_start, trial.valid_end), band, config["dsp"]["filter_order"])
            vals.append(tc.values)
            recs.append(trial.recording)
            centers = tc.centers
        if vals:
            out[ds] = (np.stack(vals), centers, recs)
    return out


def _matched(config, out, args):
    store = store_path(config, out)
    collection = Collection.load(store)
    folds = folds_to_run(config, args)
    cks = load_checkpoints(config, out, folds)
    split = fold_split(config, collection)
    tcs = {k: _validation_timecourses(cks[k], collection, split.validation(k), config) for k in folds}
    datasets = collection.dataset_ids
    means = [np.concatenate([tcs[k][ds][0].mean(axis=0) for ds in datasets], axis=1) for k in folds]
    perms = dict(zip(folds, interpret.match_components(means)))
    return store, collection, folds, cks, split, tcs, perms


def cmd_interpret(config: dict, out: Path, args) -> None:
    store, collection, folds, cks, split, tcs, perms = _matched(config, out, args)
    C = cks[folds[0]].config.n_components
    fs = cks[folds[0]].config.fs
    plt = _pyplot()

    # filter responses, matched component order
    freqs = np.linspace(0, fs / 2, 257)
    resp = {k: cks[k].model.filter.params() for k in folds}
    rows = []
    for k in folds:
        r = magnitude_response(resp[k], freqs)
        for c in range(C):
            for f, v in zip(freqs, r[perms[k][c]]):
                rows.append((k, c, float(f), float(v)))
    write_rows(out / "filter_response.csv", ["fold", "component", "freq_hz", "response"], rows)
    fig, axes = plt.subplots(1, C, figsize=(2.2 * C, 2.2), sharey=True, squeeze=False)
    for c in range(C):
        stack = np.array([magnitude_response(resp[k], freqs)[perms[k][c]] for k in folds])
        m, s = stack.mean(0), stack.std(0)
        axes[0, c].plot(freqs, m)
        axes[0, c].fill_between(freqs, m - s, m + s, alpha=0.3)
        axes[0, c].set_title(f"component {c}")
        axes[0, c].set_xlabel("Hz")
    save_svg(fig, out / "filter_response.svg")

    # spatial relevance, per fold and its fold mean, plus significance
    electrodes = collection.manifest.datasets[collection.dataset_ids[0]]["electrodes"]
    rel = np.stack([cks[k].model.spatial_relevance()[perms[k]] for k in folds])  # [K, C, E]
    interpret.write_topography_csv(out / "topography.csv", rel.mean(axis=0), electrodes)
    sig_rows = []
    if len(folds) >= 2:
        for c in range(C):
            res = interpret.electrode_significance(rel[:, c], alpha=config["interpret"]["alpha"])
            for e, name in enumerate(electrodes):
                sig_rows.append((c, name, float(res.t[e]), float(res.p[e]), int(res.significant[e]),
                                 float(res.reference)))
    write_rows(out / "electrode_significance.csv", ["component", "electrode", "t", "p", "significant", "reference"],
               sig_rows)
    fig, axes = plt.subplots(1, C, figsize=(2.2 * C, 2.4), squeeze=False)
    mean_rel = rel.mean(axis=0)
    for c in range(C):
        pos = [interpret.ELECTRODE_POSITIONS.get(n, (np.nan, np.nan)) for n in electrodes]
        xy = np.array(pos, dtype=float)
        top = mean_rel[c].max() or 1.0
        axes[0, c].scatter(xy[:, 0], xy[:, 1], c=mean_rel[c] / top, vmin=0, vmax=1, s=120, cmap="viridis")
        axes[0, c].add_patch(plt.Circle((0, 0), 1.1, fill=False))
        axes[0, c].set_aspect("equal")
        axes[0, c].axis("off")
        axes[0, c].set_title(f"component {c}")
    save_svg(fig, out / "topography.svg")

    # timecourses: fold-mean of per-fold trial means, matched order
    rows = []
    datasets = sorted(next(iter(tcs.values())))
    fig, axes = plt.subplots(len(datasets), C, figsize=(2.2 * C, 2.0 * len(datasets)), squeeze=False)
    for i, ds in enumerate(datasets):
        centers = tcs[folds[0]][ds][1]
        stack = np.stack([tcs[k][ds][0].mean(axis=0)[perms[k]] for k in folds])  # [K, C, S]
        m, s = stack.mean(0), stack.std(0)
        for c in range(C):
            for t, mv, sv in zip(centers, m[c], s[c]):
                rows.append((ds, c, float(t), float(mv), float(sv)))
            axes[i, c].plot(centers, m[c])
            axes[i, c].fill_between(centers, m[c] - s[c], m[c] + s[c], alpha=0.3)
            axes[i, c].set_title(f"{ds} c{c}", fontsize=8)
    write_rows(out / "timecourses.csv", ["dataset_id", "component", "center_s", "mean", "fold_std"], rows)
    save_svg(fig, out / "timecourses.svg")

    # mappings heatmap data per fold
    for k in folds:
        if cks[k].mappings is not None:
            export_mappings_csv(out / f"mappings_fold{k}.csv", cks[k].mappings)

    truth = load_truth(store)
    if truth is not None and "blinks" in next(v for key, v in truth.items() if key != "_sources"):
        rows = []
        for k in folds:
            score = synthbench.score_disentanglement(cks[k], collection, truth, split.validation(k),
                                                     config["interpret"]["stride"], config["dsp"]["bandpass"])
            for name, comp, r in zip(score.source_names, score.assignment, score.matched_r):
                rows.append((k, name, int(comp), float(r)))
        write_rows(out / "disentanglement.csv", ["fold", "source", "component", "abs_r"], rows)


def cmd_consistency(config: dict, out: Path, args) -> None:
    """Timecourse consistency of matched components per dataset, mean (std) over folds."""
    _, _, folds, cks, _, tcs, perms = _matched(config, out, args)
    C = cks[folds[0]].config.n_components
    rows = []
    datasets = sorted(next(iter(tcs.values())))
    for ds in datasets:
        for c in range(C):
            vals = []
            for k in folds:
                values, _, recs = tcs[k][ds]
                vals.append(interpret.consistency_by_recording(values[:, perms[k][c]], recs))
            rows.append((ds, c, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    write_rows(out / "consistency.csv", ["dataset_id", "component", "tc_mean", "tc_std", "n_folds"], rows)


def _motor_windows(collection: Collection, config: dict) -> dict:
    """Per dataset: window start (s) of baseline, action and post-action windows."""
    given = config["downstream"].get("windows")
    if given:
        return given
    try:
        notes = json.loads(collection.manifest.notes)
        schedules = notes["config"]["schedules"]
    except (ValueError, KeyError, TypeError):
        raise CliError("downstream.windows must be set for stores without a synthetic schedule") from None
    W = config["training"]["window_seconds"]
    out = {}
    for s in schedules:
        out[s["name"]] = {"baseline": max(0.0, s["cue"] - 0.25 - W), "action": s["cue"] + 0.25,
                          "post": s["burst_start"]}
    return out


@torch.no_grad()
def _motor_features(ck: Checkpoint, collection: Collection, subjects, windows: dict, config: dict, task: str):
    keep = set(subjects)
    T = ck.config.n_times
    xs, ys = [], []
    band = config["dsp"]["bandpass"]
    for ds in collection.dataset_ids:
        fs = collection.fs(ds)
        for trial in collection.tables[ds].trials:
            if trial.subject_id not in keep:
                continue
            data = collection.trial_data(trial)
            for label, key in ((0, "baseline"), (1, task)):
                s = int(round(windows[ds][key] * fs))
                xs.append(dsp.prepare_window(data[:, s:s + T], fs, band, config["dsp"]["filter_order"]))
                ys.append(label)
    ck.model.eval()
    z = ck.model(torch.as_tensor(np.stack(xs), dtype=torch.float32)).double().numpy()
    return z, np.array(ys)


def _pick_motor_components(ck, collection, truth, subjects, config) -> list[int]:
    given = config["downstream"].get("components")
    if given:
        return list(given)
    if truth is None:
        raise CliError("downstream.components must name two components when the store has no ground truth")
    score = synthbench.score_disentanglement(ck, collection, truth, subjects, config["interpret"]["stride"],
                                             config["dsp"]["bandpass"])
    names = list(score.source_names)
    return [int(score.assignment[names.index("erd")]), int(score.assignment[names.index("ers")])]


def cmd_downstream(config: dict, out: Path, args) -> None:
    """Six-parameter probes on two frozen components: action vs baseline and
    post-action vs baseline, trained on training subjects, tested on the fold."""
    store = store_path(config, out)
    collection = Collection.load(store)
    truth = load_truth(store)
    folds = folds_to_run(config, args)
    cks = load_checkpoints(config, out, folds)
    split = fold_split(config, collection)
    windows = _motor_windows(collection, config)
    rows = []
    for k in folds:
        ck = cks[k]
        before = downstream.parameter_checksum(ck.model)
        comps = _pick_motor_components(ck, collection, truth, split.training(k), config)
        for task in ("action", "post"):
            ztr, ytr = _motor_features(ck, collection, split.training(k), windows, config, task)
            zva, yva = _motor_features(ck, collection, split.validation(k), windows, config, task)
            pc = downstream.ProbeConfig(components=comps, n_classes=2, seed=config["seed"] + k)
            probe = downstream.train_motor_probe(ztr, ytr, pc)
            for split_name, z, y in (("train", ztr, ytr), ("validation", zva, yva)):
                m = downstream.metrics(downstream.predict(probe, z, comps), y)
                rows.append((k, task, split_name, f"{comps[0]};{comps[1]}", m["accuracy"], m["uar"], m["f1"]))
        if downstream.parameter_checksum(ck.model) != before:
            raise CliError("extractor parameters changed during probe training")
    write_rows(out / "motor_probe.csv", ["fold", "task", "split", "components", "accuracy", "uar", "f1"], rows)


def _sleep_features(ck, collection, truth, subjects, config):
    ep_seconds = config["downstream"]["epoch_seconds"] or config["training"]["window_seconds"]
    xs, ys = [], []
    for name in sorted(subjects):
        buf = collection.buffers[name]
        ep = int(round(ep_seconds * buf.fs))
        xs.append(downstream.epoch_features(ck, buf.samples, buf.fs, ep, config["dsp"]["bandpass"],
                                            config["dsp"]["filter_order"]))
        ys.append(np.asarray(truth[name]["states"])[:len(xs[-1])])
    return np.concatenate(xs), np.concatenate(ys)


def cmd_fewshot(config: dict, out: Path, args) -> None:
    store = store_path(config, out)
    collection = Collection.load(store)
    truth = load_truth(store)
    if truth is None or "states" not in next(v for key, v in truth.items() if key != "_sources"):
        raise CliError("fewshot needs a store with per-epoch state labels (synth kind 'sleep')")
    folds = folds_to_run(config, args)
    cks = load_checkpoints(config, out, folds)
    split = fold_split(config, collection)
    n_classes = len(truth["_sources"])
    data = []
    for k in folds:
        trx, try_ = _sleep_features(cks[k], collection, truth, split.training(k), config)
        vx, vy = _sleep_features(cks[k], collection, truth, split.validation(k), config)
        data.append(downstream.FoldData(trx, try_, vx, vy))
    budgets = [b if b == "full" else int(b) for b in config["downstream"]["budgets"]]
    pc = downstream.ProbeConfig(n_classes=n_classes, steps=config["downstream"]["probe_steps"])
    res = downstream.fewshot_curve(data, budgets, pc, repeats=config["downstream"]["repeats"], seed=config["seed"])
    downstream.write_results_csv(out / "fewshot.csv", res)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    xs = list(range(len(budgets)))
    ax.errorbar(xs, [res[b]["uar"][0] for b in budgets], yerr=[res[b]["uar"][1] for b in budgets], marker="o")
    ax.set_xticks(xs, [str(b) for b in budgets])
    ax.set_xlabel("labels per class")
    ax.set_ylabel("UAR")
    save_svg(fig, out / "fewshot.svg")


def cmd_blinkprobe(config: dict, out: Path, args) -> None:
    """Reconstruct wideband blink waveforms from the band-passed frontal channel."""
    store = store_path(config, out)
    collection = Collection.load(store)
    truth = load_truth(store)
    if truth is None:
        raise CliError("blinkprobe needs a synthetic store with blink ground truth")
    split = fold_split(config, collection)
    fold = args.fold or 0
    pc = synthbench.BlinkProbeConfig(input_band=tuple(config["dsp"]["bandpass"]), seed=config["seed"],
                                    steps=config["downstream"]["blink_steps"])
    model, losses = synthbench.blink_probe_train(collection, split.training(fold), pc)
    trained = synthbench.blink_probe_eval(model, collection, truth, split.validation(fold), pc)
    base = synthbench.blink_probe_eval(synthbench.initial_reconstructor(pc), collection, truth,
                                       split.validation(fold), pc)
    write_rows(out / "blink_summary.csv", ["model", "mean_r", "n_events"],
               [("trained", trained["r"], trained["n_events"]), ("untrained", base["r"], base["n_events"])])
    write_rows(out / "blink_loss.csv", ["step", "mse"], [(i + 1, float(v)) for i, v in enumerate(losses)])
    fs = next(iter(collection.buffers.values())).fs
    rows = []
    for e, (target, inp, rec) in enumerate(trained["examples"]):
        t = (np.arange(target.size) - target.size / 2) / fs
        rows.extend((e, float(a), float(b), float(c), float(d)) for a, b, c, d in zip(t, target, inp, rec))
    write_rows(out / "blink_examples.csv", ["event", "t_s", "wideband", "input", "reconstruction"], rows)
    plt = _pyplot()
    n = len(trained["examples"])
    fig, axes = plt.subplots(1, max(n, 1), figsize=(2.2 * max(n, 1), 2.2), squeeze=False)
    for e, (target, inp, rec) in enumerate(trained["examples"]):
        t = (np.arange(target.size) - target.size / 2) / fs
        axes[0, e].plot(t, target, "k", lw=1, label="wideband")
        axes[0, e].plot(t, inp, "0.6", lw=0.8, label="input")
        axes[0, e].plot(t, rec, "C3", lw=1, label="reconstruction")
    axes[0, 0].legend(fontsize=6)
    save_svg(fig, out / "blink_examples.svg")


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "interpret": cmd_interpret,
    "consistency": cmd_consistency,
    "downstream": cmd_downstream,
    "fewshot": cmd_fewshot,
    "blinkprobe": cmd_blinkprobe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegd3", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="JSON run config (sections io, dsp, model, training, ...)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="base config before --config is applied")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel folds (pretrain)")
        p.add_argument("--fold", type=int, default=None, help="run a single fold")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = resolve_config(args.config, args.preset, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.set_num_threads(1)
        HANDLERS[args.command](config, out, args)
        write_run_json(out, args.command, config, args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # every module failure becomes a structured error
        if args.verbose:
            log.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
