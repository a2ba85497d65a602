from collections import Counter

import numpy as np
import pytest
from scipy import stats

from eegd3.io import Collection, DatasetManifest, RecordingBuffer, Trial, TrialTable
from eegd3.model import ModelConfig
from eegd3.synthbench import SynthConfig, generate
from eegd3.training import EmptyDataset, TooFewSubjects, TrainConfig, assign_bin, bin_width, clip_around_midpoint, \
    epoch_plan, evaluate_bins, make_epoch_stream, pretrain, sleep_bin_setup, split_folds


def test_motor_bin_example():
    assert bin_width(9.5, 16) == pytest.approx(0.59375)
    assert assign_bin((0.0, 9.5), 4.75, 16) == 8


def test_bin_boundaries():
    assert assign_bin((0.0, 9.5), 0.0, 16) == 0
    assert assign_bin((0.0, 9.5), 9.5, 16) == 15
    assert assign_bin((0, 1520), 1520, 16) == 15


def test_padded_trial_bins_narrower():
    assert bin_width(7.0, 16) == pytest.approx(0.4375)
    assert assign_bin((0.0, 7.0), 0.44, 16) == 1


def test_bin_contains_its_centre():
    lo, hi, Y = 0.0, 9.5, 16
    width = (hi - lo) / Y
    for c in np.linspace(lo, hi, 2001):
        b = assign_bin((lo, hi), c, Y)
        assert b * width <= c + 1e-12
        assert c <= (b + 1) * width + 1e-12


def _collection(sizes, n=400, fs=100.0):
    tables, buffers = {}, {}
    for d, size in enumerate(sizes):
        ds = f"d{d}"
        table = TrialTable(ds, n / fs)
        for i in range(size):
            rec = f"{ds}-t{i}"
            buffers[rec] = RecordingBuffer(np.zeros((2, n), dtype=np.float32), fs, ["a", "b"], subject_id=rec)
            table.trials.append(Trial(rec, 0, n, f"{ds}-s{i % 5}"))
        tables[ds] = table
    manifest = DatasetManifest({f"d{d}": {"fs": fs, "electrodes": ["a", "b"]} for d in range(len(sizes))})
    return Collection(manifest, tables, buffers)


def test_oversampling_balances_datasets():
    col = _collection([100, 300])
    cfg = TrainConfig(windows_per_epoch=10_000)
    plan = epoch_plan(col, cfg, np.random.default_rng(0))
    counts = Counter(ds for ds, _ in plan)
    share = counts["d0"] / len(plan)
    assert abs(share - 0.5) <= 0.02
    assert stats.chisquare([counts["d0"], counts["d1"]]).pvalue > 0.01
    default = Counter(ds for ds, _ in epoch_plan(col, TrainConfig(), np.random.default_rng(1)))
    assert default["d0"] == default["d1"] == 300


def test_trials_drawn_uniformly_within_dataset():
    col = _collection([50])
    plan = epoch_plan(col, TrainConfig(windows_per_epoch=10_000), np.random.default_rng(2))
    counts = np.bincount([i for _, i in plan], minlength=50)
    assert stats.chisquare(counts).pvalue > 0.01


def test_condition_weights_from_manifest():
    col = _collection([100])
    for i, t in enumerate(col.tables["d0"].trials):
        t.condition = "me" if i < 20 else "mi"
    col.manifest.datasets["d0"]["condition_weights"] = {"me": 4.0, "mi": 1.0}
    plan = epoch_plan(col, TrainConfig(windows_per_epoch=10_000), np.random.default_rng(3))
    me = sum(1 for _, i in plan if i < 20)
    assert me / len(plan) == pytest.approx(0.5, abs=0.02)


def test_stream_deterministic():
    col = _collection([3, 4])
    rng = np.random.default_rng(4)
    for name in sorted(col.buffers):
        col.buffers[name].samples[:] = rng.standard_normal((2, 400))
    cfg = TrainConfig(window_seconds=1.0, bandpass=None)
    a = list(make_epoch_stream(col, cfg, np.random.default_rng(5)))
    b = list(make_epoch_stream(col, cfg, np.random.default_rng(5)))
    assert len(a) == len(b) == 8
    for (wa, da, ba), (wb, db, bb) in zip(a, b):
        assert da == db and ba == bb and wa.tobytes() == wb.tobytes()
        assert wa.shape == (2, 100)


def test_empty_dataset_rejected():
    col = _collection([2])
    col.tables["d0"].trials.clear()
    with pytest.raises(EmptyDataset):
        epoch_plan(col, TrainConfig(), np.random.default_rng(0))
    with pytest.raises(EmptyDataset):
        epoch_plan(Collection(col.manifest, {}, {}), TrainConfig(), np.random.default_rng(0))


def test_fold_sizes():
    split = split_folds([f"s{i}" for i in range(10)], 5, seed=0)
    assert split.sizes() == [2] * 5
    split = split_folds([f"s{i}" for i in range(11)], 5, seed=0)
    assert sorted(split.sizes(), reverse=True) == [3, 2, 2, 2, 2]


def test_folds_deterministic_and_disjoint():
    subjects = [f"s{i}" for i in range(23)]
    a, b = split_folds(subjects, 4, seed=9), split_folds(subjects, 4, seed=9)
    assert a.assignment == b.assignment
    for k in range(4):
        assert not set(a.training(k)) & set(a.validation(k))
        assert set(a.training(k)) | set(a.validation(k)) == set(subjects)


def test_too_few_subjects():
    with pytest.raises(TooFewSubjects):
        split_folds(["a", "b"], 3)


def test_sleep_bin_schedule():
    full = sleep_bin_setup(8 * 3600)
    assert full.bin_seconds == 900.0
    assert full.windows_per_bin == 30
    assert full.windows_per_recording == 960
    assert sleep_bin_setup(6 * 3600).bin_seconds == 675.0
    assert sleep_bin_setup(10 * 3600).bin_seconds == 900.0


def test_clip_around_midpoint():
    assert clip_around_midpoint(1000, 1.0, max_seconds=600) == (200, 800)
    assert clip_around_midpoint(100, 1.0, max_seconds=600) == (0, 100)


@pytest.fixture(scope="module")
def tiny_scene():
    cfg = SynthConfig(subjects_per_dataset=2, trials_per_subject=6, fs=64.0, montage=["F3", "Fz", "F4", "C3", "Cz", "C4"])
    return generate(cfg)[0]


def _tiny_configs(epochs):
    mc = ModelConfig(n_electrodes=6, n_times=96, fs=64.0, n_components=3, kernel1=17, kernel2=5)
    tc = TrainConfig(epochs=epochs, batch_size=8, window_seconds=1.5, n_bins=4, windows_per_trial=8, seed=3,
                     bandpass=(4.0, 30.0))
    return mc, tc


def test_pretrain_deterministic_and_records_curve(tiny_scene):
    mc, tc = _tiny_configs(2)
    a = pretrain(tiny_scene, mc, tc)
    b = pretrain(tiny_scene, mc, tc)
    curve_a, curve_b = a.metadata["loss_curve"], b.metadata["loss_curve"]
    assert len(curve_a) == 2
    assert curve_a[-1]["loss"] == pytest.approx(curve_b[-1]["loss"], abs=1e-6)
    assert "windows" in a.metadata["epoch_definition"]
    assert a.mappings.dataset_ids == ["synthA", "synthB"]
    mu = a.model.filter.params().mu
    assert np.all((mu >= 0) & (mu <= 32))


def test_one_epoch_beats_untrained(tiny_scene):
    mc, tc = _tiny_configs(1)
    tc.learning_rate = 1e-2
    untrained = pretrain(tiny_scene, mc, TrainConfig(**{**tc.__dict__, "learning_rate": 1e-12}))
    trained = pretrain(tiny_scene, mc, tc)
    before = evaluate_bins(untrained, tiny_scene, tc, n_draws=512)
    after = evaluate_bins(trained, tiny_scene, tc, n_draws=512)
    assert after["loss"] < before["loss"]
