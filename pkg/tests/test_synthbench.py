import numpy as np
import pytest
import torch

from eegd3 import dsp
from eegd3.synthbench import BlinkProbeConfig, BlinkReconstructor, DatasetSchedule, SleepSynthConfig, SourceSpec, SynthConfig, \
    band_noise, blink_probe_eval, blink_probe_train, envelope, generate, generate_sleep, initial_reconstructor, \
    match_to_truth, read_truth, spatial_pattern, state_schedule, write_truth

SMALL = dict(subjects_per_dataset=2, trials_per_subject=3, fs=64.0,
             montage=["Fp1", "Fp2", "F3", "Fz", "F4", "C3", "Cz", "C4", "Pz", "Oz"])


def test_generation_bitwise_deterministic():
    a, ta = generate(SynthConfig(**SMALL))
    b, tb = generate(SynthConfig(**SMALL))
    for name in a.buffers:
        assert a.buffers[name].samples.tobytes() == b.buffers[name].samples.tobytes()
        assert ta[name]["envelopes"].tobytes() == tb[name]["envelopes"].tobytes()
    c, _ = generate(SynthConfig(**{**SMALL, "seed": 1}))
    name = next(iter(a.buffers))
    assert a.buffers[name].samples.tobytes() != c.buffers[name].samples.tobytes()


def test_rank_one_scene_recovers_pattern():
    source = SourceSpec("beta", "erd", "band", (15.0, 25.0), [(0.3, 0.2)])
    cfg = SynthConfig(**{**SMALL, "sources": [source], "erd_depth": 0.0, "snr_db": 200.0})
    col, truth = generate(cfg)
    pattern = spatial_pattern(cfg.montage, source.centers, source.width)
    x = col.buffers[col.subjects()[0]].samples.astype(np.float64)
    evals, evecs = np.linalg.eigh(np.cov(x))
    assert abs(evecs[:, -1] @ pattern) >= 0.99
    env = truth[col.subjects()[0]]["envelopes"]
    np.testing.assert_allclose(env, 1.0)


def test_envelopes_in_unit_interval_and_schedules_differ():
    col, truth = generate(SynthConfig(**SMALL))
    for name in col.buffers:
        env = truth[name]["envelopes"]
        assert env.min() >= 0 and env.max() <= 1
    t = np.arange(0, 9.5, 1 / 64)
    a, b = (envelope("ers", t, s, 0.0) for s in SynthConfig().schedules)
    assert abs(t[np.argmax(a)] - t[np.argmax(b)]) > 1.0


def test_spatial_pattern_unit_norm():
    p = spatial_pattern(SMALL["montage"], [(0.0, 0.5), (0.2, 0.0)])
    assert np.linalg.norm(p) == pytest.approx(1.0)


def test_band_noise_out_of_band_energy():
    fs = 160.0
    x = band_noise(4000, fs, (15.0, 30.0), np.random.default_rng(0))
    power = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / fs)
    inside = (f >= 15) & (f <= 30)
    ratio = power[~inside].sum() / power[inside].sum()
    assert ratio == 0 or 10 * np.log10(ratio) < -30


def test_match_self_is_perfect():
    env = np.random.default_rng(1).random((4, 300))
    score = match_to_truth(env.copy(), env)
    np.testing.assert_allclose(score.matched_r, 1.0)
    np.testing.assert_array_equal(score.assignment, np.arange(4))


def test_match_random_is_low():
    rng = np.random.default_rng(2)
    env = np.repeat(rng.random((4, 40 * 81 // 9)), 9, axis=1)
    tcs = rng.random((6, env.shape[1]))
    assert match_to_truth(tcs, env).mean_r < 0.2


def test_match_permutation_and_affine_invariant():
    rng = np.random.default_rng(3)
    env = rng.random((4, 200))
    tcs = np.vstack([env[[2, 0, 3, 1]] + rng.normal(0, 0.3, (4, 200)), rng.random((2, 200))])
    base = match_to_truth(tcs, env)
    perm = rng.permutation(6)
    scaled = tcs[perm] * rng.uniform(0.5, 3, (6, 1)) * np.array([1, -1, 1, 1, -1, 1])[:, None] + 4.0
    other = match_to_truth(scaled, env)
    np.testing.assert_allclose(other.matched_r, base.matched_r, atol=1e-12)
    np.testing.assert_array_equal(perm[other.assignment], base.assignment)


def test_truth_round_trip(tmp_path):
    _, truth = generate(SynthConfig(**SMALL))
    write_truth(tmp_path, truth)
    back = read_truth(tmp_path)
    assert back["_sources"] == truth["_sources"]
    for name in truth:
        if name == "_sources":
            continue
        assert back[name]["envelopes"].tobytes() == truth[name]["envelopes"].tobytes()
        assert back[name]["dataset_id"] == truth[name]["dataset_id"]


def test_store_written_and_reloaded(tmp_path):
    col, _ = generate(SynthConfig(**SMALL), out_dir=tmp_path)
    assert (tmp_path / "truth" / "truth.json").exists()
    assert col.dataset_ids == ["synthA", "synthB"]
    assert len(col.tables["synthA"].trials) == 2 * 3


def test_sleep_scene_layout():
    cfg = SleepSynthConfig(n_subjects=3, n_bins=4, epochs_per_bin=8, epoch_seconds=2.0)
    col, truth = generate_sleep(cfg)
    assert col.dataset_ids == ["night00", "night01", "night02"]
    for name in col.dataset_ids:
        states = np.array(truth[name]["states"])
        assert states.size == 32 and set(states) <= set(range(5))
        assert truth[name]["envelopes"].shape == (1, 5, 32 * 128)
        assert col.buffers[name].samples.shape == (8, 32 * 128)


def test_state_schedule_no_self_repeat_between_segments():
    cfg = SleepSynthConfig(n_bins=32, epochs_per_bin=8, min_dwell=3, max_dwell=3)
    s = state_schedule(cfg, np.random.default_rng(0))
    segments = s[: s.size // 3 * 3].reshape(-1, 3)
    assert np.all(segments == segments[:, :1])
    assert np.all(segments[1:, 0] != segments[:-1, 0])


def test_reconstructor_shape_and_initial_state():
    model = BlinkReconstructor()
    assert model(torch.zeros(2, 1, 300)).shape == (2, 1, 300)
    a, b = initial_reconstructor(), initial_reconstructor()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


@pytest.mark.slow
def test_identity_target_is_learned():
    torch.set_num_threads(1)
    col, truth = generate(SynthConfig(subjects_per_dataset=2, trials_per_subject=10))
    subjects = col.subjects()
    # the identity map needs a larger step size than the band-restoration task to converge in 1000 steps
    model, losses = blink_probe_train(col, subjects[:3], BlinkProbeConfig(learning_rate=1e-3), identity=True)
    assert len(losses) == 1000
    result = blink_probe_eval(model, col, truth, subjects[3:], identity=True)
    assert result["n_events"] > 0
    assert result["r"] >= 0.999
