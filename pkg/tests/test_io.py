import json

import numpy as np
import pytest

from eegd3 import io
from eegd3.io import (ChecksumMismatch, Collection, MalformedHeader, MissingChannel, MixedSamplingRates,
                      RecordingBuffer, StoreError, Trial, TrialTable, TruncatedRecord, VersionMismatch)


def _digital(rng, n, n_signals=3):
    return [rng.integers(-32768, 32768, size=n, dtype=np.int64).astype(np.int16) for _ in range(n_signals)]


def test_signal_count_from_fixed_header(write_edf, rng):
    path = write_edf(_digital(rng, 256, 5), n_records=2)
    data = path.read_bytes()
    assert int(data[252:256].decode()) == 5
    header, signals = io.parse_edf_header(data)
    assert header["n_signals"] == 5
    assert len(signals) == 5


def test_digital_zero_calibration():
    sig = io.EdfSignalHeader("C3", "", "uV", -200.0, 200.0, -32768, 32767, "", 1, "")
    value = sig.to_physical(np.array([0]))[0]
    assert value == pytest.approx(400.0 * 32768 / 65535 - 200.0, abs=1e-12)
    assert value == pytest.approx(0.0031, abs=5e-5)


def test_read_edf_physical_units(write_edf):
    dig = [np.array([-32768, 0, 32767, 100], dtype=np.int16)]
    rec = io.read_edf(write_edf(dig, n_records=2, record_duration=0.5))
    assert rec.fs == 4.0
    gain = 400.0 / 65535
    np.testing.assert_allclose(rec.samples[0], (dig[0].astype(float) + 32768) * gain - 200.0, atol=1e-12)


def test_bad_version_rejected(write_edf, rng):
    with pytest.raises(MalformedHeader):
        io.read_edf(write_edf(_digital(rng, 16), version="1"))


@pytest.mark.parametrize("kwargs", [{"header_bytes": 300}, {"header_bytes": "abc"}])
def test_bad_header_fields_rejected(write_edf, rng, kwargs):
    with pytest.raises(MalformedHeader):
        io.read_edf(write_edf(_digital(rng, 16), **kwargs))


def test_short_file_rejected(tmp_path):
    path = tmp_path / "short.edf"
    path.write_bytes(b"0" + b" " * 100)
    with pytest.raises(MalformedHeader):
        io.read_edf(path)


def test_truncated_records(write_edf, rng):
    with pytest.raises(TruncatedRecord):
        io.read_edf(write_edf(_digital(rng, 32), n_records=2, declared_records=5))


def test_unknown_record_count_inferred(write_edf, rng):
    dig = _digital(rng, 30, 2)
    raw = io.read_edf_raw(write_edf(dig, n_records=3, declared_records=-1))
    assert raw.n_records == 3
    np.testing.assert_array_equal(raw.digital[1], dig[1])


def test_mixed_rates(write_edf, rng):
    dig = [rng.integers(-1000, 1000, 200).astype(np.int16), rng.integers(-1000, 1000, 100).astype(np.int16)]
    path = write_edf(dig, n_records=2)
    with pytest.raises(MixedSamplingRates):
        io.read_edf(path)
    rec = io.read_edf(path, resample=True)
    assert rec.fs == 50.0
    assert rec.samples.shape == (2, 100)


def test_annotation_signal_dropped(write_edf, rng):
    dig = _digital(rng, 40, 3)
    path = write_edf(dig, n_records=2, labels=["Fz", "EDF Annotations", "Cz"])
    rec = io.read_edf(path)
    assert rec.channel_names == ["Fz", "Cz"]


def test_edf_payload_round_trip(write_edf, rng):
    dig = _digital(rng, 600, 4)
    path = write_edf(dig, n_records=3)
    data = path.read_bytes()
    raw = io.read_edf_raw(path)
    assert io.pack_records(raw) == data[raw.header["header_bytes"]:]


def _buffer(rng, names, n=50, subject="s0"):
    return RecordingBuffer(rng.standard_normal((len(names), n)), 100.0, names, subject_id=subject)


def test_select_channels_order(rng):
    names = [f"E{i}" for i in range(62)] + ["C3", "C4"]
    rec = _buffer(rng, names)
    out = io.select_channels(rec, ["C4", "C3"])
    assert out.channel_names == ["C4", "C3"]
    np.testing.assert_array_equal(out.samples, rec.samples[[63, 62]])


def test_select_channels_missing(rng):
    with pytest.raises(MissingChannel):
        io.select_channels(_buffer(rng, ["C3"]), ["Cz"])


def test_select_channels_identity_and_nesting(rng):
    names = ["Fz", "C3", "Cz", "C4", "Pz"]
    rec = _buffer(rng, names)
    same = io.select_channels(rec, names)
    np.testing.assert_array_equal(same.samples, rec.samples)
    nested = io.select_channels(io.select_channels(rec, ["Pz", "C3", "Cz"]), ["Cz", "Pz"])
    direct = io.select_channels(rec, ["Cz", "Pz"])
    np.testing.assert_array_equal(nested.samples, direct.samples)


def _small_store(rng, n_ds=2, n_subjects=3, n_trials=2, n=40):
    tables, buffers = [], {}
    for d in range(n_ds):
        table = TrialTable(f"ds{d}", n / 20.0)
        for s in range(n_subjects):
            name = f"ds{d}-s{s}"
            buffers[name] = RecordingBuffer(rng.standard_normal((3, n * n_trials)).astype(np.float32), 20.0,
                                            ["C3", "Cz", "C4"], subject_id=name)
            table.trials.extend(Trial(name, i * n, n, name) for i in range(n_trials))
        tables.append(table)
    return tables, buffers


def test_store_round_trip_bit_exact(tmp_path, rng):
    tables, buffers = _small_store(rng)
    io.write_store(tmp_path, tables, buffers)
    manifest, read_tables, read_buffers = io.read_store(tmp_path)
    for name, buf in buffers.items():
        assert read_buffers[name].samples.dtype == np.float32
        assert read_buffers[name].samples.tobytes() == buf.samples.tobytes()
    assert sorted(read_tables) == ["ds0", "ds1"]
    col = Collection(manifest, read_tables, read_buffers)
    assert len(col.subjects()) == 6
    assert json.loads((tmp_path / "manifest.json").read_text())["format_version"] == io.STORE_FORMAT_VERSION


def test_store_checksum_mismatch(tmp_path, rng):
    tables, buffers = _small_store(rng, 1, 1)
    io.write_store(tmp_path, tables, buffers)
    f32 = next(tmp_path.glob("*.f32"))
    raw = bytearray(f32.read_bytes())
    raw[0] ^= 0xFF
    f32.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        io.read_store(tmp_path)


def test_store_version_mismatch(tmp_path, rng):
    tables, buffers = _small_store(rng, 1, 1)
    io.write_store(tmp_path, tables, buffers)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        io.read_store(tmp_path)


def test_store_missing_dataset_entry(tmp_path, rng):
    tables, buffers = _small_store(rng, 2, 1)
    io.write_store(tmp_path, tables, buffers)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    del doc["datasets"]["ds1"]
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(StoreError):
        io.read_store(tmp_path)


def test_common_electrodes():
    manifest = io.DatasetManifest({"a": {"electrodes": ["Fz", "C3", "Cz", "C4"]},
                                   "b": {"electrodes": ["C4", "Cz", "Pz", "C3"]}})
    assert manifest.common_electrodes() == ["C3", "Cz", "C4"]


def test_stage_labels(tmp_path):
    path = tmp_path / "stages.csv"
    path.write_text("epoch_index,stage\n0,W\n1,N1\n2,REM\n")
    assert io.read_stage_labels(path) == [(0, "W"), (1, "N1"), (2, "REM")]
    path.write_text("epoch_index,stage\n0,N4\n")
    with pytest.raises(ValueError):
        io.read_stage_labels(path)


def test_trial_valid_span_checked():
    with pytest.raises(ValueError):
        Trial("r", 0, 100, "s", valid_start=10, valid_end=120)


def test_trial_data_zero_pads_past_recording_end():
    buf = RecordingBuffer(np.ones((2, 100), dtype=np.float32), 10.0, ["a", "b"], subject_id="s")
    trial = Trial("r", 80, 40, "s", valid_start=0, valid_end=20)
    col = Collection(io.DatasetManifest({"d": {"electrodes": ["a", "b"], "fs": 10.0}}),
                     {"d": TrialTable("d", 4.0, [trial])}, {"r": buf})
    data = col.trial_data(trial)
    assert data.shape == (2, 40)
    assert np.all(data[:, :20] == 1) and np.all(data[:, 20:] == 0)
