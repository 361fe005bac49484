"""Signal surrogate: waveform physics, fault separability, archive format."""

import numpy as np
import pytest

from protoanchor.errors import ArgumentError, ConfigurationError
from protoanchor.periodicity import averaged_spectrum
from protoanchor.twinsim import (
    DEFAULT_SHIFT,
    ZERO_SHIFT,
    DatasetConfig,
    DomainShift,
    Label,
    SignalConfig,
    generate,
    load_archive,
    make_dataset,
    rms_imbalance,
    save_archive,
)


class TestGenerate:
    def test_normal_state_balanced_rms(self):
        samples = generate(Label.N, 2700, "virtual", ZERO_SHIFT, 5, seed=1)
        for s in samples:
            rms = np.sqrt(np.mean(s.phases**2, axis=1))
            assert np.max(np.abs(rms - rms.mean())) < 1e-9 * rms.mean()

    def test_swf_rms_ratio(self):
        cfg = SignalConfig(swf_severity=0.1)
        samples = generate(Label.SWF, 2400, "virtual", ZERO_SHIFT, 5, seed=2, signal=cfg)
        for s in samples:
            rms = np.sqrt(np.mean(s.phases**2, axis=1))
            assert rms[0] / rms[1] == pytest.approx(0.9, rel=1e-6)

    def test_top3_peaks_45_225_315(self):
        samples = generate(Label.N, 2700, "virtual", ZERO_SHIFT, 3, seed=3)
        fs = samples[0].sample_rate_hz
        length = samples[0].phases.shape[1]
        for s in samples:
            amps = averaged_spectrum(s.phases).copy()
            amps[0] = 0.0
            top3 = np.argsort(-amps)[:3] * fs / length
            assert sorted(top3.tolist()) == [45.0, 225.0, 315.0]
            assert top3[0] == 45.0  # fundamental dominates

    def test_phase_sum_zero_at_zero_shift(self):
        # Balanced-generation invariant for the normal state; the MRF
        # modulation preserves it, SWF/BRB break balance by design.
        for label in (Label.N, Label.MRF):
            for s in generate(label, 1200, "virtual", ZERO_SHIFT, 3, seed=4):
                rms = np.sqrt(np.mean(s.phases**2))
                assert np.max(np.abs(s.phases.sum(axis=0))) < 1e-9 * rms

    def test_virtual_spectrum_leak_free(self):
        cfg = SignalConfig()
        samples = generate(Label.N, 2700, "virtual", ZERO_SHIFT, 2, seed=5, signal=cfg)
        fs, length = cfg.sample_rate_hz, cfg.window_len
        expected_bins = {int(45 * length / fs)} | {
            int(order * 45 * length / fs) for order, _ in cfg.harmonics
        }
        for s in samples:
            amps = averaged_spectrum(s.phases)
            off_line = np.delete(amps, sorted(expected_bins | {0}))
            assert np.max(off_line) < 1e-6 * np.max(amps)

    def test_window_length_follows_sample_rate(self):
        cfg = SignalConfig(sample_rate_hz=1280.0)
        s = generate(Label.N, 1200, "virtual", ZERO_SHIFT, 1, seed=6, signal=cfg)[0]
        assert s.phases.shape == (3, 256)

    def test_swf_detector_separates_from_normal(self):
        cfg = SignalConfig(sample_rate_hz=1280.0)
        normal = generate(Label.N, 2700, "virtual", ZERO_SHIFT, 500, seed=7, signal=cfg)
        swf = generate(Label.SWF, 2700, "virtual", ZERO_SHIFT, 500, seed=8, signal=cfg)
        threshold = cfg.swf_severity / 2.0
        assert all(rms_imbalance(s.phases) < threshold for s in normal)
        assert all(rms_imbalance(s.phases) > threshold for s in swf)

    def test_brb_adds_sideband_energy(self):
        cfg = SignalConfig(sample_rate_hz=1280.0)
        n = generate(Label.N, 2700, "virtual", ZERO_SHIFT, 1, seed=9, signal=cfg)[0]
        brb = generate(Label.BRB, 2700, "virtual", ZERO_SHIFT, 1, seed=9, signal=cfg)[0]
        amps_n = averaged_spectrum(n.phases)
        amps_b = averaged_spectrum(brb.phases)
        # Sidebands at 45*(1 +/- 0.04) Hz leak into bins adjacent to bin 9.
        assert amps_b[8] + amps_b[10] > 3.0 * (amps_n[8] + amps_n[10])

    def test_physical_applies_gains(self):
        shift = DomainShift(amp_imbalance=(1.2, 1.0, 1.0))
        virt = generate(Label.N, 2400, "virtual", shift, 1, seed=10)[0]
        phys = generate(Label.N, 2400, "physical", shift, 1, seed=10)[0]
        assert np.allclose(phys.phases[0], 1.2 * virt.phases[0], atol=1e-12)

    def test_determinism(self):
        a = generate(Label.MRF, 2700, "physical", DEFAULT_SHIFT, 4, seed=11)
        b = generate(Label.MRF, 2700, "physical", DEFAULT_SHIFT, 4, seed=11)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.phases, s2.phases)

    def test_unknown_label_and_speed(self):
        with pytest.raises(ArgumentError):
            generate("XYZ", 2700, "virtual", ZERO_SHIFT, 1, seed=0)
        with pytest.raises(ArgumentError):
            generate(Label.N, 1800, "virtual", ZERO_SHIFT, 1, seed=0)
        with pytest.raises(ArgumentError):
            generate(Label.N, 2700, "virtual", ZERO_SHIFT, 0, seed=0)


class TestDataset:
    def _small_cfg(self, **kw):
        defaults = dict(
            speed_rpm=2700,
            source_per_class=6,
            target_per_class=5,
            seed=0,
            signal=SignalConfig(sample_rate_hz=1280.0),
        )
        defaults.update(kw)
        return DatasetConfig(**defaults)

    def test_counts(self):
        archive = make_dataset(DatasetConfig(source_per_class=200, target_per_class=40,
                                             signal=SignalConfig(sample_rate_hz=1280.0)))
        virtual = [s for s in archive.samples if s.domain == "virtual"]
        physical = [s for s in archive.samples if s.domain == "physical"]
        assert len(virtual) == 800
        assert len(physical) == 160

    def test_target_pool_supports_requested_split(self):
        make_dataset(self._small_cfg(target_per_class=40), min_target_per_class=25 + 15)
        with pytest.raises(ConfigurationError):
            make_dataset(self._small_cfg(target_per_class=10), min_target_per_class=5 + 15)

    def test_identical_seeds_bitwise_identical(self):
        a = make_dataset(self._small_cfg())
        b = make_dataset(self._small_cfg())
        assert len(a.samples) == len(b.samples)
        for s1, s2 in zip(a.samples, b.samples):
            assert s1.sample_id == s2.sample_id
            assert np.array_equal(s1.phases, s2.phases)

    def test_archive_roundtrip_and_format(self, tmp_path):
        archive = make_dataset(self._small_cfg())
        manifest_path, blob_path = save_archive(archive, tmp_path)
        loaded = load_archive(tmp_path)
        assert len(loaded.samples) == len(archive.samples)
        for s1, s2 in zip(archive.samples, loaded.samples):
            assert s1.sample_id == s2.sample_id and s1.label == s2.label
            assert np.array_equal(s1.phases, s2.phases)
        # Blob layout: phase-major float64 LE, offsets in manifest order.
        blob = np.fromfile(blob_path, dtype="<f8")
        first = archive.samples[0].phases
        assert np.array_equal(blob[: first.size].reshape(first.shape), first)
        import json

        manifest = json.loads(manifest_path.read_text())
        assert manifest["samples"][1]["offset"] == first.size

    def test_save_is_byte_identical(self, tmp_path):
        archive = make_dataset(self._small_cfg())
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_archive(archive, d1)
        save_archive(archive, d2)
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        assert (d1 / "signals.bin").read_bytes() == (d2 / "signals.bin").read_bytes()

    def test_class_arrays_shapes(self):
        archive = make_dataset(self._small_cfg())
        arrays = archive.class_arrays("physical")
        assert set(arrays) == set(Label)
        assert arrays[Label.BRB].shape == (5, 3, 256)
