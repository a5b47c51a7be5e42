import dataclasses

import numpy as np
import pytest

from thermoloop.datagen import (
    Dataset,
    ExcitationSpec,
    Normalization,
    SampleWindow,
    TrajectoryInfo,
    build_dataset,
    generate_excitation,
    load_dataset,
    save_dataset,
    window_trajectory,
)
from thermoloop.plant import PlantConfig


def small_plant(**kw) -> PlantConfig:
    defaults = dict(sensor_noise_std=5e-4)
    defaults.update(kw)
    return PlantConfig(**defaults)


def naive_windows(temps, currents, n, m, stride):
    """Plain-loop windowing oracle, independent of the array implementation."""
    out = []
    start = 0
    while start + n + m <= len(temps):
        out.append((list(temps[start:start + n]),
                    list(currents[start + n:start + n + m]),
                    list(temps[start + n:start + n + m])))
        start += stride
    return out


class TestGenerateExcitation:
    def test_max_frequency_changes_every_sample(self):
        spec = ExcitationSpec(update_freq_range=(5.0, 5.0), seed=1)
        signal = generate_excitation(spec, 200)
        # hold length is one sample, so adjacent values are independent draws
        assert np.sum(np.diff(signal) != 0) > 190

    def test_degenerate_current_range(self):
        spec = ExcitationSpec(current_range=(0.0, 0.0), seed=1)
        assert np.all(generate_excitation(spec, 100) == 0.0)

    def test_inverted_range_rejected(self):
        with pytest.raises(ValueError):
            ExcitationSpec(current_range=(1.0, -1.0))

    def test_law_of_large_numbers(self):
        spec = ExcitationSpec(seed=123)
        signal = generate_excitation(spec, 100_000)
        assert signal.min() >= -2.0
        assert signal.max() <= 2.0
        assert abs(signal.mean()) < 0.05

    def test_coverage_over_segments(self):
        # any 2000-s (10k sample) stretch spans at least 95% of the range
        spec = ExcitationSpec(seed=5)
        signal = generate_excitation(spec, 50_000)
        for start in range(0, 50_000, 10_000):
            seg = signal[start:start + 10_000]
            assert seg.max() - seg.min() >= 0.95 * 4.0

    def test_deterministic(self):
        spec = ExcitationSpec(seed=77)
        assert np.array_equal(generate_excitation(spec, 1000), generate_excitation(spec, 1000))

    def test_default_length_from_duration(self):
        spec = ExcitationSpec(duration=100.0, seed=0)
        assert generate_excitation(spec).size == 500


class TestWindowTrajectory:
    def test_exact_fit_gives_one_window(self):
        n, m = 6, 3
        temps = np.arange(n + m, dtype=float)
        currents = -temps
        windows = window_trajectory(temps, currents, n, m, stride=1)
        assert len(windows) == 1
        assert np.array_equal(windows[0].history_temps, temps[:n])
        assert np.array_equal(windows[0].target_temps, temps[n:])
        assert np.array_equal(windows[0].control_currents, currents[n:])

    def test_one_extra_sample_gives_two_windows(self):
        n, m = 6, 3
        temps = np.arange(n + m + 1, dtype=float)
        windows = window_trajectory(temps, -temps, n, m, stride=1)
        assert len(windows) == 2
        assert windows[1].history_temps[0] == 1.0

    @pytest.mark.parametrize("stride", [1, 2, 3, 7])
    def test_matches_naive_loop(self, stride):
        n, m = 10, 4
        rng = np.random.default_rng(3)
        temps = rng.normal(size=100)
        currents = rng.normal(size=100)
        windows = window_trajectory(temps, currents, n, m, stride)
        oracle = naive_windows(temps, currents, n, m, stride)
        assert len(windows) == len(oracle)
        for got, (h, c, t) in zip(windows, oracle):
            assert np.array_equal(got.history_temps, h)
            assert np.array_equal(got.control_currents, c)
            assert np.array_equal(got.target_temps, t)
            # history ends at value k*stride + n - 1 on a ramp
        ramp = np.arange(100, dtype=float)
        for k, win in enumerate(window_trajectory(ramp, ramp, n, m, stride)):
            assert win.history_temps[-1] == k * stride + n - 1

    def test_too_short_raises_with_sizes(self):
        with pytest.raises(ValueError, match="need at least 9"):
            window_trajectory(np.zeros(8), np.zeros(8), 6, 3)


class TestBuildDataset:
    def test_single_window(self):
        n, m = 20, 5
        spec = ExcitationSpec(duration=(n + m) * 0.2, power_levels=(0.5,), seed=9)
        ds = build_dataset(spec, small_plant(), n=n, m=m, val_fraction=0.0)
        assert len(ds) == 1

    def test_window_count_matches_per_level_recount(self):
        spec = ExcitationSpec(duration=7 * 120.0, seed=11)
        ds = build_dataset(spec, small_plant(), n=50, m=5, stride=2)
        assert len(ds.trajectories) == 7
        total = 0
        for info in ds.trajectories:
            expected = (info.num_samples - 50 - 5) // 2 + 1
            assert info.num_windows == expected
            assert info.first_window == total
            total += expected
        assert len(ds) == total

    def test_windows_never_cross_levels(self):
        spec = ExcitationSpec(duration=3 * 60.0, power_levels=(0.3, 0.45, 0.6), seed=2)
        ds = build_dataset(spec, small_plant(), n=30, m=5)
        for info in ds.trajectories:
            for w in range(info.first_window, info.first_window + info.num_windows):
                assert ds.window_power(w) == info.power

    def test_normalization_from_training_split_only(self):
        spec = ExcitationSpec(duration=200.0, power_levels=(0.5,), seed=4)
        ds = build_dataset(spec, small_plant(), n=30, m=5, val_fraction=0.25)
        train = ds.train_indices()
        val = ds.val_indices()
        assert train.size + val.size == len(ds)
        assert train.max() < val.min()  # split is contiguous, validation is the tail
        pooled = np.concatenate([ds.hist[train].ravel(), ds.tgt[train].ravel()])
        assert ds.normalization.temp_mean == pytest.approx(pooled.mean())
        assert ds.normalization.temp_std == pytest.approx(pooled.std())
        assert ds.normalization.current_scale == 2.0

    def test_deterministic_given_seed(self, tmp_path):
        spec = ExcitationSpec(duration=120.0, power_levels=(0.4, 0.6), seed=21)
        a = build_dataset(spec, small_plant(), n=25, m=5)
        b = build_dataset(spec, small_plant(), n=25, m=5)
        assert a == b
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        save_dataset(a, str(dir_a))
        save_dataset(b, str(dir_b))
        assert (dir_a / "dataset.csv").read_bytes() == (dir_b / "dataset.csv").read_bytes()
        assert (dir_a / "dataset.meta.json").read_bytes() == (dir_b / "dataset.meta.json").read_bytes()

    def test_unusable_level_reports_power(self):
        # start on the lower safety bound with hard cooling: everything truncates
        cfg = small_plant(substeps_per_sample=1)
        spec = ExcitationSpec(duration=20000.0, power_levels=(0.5,), seed=3,
                              current_range=(-2.0, -1.9))
        with pytest.raises(Exception, match="0.5 W"):
            build_dataset(spec, cfg, n=10, m=5, initial_temp=cfg.temp_bounds[0] + 0.01)


class TestDatasetIO:
    def roundtrip(self, ds, tmp_path, name="ds"):
        directory = tmp_path / name
        save_dataset(ds, str(directory))
        return load_dataset(str(directory))

    def test_round_trip_identity(self, tmp_path):
        spec = ExcitationSpec(duration=150.0, power_levels=(0.35, 0.5), seed=8)
        ds = build_dataset(spec, small_plant(), n=20, m=5, stride=3)
        assert self.roundtrip(ds, tmp_path) == ds

    def test_empty_dataset_round_trip(self, tmp_path):
        ds = Dataset(hist=np.empty((0, 4)), ctrl=np.empty((0, 2)), tgt=np.empty((0, 2)),
                     normalization=Normalization(300.0, 1.0, 2.0),
                     spec=ExcitationSpec(), trajectories=[], n=4, m=2)
        assert self.roundtrip(ds, tmp_path) == ds

    def test_random_small_datasets_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        for trial in range(10):
            n = int(rng.integers(1, 6))
            m = int(rng.integers(1, 4))
            w = int(rng.integers(0, 5))
            ds = Dataset(
                hist=rng.normal(300, 5, (w, n)), ctrl=rng.normal(0, 1, (w, m)),
                tgt=rng.normal(300, 5, (w, m)),
                normalization=Normalization(float(rng.normal(300, 5)),
                                            float(rng.uniform(0.5, 5)), 2.0),
                spec=ExcitationSpec(seed=trial),
                trajectories=[TrajectoryInfo(0.5, 305.0, w, 0, w, w)] if w else [],
                n=n, m=m)
            assert self.roundtrip(ds, tmp_path, f"trial{trial}") == ds

    def test_truncated_row_is_reported(self, tmp_path):
        spec = ExcitationSpec(duration=30.0, power_levels=(0.5,), seed=8)
        ds = build_dataset(spec, small_plant(), n=10, m=5, val_fraction=0.0)
        directory = tmp_path / "bad"
        save_dataset(ds, str(directory))
        csv = directory / "dataset.csv"
        lines = csv.read_text().splitlines()
        lines[3] = "0,hist_T,2"  # drop the value column
        csv.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="dataset.csv"):
            load_dataset(str(directory))


class TestSampleWindow:
    def test_equality_is_by_value(self):
        a = SampleWindow(np.arange(3.0), np.arange(2.0), np.arange(2.0))
        b = SampleWindow(np.arange(3.0), np.arange(2.0), np.arange(2.0))
        assert a == b

    def test_normalization_round_trip(self):
        norm = Normalization(300.0, 4.0, 2.0)
        temps = np.array([296.0, 304.0])
        assert np.allclose(norm.denorm_temps(norm.norm_temps(temps)), temps)
        assert np.allclose(norm.denorm_currents(norm.norm_currents([-2.0, 1.0])), [-2.0, 1.0])
