import numpy as np
import pytest

from coaxmpi.app.errors import ConfigurationError, DatasetFormatError, DomainError
from coaxmpi.app.services.apd_sensor import NoiseToggles
from coaxmpi.app.services.dataset_gen import (
    CSV_HEADER,
    DEFAULT_FREQUENCIES,
    DatasetMeta,
    FeatureVector,
    LabeledSample,
    check_feature_bounds,
    default_modulations,
    generate,
    meta_path_for,
    raw_error_stats,
    read_csv,
    split_indices,
    split_train_test,
    substream,
    to_arrays,
    write_csv,
)
from coaxmpi.app.services.light_transport import Bounds, SceneRanges, TwoPathScene, net_phasor
from coaxmpi.app.services.signal_core import ModulationConfig, phase_to_depth

NOISE_OFF = NoiseToggles.none()
GOOD_ROW = "1.9,1.91,1.92,1.93,0.05,0.05,0.05,0.05,1.9\n"
HEADER_LINE = ",".join(CSV_HEADER) + "\n"


def fixed_ranges(d_as=2.0, d_ab=0.1, rho=0.25) -> SceneRanges:
    reflectance = Bounds(min=rho, max=rho)
    return SceneRanges(
        d_as=Bounds(min=d_as, max=d_as),
        d_ab=Bounds(min=d_ab, max=d_ab),
        rho_sas=reflectance,
        rho_sab=reflectance,
        rho_aba=reflectance,
        rho_bas=reflectance,
    )


def make_sample(depths, amplitudes=(0.05, 0.05, 0.05, 0.05), target=2.0) -> LabeledSample:
    return LabeledSample(FeatureVector(tuple(depths), tuple(amplitudes)), target)


def test_single_noise_free_sample_matches_phasor_model():
    samples, meta = generate(1, seed=3, ranges=fixed_ranges(), toggles=NOISE_OFF, mode="analytic")
    scene = TwoPathScene(0.1794, 2.0, 0.1, 0.25, 0.25, 0.25, 0.25)

    assert len(samples) == 1
    assert samples[0].target == 2.0
    for k, cfg in enumerate(default_modulations()):
        expected = phase_to_depth(net_phasor(scene, cfg).phase, cfg)
        assert samples[0].features.depths[k] == pytest.approx(expected, rel=1e-9)
        assert samples[0].features.amplitudes[k] == pytest.approx(net_phasor(scene, cfg).amplitude, rel=1e-9)
    assert meta.n == 1
    assert meta.frequencies == list(DEFAULT_FREQUENCIES)


def test_noise_free_depths_lie_between_target_and_detour():
    samples, _ = generate(300, seed=5, toggles=NOISE_OFF, mode="analytic")
    for s in samples:
        assert 1.4 <= s.target <= 2.4
        for depth in s.features.depths:
            assert s.target - 1e-9 <= depth <= s.target + 0.15 + 1e-9


def test_same_seed_gives_byte_identical_files(tmp_path):
    for name in ("a", "b"):
        samples, meta = generate(25, seed=11, toggles=NoiseToggles.all_on(), mode="analytic")
        write_csv(samples, meta, tmp_path / name / "dataset.csv")

    assert (tmp_path / "a" / "dataset.csv").read_bytes() == (tmp_path / "b" / "dataset.csv").read_bytes()
    assert (tmp_path / "a" / "dataset.meta.json").read_bytes() == (tmp_path / "b" / "dataset.meta.json").read_bytes()


def test_trace_mode_is_reproducible_per_seed():
    first, _ = generate(2, seed=4, toggles=NoiseToggles.all_on(), mode="trace")
    again, _ = generate(2, seed=4, toggles=NoiseToggles.all_on(), mode="trace")
    other, _ = generate(2, seed=5, toggles=NoiseToggles.all_on(), mode="trace")
    assert first == again
    assert first != other


def test_parallel_generation_matches_sequential():
    sequential, _ = generate(12, seed=9, mode="analytic", workers=1)
    parallel, _ = generate(12, seed=9, mode="analytic", workers=2)
    assert parallel == sequential


def test_prefix_of_larger_run_is_unchanged():
    small, _ = generate(5, seed=9, mode="analytic")
    large, _ = generate(8, seed=9, mode="analytic")
    assert large[:5] == small


def test_substreams_are_stateless_and_distinct():
    assert substream(1, 0).random() == substream(1, 0).random()
    assert substream(1, 0).random() != substream(1, 1).random()
    assert substream(1, 0, 1).random() != substream(1, 0, 2).random()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n": 0},
        {"n": 5, "modulations": [ModulationConfig(f=f) for f in (12.5e6, 25e6, 31.25e6)]},
        {"n": 5, "modulations": [ModulationConfig(f=f) for f in reversed(DEFAULT_FREQUENCIES)]},
        {"n": 5, "mode": "hybrid"},
        {"n": 5, "mode": "analytic", "noise_scale": -0.5},
        {"n": 5, "mode": "analytic", "noise_scale": float("inf")},
    ],
)
def test_invalid_generation_config_is_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        generate(seed=1, **kwargs)


def test_meta_records_noise_stds_only_when_enabled():
    _, quiet = generate(1, seed=0, toggles=NOISE_OFF, mode="analytic")
    _, noisy = generate(1, seed=0, toggles=NoiseToggles.all_on(), mode="analytic")
    assert quiet.tia_sample_std_v == 0.0 and quiet.thermal_sample_std_v == 0.0
    assert noisy.tia_sample_std_v > 0.0 and noisy.thermal_sample_std_v == pytest.approx(6.40e-3, rel=1e-3)


def test_split_indices_partition():
    train, test = split_indices(10, 0.8, seed=2)
    assert len(train) == 8 and len(test) == 2
    assert sorted(train.tolist() + test.tolist()) == list(range(10))
    again_train, _ = split_indices(10, 0.8, seed=2)
    assert np.array_equal(train, again_train)


def test_split_indices_rejects_bad_input():
    with pytest.raises(DomainError):
        split_indices(0)
    with pytest.raises(DomainError):
        split_indices(10, 1.0)


def test_split_train_test_keeps_samples():
    samples, _ = generate(10, seed=1, mode="analytic")
    train, test = split_train_test(samples, 0.8, seed=0)
    assert len(train) == 8 and len(test) == 2
    assert {s.target for s in train + test} == {s.target for s in samples}


def test_empty_dataset_writes_header_only(tmp_path):
    path = write_csv([], None, tmp_path / "empty.csv")
    assert path.read_text() == "d1_m,d2_m,d3_m,d4_m,a1_v2,a2_v2,a3_v2,a4_v2,target_m\n"
    samples, meta = read_csv(path)
    assert samples == [] and meta is None


def test_csv_round_trip_is_exact(tmp_path):
    samples, meta = generate(40, seed=6, toggles=NoiseToggles.all_on(), mode="analytic")
    path = write_csv(samples, meta, tmp_path / "dataset.csv")

    loaded, loaded_meta = read_csv(path)
    assert loaded == samples
    assert loaded_meta == meta
    assert meta_path_for(path).name == "dataset.meta.json"

    x, y = to_arrays(loaded)
    assert x.shape == (40, 8) and y.shape == (40,)


def test_read_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("d1,d2\n" + GOOD_ROW)
    with pytest.raises(DatasetFormatError) as exc:
        read_csv(path)
    assert exc.value.row == 1
    assert str(exc.value).startswith("row 1:")


@pytest.mark.parametrize(
    "bad_row",
    [
        "1.9,1.91,x,1.93,0.05,0.05,0.05,0.05,1.9\n",
        "1.9,1.91,1.92,0.05,0.05,0.05,0.05,1.9\n",
        "1.9,1.91,nan,1.93,0.05,0.05,0.05,0.05,1.9\n",
        "1.9,-0.1,1.92,1.93,0.05,0.05,0.05,0.05,1.9\n",
    ],
)
def test_read_csv_names_offending_row(tmp_path, bad_row):
    path = tmp_path / "bad.csv"
    path.write_text(HEADER_LINE + GOOD_ROW + bad_row)
    with pytest.raises(DatasetFormatError) as exc:
        read_csv(path)
    assert exc.value.row == 3


def test_read_csv_rejects_foreign_sidecar(tmp_path):
    path = tmp_path / "dataset.csv"
    path.write_text(HEADER_LINE + GOOD_ROW)
    meta_path_for(path).write_text('{"schema_version": 99}\n')
    with pytest.raises(DatasetFormatError):
        read_csv(path)

    meta_path_for(path).write_text("{not json")
    with pytest.raises(DatasetFormatError):
        read_csv(path)


def test_meta_flat_form_uses_dotted_keys():
    _, meta = generate(1, seed=0, mode="analytic")
    flat = meta.to_flat()
    assert flat["modulations.3.f"] == 31.25e6
    assert flat["ranges.d_as.max"] == 2.4
    assert DatasetMeta.from_flat(flat) == meta


def test_check_feature_bounds_flags_out_of_range_depth():
    samples = [
        make_sample((1.9, 1.9, 1.9, 1.9)),
        make_sample((1.9, 1.9, 1.9, 4.8)),
    ]
    assert check_feature_bounds(samples, default_modulations()) == [1]


def test_raw_error_stats_per_frequency():
    samples = [make_sample((2.01, 2.02, 2.03, 2.04)), make_sample((2.01, 2.02, 2.03, 2.04))]
    stats = raw_error_stats(samples)
    assert list(stats) == list(DEFAULT_FREQUENCIES)
    assert stats[31.25e6].mae == pytest.approx(40.0)
    assert stats[12.5e6].bias == pytest.approx(10.0)


def test_feature_vector_validation():
    with pytest.raises(DomainError):
        FeatureVector((1.0, 1.0, 1.0), (0.1, 0.1, 0.1, 0.1))
    with pytest.raises(DomainError):
        FeatureVector((1.0, 1.0, 1.0, 1.0), (0.1, -0.1, 0.1, 0.1))


def test_noise_scale_is_stamped_into_the_sidecar(tmp_path):
    samples, meta = generate(20, seed=9, toggles=NoiseToggles.all_on(), mode="analytic", noise_scale=0.25)
    assert meta.noise_scale == 0.25
    loaded, loaded_meta = read_csv(write_csv(samples, meta, tmp_path / "dataset.csv"))
    assert loaded_meta.noise_scale == 0.25

    unscaled, default_meta = generate(20, seed=9, toggles=NoiseToggles.all_on(), mode="analytic")
    assert default_meta.noise_scale == 1.0
    assert loaded != unscaled
