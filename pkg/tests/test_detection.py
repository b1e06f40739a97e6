import numpy as np
import pytest

from hopguard.sim.detection import CirFeature, DetectionConfig, detect, extract_feature
from hopguard.sim.receiver import CirSpectrum, ToaEstimate


def valid_toa(sample: int) -> ToaEstimate:
    return ToaEstimate(first_path_sample=sample, sample_rate=1.0, valid=True)


def test_single_impulse_feature():
    trace = np.zeros(64)
    trace[10] = 3.0
    feature = extract_feature(CirSpectrum.from_trace(trace), valid_toa(10))
    assert feature.values.tolist() == [255] + [0] * 15
    assert not feature.padded


def test_feature_respects_trace_origin():
    trace = np.zeros(64)
    trace[20:24] = [1.0, 2.0, 4.0, 2.0]
    cir = CirSpectrum.from_trace(trace, origin_sample=1000)
    feature = extract_feature(cir, valid_toa(1020), taps=4, bits=4)
    assert feature.values.tolist() == [4, 8, 15, 8]


def test_short_trace_is_zero_padded():
    trace = np.ones(20)
    feature = extract_feature(CirSpectrum.from_trace(trace), valid_toa(10), taps=16)
    assert feature.padded
    assert feature.values.tolist() == [255] * 10 + [0] * 6


def test_extract_requires_valid_toa():
    cir = CirSpectrum.from_trace(np.ones(32))
    with pytest.raises(ValueError):
        extract_feature(cir, ToaEstimate(first_path_sample=3, sample_rate=1.0))
    with pytest.raises(ValueError):
        extract_feature(cir, valid_toa(40))


def test_identical_features_do_not_trigger():
    feature = CirFeature(values=np.array([255, 120, 30, 0] * 4))
    assert feature.similarity(feature) == pytest.approx(1.0)
    assert detect(feature, feature) == 0


def test_byte_layout():
    feature = CirFeature(values=np.arange(16) * 10)
    assert feature.to_bytes() == bytes(range(0, 160, 10))
    assert np.array_equal(CirFeature.from_bytes(feature.to_bytes()).values, feature.values)


def test_random_remote_triggers():
    rng = np.random.default_rng(5)
    local = CirFeature(values=np.array([10, 150, 255, 150, 10] + [0] * 11))
    hits = sum(
        detect(local, CirFeature(values=rng.integers(0, 256, 16))) for _ in range(1000)
    )
    assert hits > 990


def test_detect_is_symmetric_and_monotone():
    rng = np.random.default_rng(6)
    pairs = [
        (CirFeature(values=rng.integers(0, 256, 16)), CirFeature(values=rng.integers(0, 256, 16)))
        for _ in range(200)
    ]
    for a, b in pairs:
        assert detect(a, b, 0.9) == detect(b, a, 0.9)
    rates = [sum(detect(a, b, gamma) for a, b in pairs) for gamma in (0.5, 0.7, 0.9, 0.99)]
    assert rates == sorted(rates)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        CirFeature(values=np.zeros(8)).similarity(CirFeature(values=np.zeros(16)))
    with pytest.raises(ValueError):
        CirFeature(values=np.array([256]))


@pytest.mark.parametrize("overrides", [{"taps": 0}, {"bits": 9}, {"threshold": 0.0}])
def test_config_rejects(overrides):
    with pytest.raises(ValueError):
        DetectionConfig(**overrides)


def test_taps_pool_spans_of_samples():
    trace = np.zeros(100)
    trace[10], trace[37] = 1.0, 2.0
    feature = extract_feature(CirSpectrum.from_trace(trace), valid_toa(10), taps=4, span=25)
    assert feature.padded
    assert feature.values.tolist() == [128, 255, 0, 0]


def lobe_trace(lobes: dict[int, float]) -> CirSpectrum:
    trace = np.full(801, 5.0)
    for centre, height in lobes.items():
        trace[centre - 2 : centre + 3] = height * np.array([0.6, 0.89, 1.0, 0.89, 0.6])
    return CirSpectrum.from_trace(trace)


def test_early_ghost_is_flagged_and_jitter_is_not():
    cfg = DetectionConfig()
    clean = extract_feature(lobe_trace({400: 100.0}), valid_toa(398), span=cfg.tap_span)
    jittered = extract_feature(lobe_trace({400: 100.0}), valid_toa(399), span=cfg.tap_span)
    ghost = extract_feature(lobe_trace({400: 100.0, 300: 60.0}), valid_toa(298), span=cfg.tap_span)
    assert detect(clean, jittered, cfg.threshold) == 0
    assert detect(clean, ghost, cfg.threshold) == 1
