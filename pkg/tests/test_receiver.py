import math
from dataclasses import replace

import numpy as np
import pytest

from hopguard.sim.adversary import AttackConfig, forge_attack_waveform
from hopguard.sim.channel import ChannelConfig, inject, propagate, superimpose
from hopguard.sim.phy import PacketConfig, PulseShape, StsCounterState, build_packet, generate_sts
from hopguard.sim.receiver import (
    CirSpectrum,
    Receiver,
    ReceiverConfig,
    cancel_sidelobes,
    cross_correlate,
    leading_edge_bias,
    leading_edge_detect,
    matched_filter,
    rake_fingers,
    receive_packet,
)

KEY = bytes(range(16, 32))
PAYLOAD = bytes(range(16))


@pytest.fixture(scope="module")
def link():
    cfg = PacketConfig.legitimate()
    sts = generate_sts(StsCounterState(KEY, 77))
    tx = build_packet(cfg, sts, PAYLOAD).at_epoch(2e-3)
    capture = propagate(tx, ChannelConfig(snr_db=math.inf))
    return cfg, sts, tx, capture


@pytest.fixture(scope="module")
def receiver():
    return Receiver()


def synthetic(values: dict[int, float], length: int = 1001) -> CirSpectrum:
    trace = np.zeros(length)
    for index, value in values.items():
        trace[index] = value
    return CirSpectrum.from_trace(trace)


def test_single_impulse_first_path_is_peak():
    toa = leading_edge_detect(synthetic({500: 1.0}), ReceiverConfig())
    assert toa.first_path_sample == 500


def test_early_bump_above_mpep_is_first_path():
    cir = synthetic({500: 1.0, 300: 0.6})
    assert leading_edge_detect(cir, ReceiverConfig()).first_path_sample == 300


def test_early_bump_below_mpep_is_ignored():
    cir = synthetic({500: 1.0, 300: 0.4})
    assert leading_edge_detect(cir, ReceiverConfig()).first_path_sample == 500


def test_search_stays_inside_backtrack_window():
    cir = synthetic({900: 1.0, 300: 0.9, 600: 0.7})
    toa = leading_edge_detect(cir, ReceiverConfig(btw_samples=400))
    assert toa.first_path_sample == 600


def test_papr_threshold_applies():
    trace = np.full(1001, 0.2)
    trace[500], trace[450] = 1.0, 0.38
    cir = CirSpectrum.from_trace(trace)
    assert cir.p_rms > 0.2
    toa = leading_edge_detect(cir, ReceiverConfig(mpep_threshold=0.3, papr_threshold=2.0, noise_floor_sigmas=0.0))
    assert toa.first_path_sample == 500


def test_noise_floor_rejects_bumps_in_a_flat_trace():
    trace = np.ones(1001)
    trace[500], trace[300] = 3.0, 2.5
    cir = CirSpectrum.from_trace(trace)
    assert cir.noise_sigma == pytest.approx(1.0 / np.sqrt(2 * np.log(2)))
    assert leading_edge_detect(cir, ReceiverConfig()).first_path_sample == 500
    assert leading_edge_detect(cir, ReceiverConfig(noise_floor_sigmas=0.0)).first_path_sample == 300


def _brute_force(trace: np.ndarray, cfg: ReceiverConfig) -> int:
    peak = int(np.argmax(trace))
    p_rms = np.sqrt(np.mean(trace**2))
    floor = cfg.noise_floor_sigmas * np.median(trace) / np.sqrt(2 * np.log(2))
    threshold = max(trace.max() * cfg.mpep_threshold, p_rms * cfg.papr_threshold, floor)
    for index in range(max(0, peak - cfg.btw_samples), peak):
        if trace[index] > threshold:
            return index
    return peak


@pytest.mark.parametrize("sigmas", [0.0, 5.0])
def test_threshold_rule_matches_brute_force(sigmas):
    rng = np.random.default_rng(4)
    cfg = ReceiverConfig(btw_samples=60, noise_floor_sigmas=sigmas)
    for _ in range(5_000):
        trace = rng.rayleigh(size=201) * rng.uniform(0.2, 1.0)
        trace[rng.integers(201)] += rng.uniform(0, 4)
        cir = CirSpectrum.from_trace(trace)
        assert leading_edge_detect(cir, cfg).first_path_sample == _brute_force(trace, cfg)


def test_raising_thresholds_never_moves_earlier():
    rng = np.random.default_rng(8)
    for _ in range(500):
        trace = rng.rayleigh(size=401)
        cir = CirSpectrum.from_trace(trace)
        low = leading_edge_detect(cir, ReceiverConfig(mpep_threshold=0.3, papr_threshold=1.0, noise_floor_sigmas=0.0))
        high = leading_edge_detect(cir, ReceiverConfig(mpep_threshold=0.6, papr_threshold=2.5))
        assert high.first_path_sample >= low.first_path_sample
        assert low.first_path_sample >= cir.peak_index - 400


def test_cir_statistics():
    cir = CirSpectrum.from_trace([0.0, 3.0, 4.0])
    assert cir.p_max == 4.0
    assert cir.p_rms == pytest.approx(np.sqrt(25 / 3))
    assert cir.peak_index == 2
    assert cir.p_max >= cir.p_rms > 0
    with pytest.raises(ValueError):
        leading_edge_detect(CirSpectrum.from_trace(np.zeros(5)), ReceiverConfig())


def test_clean_pulse_bias_is_two_samples():
    assert leading_edge_bias(PulseShape.root_raised_cosine(), ReceiverConfig()) == 2


def test_matched_filter_peaks_at_impulse():
    pulse = PulseShape.root_raised_cosine()
    samples = np.zeros(200, dtype=complex)
    samples[60 : 60 + pulse.taps.size] = pulse.taps
    filtered = matched_filter(samples, pulse)
    assert int(np.argmax(np.abs(filtered))) == 60
    assert filtered[60].real == pytest.approx(1.0)


def test_cross_correlation_peaks_at_arrival(link):
    cfg, sts, _, capture = link
    pulse = PulseShape.for_packet(cfg)
    cir = cross_correlate(capture, sts, pulse, capture.legit_arrival_sample + 37, btw_samples=400)
    assert abs(cir.origin_sample + cir.peak_index - capture.legit_arrival_sample) <= 1
    assert cir.trace.size == 801


def test_cross_correlation_window_out_of_range(link):
    cfg, sts, _, capture = link
    with pytest.raises(ValueError):
        cross_correlate(capture, sts, PulseShape.for_packet(cfg), 10, btw_samples=400)


def test_clean_reception(link, receiver):
    _, sts, _, capture = link
    reception = receive_packet(capture, sts)
    assert reception.failure is None
    assert reception.valid
    assert reception.payload == PAYLOAD
    assert reception.toa.first_path_sample == capture.legit_arrival_sample - 2
    assert reception.rx_time == pytest.approx(capture.legit_arrival_time, abs=0.5 / capture.sample_rate)
    assert reception.stages["sts_nominal"] == capture.legit_arrival_sample


def test_wrong_template_still_syncs_but_loses_the_peak(link):
    _, _, _, capture = link
    other = generate_sts(StsCounterState(KEY, 78))
    reception = Receiver(ReceiverConfig(cancel_sidelobes=False)).receive_packet(capture, other)
    assert reception.cir is not None
    true_index = capture.legit_arrival_sample - reception.cir.origin_sample
    assert reception.cir.trace[true_index] < 0.5 * 64 * 0.9


def test_sidelobe_cancellation_leaves_only_the_main_lobe(link):
    cfg, sts, _, capture = link
    pulse = PulseShape.for_packet(cfg)
    raw = cross_correlate(capture, sts, pulse, capture.legit_arrival_sample, btw_samples=400)
    cleaned = cancel_sidelobes(raw, sts, pulse, period=4 * cfg.sts_period_chips)
    far = np.abs(np.arange(raw.trace.size) - raw.peak_index) > 40
    assert raw.trace[far].max() > 2.0
    assert cleaned.trace[far].max() < 1e-6 * raw.p_max
    assert cleaned.peak_index == raw.peak_index
    assert cleaned.p_max == pytest.approx(raw.p_max)


def test_toa_uses_the_capture_sample_rate(link, receiver):
    _, sts, _, capture = link
    reception = receiver.receive_packet(capture, sts)
    assert reception.cir.sample_rate == capture.sample_rate
    assert reception.toa.sample_rate == capture.sample_rate
    assert reception.toa.first_path_time == pytest.approx(reception.toa.first_path_sample / capture.sample_rate)
    slow = CirSpectrum.from_trace(np.eye(1, 1001, 500).ravel(), sample_rate=1e9)
    assert leading_edge_detect(slow, ReceiverConfig()).first_path_time == pytest.approx(500e-9)


def test_rake_fingers_stay_near_the_synchronised_path():
    trace = np.zeros(801)
    trace[200], trace[400], trace[412], trace[420], trace[600] = 1.5, 1.0, 0.6, 0.3, 2.0
    cir = CirSpectrum.from_trace(trace)
    assert list(rake_fingers(cir, 4, anchor=400, guard=8, span=64, floor=0.5)) == [400, 412]
    assert list(rake_fingers(cir, 1, anchor=400)) == [400]
    assert list(rake_fingers(cir, 4)) == [600]


def test_all_zero_capture_fails_sync(link, receiver):
    _, sts, _, capture = link
    silent = replace(capture, waveform=replace(capture.waveform, samples=np.zeros(len(capture.waveform))))
    reception = receiver.receive_packet(silent, sts)
    assert not reception.valid
    assert reception.failure == "sync"
    assert reception.payload is None


def test_correlated_early_copy_pulls_first_path_forward(link, receiver):
    cfg, sts, tx, capture = link
    start = capture.legit_arrival_sample - tx.rmarker_sample
    samples, _ = superimpose(capture.waveform.samples, 0.8 * tx.samples, start - 100)
    attacked = replace(capture, waveform=replace(capture.waveform, samples=samples))
    reception = receiver.receive_packet(attacked, sts)
    assert reception.valid
    assert abs(reception.toa.first_path_sample - (capture.legit_arrival_sample - 100)) <= 3


def test_cir_dump(tmp_path, link):
    _, sts, _, capture = link
    receiver = Receiver(cir_dump=tmp_path)
    receiver.receive_packet(capture, sts, label="response")
    lines = (tmp_path / "cir_response.csv").read_text().splitlines()
    assert lines[0] == "offset_sample,magnitude"
    assert len(lines) == 802


def test_attack_over_the_sfd_invalidates_reception(link):
    _, sts, _, capture = link
    attack = forge_attack_waveform(AttackConfig(sir_db=-60.0, frame_attenuation_db=120.0), rng_seed=5)
    sfd_start, _ = capture.waveform.segments["sfd"]
    sts_start, sts_stop = attack.segments["sts"]
    target = sfd_start + 6 * 508 * 4 - (sts_stop - sts_start) // 2
    attacked = inject(capture, attack, -60.0, capture.waveform.time_of(target), attacker_distance_m=0.0)
    assert attacked.attack_arrival_sample == target
    reception = Receiver(ReceiverConfig(adc_full_scale=None)).receive_packet(attacked, sts)
    assert not reception.valid
    assert reception.failure in ("sfd", "phr", "crc", "window")


@pytest.mark.slow
def test_noisy_reception_at_minus_ten_db():
    cfg = PacketConfig.legitimate()
    receiver = Receiver()
    for seed in range(20):
        sts = generate_sts(StsCounterState(KEY, seed))
        tx = build_packet(cfg, sts, PAYLOAD)
        capture = propagate(tx, ChannelConfig(snr_db=-10.0), rng_seed=seed)
        reception = receiver.receive_packet(capture, sts)
        assert reception.valid, reception.failure
        assert reception.payload == PAYLOAD
        assert abs(reception.toa.first_path_sample + 2 - capture.legit_arrival_sample) <= 2


@pytest.mark.parametrize(
    "overrides",
    [
        {"btw_samples": 0},
        {"rake_fingers": 0},
        {"adc_full_scale": -1.0},
        {"rake_floor": 1.0},
        {"noise_floor_sigmas": -1.0},
    ],
)
def test_receiver_config_rejects(overrides):
    with pytest.raises(ValueError):
        ReceiverConfig(**overrides)
