import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from hopguard.sim import SPEED_OF_LIGHT
from hopguard.sim.adversary import AttackConfig, GhostPeakAttacker
from hopguard.sim.channel import Channel, ChannelConfig
from hopguard.sim.detection import CirFeature
from hopguard.sim.phy import PacketConfig, StsCounterState
from hopguard.sim.protocol import (
    DsTwrExchange,
    HopTable,
    ProtocolConfig,
    RangingSession,
    RangingTimestamps,
    SessionState,
    compute_distance,
    decode_final_payload,
    encode_final_payload,
    fnv1a_64,
    min_safe_hop,
    run_dstwr,
    select_hop_delay,
    write_trace,
)
from hopguard.sim.receiver import Receiver

TOF = 33.3564e-9
KEY = bytes(range(100, 116))


def test_symmetric_exchange_gives_ten_metres():
    reply = 300e-6
    ts = RangingTimestamps(reply + 2 * TOF, reply + 2 * TOF, reply, reply)
    assert compute_distance(ts) == pytest.approx(SPEED_OF_LIGHT * TOF, abs=1e-6)
    assert compute_distance(ts) == pytest.approx(10.0, abs=1e-3)


def test_zero_flight_time():
    assert compute_distance(RangingTimestamps(1e-4, 2e-4, 1e-4, 2e-4)) == 0.0


def test_asymmetric_replies():
    ts = RangingTimestamps(300e-6 + 2 * TOF, 450e-6 + 2 * TOF, 300e-6, 450e-6)
    assert compute_distance(ts) == pytest.approx(10.0, abs=1e-3)


def test_negative_distance_is_returned():
    assert compute_distance(RangingTimestamps(1e-4, 1e-4, 2e-4, 2e-4)) < 0


def test_invalid_rounds():
    with pytest.raises(ValueError):
        compute_distance(RangingTimestamps(0.0, 1e-4, 1e-4, 1e-4))


def test_hop_cancels_in_distance():
    base = RangingTimestamps(300e-6 + 2 * TOF, 300e-6 + 2 * TOF, 300e-6, 300e-6)
    for hop in HopTable.from_range(15e-6, 20e-6, 32).entries:
        hopped = RangingTimestamps(base.t_round1, base.t_round2, base.t_reply1, base.t_reply2, hop)
        assert hopped.t_round1_new == base.t_round1 + hop
        assert hopped.t_reply1_new == base.t_reply1 + hop
        assert compute_distance(hopped) == pytest.approx(compute_distance(base), abs=0.075)


def test_fnv1a_reference_values():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


def test_hop_selection():
    table = HopTable.from_range(15e-6, 20e-6, 32)
    assert select_hop_delay(12345, table) == select_hop_delay(12345, table)
    assert select_hop_delay(12345, table) in table.entries
    assert select_hop_delay(99, HopTable((17e-6,))) == 17e-6


def test_hop_selection_is_uniform():
    table = HopTable.from_range(15e-6, 20e-6, 32)
    index = {value: i for i, value in enumerate(table.entries)}
    counts = Counter(index[select_hop_delay(c, table)] for c in range(100_000))
    observed = np.array([counts[i] for i in range(32)])
    assert np.all(np.abs(observed / (100_000 / 32) - 1) < 0.1)
    assert chisquare(observed).pvalue > 0.01


def test_hop_table_validation():
    with pytest.raises(ValueError):
        HopTable(())
    with pytest.raises(ValueError):
        HopTable((1e-6, 1e-6))
    table = HopTable.from_range(15e-6, 20e-6)
    assert len(table) == 32
    assert table.t_min_hop == 15e-6 and table.t_max_hop == 20e-6
    safe = min_safe_hop(PacketConfig.legitimate(), PacketConfig.attack())
    assert safe < 15e-6
    table.validate(safe)
    with pytest.raises(ValueError):
        HopTable.from_range(1e-6, 2e-6).validate(safe)


def test_session_state_counters():
    state = SessionState("initiator", StsCounterState(KEY, 10))
    first = state.next_sts()
    assert first.source_counter == 10
    assert state.counter.counter == 11
    state.abort_round(2)
    assert state.counter.counter == 1 << 16
    assert SessionState("responder", StsCounterState(KEY, 0), "auto").mode == "classic"


def test_final_payload_layout():
    feature = CirFeature(values=np.arange(16))
    payload = encode_final_payload(300.5e-6, 299.25e-6, feature)
    assert len(payload) == 32
    assert payload[:8] == (300_500_000).to_bytes(8, "little")
    round1, reply2, parsed = decode_final_payload(payload)
    assert round1 == pytest.approx(300.5e-6)
    assert reply2 == pytest.approx(299.25e-6)
    assert np.array_equal(parsed.values, feature.values)


def exchange(snr_db=math.inf, attack=None, mode="classic", debug=False):
    channel = Channel(ChannelConfig(snr_db=snr_db))
    return DsTwrExchange(
        channel=channel,
        receiver=Receiver(),
        config=ProtocolConfig(mode=mode),
        attacker=GhostPeakAttacker(attack) if attack else None,
        debug=debug,
    )


def endpoints(counter=500, mode="classic"):
    state = StsCounterState(KEY, counter)
    return SessionState("initiator", state, mode), SessionState("responder", state, mode)


def test_clean_exchange_measures_ten_metres():
    initiator, responder = endpoints()
    record = exchange(debug=True).run(initiator, responder, rng_seed=1)
    assert record.failure is None
    assert record.distance_m == pytest.approx(10.0, abs=0.30)
    assert not record.attack_success
    assert record.detection == 0
    assert initiator.counter == responder.counter
    assert initiator.counter.counter == 503
    assert [e["message"] for e in record.events] == ["poll", "response", "final"]


def test_hopped_exchange_matches_classic():
    classic = exchange().run(*endpoints(), rng_seed=2)
    initiator, responder = endpoints(mode="hopping")
    hopped = exchange(mode="hopping").run(initiator, responder, rng_seed=2)
    expected_hop = select_hop_delay(501, ProtocolConfig().hop_table)
    assert hopped.hop_delay == expected_hop
    response = hopped.events[1]
    assert response["tx_epoch"] - response["nominal_epoch"] == pytest.approx(expected_hop, abs=1e-15)
    assert abs(hopped.distance_m - classic.distance_m) <= SPEED_OF_LIGHT / 1.9968e9


def test_out_of_sync_counters_rejected():
    initiator = SessionState("initiator", StsCounterState(KEY, 1))
    responder = SessionState("responder", StsCounterState(KEY, 2))
    with pytest.raises(ValueError):
        exchange().run(initiator, responder)


def test_attack_outside_capture_does_not_help():
    initiator, responder = endpoints(mode="hopping")
    attack = AttackConfig(sync_time_s=-1e-6, sir_db=-26.0)
    record = exchange(attack=attack, mode="hopping").run(initiator, responder, rng_seed=3)
    assert record.attack_offset_s < -14e-6
    assert not record.attack_success
    assert initiator.counter == responder.counter


def test_auto_mode_switches_after_detection(tmp_path, monkeypatch):
    session = RangingSession(exchange(mode="auto"), KEY, counter=900, mode="auto")
    first = session.run_round(rng_seed=4)
    assert first.mode == "classic"
    assert first.detection == 0
    assert session.initiator.mode == "classic"

    monkeypatch.setattr("hopguard.sim.protocol.detect", lambda *args: 1)
    flagged = session.run_round(rng_seed=5)
    assert flagged.detection == 1
    assert flagged.mode == "classic"
    assert session.initiator.hopping and session.responder.hopping

    hopped = session.run_round(rng_seed=6)
    assert hopped.mode == "hopping"
    assert hopped.hop_delay >= 15e-6
    session.dump_trace(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0].startswith("round,mode,hop_delay_s,message")
    assert len(lines) == 1 + 9


def test_trace_writer(tmp_path):
    record = exchange().run(*endpoints(), rng_seed=6)
    write_trace([record], tmp_path / "one.csv")
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 4


@pytest.mark.slow
def test_noisy_exchange_accuracy():
    errors = []
    for seed in range(10):
        initiator, responder = endpoints(counter=seed * 10)
        record = exchange(snr_db=-10.0).run(initiator, responder, rng_seed=seed)
        assert record.failure is None, record.failure
        errors.append(abs(record.distance_m - 10.0))
    assert max(errors) <= 0.30


@pytest.mark.slow
def test_endpoints_agree_on_hops_through_random_aborts():
    rng = np.random.default_rng(12)
    table = ProtocolConfig().hop_table
    index = {value: i for i, value in enumerate(table.entries)}
    initiator, responder = endpoints(counter=0, mode="hopping")
    counts = np.zeros(len(table), dtype=int)
    for _ in range(10_000):
        for state in (initiator, responder):
            state.next_sts()
        hop = responder.hop_for_current(table)
        assert initiator.hop_for_current(table) == hop
        counts[index[hop]] += 1
        failed = int(rng.integers(0, 4))
        for message in (1, 2):
            for state in (initiator, responder):
                state.next_sts()
            if failed == message:
                for state in (initiator, responder):
                    state.abort_round(2 - message)
                break
        assert initiator.counter == responder.counter
    assert counts.sum() == 10_000
    assert chisquare(counts).pvalue > 1e-3


def test_run_dstwr_function():
    initiator, responder = endpoints(counter=7000)
    record = run_dstwr(
        initiator,
        responder,
        Channel(ChannelConfig(snr_db=math.inf)),
        Receiver(),
        rng_seed=8,
        trial=3,
    )
    assert record.trial == 3
    assert record.distance_m == pytest.approx(10.0, abs=0.30)
    assert record.attack_offset_s is None
