import math

import numpy as np
import pytest

from hopguard.sim.adversary import (
    AttackConfig,
    GhostPeakAttacker,
    forge_attack_waveform,
    forge_sts,
    schedule_attack,
)
from hopguard.sim.phy import StsCounterState, generate_sts


def test_defaults():
    cfg = AttackConfig()
    assert cfg.target == "response"
    assert cfg.packet.preamble_spreading_factor == 9
    assert cfg.attack_power_x_t == pytest.approx(10 ** 1.3)


@pytest.mark.parametrize(
    "overrides", [{"target": "poll"}, {"sir_db": math.inf}, {"frame_attenuation_db": -1.0}]
)
def test_config_rejects(overrides):
    with pytest.raises(ValueError):
        AttackConfig(**overrides)


def test_forged_sts_depends_on_seed():
    cfg = AttackConfig()
    a, b = forge_sts(cfg, 1), forge_sts(cfg, 2)
    assert abs(a.correlation(b)) < 0.5
    assert np.array_equal(a.codes, forge_sts(cfg, 1).codes)


def test_same_seed_same_waveform():
    cfg = AttackConfig()
    assert np.array_equal(
        forge_attack_waveform(cfg, 9).samples, forge_attack_waveform(cfg, 9).samples
    )


def test_frame_outside_sts_is_attenuated():
    cfg = AttackConfig(frame_attenuation_db=60.0)
    loud = forge_attack_waveform(AttackConfig(frame_attenuation_db=0.0), 4)
    quiet = forge_attack_waveform(cfg, 4)
    start, stop = quiet.segments["sts"]
    tail = quiet.pulse_tail
    assert np.array_equal(quiet.samples[start : stop + tail], loud.samples[start : stop + tail])
    assert np.allclose(quiet.samples[:start], 1e-3 * loud.samples[:start])
    assert quiet.segment_power("sts") == pytest.approx(64 / (64 * 8 * 4))


def test_attacker_sts_independent_of_legitimate():
    rng = np.random.default_rng(0)
    cfg = AttackConfig()
    correlations = []
    for trial in range(1000):
        legit = generate_sts(StsCounterState(rng.bytes(16), int(rng.integers(1 << 62))))
        correlations.append(forge_sts(cfg, trial).correlation(legit))
    # mean of 1000 correlations of independent +-1 sequences of length 64
    assert abs(np.mean(correlations)) < 4 / math.sqrt(64 * 1000)


def test_schedule_attack():
    assert schedule_attack(5e-3, AttackConfig(sync_time_s=0.0)) == 5e-3
    assert schedule_attack(5e-3, AttackConfig(sync_time_s=-1e-6)) == pytest.approx(5e-3 - 1e-6)
    guessing = AttackConfig(sync_time_s=0.0, guess_hop_s=17e-6)
    assert schedule_attack(5e-3, guessing) == pytest.approx(5e-3 + 17e-6)


def test_hop_turns_into_misalignment():
    hop = 17e-6
    nominal = 1e-3
    attack_time = schedule_attack(nominal, AttackConfig(sync_time_s=0.0))
    assert attack_time - (nominal + hop) == pytest.approx(-hop)


def test_attacker_component():
    attacker = GhostPeakAttacker(AttackConfig(target="final"), debug=True)
    assert attacker.target == "final"
    assert attacker.schedule(1.0) == pytest.approx(1.0 - 1e-6)
    assert len(attacker.forge(3)) > 0
