import math
from dataclasses import replace
from pathlib import Path

import pytest

from hopguard import HopGuard
from hopguard.config import ExperimentConfig


@pytest.fixture(scope="module")
def clean():
    cfg = ExperimentConfig(trials=1, attack_enabled=False)
    return HopGuard(replace(cfg, channel=replace(cfg.channel, snr_db=math.inf)))


def test_components_share_configuration(clean):
    assert clean.Attacker is None
    assert clean.Exchange.receiver is clean.Receiver
    assert clean.Exchange.channel is clean.Channel
    assert clean.Exchange.config is clean.config.protocol


def test_session_ranges_ten_metres(clean):
    session = clean.session(bytes(16), counter=4000)
    records = session.run(2, rng_seed=9)
    assert len(records) == 2
    for record in records:
        assert record.distance_m == pytest.approx(10.0, abs=0.30)


def test_from_file_builds_attacker():
    guard = HopGuard.from_file(Path(__file__).parent.parent / "configs" / "attack_grid.yaml", debug=True)
    assert guard.Attacker is not None
    assert guard.Attacker.target == "response"
    assert guard.Channel.debug
