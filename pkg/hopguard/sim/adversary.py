import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from hopguard.sim import SimComponent, TargetMessage
from hopguard.sim.phy import (
    PacketConfig,
    StsCounterState,
    StsSequence,
    Waveform,
    build_packet,
    generate_sts,
)

log = logging.getLogger(__name__)

TARGETS: tuple[TargetMessage, ...] = ("response", "final")


@dataclass(frozen=True)
class AttackConfig:
    """
    Ghost Peak attack parameters. `sync_time_s` is the offset of the
    attack's ranging marker from the targeted legitimate message's
    (sniffed, un-hopped) transmit epoch.
    """

    sync_time_s: float = -1e-6
    sir_db: float = -26.0
    target: TargetMessage = "response"
    packet: PacketConfig = field(default_factory=PacketConfig.attack)
    frame_attenuation_db: float = 60.0
    guess_hop_s: float = 0.0
    payload: bytes = b""

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"Attack target {self.target} not in {TARGETS}")
        if not math.isfinite(self.sir_db):
            raise ValueError(f"SIR must be finite, got {self.sir_db}")
        if not math.isfinite(self.sync_time_s):
            raise ValueError(f"Sync time must be finite, got {self.sync_time_s}")
        if self.frame_attenuation_db < 0:
            raise ValueError("Frame attenuation cannot be negative")

    @property
    def attack_power_x_t(self) -> float:
        """Linear attack amplitude relative to the legitimate STS at the victim."""
        return 10 ** (-self.sir_db / 20)


def forge_sts(cfg: AttackConfig, rng_seed=None) -> StsSequence:
    """Random STS under a fresh key and counter drawn from the attacker's own RNG."""
    rng = np.random.default_rng(rng_seed)
    state = StsCounterState(
        key=rng.bytes(16),
        counter=int.from_bytes(rng.bytes(16), "big"),
        segment_length=cfg.packet.sts_segment_length,
    )
    return generate_sts(state)


def forge_attack_waveform(cfg: AttackConfig, rng_seed=None) -> Waveform:
    """Full attack packet; everything but the STS is sent `frame_attenuation_db` down."""
    waveform = build_packet(cfg.packet, forge_sts(cfg, rng_seed), cfg.payload)
    start, stop = waveform.segments["sts"]
    gain = np.full(len(waveform), 10 ** (-cfg.frame_attenuation_db / 20))
    gain[start : stop + waveform.pulse_tail] = 1.0
    return replace(waveform, samples=waveform.samples * gain)


def schedule_attack(legit_tx_epoch: float, cfg: AttackConfig) -> float:
    return legit_tx_epoch + cfg.sync_time_s + cfg.guess_hop_s


class GhostPeakAttacker(SimComponent):
    """Sniffs un-hopped transmit epochs and overshadows the targeted message's STS."""

    component_name = "attacker"

    def __init__(self, config: AttackConfig, debug: bool = False):
        super().__init__(debug=debug)
        self.config = config

    @property
    def target(self) -> TargetMessage:
        return self.config.target

    def forge(self, rng_seed=None) -> Waveform:
        return forge_attack_waveform(self.config, rng_seed)

    def schedule(self, legit_tx_epoch: float) -> float:
        tx_time = schedule_attack(legit_tx_epoch, self.config)
        self.log(
            "schedule",
            target=self.target,
            sniffed_epoch=legit_tx_epoch,
            attack_epoch=tx_time,
        )
        return tx_time


__all__ = [
    "AttackConfig",
    "GhostPeakAttacker",
    "forge_sts",
    "forge_attack_waveform",
    "schedule_attack",
]
