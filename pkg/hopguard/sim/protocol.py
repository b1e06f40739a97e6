import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from hopguard.sim import (
    CHIP_RATE,
    SPEED_OF_LIGHT,
    MessageKind,
    RangingMode,
    Role,
    SimComponent,
)
from hopguard.sim.adversary import GhostPeakAttacker
from hopguard.sim.channel import Channel
from hopguard.sim.detection import CirFeature, DetectionConfig, detect, extract_feature
from hopguard.sim.phy import (
    COUNTER_MODULUS,
    PacketConfig,
    StsCounterState,
    build_packet,
    generate_sts,
)
from hopguard.sim.receiver import Reception, Receiver

log = logging.getLogger(__name__)

MESSAGES: tuple[MessageKind, ...] = ("poll", "response", "final")
SESSION_BLOCK = 1 << 16
PICOSECOND = 1e-12
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@dataclass(frozen=True)
class RangingTimestamps:
    """
    Leg-1 values are kept without the hop delay; the `_new` properties
    add it back the way both endpoints see it after a hopped Response.
    """

    t_round1: float
    t_round2: float
    t_reply1: float
    t_reply2: float
    hop_delay: float = 0.0

    @property
    def t_round1_new(self) -> float:
        return self.t_round1 + self.hop_delay

    @property
    def t_reply1_new(self) -> float:
        return self.t_reply1 + self.hop_delay

    @property
    def hopping(self) -> bool:
        return self.hop_delay != 0.0


def compute_distance(ts: RangingTimestamps) -> float:
    """
    Asymmetric DS-TWR distance. A negative result is returned as is; the
    caller treats it as suspicious rather than clamping.
    """
    round1 = ts.t_round1_new if ts.hopping else ts.t_round1
    reply1 = ts.t_reply1_new if ts.hopping else ts.t_reply1
    if round1 <= 0 or ts.t_round2 <= 0:
        raise ValueError(f"Round times must be positive, got {round1} and {ts.t_round2}")
    denominator = round1 + ts.t_round2 + reply1 + ts.t_reply2
    if denominator <= 0:
        raise ValueError(f"Invalid timestamps: denominator {denominator}")
    return SPEED_OF_LIGHT * (round1 * ts.t_round2 - reply1 * ts.t_reply2) / denominator


@dataclass(frozen=True)
class HopTable:
    entries: tuple[float, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("Hop table is empty")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("Hop table entries must be distinct")
        if min(self.entries) < 0:
            raise ValueError("Hop delays cannot be negative")

    @classmethod
    def from_range(cls, t_min_s: float, t_max_s: float, count: int = 32) -> "HopTable":
        if count < 1 or t_max_s < t_min_s or (count > 1 and t_max_s == t_min_s):
            raise ValueError(f"Cannot build {count} hop entries over [{t_min_s}, {t_max_s}]")
        return cls(tuple(float(v) for v in np.linspace(t_min_s, t_max_s, count)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def t_min_hop(self) -> float:
        return min(self.entries)

    @property
    def t_max_hop(self) -> float:
        return max(self.entries)

    def validate(self, min_safe_s: float):
        if self.t_min_hop < min_safe_s:
            raise ValueError(
                f"Smallest hop {self.t_min_hop * 1e6:.3f} us below safe minimum "
                f"{min_safe_s * 1e6:.3f} us"
            )


def min_safe_hop(legitimate: PacketConfig, attack: PacketConfig) -> float:
    """Attack STS duration plus the SFD-to-payload span of the legitimate packet."""
    bounds = legitimate.segment_chips(0)
    viable = bounds["phr"][0] - bounds["sfd"][0]
    return (viable + attack.sts_chips) / CHIP_RATE


def fnv1a_64(data: bytes) -> int:
    value = FNV_OFFSET
    for byte in data:
        value = ((value ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return value


def select_hop_delay(counter: int, table: HopTable) -> float:
    """Both endpoints derive the same delay from their shared counter value."""
    if not len(table):
        raise ValueError("Hop table is empty")
    return table.entries[fnv1a_64(counter.to_bytes(16, "big")) % len(table)]


@dataclass
class SessionState:
    role: Role
    counter: StsCounterState
    mode: RangingMode = "classic"
    detection: int = 0

    def __post_init__(self):
        if self.mode == "auto":
            self.mode = "classic"

    @property
    def hopping(self) -> bool:
        return self.mode == "hopping"

    def next_sts(self):
        """STS for the current message; the counter then moves past it."""
        sts = generate_sts(self.counter)
        self.counter = self.counter.advanced()
        return sts

    def hop_for_current(self, table: HopTable) -> float:
        return select_hop_delay(self.counter.counter, table) if self.hopping else 0.0

    def abort_round(self, remaining: int):
        """Consume the rest of the round, then move to the next session block."""
        advanced = self.counter.advanced(remaining).counter
        restart = (advanced // SESSION_BLOCK + 1) * SESSION_BLOCK % COUNTER_MODULUS
        self.counter = replace(self.counter, counter=restart)

    def switch_to_hopping(self):
        if self.mode != "hopping":
            log.info("%s switching to time-hopping ranging", self.role)
        self.mode = "hopping"


@dataclass(frozen=True)
class ProtocolConfig:
    reply_time_s: float = 300e-6
    final_reply_time_s: float = 300e-6
    success_threshold_m: float = 5.0
    mode: RangingMode = "classic"
    hop_table: HopTable = field(default_factory=lambda: HopTable.from_range(15e-6, 20e-6, 32))
    hop_final: bool = False

    def __post_init__(self):
        if self.reply_time_s <= 0 or self.final_reply_time_s <= 0:
            raise ValueError("Reply times must be positive")
        if self.success_threshold_m <= 0:
            raise ValueError("Success threshold must be positive")
        if self.mode not in ("classic", "hopping", "auto"):
            raise ValueError(f"Unknown ranging mode {self.mode}")


@dataclass
class TrialRecord:
    trial: int = 0
    seed: int = 0
    mode: RangingMode = "classic"
    distance_m: float | None = None
    failure: str | None = None
    attack_success: bool = False
    suspicious: bool = False
    detection: int = 0
    hop_delay: float = 0.0
    attack_offset_s: float | None = None
    events: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ranging_failed(self) -> bool:
        return self.failure is not None


def encode_final_payload(round1_s: float, reply2_s: float, feature: CirFeature) -> bytes:
    return (
        int(round(round1_s / PICOSECOND)).to_bytes(8, "little")
        + int(round(reply2_s / PICOSECOND)).to_bytes(8, "little")
        + feature.to_bytes()
    )


def decode_final_payload(payload: bytes, bits: int = 8) -> tuple[float, float, CirFeature]:
    if len(payload) < 17:
        raise ValueError(f"Final payload of {len(payload)} bytes is too short")
    round1 = int.from_bytes(payload[:8], "little") * PICOSECOND
    reply2 = int.from_bytes(payload[8:16], "little") * PICOSECOND
    return round1, reply2, CirFeature.from_bytes(payload[16:], bits=bits)


class DsTwrExchange(SimComponent):
    """One Poll / Response / Final round between two endpoints, optionally under attack."""

    component_name = "protocol"

    def __init__(
        self,
        channel: Channel,
        receiver: Receiver,
        config: ProtocolConfig | None = None,
        attacker: GhostPeakAttacker | None = None,
        detection: DetectionConfig | None = None,
        debug: bool = False,
    ):
        super().__init__(debug=debug)
        self.channel = channel
        self.receiver = receiver
        self.config = config or ProtocolConfig()
        self.attacker = attacker
        self.detection = detection or DetectionConfig()
        self.packet = receiver.packet

    def transmit(
        self,
        kind: MessageKind,
        sender: SessionState,
        listener: SessionState,
        epoch: float,
        nominal_epoch: float,
        payload: bytes,
        seeds: dict[str, np.random.SeedSequence],
        record: TrialRecord,
    ) -> Reception:
        wave = build_packet(self.packet, sender.next_sts(), payload, self.receiver.pulse)
        template = listener.next_sts()
        capture = self.channel.propagate(wave.at_epoch(epoch), seeds[kind])
        if self.attacker is not None and self.attacker.target == kind:
            attack = self.attacker.forge(seeds["attack"])
            capture = self.channel.inject(capture, attack, self.attacker.schedule(nominal_epoch))
            record.attack_offset_s = (
                capture.attack_arrival_sample - capture.legit_arrival_sample
            ) / capture.sample_rate
        reception = self.receiver.receive_packet(capture, template, label=f"{record.trial}_{kind}")
        record.events.append(
            {
                "message": kind,
                "sender": sender.role,
                "tx_epoch": epoch,
                "nominal_epoch": nominal_epoch,
                "rx_time": reception.rx_time,
                "counter": template.source_counter,
                "failure": reception.failure,
            }
        )
        return reception

    def run(
        self,
        initiator: SessionState,
        responder: SessionState,
        rng_seed=None,
        trial: int = 0,
        t0: float = 0.0,
        seed: int = 0,
    ) -> TrialRecord:
        if initiator.counter.counter != responder.counter.counter:
            raise ValueError("Endpoint counters are out of sync")
        entropy = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
        seeds = dict(zip(("poll", "response", "final", "attack"), entropy.spawn(4)))
        record = TrialRecord(trial=trial, seed=seed, mode=responder.mode)
        cfg = self.config

        def abort(message_index: int, reception: Reception) -> TrialRecord:
            remaining = len(MESSAGES) - message_index - 1
            initiator.abort_round(remaining)
            responder.abort_round(remaining)
            record.failure = f"{MESSAGES[message_index]}:{reception.failure}"
            self.log("abort", trial=trial, failure=record.failure)
            return record

        poll = self.transmit("poll", initiator, responder, t0, t0, b"", seeds, record)
        if not poll.valid:
            return abort(0, poll)

        hop_r = responder.hop_for_current(cfg.hop_table)
        hop_i = initiator.hop_for_current(cfg.hop_table)
        if hop_r != hop_i:
            raise ValueError(f"Endpoints selected different hops: {hop_r} vs {hop_i}")
        record.hop_delay = hop_r
        nominal_response = poll.rx_time + cfg.reply_time_s
        tx_response = nominal_response + hop_r
        self.log("response", trial=trial, hop_us=round(hop_r * 1e6, 3), counter=responder.counter.counter)
        response = self.transmit(
            "response", responder, initiator, tx_response, nominal_response, b"", seeds, record
        )
        if not response.valid:
            return abort(1, response)

        hop_final = initiator.hop_for_current(cfg.hop_table) if cfg.hop_final else 0.0
        nominal_final = response.rx_time + cfg.final_reply_time_s
        tx_final = nominal_final + hop_final
        feature = extract_feature(
            response.cir, response.toa, self.detection.taps, self.detection.bits, self.detection.tap_span
        )
        payload = encode_final_payload(response.rx_time - t0, tx_final - response.rx_time, feature)
        final = self.transmit("final", initiator, responder, tx_final, nominal_final, payload, seeds, record)
        if not final.valid:
            return abort(2, final)

        round1, reply2, remote = decode_final_payload(final.payload, self.detection.bits)
        local = extract_feature(
            final.cir, final.toa, self.detection.taps, self.detection.bits, self.detection.tap_span
        )
        record.detection = detect(local, remote, self.detection.threshold)
        responder.detection = initiator.detection = record.detection

        ts = RangingTimestamps(
            t_round1=round1 - hop_r,
            t_round2=final.rx_time - tx_response,
            t_reply1=tx_response - poll.rx_time - hop_r,
            t_reply2=reply2,
            hop_delay=hop_r,
        )
        distance = compute_distance(ts)
        record.distance_m = distance
        record.suspicious = distance < 0
        record.attack_success = distance < cfg.success_threshold_m
        self.log(
            "distance",
            trial=trial,
            distance_m=round(distance, 3),
            success=record.attack_success,
            detection=record.detection,
        )
        return record


def run_dstwr(
    initiator: SessionState,
    responder: SessionState,
    channel: Channel,
    receiver: Receiver,
    attacker: GhostPeakAttacker | None = None,
    detection: DetectionConfig | None = None,
    config: ProtocolConfig | None = None,
    rng_seed=None,
    trial: int = 0,
) -> TrialRecord:
    exchange = DsTwrExchange(channel, receiver, config, attacker, detection)
    return exchange.run(initiator, responder, rng_seed, trial)


class RangingSession(SimComponent):
    """
    Repeated rounds between one pair of endpoints. In auto mode the
    pair ranges classically until the detector fires, then hops for the
    rest of the session.
    """

    component_name = "session"

    def __init__(
        self,
        exchange: DsTwrExchange,
        key: bytes,
        counter: int,
        mode: RangingMode = "classic",
        round_interval_s: float = 10e-3,
        debug: bool = False,
    ):
        super().__init__(debug=debug)
        self.exchange = exchange
        self.mode = mode
        self.round_interval_s = round_interval_s
        state = StsCounterState(key, counter, exchange.packet.sts_segment_length)
        start = "hopping" if mode == "hopping" else "classic"
        self.initiator = SessionState("initiator", state, start)
        self.responder = SessionState("responder", state, start)
        self.records: list[TrialRecord] = []

    def run_round(self, rng_seed=None) -> TrialRecord:
        index = len(self.records)
        record = self.exchange.run(
            self.initiator,
            self.responder,
            rng_seed,
            trial=index,
            t0=index * self.round_interval_s,
        )
        if self.mode == "auto" and record.detection:
            self.initiator.switch_to_hopping()
            self.responder.switch_to_hopping()
        self.records.append(record)
        return record

    def run(self, rounds: int, rng_seed=None) -> list[TrialRecord]:
        for child in np.random.SeedSequence(rng_seed).spawn(rounds):
            self.run_round(child)
        return self.records

    def dump_trace(self, path: Path):
        write_trace(self.records, path)


def write_trace(records: list[TrialRecord], path: Path):
    """Session trace: one row per message with epochs, counters and chosen hop."""
    columns = ["round", "mode", "hop_delay_s", "message", "sender", "tx_epoch", "nominal_epoch", "rx_time", "counter", "failure"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for record in records:
            for event in record.events:
                writer.writerow(
                    {"round": record.trial, "mode": record.mode, "hop_delay_s": record.hop_delay, **event}
                )


__all__ = [
    "RangingTimestamps",
    "HopTable",
    "SessionState",
    "ProtocolConfig",
    "TrialRecord",
    "DsTwrExchange",
    "RangingSession",
    "compute_distance",
    "min_safe_hop",
    "fnv1a_64",
    "select_hop_delay",
    "encode_final_payload",
    "decode_final_payload",
    "run_dstwr",
    "write_trace",
]
