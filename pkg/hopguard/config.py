import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
import sys
if sys.version_info >= (3, 11):
    from typing import Required, TypedDict, get_type_hints
else:
    from typing_extensions import Required, TypedDict, get_type_hints

import yaml

from hopguard.sim import RangingMode, TargetMessage
from hopguard.sim.adversary import AttackConfig
from hopguard.sim.channel import ChannelConfig
from hopguard.sim.detection import DetectionConfig
from hopguard.sim.phy import PacketConfig
from hopguard.sim.protocol import HopTable, ProtocolConfig, min_safe_hop
from hopguard.sim.receiver import ReceiverConfig

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
DEFAULT_TRIALS = 2000
FULL_TRIALS = 20_000
DEFAULT_SIR_DB = (-20.0, -22.0, -24.0, -26.0, -28.0, -30.0)
DEFAULT_TSY_US = (-2.5, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5)


class ExperimentSection(TypedDict, total=False):
    trials: int
    seed: int
    mode: RangingMode
    sir_db: list[float] | str
    tsy_us: list[float] | str
    attack: bool


class ChannelSection(TypedDict, total=False):
    distance_m: float
    snr_db: float
    attacker_distance_m: float
    multipath: list[list[float]]
    rx_guard_us: float


class ReceiverSection(TypedDict, total=False):
    btw_samples: int
    mpep_threshold: float
    papr_threshold: float
    sfd_detect_threshold: float
    rake_fingers: int
    rake_floor: float
    noise_floor_sigmas: float
    cancel_sidelobes: bool
    adc_full_scale: float | None


class AttackSection(TypedDict, total=False):
    target: TargetMessage
    spreading_factor: int
    frame_attenuation_db: float
    guess_hop_us: float


class ProtocolSection(TypedDict, total=False):
    reply_time_us: float
    final_reply_time_us: float
    success_threshold_m: float
    hop_final: bool


class HopTableSection(TypedDict, total=False):
    min_us: Required[float]
    max_us: Required[float]
    entries: int


class DetectionSection(TypedDict, total=False):
    taps: int
    bits: int
    threshold: float
    tap_span: int


class PacketSection(TypedDict, total=False):
    preamble_code_index: int
    preamble_symbol_repetitions: int
    sts_segment_length: int
    payload_bytes: int


class ConfigFile(TypedDict, total=False):
    config_version: Required[int]
    experiment: ExperimentSection
    channel: ChannelSection
    receiver: ReceiverSection
    attack: AttackSection
    protocol: ProtocolSection
    hop_table: HopTableSection
    detection: DetectionSection
    packet: PacketSection


def parse_range(text: str) -> tuple[float, ...]:
    """Inclusive `start:stop:step`; the step's sign follows the direction."""
    parts = text.split(":")
    if len(parts) == 1:
        return (float(parts[0]),)
    if len(parts) != 3:
        raise ValueError(f"Range {text!r} is not start:stop:step")
    start, stop, step = (float(p) for p in parts)
    if step == 0:
        raise ValueError(f"Range {text!r} has zero step")
    count = int(math.floor(abs(stop - start) / abs(step) + 1e-9))
    direction = 1.0 if stop >= start else -1.0
    return tuple(round(start + direction * abs(step) * i, 9) for i in range(count + 1))


def _grid(value, default: tuple[float, ...]) -> tuple[float, ...]:
    if value is None:
        return default
    if isinstance(value, str):
        return parse_range(value)
    if isinstance(value, (int, float)):
        return (float(value),)
    grid = tuple(float(v) for v in value)
    if not grid:
        raise ValueError("Grid is empty")
    return grid


def _check_keys(section: str, values: dict, shape: type):
    allowed = set(get_type_hints(shape))
    unknown = set(values) - allowed
    if unknown:
        raise ValueError(f"Unknown keys in {section}: {sorted(unknown)}")
    missing = set(getattr(shape, "__required_keys__", ())) - set(values)
    if missing:
        raise ValueError(f"Missing keys in {section}: {sorted(missing)}")


@dataclass(frozen=True)
class ExperimentConfig:
    trials: int = DEFAULT_TRIALS
    master_seed: int = 0
    mode: RangingMode = "classic"
    sir_db: tuple[float, ...] = DEFAULT_SIR_DB
    tsy_us: tuple[float, ...] = DEFAULT_TSY_US
    attack_enabled: bool = True
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    packet: PacketConfig = field(default_factory=PacketConfig.legitimate)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"Trial count must be >= 1, got {self.trials}")
        if not self.sir_db or not self.tsy_us:
            raise ValueError("SIR and T_sy grids must be non-empty")
        if self.mode not in ("classic", "hopping", "auto"):
            raise ValueError(f"Unknown ranging mode {self.mode}")
        if self.mode != "classic":
            self.protocol.hop_table.validate(min_safe_hop(self.packet, self.attack.packet))
        if self.detection.feature_bytes + 16 > self.packet.payload_bytes:
            raise ValueError(
                f"Final payload needs {self.detection.feature_bytes + 16} bytes, "
                f"packet carries {self.packet.payload_bytes}"
            )

    @property
    def true_distance_m(self) -> float:
        return self.channel.distance_m

    @property
    def success_threshold_m(self) -> float:
        return self.protocol.success_threshold_m

    def cell(self, sir_db: float, tsy_us: float) -> tuple[ChannelConfig, AttackConfig]:
        """Channel and attack configuration of one grid cell."""
        return (
            replace(self.channel, sir_db=sir_db),
            replace(self.attack, sir_db=sir_db, sync_time_s=tsy_us * 1e-6),
        )

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = {key: value for key, value in overrides.items() if value is not None}
        if "mode" in values:
            values["protocol"] = replace(self.protocol, mode=values["mode"])
        return replace(self, **values)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ValueError("Configuration must be a mapping")
    _check_keys("configuration", data, ConfigFile)
    if data["config_version"] != CONFIG_VERSION:
        raise ValueError(
            f"Unsupported config_version {data['config_version']}, expected {CONFIG_VERSION}"
        )
    sections = {
        "experiment": ExperimentSection,
        "channel": ChannelSection,
        "receiver": ReceiverSection,
        "attack": AttackSection,
        "protocol": ProtocolSection,
        "hop_table": HopTableSection,
        "detection": DetectionSection,
        "packet": PacketSection,
    }
    for name, shape in sections.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise ValueError(f"Section {name} must be a mapping")
        _check_keys(name, section, shape)

    experiment: ExperimentSection = data.get("experiment") or {}
    channel_section: ChannelSection = dict(data.get("channel") or {})
    attack_section: AttackSection = data.get("attack") or {}
    protocol_section: ProtocolSection = data.get("protocol") or {}
    hop_section: HopTableSection | None = data.get("hop_table")
    mode = experiment.get("mode", "classic")

    channel_values = {}
    if "rx_guard_us" in channel_section:
        channel_values["rx_guard_s"] = channel_section.pop("rx_guard_us") * 1e-6
    if "multipath" in channel_section:
        channel_values["multipath"] = tuple(
            (int(delay), float(gain)) for delay, gain in channel_section.pop("multipath")
        )
    channel_values.update(channel_section)

    attack_packet = {}
    if "spreading_factor" in attack_section:
        attack_packet["preamble_spreading_factor"] = attack_section["spreading_factor"]
    hop_table = (
        HopTable.from_range(
            hop_section["min_us"] * 1e-6, hop_section["max_us"] * 1e-6, hop_section.get("entries", 32)
        )
        if hop_section
        else HopTable.from_range(15e-6, 20e-6, 32)
    )
    protocol = ProtocolConfig(
        reply_time_s=protocol_section.get("reply_time_us", 300.0) * 1e-6,
        final_reply_time_s=protocol_section.get("final_reply_time_us", 300.0) * 1e-6,
        success_threshold_m=protocol_section.get("success_threshold_m", 5.0),
        mode=mode,
        hop_table=hop_table,
        hop_final=protocol_section.get("hop_final", False),
    )
    packet = PacketConfig.legitimate(**(data.get("packet") or {}))
    return ExperimentConfig(
        trials=experiment.get("trials", DEFAULT_TRIALS),
        master_seed=experiment.get("seed", 0),
        mode=mode,
        sir_db=_grid(experiment.get("sir_db"), DEFAULT_SIR_DB),
        tsy_us=_grid(experiment.get("tsy_us"), DEFAULT_TSY_US),
        attack_enabled=experiment.get("attack", True),
        channel=ChannelConfig(**channel_values),
        receiver=ReceiverConfig(**(data.get("receiver") or {})),
        attack=AttackConfig(
            target=attack_section.get("target", "response"),
            packet=PacketConfig.attack(**attack_packet),
            frame_attenuation_db=attack_section.get("frame_attenuation_db", 60.0),
            guess_hop_s=attack_section.get("guess_hop_us", 0.0) * 1e-6,
        ),
        protocol=protocol,
        detection=DetectionConfig(**(data.get("detection") or {})),
        packet=packet,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as handle:
        data = yaml.safe_load(handle)
    log.debug("loaded configuration from %s", path)
    return config_from_dict(data)


__all__ = [
    "CONFIG_VERSION",
    "DEFAULT_TRIALS",
    "FULL_TRIALS",
    "ConfigFile",
    "ExperimentConfig",
    "parse_range",
    "config_from_dict",
    "load_config",
]
