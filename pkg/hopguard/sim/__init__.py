import logging
from typing import Any, Literal, TypeAlias

SPEED_OF_LIGHT = 299_792_458.0
CHIP_RATE = 499.2e6
SAMPLES_PER_CHIP = 4
SAMPLE_RATE = CHIP_RATE * SAMPLES_PER_CHIP

Role: TypeAlias = Literal["initiator", "responder"]

RangingMode: TypeAlias = Literal["classic", "hopping", "auto"]

PacketRole: TypeAlias = Literal["legitimate", "attack"]

TargetMessage: TypeAlias = Literal["response", "final"]

MessageKind: TypeAlias = Literal["poll", "response", "final"]

FailureCode: TypeAlias = Literal["sync", "sfd", "phr", "crc", "window"]

log = logging.getLogger(__name__)


class ReceptionError(ValueError):
    """A reception stage failed; `code` tells which one."""

    def __init__(self, code: FailureCode, message: str):
        super().__init__(message)
        self.code: FailureCode = code


class SimComponent(object):
    """
    Base for simulation components. Holds the debug flag and
    emits stage traces through the module logger when it is set.
    """

    component_name = "component"

    def __init__(self, debug: bool = False):
        self.debug = debug

    def log(self, stage: str, **fields: Any):
        if self.debug:
            detail = " ".join(f"{key}={value}" for key, value in fields.items())
            log.info("%s %s %s", self.component_name, stage, detail)


__all__ = [
    "SPEED_OF_LIGHT",
    "CHIP_RATE",
    "SAMPLES_PER_CHIP",
    "SAMPLE_RATE",
    "Role",
    "RangingMode",
    "PacketRole",
    "TargetMessage",
    "MessageKind",
    "FailureCode",
    "ReceptionError",
    "SimComponent",
]
