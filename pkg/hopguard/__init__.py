from pathlib import Path

from hopguard.config import ExperimentConfig, load_config
from hopguard.harness import ExperimentResult, run_experiment, run_trial
from hopguard.sim.adversary import GhostPeakAttacker
from hopguard.sim.channel import Channel
from hopguard.sim.protocol import DsTwrExchange, RangingSession, TrialRecord
from hopguard.sim.receiver import Receiver


class HopGuard(object):
    """Simulation components of one experiment, wired from a single configuration."""

    def __init__(self, config: ExperimentConfig | None = None, debug: bool = False):
        self.config = config or ExperimentConfig()
        self.debug = debug

        kwargs = {"debug": debug}

        self.Channel = Channel(self.config.channel, **kwargs)
        self.Receiver = Receiver(self.config.receiver, self.config.packet, **kwargs)
        self.Attacker = (
            GhostPeakAttacker(self.config.attack, **kwargs) if self.config.attack_enabled else None
        )
        self.Exchange = DsTwrExchange(
            channel=self.Channel,
            receiver=self.Receiver,
            config=self.config.protocol,
            attacker=self.Attacker,
            detection=self.config.detection,
            **kwargs,
        )

    @classmethod
    def from_file(cls, path: str | Path, debug: bool = False) -> "HopGuard":
        return cls(load_config(path), debug=debug)

    def session(self, key: bytes, counter: int) -> RangingSession:
        return RangingSession(self.Exchange, key, counter, mode=self.config.mode, debug=self.debug)

    def trial(self, sir_db: float, tsy_us: float, trial: int = 0) -> TrialRecord:
        return run_trial(self.config, sir_db, tsy_us, trial, debug=self.debug)

    def experiment(self, **kwargs) -> ExperimentResult:
        return run_experiment(self.config, **kwargs)


__all__ = ["HopGuard"]
