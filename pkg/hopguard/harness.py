import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from functools import lru_cache
from multiprocessing import Pool, cpu_count
from pathlib import Path

import numpy as np
from cryptography.hazmat.primitives import hashes
from scipy.stats import chisquare
from tqdm import tqdm

from hopguard.analytics import AnalyticParams, p_success_exact, p_success_hoeffding, pdf_y
from hopguard.config import ExperimentConfig
from hopguard.sim import SPEED_OF_LIGHT
from hopguard.sim.adversary import GhostPeakAttacker
from hopguard.sim.channel import Channel
from hopguard.sim.detection import DetectionConfig
from hopguard.sim.phy import PacketConfig, StsCounterState, sts_keystream
from hopguard.sim.protocol import (
    SESSION_BLOCK,
    DsTwrExchange,
    HopTable,
    RangingTimestamps,
    SessionState,
    TrialRecord,
    compute_distance,
    min_safe_hop,
    select_hop_delay,
)
from hopguard.sim.receiver import CirSpectrum, Receiver, ReceiverConfig, leading_edge_detect

log = logging.getLogger(__name__)

THREADS_ENV = "UWB_HOPGUARD_THREADS"
GRID_COLUMNS = ["sir_db", "tsy_us", "trials", "successes", "success_rate", "failures", "detections"]
RECORD_COLUMNS = [
    "trial",
    "seed",
    "mode",
    "distance_m",
    "failure",
    "attack_success",
    "detection",
    "hop_delay_s",
    "attack_offset_s",
]


@dataclass
class CellResult:
    sir_db: float
    tsy_us: float
    trials: int = 0
    successes: int = 0
    failures: int = 0
    detections: int = 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    def add(self, record: TrialRecord):
        self.trials += 1
        self.successes += int(record.attack_success)
        self.failures += int(record.ranging_failed)
        self.detections += int(record.detection)

    def row(self) -> dict:
        return {
            "sir_db": self.sir_db,
            "tsy_us": self.tsy_us,
            "trials": self.trials,
            "successes": self.successes,
            "success_rate": f"{self.success_rate:.6f}",
            "failures": self.failures,
            "detections": self.detections,
        }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[CellResult] = field(default_factory=list)
    records: dict[tuple[float, float], list[TrialRecord]] = field(default_factory=dict)

    def cell(self, sir_db: float, tsy_us: float) -> CellResult:
        for cell in self.cells:
            if cell.sir_db == sir_db and cell.tsy_us == tsy_us:
                return cell
        raise ValueError(f"No grid cell at SIR {sir_db} dB, T_sy {tsy_us} us")


def trial_seed(master_seed: int, sir_db: float, tsy_us: float, trial: int) -> np.random.SeedSequence:
    """Seed derived from the cell values, so cells never depend on grid shape."""
    return np.random.SeedSequence(
        [
            master_seed & 0xFFFFFFFFFFFFFFFF,
            int(round(sir_db * 1000)) & 0xFFFFFFFF,
            int(round(tsy_us * 1000)) & 0xFFFFFFFF,
            trial,
        ]
    )


def seed_value(seed: np.random.SeedSequence) -> int:
    return int(seed.generate_state(1, dtype=np.uint64)[0])


def worker_count(requested: int | None = None) -> int:
    count = requested or cpu_count()
    cap = os.environ.get(THREADS_ENV)
    if cap:
        if not cap.isdigit() or int(cap) < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {cap!r}")
        count = min(count, int(cap))
    return max(1, count)


@lru_cache(maxsize=4)
def _receiver(config: ReceiverConfig, packet: PacketConfig, cir_dump: str | None) -> Receiver:
    return Receiver(config, packet, cir_dump=Path(cir_dump) if cir_dump else None)


def run_trial(
    cfg: ExperimentConfig,
    sir_db: float,
    tsy_us: float,
    trial: int,
    debug: bool = False,
    cir_dump: str | None = None,
) -> TrialRecord:
    """One DS-TWR round with fresh keys, counter and noise for this trial."""
    seed = trial_seed(cfg.master_seed, sir_db, tsy_us, trial)
    session_seed, link_seed = seed.spawn(2)
    rng = np.random.default_rng(session_seed)
    counter = StsCounterState(
        key=rng.bytes(16),
        counter=int.from_bytes(rng.bytes(16), "big"),
        segment_length=cfg.packet.sts_segment_length,
    )
    start = "hopping" if cfg.mode == "hopping" else "classic"
    initiator = SessionState("initiator", counter, start)
    responder = SessionState("responder", counter, start)

    channel_cfg, attack_cfg = cfg.cell(sir_db, tsy_us)
    receiver = (
        Receiver(cfg.receiver, cfg.packet, debug=True, cir_dump=Path(cir_dump) if cir_dump else None)
        if debug
        else _receiver(cfg.receiver, cfg.packet, cir_dump)
    )
    exchange = DsTwrExchange(
        channel=Channel(channel_cfg, debug=debug),
        receiver=receiver,
        config=cfg.protocol,
        attacker=GhostPeakAttacker(attack_cfg, debug=debug) if cfg.attack_enabled else None,
        detection=cfg.detection,
        debug=debug,
    )
    record = exchange.run(initiator, responder, link_seed, trial=trial, seed=seed_value(seed))
    if not debug:
        record.events = []
    return record


def _run_task(task: tuple) -> TrialRecord:
    return run_trial(*task)


def config_fingerprint(cfg: ExperimentConfig) -> str:
    """SHA-256 over every setting that shapes a cell's records except the cell values and trial count."""
    settings = (
        cfg.master_seed,
        cfg.mode,
        cfg.attack_enabled,
        cfg.channel,
        cfg.receiver,
        cfg.attack,
        cfg.protocol,
        cfg.detection,
        cfg.packet,
    )
    digest = hashes.Hash(hashes.SHA256())
    digest.update(repr(settings).encode())
    return digest.finalize().hex()


def _cell_path(records_dir: Path, sir_db: float, tsy_us: float) -> Path:
    return records_dir / f"cell_sir{sir_db:+.3f}_tsy{tsy_us:+.3f}.csv"


def write_records(records: list[TrialRecord], path: Path, fingerprint: str | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        if fingerprint:
            handle.write(f"# fingerprint {fingerprint}\n")
        writer = csv.DictWriter(handle, fieldnames=RECORD_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(
                {
                    "trial": record.trial,
                    "seed": record.seed,
                    "mode": record.mode,
                    "distance_m": "" if record.distance_m is None else f"{record.distance_m:.6f}",
                    "failure": record.failure or "",
                    "attack_success": int(record.attack_success),
                    "detection": record.detection,
                    "hop_delay_s": record.hop_delay,
                    "attack_offset_s": "" if record.attack_offset_s is None else record.attack_offset_s,
                }
            )


def records_fingerprint(path: Path) -> str | None:
    with open(path) as handle:
        first = handle.readline()
    if first.startswith("# fingerprint "):
        return first.split()[2]
    return None


def read_records(path: Path) -> list[TrialRecord]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(line for line in handle if not line.startswith("#")))
    return [
        TrialRecord(
            trial=int(row["trial"]),
            seed=int(row["seed"]),
            mode=row["mode"],
            distance_m=float(row["distance_m"]) if row["distance_m"] else None,
            failure=row["failure"] or None,
            attack_success=row["attack_success"] == "1",
            detection=int(row["detection"]),
            hop_delay=float(row["hop_delay_s"]),
            attack_offset_s=float(row["attack_offset_s"]) if row["attack_offset_s"] else None,
        )
        for row in rows
    ]


def run_experiment(
    cfg: ExperimentConfig,
    workers: int | None = None,
    records_dir: Path | None = None,
    progress: bool = True,
    cir_dump: Path | None = None,
) -> ExperimentResult:
    """
    Run every (SIR, T_sy) cell. Cells whose record file already holds the
    configured number of trials under the same configuration fingerprint
    are loaded instead of re-run.
    """
    workers = worker_count(workers)
    result = ExperimentResult(config=cfg)
    fingerprint = config_fingerprint(cfg)
    pool = Pool(workers) if workers > 1 else None
    try:
        for sir_db in cfg.sir_db:
            for tsy_us in cfg.tsy_us:
                path = _cell_path(Path(records_dir), sir_db, tsy_us) if records_dir else None
                records = []
                if path and path.exists():
                    if records_fingerprint(path) == fingerprint:
                        records = read_records(path)
                    else:
                        log.warning("records in %s come from another configuration; re-running", path)
                if len(records) != cfg.trials:
                    dump = str(Path(cir_dump) / f"sir{sir_db:+.3f}_tsy{tsy_us:+.3f}") if cir_dump else None
                    tasks = [(cfg, sir_db, tsy_us, trial, False, dump) for trial in range(cfg.trials)]
                    mapped = pool.imap(_run_task, tasks, chunksize=16) if pool else map(_run_task, tasks)
                    records = list(
                        tqdm(
                            mapped,
                            total=cfg.trials,
                            desc=f"SIR {sir_db:+.1f} dB T_sy {tsy_us:+.2f} us",
                            disable=not progress,
                            dynamic_ncols=True,
                        )
                    )
                    if path:
                        write_records(records, path, fingerprint)
                else:
                    log.info("resumed cell SIR %s dB T_sy %s us from %s", sir_db, tsy_us, path)

                cell = CellResult(sir_db=sir_db, tsy_us=tsy_us)
                for record in records:
                    cell.add(record)
                result.cells.append(cell)
                result.records[(sir_db, tsy_us)] = records
                log.info(
                    "SIR %s dB T_sy %s us: %d/%d successes",
                    sir_db,
                    tsy_us,
                    cell.successes,
                    cell.trials,
                )
    finally:
        if pool:
            pool.close()
            pool.join()
    return result


def write_grid_csv(result: ExperimentResult, path: Path | None, deterministic: bool = False, stream=None):
    """Grid CSV; a timestamp comment line leads unless `deterministic`."""
    handle = open(path, "w", newline="") if path else stream
    try:
        if not deterministic:
            stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
            handle.write(
                f"# generated {stamp} mode={result.config.mode} "
                f"seed={result.config.master_seed} trials are per grid cell\n"
            )
        writer = csv.DictWriter(handle, fieldnames=GRID_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for cell in result.cells:
            writer.writerow(cell.row())
    finally:
        if path:
            handle.close()


def _check_aes_vector() -> bool:
    return sts_keystream(bytes(16), 0, 1).hex() == "66e94bd4ef8a2c3b884cfa59ca342b2e"


def _check_symmetric_range() -> bool:
    tof = 10.0 / SPEED_OF_LIGHT
    reply = 300e-6
    ts = RangingTimestamps(reply + 2 * tof, reply + 2 * tof, reply, reply)
    return abs(compute_distance(ts) - 10.0) < 1e-6


def _check_hop_determinism() -> bool:
    table = HopTable.from_range(15e-6, 20e-6, 32)
    return all(select_hop_delay(c, table) == select_hop_delay(c, table) for c in range(1000))


def _check_pdf_normalised() -> bool:
    params = AnalyticParams(64, 8.0, 1.0, 0.0, 1e-8, 0.0, 5e-8, -2.5e-6, 2.5e-6)
    pdf = pdf_y(params)
    return abs(pdf.integral(pdf.lo, pdf.hi) - 1.0) < 1e-12


def _check_hoeffding_dominates() -> bool:
    for n in (16, 64, 256):
        for ratio in range(1, n + 1):
            params = AnalyticParams(n, float(ratio), 1.0, 0.0, 1e-8, 0.0, 5e-8, 0.0, 5e-6)
            if p_success_exact(params) > p_success_hoeffding(params) + 1e-15:
                return False
    return True


def _check_counter_monotonic() -> bool:
    state = SessionState("initiator", StsCounterState(bytes(16), 5))
    seen = []
    for _ in range(3):
        state.next_sts()
        seen.append(state.counter.counter)
    state.abort_round(1)
    seen.append(state.counter.counter)
    return seen == sorted(set(seen)) and seen[-1] % SESSION_BLOCK == 0


def _check_hop_table_is_safe() -> bool:
    cfg = ExperimentConfig()
    safe = min_safe_hop(cfg.packet, cfg.attack.packet)
    return cfg.protocol.hop_table.t_min_hop >= safe


def _check_pdf_plateau() -> bool:
    params = AnalyticParams(64, 8.0, 1.0, 0.0, 1e-8, 0.0, 5e-8, -2.5e-6, 2.5e-6)
    return abs(float(pdf_y(params)(0.0)) * params.dt2 - 1.0) < 1e-9


def _check_detector_defaults() -> bool:
    cfg = DetectionConfig()
    return (cfg.taps, cfg.bits, cfg.threshold) == (16, 8, 0.9) and cfg.feature_bytes == 16


def _check_leading_edge_oracle() -> bool:
    rng = np.random.default_rng(0)
    cfg = ReceiverConfig(btw_samples=60)
    for _ in range(200):
        trace = rng.rayleigh(size=201)
        trace[rng.integers(201)] += rng.uniform(0, 4)
        floor = cfg.noise_floor_sigmas * np.median(trace) / np.sqrt(2 * np.log(2))
        p_rms = np.sqrt(np.mean(trace**2))
        threshold = max(trace.max() * cfg.mpep_threshold, p_rms * cfg.papr_threshold, floor)
        peak = int(np.argmax(trace))
        window = np.flatnonzero(trace[max(0, peak - cfg.btw_samples) : peak] > threshold)
        expected = max(0, peak - cfg.btw_samples) + int(window[0]) if window.size else peak
        if leading_edge_detect(CirSpectrum.from_trace(trace), cfg).first_path_sample != expected:
            return False
    return True


def _check_hop_uniformity() -> bool:
    table = HopTable.from_range(15e-6, 20e-6, 32)
    index = {value: i for i, value in enumerate(table.entries)}
    counts = np.bincount([index[select_hop_delay(c, table)] for c in range(10_000)], minlength=32)
    return chisquare(counts).pvalue > 1e-3


def _check_clean_range() -> bool:
    cfg = ExperimentConfig(trials=1, attack_enabled=False)
    cfg = replace(cfg, channel=replace(cfg.channel, snr_db=math.inf))
    record = run_trial(cfg, cfg.sir_db[0], cfg.tsy_us[0], 0)
    return record.distance_m is not None and abs(record.distance_m - cfg.true_distance_m) <= 0.30


SELFTEST_CHECKS = {
    "sts keystream matches AES-128 zero-key vector": _check_aes_vector,
    "symmetric DS-TWR recovers 10 m": _check_symmetric_range,
    "hop selection is deterministic": _check_hop_determinism,
    "trapezoid density integrates to one": _check_pdf_normalised,
    "exact tail never exceeds Hoeffding bound": _check_hoeffding_dominates,
    "noise-free link ranges within 0.30 m": _check_clean_range,
    "session counters only move forward": _check_counter_monotonic,
    "hop table starts above the minimum safe hop": _check_hop_table_is_safe,
    "trapezoid plateau equals 1/dt2": _check_pdf_plateau,
    "detector defaults are 16 taps of 8 bits at 0.9": _check_detector_defaults,
    "leading-edge search matches a direct scan": _check_leading_edge_oracle,
    "hop selection is uniform over the table": _check_hop_uniformity,
}


def selftest() -> list[tuple[str, bool]]:
    results = []
    for name, check in SELFTEST_CHECKS.items():
        try:
            passed = bool(check())
        except ValueError as error:
            log.error("%s raised %s", name, error)
            passed = False
        results.append((name, passed))
    return results


__all__ = [
    "CellResult",
    "ExperimentResult",
    "GRID_COLUMNS",
    "THREADS_ENV",
    "trial_seed",
    "worker_count",
    "run_trial",
    "run_experiment",
    "config_fingerprint",
    "write_records",
    "records_fingerprint",
    "read_records",
    "write_grid_csv",
    "selftest",
]
