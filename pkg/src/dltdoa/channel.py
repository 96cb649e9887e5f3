"""Per-anchor CIR frames and TDOA measurements for each ranging round."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import SPEED_OF_LIGHT, USER_HEIGHT_M
from .scenario import Cluster, Obstacle

CIR_LENGTH = 1016
TAP_SPACING_S = 1e-9


class LinkState(str, enum.Enum):
    LOS = "LOS"
    NLOS = "NLOS"


def round_rng(master_seed: int, round_id: int) -> np.random.Generator:
    """Independent generator per round, derived from (master seed, round id)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & (2**63 - 1), int(round_id)]))


def _segment_hits_rect(p0, p1, rect) -> bool:
    """Liang-Barsky clip of the 2-D segment p0->p1 against an axis-aligned rectangle."""
    x0, y0 = p0
    dx, dy = p1[0] - x0, p1[1] - y0
    t_lo, t_hi = 0.0, 1.0
    for p, q in ((-dx, x0 - rect.x0), (dx, rect.x1 - x0), (-dy, y0 - rect.y0), (dy, rect.y1 - y0)):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            t_lo = max(t_lo, r)
        else:
            t_hi = min(t_hi, r)
        if t_lo > t_hi:
            return False
    return True


def los_state(
    cluster: Cluster, obstacles: Sequence[Obstacle], user_pos, t: float
) -> list[LinkState]:
    """Per-anchor link state; NLOS iff the anchor-user segment crosses an active obstacle.

    Obstacles are extruded to full height, so the 3-D test reduces to the
    segment's ground projection.
    """
    if not cluster.region.contains(float(user_pos[0]), float(user_pos[1])):
        raise ValueError(f"user position {tuple(user_pos)} outside the cluster region")
    active = [o.footprint for o in obstacles if o.active(t)]
    states = []
    for a in cluster.anchors:
        blocked = any(_segment_hits_rect(a.position[:2], user_pos, r) for r in active)
        states.append(LinkState.NLOS if blocked else LinkState.LOS)
    return states


@dataclass(frozen=True)
class CirConfig:
    noise_scale: float = 1e-3
    fp_range: tuple[int, int] = (700, 750)
    tau_los: float = 15.0
    tau_nlos: float = 40.0
    los_peaks: tuple[int, int] = (2, 4)
    nlos_peaks: tuple[int, int] = (6, 12)
    nlos_fp_attenuation: tuple[float, float] = (0.2, 0.5)
    nlos_peak_delay: tuple[int, int] = (5, 30)


@dataclass(frozen=True)
class CirFrame:
    anchor_id: int
    taps: np.ndarray
    fp_index: int
    max_noise: float
    label: LinkState

    def __post_init__(self):
        if len(self.taps) != CIR_LENGTH:
            raise ValueError(f"CIR must have {CIR_LENGTH} taps")
        if not 0 <= self.fp_index < CIR_LENGTH:
            raise ValueError("fp_index out of range")
        if not self.max_noise > 0:
            raise ValueError("max_noise must be positive")


# first-path pulse shape at offsets -1..+2 taps
_PULSE = np.array([0.25, 1.0, 0.45, 0.1])


def _add_pulse(taps: np.ndarray, index: int, amplitude: float) -> None:
    for k, w in enumerate(_PULSE):
        j = index - 1 + k
        if 0 <= j < len(taps):
            taps[j] += amplitude * w


def synthesize_cir(
    state: LinkState,
    true_distance: float,
    seed: int | np.random.Generator,
    config: CirConfig = CirConfig(),
    anchor_id: int = 0,
) -> CirFrame:
    """Two-population synthetic CIR at 1 ns/tap.

    LOS: the first path is the strongest tap, a few weak multipath echoes and
    a fast exponential tail. NLOS: attenuated first path, strongest echo
    5-30 taps later, dense multipath and a slow tail.
    """
    if not true_distance > 0:
        raise ValueError("distance must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = CIR_LENGTH
    fp = int(rng.integers(config.fp_range[0], config.fp_range[1] + 1))
    amp = float(np.clip(1.0 / true_distance, 0.05, 1.0))
    noise = rng.rayleigh(config.noise_scale, size=n)
    signal = np.zeros(n)
    lag = np.arange(n) - fp

    if state is LinkState.LOS:
        _add_pulse(signal, fp, amp)
        tail = lag >= 3
        signal[tail] += 0.12 * amp * np.exp(-lag[tail] / config.tau_los) * rng.rayleigh(1.0, tail.sum())
        for _ in range(int(rng.integers(config.los_peaks[0], config.los_peaks[1] + 1))):
            d = int(rng.integers(4, 61))
            _add_pulse(signal, fp + d, amp * rng.uniform(0.15, 0.45) * math.exp(-d / config.tau_los))
        # keep the first path dominant whatever the echoes summed to
        other = np.max(np.delete(signal, range(fp - 1, fp + 3)))
        if other >= 0.9 * signal[fp]:
            signal[fp - 1 : fp + 3] *= other / (0.9 * signal[fp])
    else:
        att = rng.uniform(*config.nlos_fp_attenuation)
        _add_pulse(signal, fp, amp * att)
        tail = lag >= 1
        signal[tail] += 0.15 * amp * np.exp(-lag[tail] / config.tau_nlos) * rng.rayleigh(1.0, tail.sum())
        for _ in range(int(rng.integers(config.nlos_peaks[0], config.nlos_peaks[1] + 1))):
            d = int(rng.integers(2, 121))
            _add_pulse(signal, fp + d, amp * rng.uniform(0.1, 0.5) * math.exp(-d / config.tau_nlos))
        delay = int(rng.integers(config.nlos_peak_delay[0], config.nlos_peak_delay[1] + 1))
        peak = fp + delay
        _add_pulse(signal, peak, amp * rng.uniform(0.6, 1.0))
        other = np.max(np.delete(signal, range(peak - 1, peak + 3)))
        if other >= 0.9 * signal[peak]:
            signal[peak] = other / 0.9

    taps = signal + noise
    max_noise = float(np.max(noise[: fp - 2]))
    return CirFrame(anchor_id, taps, fp, max_noise, state)


@dataclass(frozen=True)
class ChannelConfig:
    sigma_los_s: float = 0.1e-9
    sigma_nlos_s: float = 0.5e-9
    nlos_bias_mean_s: float = 1.0e-9
    outage_los: float = 0.02
    outage_nlos: float = 0.25
    clock_noise_s: float = 0.0
    user_height_m: float = USER_HEIGHT_M
    cir: CirConfig = field(default_factory=CirConfig)
    synthesize_frames: bool = True

    @classmethod
    def noiseless(cls, **kw) -> "ChannelConfig":
        return cls(sigma_los_s=0.0, sigma_nlos_s=0.0, nlos_bias_mean_s=0.0,
                   outage_los=0.0, outage_nlos=0.0, **kw)


@dataclass(frozen=True)
class TdoaMeasurement:
    """Arrival-time difference of ``responder_id`` minus ``reference_id``, seconds."""

    responder_id: int
    alpha: float
    round_id: int = -1
    reference_id: int = 1


@dataclass(frozen=True)
class RangingRound:
    round_id: int
    timestamp: float
    frames: dict[int, CirFrame]
    tdoas: list[TdoaMeasurement]
    states: dict[int, LinkState] = field(default_factory=dict)

    @property
    def dropped(self) -> bool:
        """True when the initiator was not heard, so no TDOA could be formed."""
        return not self.tdoas


def anchor_distances(cluster: Cluster, user_pos, user_height: float = USER_HEIGHT_M) -> np.ndarray:
    p = np.array([user_pos[0], user_pos[1], user_height], dtype=float)
    return np.linalg.norm(cluster.positions - p, axis=1)


def measure_round(
    cluster: Cluster,
    user_pos,
    states: Sequence[LinkState],
    config: ChannelConfig,
    seed: int,
    round_id: int = 0,
    timestamp: float = 0.0,
) -> RangingRound:
    """One DL-TDOA round as heard by the user device.

    Each anchor's arrival time carries Gaussian error, plus an exponential
    excess delay when NLOS; TDOAs are arrival differences to the initiator.
    If the initiator is in outage the round has no TDOAs (dropped).
    """
    rng = round_rng(seed, round_id)
    d = anchor_distances(cluster, user_pos, config.user_height_m)
    m = cluster.size
    u_out = rng.random(m)
    noise = rng.standard_normal(m)
    bias = rng.exponential(1.0, m)
    clock = rng.standard_normal(m)
    frame_seeds = rng.integers(0, 2**63 - 1, size=m)

    arrival = d / SPEED_OF_LIGHT
    received = []
    for i, (a, st) in enumerate(zip(cluster.anchors, states)):
        if st is LinkState.NLOS:
            p_out, sigma = config.outage_nlos, config.sigma_nlos_s
            arrival[i] += config.nlos_bias_mean_s * bias[i]
        else:
            p_out, sigma = config.outage_los, config.sigma_los_s
        arrival[i] += sigma * noise[i] + config.clock_noise_s * clock[i]
        received.append(u_out[i] >= p_out)

    frames = {}
    if config.synthesize_frames:
        for i, a in enumerate(cluster.anchors):
            if received[i]:
                frames[a.id] = synthesize_cir(
                    states[i], float(d[i]), np.random.default_rng(int(frame_seeds[i])),
                    config.cir, anchor_id=a.id,
                )
    tdoas = []
    if received[0]:
        ref = cluster.initiator.id
        for i in range(1, m):
            if received[i]:
                tdoas.append(TdoaMeasurement(cluster.anchors[i].id, float(arrival[i] - arrival[0]), round_id, ref))
    return RangingRound(
        round_id, timestamp, frames, tdoas,
        {a.id: s for a, s in zip(cluster.anchors, states) if received[cluster.index_of(a.id)]},
    )


CSV_HEADER = ["round_id", "anchor_id", "fp_index", "max_noise", "label"] + [f"tap_{i}" for i in range(CIR_LENGTH)]


def write_cir_csv(path: str | Path, rows: Iterable[tuple[int, CirFrame]]) -> int:
    """Write (round_id, frame) pairs in the CIR dump format; returns the row count."""
    count = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for round_id, fr in rows:
            w.writerow(
                [round_id, fr.anchor_id, fr.fp_index, f"{fr.max_noise:.6e}", fr.label.value]
                + [f"{v:.6e}" for v in fr.taps]
            )
            count += 1
    return count


def read_cir_csv(path: str | Path) -> list[tuple[int, CirFrame]]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: not a CIR corpus (unexpected header)")
        for lineno, row in enumerate(r, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} columns, got {len(row)}")
            try:
                taps = np.array(row[5:], dtype=float)
                frame = CirFrame(int(row[1]), taps, int(row[2]), float(row[3]), LinkState(row[4]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append((int(row[0]), frame))
    return out


def generate_corpus(cluster: Cluster, count: int, seed: int, config: CirConfig = CirConfig()):
    """``count`` LOS and ``count`` NLOS labelled frames at random user positions."""
    rng = np.random.default_rng(seed)
    region = cluster.region
    for i in range(count):
        for state in (LinkState.LOS, LinkState.NLOS):
            x = rng.uniform(region.x0, region.x1)
            y = rng.uniform(region.y0, region.y1)
            k = int(rng.integers(cluster.size))
            a = cluster.anchors[k]
            d = float(anchor_distances(cluster, (x, y))[k])
            fr = synthesize_cir(state, d, np.random.default_rng(int(rng.integers(2**63 - 1))), config, a.id)
            yield i, fr
