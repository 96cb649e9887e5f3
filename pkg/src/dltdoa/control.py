"""Regime decision, dynamic ranging frequency, healthy-message selection and
the IMU motion gate."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import TdoaMeasurement

P_TH = 0.5
F_DEFAULT_HZ = 5.0
F_MIN_HZ = 0.1
F_MAX_HZ = 5.0
MIN_ANCHORS_2D = 3
MOTION_STD_THRESHOLD = 0.1  # m/s^2, std of |accel| over the gate window
MIN_GATE_SAMPLES = 8


class Regime(str, enum.Enum):
    LOS = "predominantly_LOS"
    NLOS = "predominantly_NLOS"


class Verdict(str, enum.Enum):
    PARTIALLY_LOS = "partially_LOS"
    FULLY_NLOS = "fully_NLOS"


class Motion(str, enum.Enum):
    MOVING = "moving"
    STATIONARY = "stationary"


@dataclass
class RangingSchedule:
    f_dyn: float = F_DEFAULT_HZ
    next_ranging_time: float = 0.0
    gated_by_imu: bool = False

    def __post_init__(self):
        if not F_MIN_HZ <= self.f_dyn <= F_MAX_HZ:
            raise ValueError(f"f_dyn {self.f_dyn} outside [{F_MIN_HZ}, {F_MAX_HZ}]")


@dataclass(frozen=True)
class RegimeDecision:
    p_avg: float
    regime: Regime
    p_th: float = P_TH


@dataclass(frozen=True)
class SelectionResult:
    anchor_ids: tuple[int, ...]
    tdoas: tuple[TdoaMeasurement, ...]
    verdict: Verdict
    reference_id: int
    removed: tuple[int, ...] = ()


def mean_probability(ps: Sequence[float]) -> float:
    # fsum keeps the mean independent of summation order
    return math.fsum(ps) / len(ps)


def decide_regime(assessments, p_th: float = P_TH) -> RegimeDecision:
    """Average the filtered NLOS probabilities; LOS iff the mean is strictly below ``p_th``."""
    ps = [a.p_filtered for a in assessments]
    if not ps:
        raise ValueError("decide_regime needs at least one assessment")
    p_avg = mean_probability(ps)
    return RegimeDecision(p_avg, Regime.LOS if p_avg < p_th else Regime.NLOS, p_th)


def update_frequency(p_avg: float, p_th: float = P_TH, f_default: float = F_DEFAULT_HZ,
                     f_min: float = F_MIN_HZ, f_max: float = F_MAX_HZ) -> float:
    """f' = f / floor(p_th / p_avg), clamped to [f_min, f_max].

    Only valid in the LOS regime; ``p_avg == 0`` maps to ``f_min``.
    """
    if not 0.0 <= p_avg < p_th:
        raise ValueError(f"update_frequency requires 0 <= p_avg < p_th, got {p_avg}")
    if p_avg == 0.0:
        return f_min
    f_prime = f_default / math.floor(p_th / p_avg)
    if f_prime < f_min:
        return f_min
    if f_prime > f_max:
        return f_max
    return f_prime


def select_healthy(
    tdoas: Sequence[TdoaMeasurement],
    probabilities: dict[int, float],
    initiator_id: int,
    p_th: float = P_TH,
) -> SelectionResult:
    """Drop the most-likely-NLOS message until the survivors' mean is <= ``p_th``.

    ``probabilities`` maps every heard anchor (initiator included) to its
    filtered NLOS probability. Ties are removed higher anchor id first.
    If the initiator is eliminated the survivors are re-referenced to the
    surviving anchor with the lowest probability.
    """
    alive = sorted(probabilities, key=lambda a: (probabilities[a], a))
    removed = []
    while len(alive) >= MIN_ANCHORS_2D and mean_probability([probabilities[a] for a in alive]) > p_th:
        removed.append(alive.pop())
    verdict = Verdict.PARTIALLY_LOS if len(alive) >= MIN_ANCHORS_2D else Verdict.FULLY_NLOS

    by_id = {m.responder_id: m for m in tdoas}
    survivors = set(alive)
    if initiator_id in survivors:
        ref = initiator_id
        kept = tuple(m for m in tdoas if m.responder_id in survivors)
    else:
        ref = min(alive, key=lambda a: (probabilities[a], a)) if alive else initiator_id
        if ref in by_id:
            shift = by_id[ref].alpha
            kept = tuple(
                TdoaMeasurement(m.responder_id, m.alpha - shift, m.round_id, ref)
                for m in tdoas
                if m.responder_id in survivors and m.responder_id != ref
            )
        else:
            kept = ()
    return SelectionResult(tuple(sorted(alive)), kept, verdict, ref, tuple(removed))


def motion_gate(accel: np.ndarray, threshold: float = MOTION_STD_THRESHOLD) -> Motion:
    """Moving iff the std of |accel| over the window exceeds ``threshold``.

    Fewer than 8 samples fails safe to moving.
    """
    accel = np.asarray(accel, dtype=float)
    if accel.ndim != 2 or len(accel) < MIN_GATE_SAMPLES:
        return Motion.MOVING
    mag = np.linalg.norm(accel, axis=1)
    return Motion.MOVING if float(np.std(mag)) > threshold else Motion.STATIONARY
