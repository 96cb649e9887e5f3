"""Effective CIR: the 200-tap window starting at the first-path index."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import CIR_LENGTH, CirFrame

ECIR_LENGTH = 200


@dataclass(frozen=True)
class ECir:
    values: np.ndarray
    anchor_id: int
    round_id: int = -1

    def __post_init__(self):
        if self.values.shape != (ECIR_LENGTH,):
            raise ValueError(f"eCIR must have exactly {ECIR_LENGTH} values")


def window(taps: np.ndarray, fp_index: int) -> np.ndarray:
    """Raw taps[fp_index : fp_index + 200], right zero-padded past the frame end."""
    if not 0 <= fp_index < CIR_LENGTH:
        raise ValueError("fp_index out of range")
    out = np.zeros(ECIR_LENGTH)
    seg = np.asarray(taps, dtype=float)[fp_index : fp_index + ECIR_LENGTH]
    out[: len(seg)] = seg
    return out


def normalize(values: np.ndarray) -> np.ndarray:
    """Divide by the window maximum; an all-zero window stays zero."""
    peak = float(np.max(values))
    if peak <= 0.0:
        return np.zeros_like(values)
    return values / peak


def extract_ecir(frame: CirFrame, round_id: int = -1) -> ECir:
    return ECir(normalize(window(frame.taps, frame.fp_index)), frame.anchor_id, round_id)


def ecir_matrix(frames: Sequence[CirFrame]) -> np.ndarray:
    """Stack the normalised eCIRs of several frames into an (N, 200) array."""
    if not frames:
        return np.zeros((0, ECIR_LENGTH))
    return np.stack([extract_ecir(f).values for f in frames])
