"""Affine user-device current model per 200 ms ranging block."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

BLOCK_S = 0.2


@dataclass(frozen=True)
class PowerModel:
    """I = idle + k_uwb * f_dyn + k_cnn * n_cnn + k_rnn * n_rnn  [mA].

    ``k_uwb`` is pinned so that static 5 Hz ranging with no inference draws
    the 30.8 mA least-squares reference current.
    """

    idle_ma: float = 8.0
    k_uwb: float = (30.8 - 8.0) / 5.0
    k_cnn: float = 0.12
    k_rnn: float = 0.25

    def block_current(self, f_dyn: float, n_cnn: float = 0, n_rnn: float = 0) -> float:
        if f_dyn < 0 or n_cnn < 0 or n_rnn < 0:
            raise ValueError("block_current inputs must be non-negative")
        if f_dyn > 5.0 + 1e-12:
            raise ValueError("f_dyn above the 5 Hz maximum")
        return self.idle_ma + self.k_uwb * f_dyn + self.k_cnn * n_cnn + self.k_rnn * n_rnn


@dataclass(frozen=True)
class BlockRecord:
    timestamp: float
    f_dyn: float
    idle_ma: float
    uwb_listen_ma: float
    nn_inference_ma: float

    @property
    def total_ma(self) -> float:
        return self.idle_ma + self.uwb_listen_ma + self.nn_inference_ma


@dataclass
class PowerLedger:
    model: PowerModel = field(default_factory=PowerModel)
    blocks: list[BlockRecord] = field(default_factory=list)

    def add_block(self, timestamp: float, f_dyn: float, n_cnn: float = 0, n_rnn: float = 0) -> BlockRecord:
        m = self.model
        m.block_current(f_dyn, n_cnn, n_rnn)  # validates inputs
        rec = BlockRecord(timestamp, f_dyn, m.idle_ma, m.k_uwb * f_dyn, m.k_cnn * n_cnn + m.k_rnn * n_rnn)
        self.blocks.append(rec)
        return rec

    @property
    def average_ma(self) -> float:
        if not self.blocks:
            return 0.0
        return sum(b.total_ma for b in self.blocks) / len(self.blocks)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block_timestamp", "f_dyn", "idle_mA", "uwb_listen_mA", "nn_inference_mA", "total_mA"])
            for b in self.blocks:
                w.writerow([f"{b.timestamp:.4f}", f"{b.f_dyn:.6g}", f"{b.idle_ma:.6g}", f"{b.uwb_listen_ma:.6g}",
                            f"{b.nn_inference_ma:.6g}", f"{b.total_ma:.6g}"])
