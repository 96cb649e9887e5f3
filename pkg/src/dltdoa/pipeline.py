"""Per-tick orchestration of the adaptive localization flow and its baselines.

Every 62.5 ms tick runs, in order: the IMU motion gate, an optional ranging
round (CNN assessment, regime branch, frequency update or healthy
selection, least squares), the RNN sequence update and prediction, and the
power accounting. Exactly one position estimate is emitted per tick.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import TICK_S
from .channel import ChannelConfig, LinkState, TdoaMeasurement, los_state, measure_round
from .control import (
    F_DEFAULT_HZ, P_TH, Motion, Regime, Verdict, decide_regime, motion_gate, select_healthy, update_frequency,
)
from .ecir import extract_ecir
from .localizer import LocalizationError, PositionEstimate, Source, augmented_row, solve_tdoa
from .nlos import NlosPredictor
from .power import BLOCK_S, PowerLedger, PowerModel
from .rnn import N_IN, FeatureHistory, PredictionWindow, RnnPredictor, generate_sequence
from .scenario import Scenario, synthesize_imu

log = logging.getLogger(__name__)

GATE_WINDOW = 16  # ticks = 1 s of IMU


class Variant(str, enum.Enum):
    PROPOSED = "proposed"
    BASELINE_STATIC_LS = "baseline_static_ls"
    BASELINE_KF = "baseline_kf"


class MissingModelError(ValueError):
    pass


class ScenarioMismatchError(ValueError):
    pass


@dataclass
class Models:
    nlos: NlosPredictor | None = None
    rnn: RnnPredictor | None = None


@dataclass(frozen=True)
class RoundEvent:
    timestamp: float
    round_id: int
    p_avg: float | None
    regime: str | None
    verdict: str | None
    f_dyn: float
    n_used: int
    dropped: bool


@dataclass
class RunMetrics:
    variant: str
    scenario: str
    fingerprint: str
    seed: int
    timestamps: np.ndarray
    truth: np.ndarray
    estimates: np.ndarray
    sources: list[str]
    f_dyn: np.ndarray  # per tick, 0 while gated
    rounds: list[RoundEvent]
    ledger: PowerLedger

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.estimates - self.truth, axis=1)

    @property
    def rmse_m(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))

    @property
    def mean_error_cm(self) -> float:
        return 100.0 * float(np.mean(self.errors))

    @property
    def mean_current_ma(self) -> float:
        return self.ledger.average_ma

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def source_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.sources:
            out[s] = out.get(s, 0) + 1
        return dict(sorted(out.items()))

    def summary(self) -> dict:
        regimes = [r.regime for r in self.rounds if r.regime is not None]
        return {
            "variant": self.variant,
            "scenario": self.scenario,
            "scenario_fingerprint": self.fingerprint,
            "seed": self.seed,
            "ticks": len(self.timestamps),
            "rmse_m": round(self.rmse_m, 9),
            "mean_error_cm": round(self.mean_error_cm, 9),
            "mean_current_mA": round(self.mean_current_ma, 9),
            "ranging_rounds": self.n_rounds,
            "dropped_rounds": sum(r.dropped for r in self.rounds),
            "los_regime_rounds": regimes.count(Regime.LOS.value),
            "nlos_regime_rounds": regimes.count(Regime.NLOS.value),
            "fully_nlos_rounds": sum(r.verdict == Verdict.FULLY_NLOS.value for r in self.rounds),
            "mean_f_dyn_hz": round(float(np.mean(self.f_dyn)), 9),
            "sources": self.source_counts(),
        }

    def write(self, out_dir: str | Path) -> None:
        """Per-tick CSV, JSON summary, frequency timeline and power ledger."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        err = self.errors
        with open(out / "ticks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "truth_x", "truth_y", "est_x", "est_y", "source", "error_m", "f_dyn"])
            for i, t in enumerate(self.timestamps):
                w.writerow([f"{t:.4f}", f"{self.truth[i, 0]:.6f}", f"{self.truth[i, 1]:.6f}",
                            f"{self.estimates[i, 0]:.6f}", f"{self.estimates[i, 1]:.6f}",
                            self.sources[i], f"{err[i]:.6f}", f"{self.f_dyn[i]:.6g}"])
        with open(out / "frequency_timeline.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "progress", "round_id", "p_avg", "regime", "verdict", "f_dyn"])
            span = max(float(self.timestamps[-1]), 1e-9) if len(self.timestamps) else 1.0
            for r in self.rounds:
                w.writerow([f"{r.timestamp:.4f}", f"{r.timestamp / span:.6f}", r.round_id,
                            "" if r.p_avg is None else f"{r.p_avg:.6g}", r.regime or "", r.verdict or "",
                            f"{r.f_dyn:.6g}"])
        self.ledger.to_csv(out / "power.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


class _ConstantVelocityKF:
    """Constant-velocity Kalman filter on (x, y, vx, vy) with position fixes."""

    def __init__(self, q: float = 0.5, r: float = 0.05):
        self.q, self.r = q, r
        self.x: np.ndarray | None = None
        self.P = np.eye(4)

    def predict(self, dt: float) -> None:
        if self.x is None:
            return
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        G = np.array([[0.5 * dt**2, 0], [0, 0.5 * dt**2], [dt, 0], [0, dt]])
        self.x = F @ self.x
        self.P = F @ self.P @ F.T + self.q**2 * G @ G.T

    def update(self, z: np.ndarray) -> None:
        if self.x is None:
            self.x = np.array([z[0], z[1], 0.0, 0.0])
            self.P = np.diag([self.r**2, self.r**2, 1.0, 1.0])
            return
        H = np.zeros((2, 4))
        H[0, 0] = H[1, 1] = 1.0
        S = H @ self.P @ H.T + self.r**2 * np.eye(2)
        K = self.P @ H.T @ np.linalg.inv(S)
        self.x = self.x + K @ (z - H @ self.x)
        self.P = (np.eye(4) - K @ H) @ self.P

    @property
    def position(self) -> np.ndarray | None:
        return None if self.x is None else self.x[:2].copy()


def _link_states(sc: Scenario, pos: np.ndarray, t: float) -> list[LinkState]:
    return los_state(sc.cluster, sc.obstacles, pos, t)


FIX_MARGIN_M = 1.0


def _solve(sc: Scenario, tdoas: Sequence[TdoaMeasurement], guess, t: float) -> PositionEstimate | None:
    if len(tdoas) < 2:
        return None
    try:
        fix = solve_tdoa(sc.cluster.anchors, tdoas, guess, t)
    except LocalizationError as exc:
        log.info("t=%.3f least squares failed: %s", t, exc)
        return None
    # biased ranges can put the least-squares minimum far out along a
    # hyperbola branch; such a fix is treated like a solver failure
    if not sc.cluster.region.contains(fix.x, fix.y, tol=FIX_MARGIN_M):
        log.info("t=%.3f least squares fix (%.2f, %.2f) outside the cluster region", t, fix.x, fix.y)
        return None
    return fix


def _measured_row(sc: Scenario, tdoas: Sequence[TdoaMeasurement], fix: PositionEstimate) -> np.ndarray:
    """TDOA row relative to the initiator; NaN for anchors not used in the fix."""
    xyz = sc.cluster.positions
    init = sc.cluster.initiator.id
    if any(m.reference_id != init for m in tdoas):
        # re-referenced survivors: synthesise the row from the fix itself
        return augmented_row(xyz, fix.xy)
    row = np.full(sc.cluster.size - 1, np.nan)
    for m in tdoas:
        row[sc.cluster.index_of(m.responder_id) - 1] = m.alpha
    return row


def _power_blocks(ledger: PowerLedger, times: np.ndarray, f_tick: np.ndarray, cnn: np.ndarray, rnn: np.ndarray,
                  duration: float) -> None:
    n_blocks = max(1, int(math.ceil(duration / BLOCK_S - 1e-9)))
    block = np.minimum((times / BLOCK_S + 1e-9).astype(int), n_blocks - 1)
    for b in range(n_blocks):
        sel = block == b
        f = float(np.mean(f_tick[sel])) if sel.any() else 0.0
        ledger.add_block(b * BLOCK_S, f, float(cnn[sel].sum()), float(rnn[sel].sum()))


def run(
    scenario: Scenario,
    variant: Variant | str,
    models: Models | None = None,
    seed: int | None = None,
    channel: ChannelConfig = ChannelConfig(),
    power: PowerModel = PowerModel(),
    record: list | None = None,
) -> RunMetrics:
    """Simulate one run. ``record`` (if given) collects (feature matrix, timestamp) per RNN call."""
    variant = Variant(variant)
    seed = scenario.seed if seed is None else int(seed)
    models = models or Models()
    if variant is Variant.PROPOSED and (models.nlos is None or models.rnn is None):
        raise MissingModelError("the proposed variant needs trained NLOS and RNN models")
    imu = synthesize_imu(scenario.trajectory, seed, scenario.imu)
    keep = imu.timestamps <= scenario.trajectory.t_start + scenario.duration + 1e-9
    times = imu.timestamps[keep]
    truth = scenario.trajectory.positions_at(times)
    n = len(times)
    est = np.zeros((n, 2))
    sources: list[str] = []
    f_tick = np.zeros(n)
    cnn_tick = np.zeros(n)
    rnn_tick = np.zeros(n)
    rounds: list[RoundEvent] = []
    cluster = scenario.cluster
    xyz = cluster.positions
    centroid = xyz[:, :2].mean(axis=0)

    f_dyn = F_DEFAULT_HZ
    next_time = float(times[0]) if n else 0.0
    gated_prev = False
    round_id = 0
    last_fix: np.ndarray | None = None
    lpf = models.nlos.new_state() if variant is Variant.PROPOSED else None
    rnn = models.rnn if variant is Variant.PROPOSED else None
    if rnn is not None:
        rnn.reset()
    history = FeatureHistory(cluster.size - 1)
    window: PredictionWindow | None = None
    kf = _ConstantVelocityKF() if variant is Variant.BASELINE_KF else None

    for k in range(n):
        t = float(times[k])
        # (a) IMU gate (proposed only; the baselines range at a static 5 Hz)
        gated = False
        if variant is Variant.PROPOSED:
            gated = motion_gate(imu.accel[max(0, k - GATE_WINDOW + 1) : k + 1]) is Motion.STATIONARY
            if gated_prev and not gated:
                next_time = t
            gated_prev = gated
        f_tick[k] = 0.0 if gated else f_dyn

        # (b) ranging round
        fix: PositionEstimate | None = None
        used: Sequence[TdoaMeasurement] = ()
        if not gated and t >= next_time - 1e-9:
            round_id += 1
            scheduled = next_time
            states = _link_states(scenario, truth[k], t)
            rr = measure_round(cluster, truth[k], states, channel, seed, round_id, t)
            p_avg = regime = verdict = None
            if variant is Variant.PROPOSED:
                ecirs = [extract_ecir(fr, round_id) for fr in rr.frames.values()]
                if ecirs and not rr.dropped:
                    assessments = models.nlos.assess(ecirs, lpf)
                    cnn_tick[k] += len(assessments)
                    decision = decide_regime(assessments)
                    p_avg, regime = decision.p_avg, decision.regime
                    if regime is Regime.LOS:
                        # until the predictor has a full input window nothing can
                        # bridge a longer gap, so the default rate is kept
                        f_dyn = update_frequency(p_avg) if window is not None else F_DEFAULT_HZ
                        used = rr.tdoas
                    else:
                        f_dyn = F_DEFAULT_HZ
                        sel = select_healthy(rr.tdoas, {a.anchor_id: a.p_filtered for a in assessments},
                                             cluster.initiator.id, P_TH)
                        verdict = sel.verdict
                        used = sel.tdoas if sel.verdict is Verdict.PARTIALLY_LOS else ()
            else:
                used = rr.tdoas
            guess = last_fix if last_fix is not None else centroid
            fix = _solve(scenario, used, guess, t)
            next_time = scheduled + 1.0 / f_dyn
            rounds.append(RoundEvent(t, round_id, p_avg, regime.value if regime else None,
                                     verdict.value if verdict else None, f_dyn, len(used), rr.dropped))

        # (c) estimate for this tick
        if variant is Variant.BASELINE_KF:
            kf.predict(TICK_S)
            if fix is not None:
                kf.update(fix.xy)
                last_fix = fix.xy
            pos = kf.position
            if pos is None:
                est[k], src = centroid, Source.HELD
            else:
                est[k], src = pos, (Source.LEAST_SQUARES if fix is not None else Source.KALMAN)
        elif fix is not None:
            est[k], src = fix.xy, Source.LEAST_SQUARES
            last_fix = fix.xy
            if rnn is not None:
                # predictions made before this fix must not be blended into later windows
                rnn.reset()
        elif variant is Variant.PROPOSED and window is not None and window.position_at(t) is not None:
            est[k], src = window.position_at(t), Source.RNN_PREDICTED
        else:
            held = last_fix if last_fix is not None else (est[k - 1] if k else centroid)
            est[k], src = held, Source.HELD
        sources.append(src.value)

        # (d) RNN sequence update and prediction
        if rnn is not None:
            row = _measured_row(scenario, used, fix) if fix is not None else augmented_row(xyz, est[k])
            history.add(t, row, "measured" if fix is not None else "augmented")
            if k >= N_IN - 1:
                seq = generate_sequence(history, imu, t, window, xyz)
                if record is not None:
                    record.append((seq.matrix, t))
                window = rnn.predict_positions(seq)
                rnn_tick[k] += 1
    ledger = PowerLedger(power)
    _power_blocks(ledger, times - times[0] if n else times, f_tick, cnn_tick, rnn_tick, scenario.duration)
    return RunMetrics(variant.value, scenario.name, scenario.fingerprint(), seed, times, truth, est, sources,
                      f_tick, rounds, ledger)


@dataclass(frozen=True)
class ComparisonRow:
    variant: str
    mean_error_cm: float
    rmse_m: float
    mean_current_ma: float
    error_delta_pct: float
    current_delta_pct: float

    def as_dict(self) -> dict:
        return {"variant": self.variant, "mean_error_cm": self.mean_error_cm, "rmse_m": self.rmse_m,
                "mean_current_mA": self.mean_current_ma, "error_delta_pct": self.error_delta_pct,
                "current_delta_pct": self.current_delta_pct}


def compare_summaries(summaries: Sequence[dict], reference: int = 0) -> list[ComparisonRow]:
    """Comparison table from run summaries, deltas in percent against ``summaries[reference]``."""
    if len(summaries) < 2:
        raise ValueError("compare needs at least two runs")
    base = summaries[reference]
    for s in summaries:
        if s["scenario_fingerprint"] != base["scenario_fingerprint"] or s["seed"] != base["seed"]:
            raise ScenarioMismatchError("runs were made on different scenarios or seeds")

    def pct(a: float, b: float) -> float:
        return 0.0 if a == b else 100.0 * (a - b) / b

    return [
        ComparisonRow(s["variant"], s["mean_error_cm"], s["rmse_m"], s["mean_current_mA"],
                      pct(s["mean_error_cm"], base["mean_error_cm"]),
                      pct(s["mean_current_mA"], base["mean_current_mA"]))
        for s in summaries
    ]


def compare(metrics: Sequence[RunMetrics], reference: int = 0) -> list[ComparisonRow]:
    """Table of (variant, error, current) with percentage deltas against ``metrics[reference]``."""
    return compare_summaries([m.summary() for m in metrics], reference)
