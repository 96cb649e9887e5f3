"""LSTM encoder-decoder localization predictor with augmented-TDOA feedback.

Feature rows (one per 62.5 ms tick) have the fixed column layout::

    [alpha_2 .. alpha_M (s) | accel x, y, z (m/s^2) | gyro x, y, z (rad/s)]

where alpha_j is the TDOA of responder j relative to the initiator.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import GRAVITY, TICK_S
from .channel import ChannelConfig
from .localizer import augmented_row, solve_rows
from .nn import Adam, EncoderDecoder, mean_squared_error
from .nn.checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .scenario import Cluster, ImuStream, Trajectory, random_walk, synthesize_imu

log = logging.getLogger(__name__)

N_IN = 16
N_OUT = 5
LSTM_UNITS = (32, 32, 32, 64)
HEAD_UNITS = 64
OUTPUT_LPF_WEIGHT = 0.5

# input scaling of the encoded features
POS_SCALE_M = 1.0
ACCEL_SCALE = 10.0
GYRO_SCALE = 10.0


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSequence:
    matrix: np.ndarray  # (N_in, (M-1) + 6)
    timestamps: np.ndarray  # (N_in,)

    @property
    def n_responders(self) -> int:
        return self.matrix.shape[1] - 6


@dataclass(frozen=True)
class PredictionWindow:
    """Predicted (x, y) for ticks ``base_timestamp + (k+1) * TICK_S``, k < N_out."""

    positions: np.ndarray
    base_timestamp: float

    @property
    def timestamps(self) -> np.ndarray:
        return self.base_timestamp + TICK_S * np.arange(1, len(self.positions) + 1)

    def position_at(self, t: float) -> np.ndarray | None:
        k = int(round((t - self.base_timestamp) / TICK_S)) - 1
        if 0 <= k < len(self.positions) and abs(self.base_timestamp + (k + 1) * TICK_S - t) < 1e-6:
            return self.positions[k]
        return None


@dataclass
class FeatureHistory:
    """Time-ordered TDOA rows (measured or augmented); NaN marks a missing anchor."""

    n_responders: int
    times: list[float] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)

    def add(self, timestamp: float, values, kind: str = "measured") -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_responders,):
            raise ValueError(f"row must have {self.n_responders} TDOA values")
        if self.times and timestamp < self.times[-1]:
            raise ValueError("rows must be added in time order")
        self.times.append(float(timestamp))
        self.rows.append(values)
        self.kinds.append(kind)

    def latest_at(self, t: float) -> np.ndarray | None:
        i = bisect.bisect_right(self.times, t + 1e-9) - 1
        return self.rows[i] if i >= 0 else None


def generate_sequence(
    history: FeatureHistory,
    imu: ImuStream,
    t_now: float,
    window: PredictionWindow | None = None,
    anchor_xyz: np.ndarray | None = None,
    n_in: int = N_IN,
) -> FeatureSequence:
    """Stack the last ``n_in`` ticks of TDOA (zero-order hold) and IMU values.

    Missing anchors are filled with augmented TDOA from ``window`` when it
    covers the tick (requires ``anchor_xyz``), otherwise with zero.
    """
    if len(imu) == 0:
        raise InsufficientHistoryError("no IMU data")
    t0 = float(imu.timestamps[0])
    end = int(round((t_now - t0) / TICK_S))
    start = end - (n_in - 1)
    if start < 0 or end >= len(imu):
        raise InsufficientHistoryError(f"need {n_in} IMU samples ending at t={t_now:.4f}")
    ticks = imu.timestamps[start : end + 1]
    m1 = history.n_responders
    mat = np.zeros((n_in, m1 + 6))
    for r, tau in enumerate(ticks):
        row = history.latest_at(float(tau))
        vals = np.full(m1, np.nan) if row is None else row.copy()
        missing = np.isnan(vals)
        if missing.any() and window is not None and anchor_xyz is not None:
            p = window.position_at(float(tau))
            if p is not None:
                vals[missing] = augmented_row(anchor_xyz, p)[missing]
        mat[r, :m1] = np.nan_to_num(vals, nan=0.0)
    mat[:, m1 : m1 + 3] = imu.accel[start : end + 1]
    mat[:, m1 + 3 :] = imu.gyro[start : end + 1]
    return FeatureSequence(mat, ticks.copy())


def build_predictor(n_responders: int, n_out: int = N_OUT, seed: int = 0, dtype=np.float64,
                    units=LSTM_UNITS, head: int = HEAD_UNITS) -> EncoderDecoder:
    """LSTM(32) -> LSTM(32) encoder, LSTM(32) -> LSTM(64) decoder, dense(64) -> dense(2) head.

    The network reads 11 encoded channels per tick (relative position, IMU,
    gait bounce and gait velocity); see :meth:`RnnPredictor.encode`.
    """
    return EncoderDecoder(ENCODED_DIM, n_out, seed, units=units, head=head, out_dim=2, dtype=dtype)


ENCODED_DIM = 11


HEADING_DIFFS = 8
MIN_HEADING_STEP_M = 0.005
STEP_SAMPLES = 8  # one gait cycle: 2 steps/s sampled at 16 Hz
GAIT_LAG = 2  # quarter cycle between the vertical bounce and the fore-aft surge
MIN_CUE_SPEED = 0.2  # m/s; slower cues are too noisy to define a heading
SWAY_CLIP = 4.0  # m/s^2


def gait_velocity(acc: np.ndarray) -> np.ndarray:
    """Velocity cue (B, T, 2) from the walking pattern in world-frame acceleration.

    Over each trailing gait cycle the fore-aft surge, correlated with the
    vertical bounce a quarter cycle earlier, points along the direction of
    travel with a magnitude that grows with speed squared; dividing by the
    bounce amplitude leaves a vector proportional to the walking velocity.
    Horizontal samples beyond ``SWAY_CLIP`` (turn transients) are dropped
    from the correlation. Ticks without a full cycle of history repeat the
    first complete value.
    """
    B, T, _ = acc.shape
    span = STEP_SAMPLES + GAIT_LAG
    out = np.zeros((B, T, 2))
    if T < span:
        return out
    h = sliding_window_view(acc[:, GAIT_LAG:, :2], STEP_SAMPLES, axis=1)  # (B, T-lag-7, 2, 8)
    z = sliding_window_view(acc[:, :-GAIT_LAG, 2], STEP_SAMPLES, axis=1)  # (B, T-lag-7, 8)
    zc = sliding_window_view(acc[:, GAIT_LAG:, 2], STEP_SAMPLES, axis=1)
    keep = np.all(np.abs(h) <= SWAY_CLIP, axis=2, keepdims=True)
    n_keep = np.maximum(keep.sum(axis=-1), 1)
    h = np.where(keep, h - (h * keep).sum(axis=-1, keepdims=True) / n_keep[..., None], 0.0)
    z = z - z.mean(axis=-1, keepdims=True)
    corr = np.sum(h * z[:, :, None, :], axis=-1) / n_keep
    bounce = zc.std(axis=-1)
    cue = -2.0 * corr / (np.sqrt(2.0) * bounce + 0.02)[..., None]
    out[:, span - 1 :] = cue
    out[:, : span - 1] = cue[:, :1]
    return out


def heading_frames(pos: np.ndarray) -> np.ndarray:
    """Rotation matrices (B, 2, 2) taking world x-y into a travel-aligned frame.

    The direction is the component-wise median of the last few per-tick
    displacements, which ignores the single jump a fresh fix introduces.
    Windows with no clear motion keep the world frame.
    """
    steps = np.diff(pos[:, -(HEADING_DIFFS + 1) :, :], axis=1)
    u = np.median(steps, axis=1)
    n = np.linalg.norm(u, axis=1)
    moving = n > MIN_HEADING_STEP_M
    c = np.where(moving, u[:, 0] / np.where(moving, n, 1.0), 1.0)
    s = np.where(moving, u[:, 1] / np.where(moving, n, 1.0), 0.0)
    return np.stack([np.stack([c, s], axis=1), np.stack([-s, c], axis=1)], axis=1)


class RnnPredictor:
    """Encodes feature sequences, runs the network and low-pass filters the output windows."""

    def __init__(self, network: EncoderDecoder, anchor_xyz: np.ndarray,
                 lpf_weight: float = OUTPUT_LPF_WEIGHT, trained: bool = False, bounds=None):
        self.network = network
        self.anchor_xyz = np.asarray(anchor_xyz, dtype=float)
        self.lpf_weight = lpf_weight
        self.trained = trained
        # (x0, y0, x1, y1): predictions are clamped to the area the user can occupy
        self.bounds = None if bounds is None else tuple(map(float, bounds))
        self._previous: PredictionWindow | None = None

    @property
    def n_out(self) -> int:
        return self.network.n_out

    def reset(self) -> None:
        self._previous = None

    def decode_rows(self, tdoa: np.ndarray) -> np.ndarray:
        """TDOA rows (..., M-1) -> user positions (..., 2) on the user-height plane."""
        flat = tdoa.reshape(-1, tdoa.shape[-1])
        start = self.anchor_xyz[:, :2].mean(axis=0)
        xy = solve_rows(self.anchor_xyz, flat, start, iterations=10)
        return xy.reshape(tdoa.shape[:-1] + (2,))

    def encode(self, matrices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(B, N_in, M-1+6) features -> network input (B, N_in, 11), reference (B, 2), frame (B, 2, 2).

        Each TDOA row is decoded to a position. The network sees positions
        relative to the newest row plus gravity-removed, scaled IMU values,
        all rotated into a frame whose x axis follows the recent direction
        of travel, so "keep walking straight" needs no absolute heading.
        Two gait cues follow: the window's standard deviation of vertical
        acceleration (speed) and :func:`gait_velocity` (velocity). They give
        the network motion information that does not depend on its own
        feedback, and a clear velocity cue also fixes the frame's heading.
        """
        m1 = matrices.shape[-1] - 6
        if len(matrices):
            pos = np.concatenate([self.decode_rows(matrices[i : i + 8192, :, :m1])
                                  for i in range(0, len(matrices), 8192)])
        else:
            pos = np.zeros((0, matrices.shape[1], 2))
        ref = pos[:, -1, :]
        acc = matrices[..., m1 : m1 + 3].copy()
        acc[..., 2] -= GRAVITY
        cue = gait_velocity(acc)
        rot = heading_frames(pos)
        last = cue[:, -1]
        speed = np.linalg.norm(last, axis=1)
        walking = speed > MIN_CUE_SPEED
        if walking.any():
            u = last[walking] / speed[walking, None]
            rot[walking] = np.stack([np.stack([u[:, 0], u[:, 1]], axis=1),
                                     np.stack([-u[:, 1], u[:, 0]], axis=1)], axis=1)
        rel = np.einsum("bij,btj->bti", rot, pos - ref[:, None, :]) / POS_SCALE_M
        acc[..., :2] = np.einsum("bij,btj->bti", rot, acc[..., :2])
        gyro = matrices[..., m1 + 3 :].copy()
        gyro[..., :2] = np.einsum("bij,btj->bti", rot, gyro[..., :2])
        gait = np.repeat(acc[..., 2].std(axis=1, keepdims=True)[..., None], acc.shape[1], axis=1)
        cue = np.einsum("bij,btj->bti", rot, cue)
        enc = np.concatenate([rel, acc / ACCEL_SCALE, gyro / GYRO_SCALE, gait, cue], axis=-1)
        dtype = next(iter(self.network.named_parameters().values())).dtype
        return enc.astype(dtype), ref, rot

    def forward_positions(self, matrices: np.ndarray) -> np.ndarray:
        """Unfiltered predicted positions (B, N_out, 2)."""
        enc, ref, rot = self.encode(matrices)
        local = POS_SCALE_M * self.network.forward(enc)
        pos = ref[:, None, :] + np.einsum("bji,btj->bti", rot, local)
        if self.bounds is not None:
            x0, y0, x1, y1 = self.bounds
            pos = np.clip(pos, (x0, y0), (x1, y1))
        return pos

    def predict_positions(self, seq: FeatureSequence) -> PredictionWindow:
        """Predict the next N_out positions and blend with the previous window tick by tick."""
        raw = self.forward_positions(seq.matrix[None])[0]
        t_base = float(seq.timestamps[-1])
        out = raw.copy()
        prev = self._previous
        if prev is not None:
            w = self.lpf_weight
            for k in range(len(out)):
                p = prev.position_at(t_base + (k + 1) * TICK_S)
                if p is not None:
                    out[k] = w * raw[k] + (1.0 - w) * p
        window = PredictionWindow(out, t_base)
        self._previous = window
        return window

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"model": "rnn_predictor", "trained": self.trained, "n_out": self.n_out,
                "units": list(self.network.units), "head": self.network.head_units,
                "input_dim": self.network.input_dim, "lpf_weight": self.lpf_weight,
                "anchor_xyz": self.anchor_xyz.tolist(), "bounds": self.bounds}
        meta.update(extra or {})
        save_checkpoint(path, self.network.named_parameters(), meta)

    @classmethod
    def load(cls, path: str | Path, require_trained: bool = True) -> "RnnPredictor":
        from .nlos import UntrainedModelError

        tensors, meta = load_checkpoint(path)
        if meta.get("model") != "rnn_predictor":
            raise ValueError(f"{path}: not an RNN predictor checkpoint")
        if require_trained and not meta.get("trained"):
            raise UntrainedModelError(f"{path}: checkpoint holds an untrained predictor")
        dtype = next(iter(tensors.values())).dtype
        net = EncoderDecoder(meta["input_dim"], meta["n_out"], 0, units=tuple(meta["units"]),
                             head=meta["head"], dtype=dtype)
        assign_parameters(net.named_parameters(), tensors)
        return cls(net, np.array(meta["anchor_xyz"]), meta["lpf_weight"], bool(meta.get("trained")),
                   meta.get("bounds"))


# --- training data -----------------------------------------------------------------------------

RANGING_RATES_HZ = (5.0, 2.5, 5.0 / 3.0, 1.25, 1.0, 0.5, 0.25, 0.1)


@dataclass(frozen=True)
class SequenceDatasetConfig:
    n_trajectories: int = 40
    duration_s: float = 60.0
    stride: int = 2
    n_out: int = N_OUT
    feedback_velocity_error: float = 0.1  # m/s, per axis
    nlos_round_prob: float = 0.2
    stationary_prob: float = 0.1
    seed: int = 0


@dataclass
class SequenceDataset:
    """Feature windows with the true positions of the next N_out ticks.

    ``current`` (optional) holds the true position at each window's last
    tick. When present, training targets are true displacements from it,
    applied to the predictor's own reference point; this keeps
    accumulated drift, which the network cannot observe, out of the labels.
    """

    features: np.ndarray  # (N, N_in, M-1+6)
    targets: np.ndarray  # (N, N_out, 2)
    current: np.ndarray | None = None  # (N, 2)

    def __len__(self) -> int:
        return len(self.features)

    def concat(self, other: "SequenceDataset") -> "SequenceDataset":
        cur = None
        if self.current is not None and other.current is not None:
            cur = np.concatenate([self.current, other.current])
        return SequenceDataset(np.concatenate([self.features, other.features]),
                               np.concatenate([self.targets, other.targets]), cur)


def simulate_feature_rows(
    cluster: Cluster,
    traj: Trajectory,
    imu: ImuStream,
    rng: np.random.Generator,
    config: SequenceDatasetConfig,
    channel: ChannelConfig = ChannelConfig(),
) -> np.ndarray:
    """Per-tick TDOA rows resembling what the pipeline feeds the predictor.

    Measured rows follow a ranging schedule at a randomly drawn rate and
    carry channel noise. In between, rows are augmented TDOA of the true
    position plus a dead-reckoning error that integrates a velocity error
    drawn afresh at every measurement.
    """
    xyz = cluster.positions
    t = imu.timestamps
    truth = traj.positions_at(t)
    n = len(t)
    rows = augmented_row(xyz, truth)
    err = np.zeros(2)
    verr = np.zeros(2)
    rate = float(rng.choice(RANGING_RATES_HZ))
    next_t = float(t[0])
    for k in range(n):
        if t[k] >= next_t - 1e-9:
            if rng.random() < 0.05:
                rate = float(rng.choice(RANGING_RATES_HZ))
            next_t += 1.0 / rate
            nlos = rng.random(len(xyz)) < (0.5 if rng.random() < config.nlos_round_prob else 0.0)
            noise = rng.standard_normal(len(xyz)) * np.where(nlos, channel.sigma_nlos_s, channel.sigma_los_s)
            noise += np.where(nlos, rng.exponential(channel.nlos_bias_mean_s, len(xyz)), 0.0)
            # after selection the initiator is the most trusted anchor; keep it clean
            noise[0] = rng.standard_normal() * channel.sigma_los_s
            rows[k] += noise[1:] - noise[0]
            err[:] = 0.0
            verr = config.feedback_velocity_error * rng.standard_normal(2)
        else:
            err += TICK_S * verr
            rows[k] = augmented_row(xyz, truth[k] + err)
    return rows


def build_sequence_dataset(cluster: Cluster, config: SequenceDatasetConfig = SequenceDatasetConfig(),
                           trajectories: Sequence[Trajectory] | None = None) -> SequenceDataset:
    """Sliding (N_in)-tick feature windows with the next N_out true positions as targets."""
    rng = np.random.default_rng(config.seed)
    if trajectories is None:
        trajectories = []
        for _ in range(config.n_trajectories):
            if rng.random() < config.stationary_prob:
                x = rng.uniform(cluster.region.x0 + 0.5, cluster.region.x1 - 0.5)
                y = rng.uniform(cluster.region.y0 + 0.5, cluster.region.y1 - 0.5)
                trajectories.append(Trajectory(np.array([[0.0, x, y], [config.duration_s, x, y]])))
            else:
                trajectories.append(random_walk(rng, cluster.region, config.duration_s))
    feats, targs, cur = [], [], []
    for traj in trajectories:
        imu = synthesize_imu(traj, int(rng.integers(2**63 - 1)))
        rows = simulate_feature_rows(cluster, traj, imu, rng, config)
        mat = np.concatenate([rows, imu.accel, imu.gyro], axis=1)
        n = len(imu)
        last = n - 1 - config.n_out
        for k in range(N_IN - 1, last + 1, config.stride):
            feats.append(mat[k - N_IN + 1 : k + 1])
            targs.append(traj.positions_at(imu.timestamps[k] + TICK_S * np.arange(1, config.n_out + 1)))
            cur.append(traj.positions_at(imu.timestamps[k : k + 1])[0])
    if not feats:
        raise ValueError("trajectories too short to form any training sequence")
    return SequenceDataset(np.stack(feats), np.stack(targs), np.stack(cur))


# --- training ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorTrainConfig:
    epochs: int = 50
    batch_size: int = 10
    lr: float = 1e-3
    val_fraction: float = 0.2
    patience: int = 10
    seed: int = 0


@dataclass
class PredictorReport:
    epochs_run: int
    val_rmse_m: float
    train_rmse_m: float
    initial_val_rmse_m: float
    history: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"epochs_run": self.epochs_run, "val_rmse_m": self.val_rmse_m,
                "train_rmse_m": self.train_rmse_m, "initial_val_rmse_m": self.initial_val_rmse_m,
                "history": self.history}


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((pred - target) ** 2, axis=-1)))) if len(pred) else float("nan")


def train_predictor(
    dataset: SequenceDataset,
    anchor_xyz: np.ndarray,
    config: PredictorTrainConfig = PredictorTrainConfig(),
    predictor: RnnPredictor | None = None,
    bounds=None,
) -> tuple[RnnPredictor, PredictorReport]:
    """Supervised MSE training on (feature window -> next N_out positions)."""
    if len(dataset) == 0 or dataset.targets is None:
        raise ValueError("training requires ground-truth target positions")
    if not np.all(np.isfinite(dataset.targets)):
        raise ValueError("ground-truth targets must be finite")
    n_out = dataset.targets.shape[1]
    if predictor is None:
        net = build_predictor(dataset.features.shape[-1] - 6, n_out, seed=config.seed)
        predictor = RnnPredictor(net, anchor_xyz, bounds=bounds)
    net = predictor.network
    enc, ref, rot = predictor.encode(dataset.features)
    origin = ref if dataset.current is None else dataset.current
    y = np.einsum("bij,btj->bti", rot, dataset.targets - origin[:, None, :]) / POS_SCALE_M
    y = y.astype(enc.dtype)
    perm = np.random.default_rng(config.seed).permutation(len(enc))
    n_val = int(round(len(enc) * config.val_fraction))
    va, tr = perm[:n_val], perm[n_val:]
    params = net.named_parameters()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)

    def eval_rmse(idx) -> float:
        out = []
        for i in range(0, len(idx), 512):
            out.append(net.forward(enc[idx[i : i + 512]]))
        pred = np.concatenate(out) if out else np.zeros((0, n_out, 2))
        return rmse(pred * POS_SCALE_M, y[idx] * POS_SCALE_M)

    initial = eval_rmse(va)
    best_val, best, stale, history, epochs_run = initial, {k: v.copy() for k, v in params.items()}, 0, [], 0
    for epoch in range(config.epochs):
        order = rng.permutation(tr)
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            out = net.forward(enc[idx], training=True)
            loss, g = mean_squared_error(out, y[idx])
            net.backward(g)
            opt.step(net.named_gradients())
            losses.append(loss)
        epochs_run = epoch + 1
        v = eval_rmse(va)
        history.append({"epoch": epochs_run, "train_loss": float(np.mean(losses)), "val_rmse_m": v})
        log.info("epoch %d train_loss %.5f val_rmse %.4f m", epochs_run, history[-1]["train_loss"], v)
        if v < best_val - 1e-5:
            best_val, stale = v, 0
            best = {k: p.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    assign_parameters(params, best)
    predictor.trained = epochs_run > 0
    report = PredictorReport(epochs_run, eval_rmse(va), eval_rmse(tr), initial, history)
    return predictor, report
