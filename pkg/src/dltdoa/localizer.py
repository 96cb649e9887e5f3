"""Least-squares TDOA multilateration and augmented-TDOA synthesis."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import SPEED_OF_LIGHT, USER_HEIGHT_M
from .channel import TdoaMeasurement
from .scenario import Anchor

MAX_ITERATIONS = 50
STEP_TOL_M = 1e-6


class Source(str, enum.Enum):
    LEAST_SQUARES = "least_squares"
    RNN_PREDICTED = "rnn_predicted"
    KALMAN = "kalman"
    HELD = "held"


class LocalizationError(RuntimeError):
    pass


class DegenerateGeometryError(LocalizationError):
    pass


class NoConvergenceError(LocalizationError):
    pass


@dataclass(frozen=True)
class PositionEstimate:
    x: float
    y: float
    timestamp: float
    source: Source
    residual_norm: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


def _positions(anchors: Sequence[Anchor]) -> dict[int, np.ndarray]:
    return {a.id: np.asarray(a.position, dtype=float) for a in anchors}


def _range_diff_and_jacobian(xy: np.ndarray, resp: np.ndarray, ref: np.ndarray, h: float):
    p = np.array([xy[0], xy[1], h])
    dj = resp - p
    d1 = ref - p
    nj = np.linalg.norm(dj, axis=1)
    n1 = np.linalg.norm(d1)
    model = nj - n1
    # d(model)/d(xy)
    jac = -dj[:, :2] / nj[:, None] + d1[:2] / n1
    return model, jac


def solve_tdoa(
    anchors: Sequence[Anchor],
    tdoas: Sequence[TdoaMeasurement],
    initial_guess=None,
    timestamp: float = 0.0,
    user_height: float = USER_HEIGHT_M,
) -> PositionEstimate:
    """Gauss-Newton with Levenberg damping on the user-height plane.

    Minimises sum_j (c*alpha_j - (|a_j - x| - |a_ref - x|))^2. Starts from
    ``initial_guess`` or the centroid of the participating anchors.
    """
    if len(tdoas) < 2:
        raise DegenerateGeometryError("need at least two TDOAs (three anchors)")
    pos = _positions(anchors)
    ref_ids = {m.reference_id for m in tdoas}
    if len(ref_ids) != 1:
        raise ValueError("all TDOAs must share one reference anchor")
    ref_id = ref_ids.pop()
    try:
        ref = pos[ref_id]
        resp = np.array([pos[m.responder_id] for m in tdoas])
    except KeyError as exc:
        raise ValueError(f"unknown anchor id {exc}") from None
    if any(m.responder_id == ref_id for m in tdoas):
        raise ValueError("a TDOA cannot use its reference anchor as responder")
    pts = np.vstack([ref[:2], resp[:, :2]])
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] < 1e-6 * max(sv[0], 1.0):
        raise DegenerateGeometryError("participating anchors are collinear")
    meas = SPEED_OF_LIGHT * np.array([m.alpha for m in tdoas])

    xy = pts.mean(axis=0) if initial_guess is None else np.asarray(initial_guess, dtype=float).copy()
    model, jac = _range_diff_and_jacobian(xy, resp, ref, user_height)
    r = meas - model
    cost = r @ r
    lam = 1e-3
    for _ in range(MAX_ITERATIONS):
        jtj = jac.T @ jac
        step = np.linalg.solve(jtj + lam * np.eye(2), jac.T @ r)
        cand = xy + step
        m2, j2 = _range_diff_and_jacobian(cand, resp, ref, user_height)
        r2 = meas - m2
        c2 = r2 @ r2
        if c2 <= cost:
            xy, jac, r, cost = cand, j2, r2, c2
            lam /= 10.0
            if np.linalg.norm(step) < STEP_TOL_M:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                # no descent direction left: we are at a (local) minimum
                break
    else:
        raise NoConvergenceError(f"no convergence in {MAX_ITERATIONS} iterations")
    if not np.all(np.isfinite(xy)):
        raise NoConvergenceError("solver produced non-finite coordinates")
    return PositionEstimate(float(xy[0]), float(xy[1]), timestamp, Source.LEAST_SQUARES, float(np.sqrt(cost)))


def augment_tdoa(
    anchors: Sequence[Anchor],
    predicted_pos,
    round_id: int = -1,
    user_height: float = USER_HEIGHT_M,
) -> list[TdoaMeasurement]:
    """TDOAs a user at ``predicted_pos`` would measure, signed, relative to the initiator."""
    if len(anchors) < 2:
        raise ValueError("need at least two anchors")
    p = np.array([predicted_pos[0], predicted_pos[1], user_height], dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("predicted position must be finite")
    init = anchors[0]
    d1 = np.linalg.norm(np.asarray(init.position) - p)
    return [
        TdoaMeasurement(a.id, float((np.linalg.norm(np.asarray(a.position) - p) - d1) / SPEED_OF_LIGHT), round_id, init.id)
        for a in anchors[1:]
    ]


def augmented_row(anchor_xyz: np.ndarray, xy, user_height: float = USER_HEIGHT_M) -> np.ndarray:
    """Vectorised :func:`augment_tdoa` for the full responder set: shape (M-1,)."""
    xy = np.asarray(xy, dtype=float)
    p = np.concatenate([xy[..., :2], np.full(xy.shape[:-1] + (1,), user_height)], axis=-1)
    d = np.linalg.norm(anchor_xyz - p[..., None, :], axis=-1)
    return (d[..., 1:] - d[..., :1]) / SPEED_OF_LIGHT


def solve_rows(anchor_xyz: np.ndarray, alphas: np.ndarray, initial_xy, iterations: int = 8,
               user_height: float = USER_HEIGHT_M) -> np.ndarray:
    """Batched undamped Gauss-Newton for full TDOA rows relative to anchor 0.

    ``alphas`` is (N, M-1); returns (N, 2). Used to decode feature rows,
    where every row is complete and a warm start is available.
    """
    alphas = np.atleast_2d(alphas)
    n = len(alphas)
    meas = SPEED_OF_LIGHT * alphas
    xy = np.broadcast_to(np.asarray(initial_xy, dtype=float), (n, 2)).copy()
    ref, resp = anchor_xyz[0], anchor_xyz[1:]
    for _ in range(iterations):
        p = np.concatenate([xy, np.full((n, 1), user_height)], axis=1)
        dj = resp[None, :, :] - p[:, None, :]
        d1 = ref[None, :] - p
        nj = np.linalg.norm(dj, axis=2)
        n1 = np.linalg.norm(d1, axis=1)
        r = meas - (nj - n1[:, None])
        jac = -dj[:, :, :2] / nj[:, :, None] + (d1[:, :2] / n1[:, None])[:, None, :]
        jtj = np.einsum("nki,nkj->nij", jac, jac) + 1e-9 * np.eye(2)
        step = np.linalg.solve(jtj, np.einsum("nki,nk->ni", jac, r)[..., None])[..., 0]
        # bound each step so a poor warm start cannot throw the iterate far away
        norm = np.linalg.norm(step, axis=1, keepdims=True)
        xy = xy + step * np.minimum(1.0, 3.0 / np.maximum(norm, 1e-12))
    return xy
