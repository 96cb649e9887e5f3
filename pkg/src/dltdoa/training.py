"""Closed-loop training of the localization predictor.

The predictor consumes its own augmented TDOA in deployment, so training on
open-loop windows alone leaves it unprepared for the states it visits once
its predictions are fed back. After an open-loop warm-up, the pipeline is
rolled out on random training scenarios with the current predictor, the
visited feature windows are labelled with the true future positions, and
training continues on the aggregated set (dataset aggregation).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import TICK_S
from .nlos import NlosPredictor
from .pipeline import Models, Variant, run
from .rnn import (
    PredictorTrainConfig, RnnPredictor, SequenceDataset, SequenceDatasetConfig, build_predictor,
    build_sequence_dataset, train_predictor,
)
from .scenario import Cluster, Obstacle, Rect, Scenario, random_walk

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClosedLoopConfig:
    n_trajectories: int = 40
    duration_s: float = 60.0
    warmup_epochs: int = 10
    rounds: int = 4
    epochs_per_round: int = 10
    batch_size: int = 10
    lr: float = 1e-3
    obstacle_prob: float = 0.5
    stride: int = 2
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.rounds * self.epochs_per_round


@dataclass
class ClosedLoopReport:
    warmup: dict
    rounds: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        last = self.rounds[-1] if self.rounds else self.warmup
        return {"val_rmse_m": last["val_rmse_m"], "initial_val_rmse_m": self.warmup["initial_val_rmse_m"],
                "epochs_run": self.warmup["epochs_run"] + sum(r["epochs_run"] for r in self.rounds),
                "warmup": self.warmup, "rounds": self.rounds}


def random_walls(rng: np.random.Generator, region: Rect, count: int, thickness: float = 0.2) -> list[Obstacle]:
    walls = []
    for _ in range(count):
        length = rng.uniform(1.5, 4.0)
        if rng.random() < 0.5:
            x0 = rng.uniform(region.x0, region.x1 - length)
            y0 = rng.uniform(region.y0, region.y1 - thickness)
            fp = Rect(x0, y0, x0 + length, y0 + thickness)
        else:
            length = min(length, region.height)
            x0 = rng.uniform(region.x0, region.x1 - thickness)
            y0 = rng.uniform(region.y0, region.y1 - length)
            fp = Rect(x0, y0, x0 + thickness, y0 + length)
        walls.append(Obstacle(fp, "permanent"))
    return walls


def training_scenarios(cluster: Cluster, n: int, duration_s: float, obstacle_prob: float,
                       rng: np.random.Generator) -> list[Scenario]:
    out = []
    for i in range(n):
        traj = random_walk(rng, cluster.region, duration_s)
        walls = random_walls(rng, cluster.region, int(rng.integers(1, 5))) if rng.random() < obstacle_prob else []
        out.append(Scenario(cluster, traj, tuple(walls), seed=int(rng.integers(2**31)), name=f"train_{i}"))
    return out


def rollout_dataset(models: Models, scenarios: list[Scenario], n_out: int, stride: int = 1) -> SequenceDataset:
    """Feature windows visited by the proposed pipeline, labelled with true future positions."""
    feats, targs, cur = [], [], []
    offsets = TICK_S * np.arange(1, n_out + 1)
    for sc in scenarios:
        rec: list = []
        run(sc, Variant.PROPOSED, models, record=rec)
        t_end = sc.trajectory.t_end
        for matrix, t in rec[::stride]:
            if t + offsets[-1] <= t_end + 1e-9:
                feats.append(matrix)
                targs.append(sc.trajectory.positions_at(t + offsets))
                cur.append(sc.trajectory.positions_at(np.array([t]))[0])
    if not feats:
        raise ValueError("rollouts produced no labelled windows")
    return SequenceDataset(np.stack(feats), np.stack(targs), np.stack(cur))


def train_closed_loop(
    cluster: Cluster,
    nlos: NlosPredictor,
    config: ClosedLoopConfig = ClosedLoopConfig(),
    n_out: int = 5,
) -> tuple[RnnPredictor, ClosedLoopReport]:
    """Open-loop warm-up followed by ``rounds`` of rollout-and-retrain."""
    rng = np.random.default_rng(config.seed)
    r = cluster.region
    bounds = (r.x0, r.y0, r.x1, r.y1)
    data = build_sequence_dataset(cluster, SequenceDatasetConfig(
        n_trajectories=config.n_trajectories, duration_s=config.duration_s, stride=config.stride,
        n_out=n_out, seed=int(rng.integers(2**31))))
    predictor = RnnPredictor(build_predictor(cluster.size - 1, n_out, seed=config.seed), cluster.positions,
                             bounds=bounds)

    def cfg(epochs: int) -> PredictorTrainConfig:
        return PredictorTrainConfig(epochs=epochs, batch_size=config.batch_size, lr=config.lr,
                                    seed=int(rng.integers(2**31)))

    predictor, rep = train_predictor(data, cluster.positions, cfg(config.warmup_epochs), predictor)
    report = ClosedLoopReport(rep.as_dict())
    for k in range(config.rounds):
        scenarios = training_scenarios(cluster, config.n_trajectories, config.duration_s,
                                       config.obstacle_prob, rng)
        fresh = rollout_dataset(Models(nlos, predictor), scenarios, n_out, config.stride)
        data = data.concat(fresh)
        predictor, rep = train_predictor(data, cluster.positions, cfg(config.epochs_per_round), predictor)
        d = rep.as_dict()
        d["dataset_size"] = len(data)
        report.rounds.append(d)
        log.info("closed-loop round %d: %d windows, val_rmse %.4f m", k + 1, len(data), rep.val_rmse_m)
    return predictor, report
