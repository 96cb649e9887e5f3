"""CNN NLOS-probability predictor: classifier, trainer and per-anchor LPF."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ecir import ECIR_LENGTH, ECir
from .nn import Adam, LayerSpec, Sequential, binary_cross_entropy, build_sequential
from .nn.checkpoint import assign_parameters, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

KERNEL_SIZES = (9, 13, 17, 17)
FILTERS = (64, 64, 128, 256)
DROPOUT = 0.1
POOL = 2
DENSE_UNITS = 64
LPF_WEIGHT = 0.5


class UntrainedModelError(RuntimeError):
    pass


def classifier_specs(input_length: int = ECIR_LENGTH, kernel_sizes=KERNEL_SIZES, filters=FILTERS,
                     dropout: float = DROPOUT, dense_units: int = DENSE_UNITS) -> list[LayerSpec]:
    specs, c_in, length = [], 1, input_length
    for k, f in zip(kernel_sizes, filters):
        specs += [
            LayerSpec("conv1d", {"in_channels": c_in, "filters": f, "kernel_size": k}),
            LayerSpec("instance_norm", {"channels": f}),
            LayerSpec("relu"),
            LayerSpec("dropout", {"rate": dropout}),
            LayerSpec("maxpool1d", {"kernel": POOL}),
        ]
        c_in, length = f, length // POOL
    specs += [
        LayerSpec("flatten"),
        LayerSpec("dense", {"in_features": length * c_in, "units": dense_units}),
        LayerSpec("dense", {"in_features": dense_units, "units": 1}),
        LayerSpec("sigmoid"),
    ]
    return specs


def build_classifier(seed: int = 0, dtype=np.float32, **kw) -> Sequential:
    """4 x [conv1d -> instance norm -> relu -> dropout -> maxpool] -> flatten -> dense -> sigmoid."""
    return build_sequential(classifier_specs(**kw), seed, dtype)


def predict_proba(net: Sequential, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode NLOS probabilities for (N, 200) eCIRs."""
    dtype = next(iter(net.named_parameters().values())).dtype
    out = []
    for i in range(0, len(x), batch_size):
        xb = np.asarray(x[i : i + batch_size], dtype=dtype)[:, :, None]
        out.append(net.forward(xb, training=False)[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


@dataclass(frozen=True)
class ChannelAssessment:
    anchor_id: int
    p_raw: float
    p_filtered: float
    round_id: int = -1


@dataclass
class LpfState:
    """Per-anchor memory of the last filtered probability."""

    weight: float = LPF_WEIGHT
    previous: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ValueError("LPF weight must be in (0, 1]")

    def update(self, anchor_id: int, p_raw: float) -> float:
        prev = self.previous.get(anchor_id)
        p = p_raw if prev is None else self.weight * p_raw + (1.0 - self.weight) * prev
        self.previous[anchor_id] = p
        return p


class NlosPredictor:
    """Trained classifier plus the per-anchor output filter."""

    def __init__(self, network: Sequential, lpf_weight: float = LPF_WEIGHT):
        self.network = network
        self.lpf_weight = lpf_weight

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "NlosPredictor":
        net, meta = load_classifier(path)
        if not meta.get("trained"):
            raise UntrainedModelError(f"{path}: checkpoint holds an untrained classifier")
        return cls(net, meta.get("lpf_weight", LPF_WEIGHT))

    def new_state(self) -> LpfState:
        return LpfState(self.lpf_weight)

    def predict(self, ecir: ECir, state: LpfState) -> ChannelAssessment:
        return self.assess([ecir], state)[0]

    def assess(self, ecirs: Sequence[ECir], state: LpfState) -> list[ChannelAssessment]:
        if not ecirs:
            return []
        raw = predict_proba(self.network, np.stack([e.values for e in ecirs]))
        out = []
        for e, p in zip(ecirs, raw):
            p = float(np.clip(p, 0.0, 1.0))
            out.append(ChannelAssessment(e.anchor_id, p, state.update(e.anchor_id, p), e.round_id))
        return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 50
    lr: float = 1e-3
    val_fraction: float = 0.2
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0


@dataclass
class TrainReport:
    epochs_run: int
    val_accuracy: float
    train_accuracy: float
    val_loss: float
    confusion: list[list[int]]  # rows: true LOS/NLOS, cols: predicted LOS/NLOS
    history: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run, "val_accuracy": self.val_accuracy,
            "train_accuracy": self.train_accuracy, "val_loss": self.val_loss,
            "confusion_matrix": self.confusion, "history": self.history,
        }


def _accuracy(p: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((p >= 0.5) == (y >= 0.5))) if len(y) else float("nan")


def confusion_matrix(p: np.ndarray, y: np.ndarray) -> list[list[int]]:
    pred = p >= 0.5
    truth = y >= 0.5
    return [[int(np.sum(~truth & ~pred)), int(np.sum(~truth & pred))],
            [int(np.sum(truth & ~pred)), int(np.sum(truth & pred))]]


def split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def _backward_from_logit(net: Sequential, p: np.ndarray, y: np.ndarray) -> None:
    # sigmoid + BCE fused: d loss / d logit = (p - y) / n, finite even when p saturates
    grad = ((p - y) / len(p))[:, None].astype(p.dtype)
    for layer in reversed(net.layers[:-1]):
        grad = layer.backward(grad)


def train(x: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig(),
          network: Sequential | None = None) -> tuple[Sequential, TrainReport]:
    """Mini-batch Adam on binary cross-entropy with early stopping on validation loss.

    ``x`` is (N, 200) normalised eCIRs, ``y`` is 1 for NLOS. The best
    validation-loss weights are restored at the end.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both LOS and NLOS samples")
    net = network or build_classifier(config.seed)
    dtype = next(iter(net.named_parameters().values())).dtype
    tr, va = split(len(x), config.val_fraction, config.seed)
    xt, yt = x[tr].astype(dtype)[:, :, None], y[tr].astype(dtype)
    xv, yv = x[va], y[va]
    params = net.named_parameters()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)

    def val_loss() -> tuple[float, np.ndarray]:
        p = predict_proba(net, xv)
        return binary_cross_entropy(p.astype(float), yv)[0], p

    best_loss, p_val = val_loss()
    best = {k: v.copy() for k, v in params.items()}
    history, stale, epochs_run = [], 0, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(xt))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            out = net.forward(xt[idx], training=True)[:, 0]
            loss = binary_cross_entropy(out, yt[idx])[0]
            _backward_from_logit(net, out, yt[idx])
            opt.step(net.named_gradients())
            losses.append(loss)
        epochs_run = epoch + 1
        vl, p_val = val_loss()
        history.append({"epoch": epochs_run, "train_loss": float(np.mean(losses)), "val_loss": vl,
                        "val_accuracy": _accuracy(p_val, yv)})
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epochs_run,
                 history[-1]["train_loss"], vl, history[-1]["val_accuracy"])
        if vl < best_loss - config.min_delta:
            best_loss, stale = vl, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    assign_parameters(params, best)
    p_val = predict_proba(net, xv)
    p_tr = predict_proba(net, x[tr])
    report = TrainReport(epochs_run, _accuracy(p_val, yv), _accuracy(p_tr, y[tr]),
                         binary_cross_entropy(p_val.astype(float), yv)[0], confusion_matrix(p_val, yv), history)
    return net, report


def save_classifier(path: str | Path, net: Sequential, trained: bool, extra: dict | None = None) -> None:
    meta = {"model": "nlos_classifier", "trained": bool(trained), "lpf_weight": LPF_WEIGHT,
            "layers": [{"kind": s.kind, "hyper": s.hyper} for s in net.specs()]}
    meta.update(extra or {})
    save_checkpoint(path, net.named_parameters(), meta)


def load_classifier(path: str | Path) -> tuple[Sequential, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("model") != "nlos_classifier":
        raise ValueError(f"{path}: not an NLOS classifier checkpoint")
    specs = [LayerSpec(l["kind"], l["hyper"]) for l in meta["layers"]]
    dtype = next(iter(tensors.values())).dtype
    net = build_sequential(specs, 0, dtype)
    assign_parameters(net.named_parameters(), tensors)
    return net, meta
