"""Adam optimization and the per-volume training loop.

Batch size is one volume; each epoch walks the training set in order, one
backward pass and one Adam step per volume.  Validation loss is monitored
every epoch and the returned model carries, by default, the parameters of
the best validation epoch.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward
from .losses import deep_supervision_loss
from .model import Model, NetworkConfig, build_model
from .volumes import standardize


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 300
    seed: int = 0
    ensemble_size: int = 3
    clamp_floor: float = 1e-7
    # "best_val" restores the lowest-validation-loss epoch; "last" keeps the
    # final parameters
    checkpoint_rule: str = "best_val"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.clamp_floor <= 0:
            raise ValueError("learning_rate, epsilon and clamp_floor must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got "
                             f"({self.beta1}, {self.beta2})")
        if self.epochs < 1 or self.ensemble_size < 1:
            raise ValueError("epochs and ensemble_size must be >= 1")
        if self.checkpoint_rule not in ("best_val", "last"):
            raise ValueError(f"unknown checkpoint_rule {self.checkpoint_rule!r}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def init_adam(params: list[tuple[str, Tensor]]) -> AdamState:
    state = AdamState()
    for name, p in params:
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: list[tuple[str, Tensor]], grads: list[np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for (name, p), g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} {p.data.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)


def _loss_value(model: Model, grid, labels, cfg: TrainConfig, train: bool):
    x = Tensor(standardize(grid).values[None, None])
    out = model.forward(x, train=train)
    loss, terms = deep_supervision_loss(out, labels, clamp_floor=cfg.clamp_floor,
                                        return_terms=True)
    return loss, terms


def train(net_config: NetworkConfig, train_set, val_set, cfg: TrainConfig,
          progress=None):
    """Train one model; returns (model, history of per-epoch loss rows).

    train_set/val_set are lists of (VolumeGrid, LabelVolume) pairs; volumes
    are standardized before entering the network.  Runs are exactly
    reproducible for fixed configs and data order.
    """
    if not train_set:
        raise ValueError("training set is empty")
    model = build_model(net_config)
    params = list(model.named_parameters())
    state = init_adam(params)
    history = []
    best_loss = math.inf
    best_snapshot = None
    track_val = bool(val_set) and cfg.checkpoint_rule == "best_val"
    for epoch in range(1, cfg.epochs + 1):
        tr_loss = tr_ce = tr_dice = 0.0
        for grid, labels in train_set:
            with Graph() as graph:
                loss, terms = _loss_value(model, grid, labels, cfg, train=True)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(
                        f"training diverged at epoch {epoch}: loss={value}")
                backward(graph, loss, params=[p for _, p in params])
            adam_step(params, [p.grad for _, p in params], state, cfg)
            tr_loss += value
            tr_ce += terms["ce"]
            tr_dice += terms["dice"]
        n_tr = len(train_set)
        va_loss = va_ce = va_dice = math.nan
        if val_set:
            va_loss = va_ce = va_dice = 0.0
            for grid, labels in val_set:
                loss, terms = _loss_value(model, grid, labels, cfg, train=False)
                va_loss += loss.item()
                va_ce += terms["ce"]
                va_dice += terms["dice"]
            va_loss /= len(val_set)
            va_ce /= len(val_set)
            va_dice /= len(val_set)
            if not math.isfinite(va_loss):
                raise FloatingPointError(
                    f"validation loss diverged at epoch {epoch}: {va_loss}")
        row = {
            "epoch": epoch,
            "train_loss": tr_loss / n_tr,
            "train_ce": tr_ce / n_tr,
            "train_dice": tr_dice / n_tr,
            "val_loss": va_loss,
            "val_ce": va_ce,
            "val_dice": va_dice,
        }
        history.append(row)
        if track_val and va_loss < best_loss:
            best_loss = va_loss
            best_snapshot = _snapshot(model)
        if progress is not None:
            progress(row)
    if track_val and best_snapshot is not None:
        _restore(model, best_snapshot)
    return model, history


def _snapshot(model: Model) -> dict:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[name] = p.data.copy()
    for name, buf in model.named_buffers():
        arrays[name] = buf.copy()
    return arrays


def _restore(model: Model, snapshot: dict) -> None:
    for name, p in model.named_parameters():
        p.data[...] = snapshot[name]
    for name, buf in model.named_buffers():
        buf[...] = snapshot[name]


def train_ensemble(net_config: NetworkConfig, train_set, val_set,
                   cfg: TrainConfig, progress=None):
    """Train ensemble_size members differing only in their init seed."""
    members = []
    for k in range(cfg.ensemble_size):
        member_config = dataclasses.replace(net_config, seed=net_config.seed + k)
        members.append(train(member_config, train_set, val_set, cfg,
                             progress=progress))
    return members


def write_history(history: list[dict], path: str) -> None:
    columns = ["epoch", "train_loss", "train_ce", "train_dice",
               "val_loss", "val_ce", "val_dice"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[c]:.8f}" for c in columns[1:]])
