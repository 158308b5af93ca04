"""AdamW training loop with early stopping on validation ROC-AUC."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from tabbench import autodiff as ad
from tabbench.autodiff import EVAL, TRAIN, Tape
from tabbench.metrics import roc_auc


class ConfigurationError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if not 0 < self.patience <= self.max_epochs:
            raise ConfigurationError("patience must lie in 1..max_epochs")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class TrainReport:
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    wall_time: float = 0.0
    train_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "val_auc": list(self.val_auc),
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "train_loss": list(self.train_loss),
            "wall_time_s": self.wall_time,
        }


def adamw_step(params: ad.ParameterSet, opt: OptimizerState, lr: float, wd: float):
    """One decoupled-weight-decay Adam update; zeroes gradients afterwards."""
    for name, t in params:
        if t.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, t in params:
        g = t.grad
        if name not in opt.m:
            opt.m[name] = np.zeros_like(t.data)
            opt.v[name] = np.zeros_like(t.data)
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if wd and not params.decay_exempt[name]:
            update = update + wd * t.data
        t.data = t.data - lr * update
        t.grad = None


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single row; fold a lone remainder into the previous batch
    if len(out) > 1 and out[-1].shape[0] == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _epoch(model, x_num, x_cat, y, cfg: TrainConfig, opt, rng) -> float:
    losses = []
    for idx in _batches(y.shape[0], cfg.batch_size, rng):
        model.params.zero_grad()
        with Tape() as tape:
            logits = model.forward((x_num[idx], x_cat[idx]), TRAIN, rng)
            loss = ad.softmax_cross_entropy(logits, y[idx])
        if not math.isfinite(float(loss.data)):
            raise DivergenceError("non-finite training loss")
        tape.backward(loss)
        for _, t in model.params:
            if t.grad is None:  # parameter unused by this batch
                t.grad = np.zeros_like(t.data)
        adamw_step(model.params, opt, cfg.learning_rate, cfg.weight_decay)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def predict_proba(model, x_num, x_cat, batch_size: int = 2048) -> np.ndarray:
    """Softmax of eval-mode logits."""
    outs = []
    n = np.asarray(x_num).shape[0]
    for i in range(0, max(n, 1), batch_size):
        logits = model.forward((x_num[i:i + batch_size], x_cat[i:i + batch_size]), EVAL).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        outs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(outs, axis=0)


def train_model(model, train, valid, cfg: TrainConfig):
    """Train with early stopping; ``train``/``valid`` are (x_num, x_cat, y) triples.

    The returned model carries the parameters of the first epoch that reached
    the best validation AUC.
    """
    x_num, x_cat, y = train
    if y.shape[0] == 0:
        raise ConfigurationError("empty training split")
    if valid is None or valid[2].shape[0] == 0:
        raise ConfigurationError("a validation split is required for early stopping")
    vx_num, vx_cat, vy = valid
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState()
    report = TrainReport()
    best_state = None
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        report.train_loss.append(_epoch(model, x_num, x_cat, y, cfg, opt, rng))
        auc = roc_auc(predict_proba(model, vx_num, vx_cat), vy)
        report.val_auc.append(auc)
        if best_state is None or auc > report.best_val_auc:
            report.best_val_auc = auc
            report.best_epoch = epoch
            best_state = model.state()
        elif epoch - report.best_epoch >= cfg.patience:
            break
    model.load_state(best_state)
    report.wall_time = time.perf_counter() - start
    return model, report


def fit_epochs(model, train, cfg: TrainConfig, n_epochs: int):
    """Train for exactly ``n_epochs`` epochs without a validation split."""
    x_num, x_cat, y = train
    if y.shape[0] == 0:
        raise ConfigurationError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState()
    losses = [_epoch(model, x_num, x_cat, y, cfg, opt, rng) for _ in range(max(int(n_epochs), 1))]
    return model, losses
