"""Optimizers, learning-rate schedules, early stopping, and the training
loop.

Determinism contract: every random stream (shuffling, per-sample
augmentation, dropout) is derived from (seed, purpose, epoch, index) via
SeedSequence, so a run is a pure function of (seed, config, data) and can be
resumed bit-exactly from a serialized TrainState.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import NumericalError
from .models import Network, hybrid_loss
from .preprocess import AugmentPolicy, ScalingScheme, augment, scale_unit
from .tensor import Tensor

# purpose codes for SeedSequence streams
_SHUFFLE, _AUGMENT, _DROPOUT, _INIT = 0, 1, 2, 4


@dataclass
class TrainConfig:
    optimizer: str = "sgd"            # sgd | adam
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    schedule: Optional[str] = None    # step | plateau | None
    step_every: int = 15
    step_factor: float = 0.1
    plateau_patience: int = 8
    plateau_factor: float = 0.2
    early_stop_patience: int = 20
    max_epochs: int = 60
    alpha: float = 0.05               # hybrid weight, autoencoder only
    augment: bool = True

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in (None, "none", "step", "plateau"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int = 0                    # next epoch to execute
    lr: float = 0.0
    base_lr: float = 0.0
    step_count: int = 0               # optimizer steps taken (Adam bias term)
    best_val_acc: float = -math.inf
    best_epoch: int = -1
    stop_stall: int = 0
    sched_best: float = -math.inf
    sched_stall: int = 0
    slots: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    best_params: Optional[Dict[str, np.ndarray]] = None


def init_train_state(net: Network, cfg: TrainConfig) -> TrainState:
    state = TrainState(lr=cfg.lr, base_lr=cfg.lr)
    names = ("v",) if cfg.optimizer == "sgd" else ("m", "v")
    for name, p in net.parameters().items():
        state.slots[name] = {s: np.zeros_like(p.data) for s in names}
    return state


# ---------------------------------------------------------------------------
# optimizer steps
# ---------------------------------------------------------------------------

def sgd_step(params: Dict[str, Tensor], state: TrainState, lr: float,
             momentum: float = 0.9) -> None:
    """v <- momentum*v + g; theta <- theta - lr*v."""
    state.step_count += 1
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for {name!r}")
        v = state.slots[name]["v"]
        v *= np.float32(momentum)
        v += p.grad
        p.data -= np.float32(lr) * v


def adam_step(params: Dict[str, Tensor], state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for {name!r}")
        g = p.grad
        m = state.slots[name]["m"]
        v = state.slots[name]["v"]
        m *= np.float32(beta1)
        m += np.float32(1.0 - beta1) * g
        v *= np.float32(beta2)
        v += np.float32(1.0 - beta2) * (g * g)
        mhat = m / np.float32(c1)
        vhat = v / np.float32(c2)
        p.data -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))


# ---------------------------------------------------------------------------
# schedules and stopping
# ---------------------------------------------------------------------------

def step_decay(base_lr: float, epoch: int, every: int = 15,
               factor: float = 0.1) -> float:
    """lr = base_lr * factor^floor(epoch/every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * factor ** (epoch // every)


def reduce_on_plateau(state: TrainState, val_accuracy: float,
                      patience: int = 8, factor: float = 0.2) -> float:
    """Decay lr by `factor` after `patience` epochs without strict
    improvement; the stall counter resets on every decay."""
    if val_accuracy > state.sched_best:
        state.sched_best = val_accuracy
        state.sched_stall = 0
    else:
        state.sched_stall += 1
        if state.sched_stall >= patience:
            state.lr *= factor
            state.sched_stall = 0
    return state.lr


def early_stopping(state: TrainState, val_accuracy: float,
                   patience: int = 20) -> bool:
    """True once `patience` consecutive epochs pass without a strictly
    better validation accuracy."""
    if val_accuracy > state.best_val_acc:
        state.best_val_acc = val_accuracy
        state.best_epoch = state.epoch
        state.stop_stall = 0
        return False
    state.stop_stall += 1
    return state.stop_stall >= patience


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(net: Network, images01: np.ndarray, labels: np.ndarray,
                   scheme: ScalingScheme, batch_size: int = 32) -> Dict[str, float]:
    """Eval-mode accuracy plus mean losses; restores the previous mode."""
    was_training = net.training
    net.eval()
    n = len(images01)
    correct = 0
    ce_sum = 0.0
    rec_sum = 0.0
    has_rec = False
    try:
        for start in range(0, n, batch_size):
            idx = slice(start, min(start + batch_size, n))
            xb = np.stack([scale_unit(img, scheme) for img in images01[idx]])
            out = net.forward(Tensor(xb))
            logits = out["logits"].data
            yb = labels[idx]
            correct += int((logits.argmax(axis=1) == yb).sum())
            ce_sum += float(T.softmax_cross_entropy(out["logits"], yb).data) * len(yb)
            if "reconstruction" in out:
                has_rec = True
                diff = out["reconstruction"].data - images01[idx]
                rec_sum += float(np.mean(diff * diff)) * len(yb)
    finally:
        if was_training:
            net.train()
    result = {"accuracy": correct / n, "ce_loss": ce_sum / n}
    if has_rec:
        result["recon_loss"] = rec_sum / n
    return result


def predict(net: Network, images01: np.ndarray, scheme: ScalingScheme,
            batch_size: int = 32) -> np.ndarray:
    """Eval-mode argmax grade predictions."""
    was_training = net.training
    net.eval()
    preds = []
    try:
        for start in range(0, len(images01), batch_size):
            xb = np.stack([scale_unit(img, scheme)
                           for img in images01[start:start + batch_size]])
            out = net.forward(Tensor(xb))
            preds.append(out["logits"].data.argmax(axis=1))
    finally:
        if was_training:
            net.train()
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _rng(seed: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, *extra]))


def train_loop(net: Network, train_images: np.ndarray, train_labels: np.ndarray,
               val_images: np.ndarray, val_labels: np.ndarray, cfg: TrainConfig,
               seed: int, scheme: Optional[ScalingScheme] = None,
               policy: Optional[AugmentPolicy] = None,
               state: Optional[TrainState] = None,
               verbose: bool = False) -> Tuple[Dict[str, np.ndarray], List[Dict]]:
    """Run the full recipe; returns (best-validation checkpoint, history).

    Images arrive as float32 (N,3,S,S) in [0,1]; augmentation happens on that
    range and `scheme` maps augmented images to network inputs. For
    autoencoder-classifiers the reconstruction target is the augmented [0,1]
    image and the loss is the alpha-weighted hybrid.
    """
    cfg.validate()
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("train and validation splits must be non-empty")
    scheme = scheme or ScalingScheme.simple()
    if policy is None and cfg.augment:
        policy = AugmentPolicy()
    if state is None:
        state = init_train_state(net, cfg)
    params = net.parameters()
    is_autoencoder = net.kind == "convae"
    history: List[Dict] = []
    n = len(train_images)

    for epoch in range(state.epoch, cfg.max_epochs):
        if cfg.schedule == "step":
            state.lr = step_decay(state.base_lr, epoch, cfg.step_every,
                                  cfg.step_factor)
        lr_used = state.lr

        net.train()
        perm = _rng(seed, _SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0
        rec_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch_idx = perm[start:start + cfg.batch_size]
            xs = []
            targets = []
            for i in batch_idx:
                img = train_images[i]
                if policy is not None:
                    img = augment(img, policy, _rng(seed, _AUGMENT, epoch, int(i)))
                targets.append(img)
                xs.append(scale_unit(img, scheme))
            x = Tensor(np.stack(xs))
            yb = train_labels[batch_idx]

            net.zero_grad()
            out = net.forward(x, rng=_rng(seed, _DROPOUT, epoch, b))
            if is_autoencoder:
                tgt = Tensor(np.stack(targets))
                loss = hybrid_loss(out["logits"], yb, out["reconstruction"],
                                   tgt, cfg.alpha)
                diff = out["reconstruction"].data - tgt.data
                rec_sum += float(np.mean(diff * diff)) * len(yb)
            else:
                loss = T.softmax_cross_entropy(out["logits"], yb)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericalError(
                    f"training loss diverged (epoch {epoch}, batch {b}): {loss_val}")
            T.backward(loss)
            if cfg.optimizer == "sgd":
                sgd_step(params, state, state.lr, cfg.momentum)
            else:
                adam_step(params, state, state.lr, cfg.beta1, cfg.beta2, cfg.eps)

            loss_sum += loss_val * len(yb)
            correct += int((out["logits"].data.argmax(axis=1) == yb).sum())

        row = {
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "lr": lr_used,
        }
        metrics = evaluate_model(net, val_images, val_labels, scheme,
                                 cfg.batch_size)
        row["val_acc"] = metrics["accuracy"]
        if is_autoencoder:
            row["recon_loss"] = rec_sum / n

        # snapshot on ties too: among equal-accuracy epochs the latest one has
        # had the most reconstruction training (the stall counter below still
        # requires strict improvement)
        if metrics["accuracy"] >= state.best_val_acc:
            state.best_params = net.state_dict()
        state.epoch = epoch  # early_stopping records best_epoch from here
        stop = early_stopping(state, metrics["accuracy"],
                              cfg.early_stop_patience)
        if cfg.schedule == "plateau":
            reduce_on_plateau(state, metrics["accuracy"],
                              cfg.plateau_patience, cfg.plateau_factor)
        history.append(row)
        state.epoch = epoch + 1
        if verbose:
            print(f"epoch {epoch}: loss={row['train_loss']:.4f} "
                  f"train_acc={row['train_acc']:.3f} val_acc={row['val_acc']:.3f} "
                  f"lr={lr_used:.2e}")
        if stop:
            break

    if state.best_params is None:
        state.best_params = net.state_dict()
    return state.best_params, history


# ---------------------------------------------------------------------------
# history and state serialization
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "lr")


def write_history(path, history: Sequence[Dict]) -> None:
    """CSV with 6-decimal fixed-point floats; autoencoder runs append a
    reconstruction-loss column."""
    cols = list(HISTORY_COLUMNS)
    if history and "recon_loss" in history[0]:
        cols.append("recon_loss")
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for row in history:
            cells = [str(row["epoch"])]
            cells += [f"{row[c]:.6f}" for c in cols[1:]]
            f.write(",".join(cells) + "\n")


def read_history(path) -> List[Dict]:
    rows = []
    with open(path) as f:
        cols = f.readline().strip().split(",")
        for line in f:
            vals = line.strip().split(",")
            row = {c: (int(v) if c == "epoch" else float(v))
                   for c, v in zip(cols, vals)}
            rows.append(row)
    return rows


def save_train_state(path, state: TrainState, net_state: Dict[str, np.ndarray]) -> None:
    """Serialize optimizer slots, counters, and the live network weights."""
    arrays = {}
    for name, slots in state.slots.items():
        for sname, arr in slots.items():
            arrays[f"slot:{sname}:{name}"] = arr
    if state.best_params is not None:
        for name, arr in state.best_params.items():
            arrays[f"best:{name}"] = arr
    for name, arr in net_state.items():
        arrays[f"net:{name}"] = arr
    arrays["scalars"] = np.array([
        state.epoch, state.lr, state.base_lr, state.step_count,
        state.best_val_acc, state.best_epoch, state.stop_stall,
        state.sched_best, state.sched_stall,
    ], dtype=np.float64)
    np.savez(path, **arrays)


def load_train_state(path) -> Tuple[TrainState, Dict[str, np.ndarray]]:
    with np.load(path) as data:
        s = data["scalars"]
        state = TrainState(
            epoch=int(s[0]), lr=float(s[1]), base_lr=float(s[2]),
            step_count=int(s[3]), best_val_acc=float(s[4]),
            best_epoch=int(s[5]), stop_stall=int(s[6]),
            sched_best=float(s[7]), sched_stall=int(s[8]))
        net_state: Dict[str, np.ndarray] = {}
        best: Dict[str, np.ndarray] = {}
        for key in data.files:
            if key.startswith("slot:"):
                _, sname, name = key.split(":", 2)
                state.slots.setdefault(name, {})[sname] = data[key]
            elif key.startswith("best:"):
                best[key[5:]] = data[key]
            elif key.startswith("net:"):
                net_state[key[4:]] = data[key]
        if best:
            state.best_params = best
    return state, net_state
