"""Maximum-likelihood training with Adam, linear warmup and actnorm data init."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .data import dequantize
from .errors import ContractError, NumericError, SingularMatrixError
from .model import FlowModel

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "lr", "train_nll", "val_bits_per_dim")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 500
    seed: int = 0
    grad_clip: float = 50.0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update; returns new arrays keyed like ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def warmup_lr(step: int, steady: float, warmup: int) -> float:
    """``steady * min(1, step / warmup)``; step counts from 1."""
    if warmup <= 0:
        return steady
    return steady * min(1.0, step / warmup)


def nll_loss(model: FlowModel, batch) -> E.Tensor:
    """Mean negative log-likelihood (nats) of a dequantized batch."""
    batch = np.asarray(batch.data if isinstance(batch, E.Tensor) else batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ContractError("empty batch")
    lp = model.log_prob(E.Tensor(batch))
    bad = np.flatnonzero(~np.isfinite(lp.data))
    if bad.size:
        raise NumericError(f"non-finite log-probability for sample {int(bad[0])}")
    return E.mul(E.mean(lp), -1.0)


def loss_and_grads(model: FlowModel, batch) -> tuple[float, dict]:
    params = model.named_parameters()
    with E.GradientTape() as tape:
        tape.watch(*params.values())
        loss = nll_loss(model, batch)
    grads = E.backward(tape, loss)
    return loss.item(), {name: grads[p] for name, p in params.items()}


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


@dataclass
class TrainResult:
    model: FlowModel
    history: list[dict]
    best_epoch: int
    best_val_bpd: float
    aborted: bool = False
    reason: str = ""


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split; validation gets ``round(n*fraction)``."""
    rng = np.random.default_rng([seed, 0x5A1])
    perm = rng.permutation(n)
    n_val = int(round(n * fraction))
    if fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass: index batches that together cover ``range(n)`` once."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def evaluate_bpd(model: FlowModel, images: np.ndarray, batch_size: int = 256) -> float:
    """Mean bits/dim with deterministic (mid-bin) dequantization."""
    vals = []
    for i in range(0, len(images), batch_size):
        x = dequantize(images[i : i + batch_size], model.n_bits)
        vals.append(np.atleast_1d(model.bits_per_dim(x)))
    return float(np.mean(np.concatenate(vals)))


def _check_kernels(model: FlowModel, repaired: set) -> None:
    for i, layer in enumerate(model.invconvs()):
        if layer.is_singular():
            if i in repaired:
                raise SingularMatrixError(f"invconv kernel {i} became singular twice")
            log.warning("invconv kernel %d singular; re-orthogonalizing", i)
            layer.reorthogonalize()
            repaired.add(i)


def train(model: FlowModel, images, cfg: TrainConfig, callback=None) -> TrainResult:
    """Fit ``model`` to integer ``images`` (``[N, *input_shape]``) by maximum likelihood.

    Mutates ``model`` in place during training; the returned result holds a
    copy restored to the best-validation parameters.
    """
    images = np.asarray(images)
    if images.shape[1:] != model.input_shape:
        raise ContractError(
            f"dataset shape {images.shape[1:]} does not match model input {model.input_shape}"
        )
    train_idx, val_idx = split_validation(len(images), cfg.val_fraction, cfg.seed)
    train_set = images[train_idx]
    val_set = images[val_idx] if len(val_idx) else images[train_idx]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    repaired: set[int] = set()
    history: list[dict] = []

    if any(not a.initialized for a in model.actnorms()):
        first = train_set[rng.permutation(len(train_set))[: cfg.batch_size]]
        model.data_init(dequantize(first, model.n_bits, rng))

    best = model.copy()
    best_epoch, best_bpd = 0, evaluate_bpd(model, val_set)
    step = 0
    aborted, reason = False, ""
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        last_good = {k: p.data for k, p in model.named_parameters().items()}
        for idx in epoch_batches(len(train_set), cfg.batch_size, rng):
            batch = train_set[idx]
            x = dequantize(batch, model.n_bits, rng)
            try:
                loss, grads = loss_and_grads(model, x)
            except NumericError as exc:
                loss, grads = float("nan"), None
                reason = str(exc)
            if grads is None or not math.isfinite(loss) or not all(
                np.all(np.isfinite(g)) for g in grads.values()
            ):
                aborted = True
                reason = reason or f"loss diverged at step {step + 1}"
                for k, v in last_good.items():
                    model.set_parameter(k, v)
                break
            step += 1
            grads, _ = clip_global_norm(grads, cfg.grad_clip)
            lr = warmup_lr(step, cfg.lr, cfg.warmup_steps)
            params = {k: p.data for k, p in model.named_parameters().items()}
            for k, v in adam_step(params, grads, state, lr).items():
                model.set_parameter(k, v)
            _check_kernels(model, repaired)
            losses.append(loss)
        if aborted:
            log.error("training aborted in epoch %d: %s", epoch, reason)
            break
        val_bpd = evaluate_bpd(model, val_set)
        row = {
            "epoch": epoch,
            "step": step,
            "lr": warmup_lr(step, cfg.lr, cfg.warmup_steps),
            "train_nll": float(np.mean(losses)) if losses else float("nan"),
            "val_bits_per_dim": val_bpd,
        }
        history.append(row)
        log.info("epoch %d step %d nll %.4f val bpd %.4f", epoch, step, row["train_nll"], val_bpd)
        if callback is not None:
            callback(row)
        if val_bpd < best_bpd:
            best, best_epoch, best_bpd = model.copy(), epoch, val_bpd
    best.metadata = {
        "epoch": best_epoch,
        "step": step,
        "val_bits_per_dim": best_bpd,
        "config": asdict(cfg),
        "rng_state": rng.bit_generator.state,
        "aborted": aborted,
    }
    return TrainResult(best, history, best_epoch, best_bpd, aborted, reason)


def write_history(path: str | os.PathLike, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})
