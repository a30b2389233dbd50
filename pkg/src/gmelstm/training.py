"""Adam/MAE training of the sequence model and policy-gradient training of the gates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import GATED_MODALITIES, MODALITIES, ClipArrays, concat_arrays
from .evaluation import binary_metrics
from .gme import GateController, GateTrace, apply_gates, sample_gates
from .model import SequenceModelParams, forward, mae_loss, predict_batch

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-6


class Adam:
    """Adam with bias-corrected moments over a dict of named arrays."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             ascend: bool = False) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; ``ascend`` climbs instead of descends."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for tensor {name!r}")
            if g.shape != params[name].shape:
                raise nx.DimensionError(
                    f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        sign = 1.0 if ascend else -1.0
        out = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = value
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            out[name] = value + sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ------------------------------------------------------------------ supervised

@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    max_steps: int | None = None
    seed: int = 0
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("lr, batch_size, max_epochs and patience must be positive")
        self.modalities = tuple(self.modalities)


@dataclass
class TrainResult:
    params: SequenceModelParams
    history: list[dict]
    best_epoch: int
    best_val_mae: float
    steps: int


def dataset_mae(params: SequenceModelParams, data: ClipArrays,
                modalities: Sequence[str] = MODALITIES) -> float:
    pred, _ = predict_batch(params, data.inputs(modalities), data.mask)
    return float(np.mean(np.abs(pred - data.labels)))


def gradients(params: SequenceModelParams, inputs: np.ndarray, mask: np.ndarray,
              labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """MAE of a batch and its gradient for every parameter tensor."""
    leaves = params.leaves()
    y_hat, _ = forward(params, inputs, mask, leaves)
    loss = mae_loss(y_hat, labels)
    return loss.item(), nx.backward(loss, leaves.values())


def train_supervised(params: SequenceModelParams, train: ClipArrays, val: ClipArrays | None,
                     config: TrainConfig = TrainConfig(),
                     on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch Adam on MAE with early stopping; returns the best-validation checkpoint.

    Without a validation split the train MAE drives checkpoint selection.
    """
    if len(train) == 0:
        raise ValueError("empty train split")
    if val is not None and len(val) == 0:
        raise ValueError("empty validation split")
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.lr)
    x_train = train.inputs(config.modalities)
    x_val = val.inputs(config.modalities) if val is not None else None
    current = params.copy()
    best = current.copy()
    best_score, best_epoch, since_best, steps = math.inf, 0, 0, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = gradients(current, x_train[idx], train.mask[idx], train.labels[idx])
            current = type(current)(current.shape, opt.step(current.tensors, grads))
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        row = {"epoch": epoch, "steps": steps}
        splits = [("train", x_train, train)] + ([("val", x_val, val)] if val is not None else [])
        for name, x, d in splits:
            pred, _ = predict_batch(current, x, d.mask)
            row[f"{name}_mae"] = float(np.mean(np.abs(pred - d.labels)))
            row[f"{name}_acc"], row[f"{name}_f1"] = binary_metrics(d.labels, pred)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        score = row.get("val_mae", row["train_mae"])
        if score < best_score:
            best, best_score, best_epoch, since_best = current.copy(), score, epoch, 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return TrainResult(best, history, best_epoch, best_score, steps)


# ------------------------------------------------------------------ REINFORCE

ADVANTAGE_MODES = ("ratio", "centered")


@dataclass
class ReinforceConfig:
    lr: float = 1e-4
    n_samples: int = 5
    epoch_num: int = 20
    decay: float = 0.9
    advantage_mode: str = "ratio"
    hidden: int = 32
    seed: int = 0
    modalities: tuple[str, ...] = GATED_MODALITIES

    def __post_init__(self):
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ValueError(f"advantage_mode must be one of {ADVANTAGE_MODES}")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        if self.n_samples < 1 or self.epoch_num < 1:
            raise ValueError("n_samples and epoch_num must be positive")
        self.modalities = tuple(self.modalities)


@dataclass
class ReinforceState:
    """Moving-average loss baseline plus one Adam state per controller."""

    decay: float = 0.9
    n: int = 5
    baseline: float | None = None
    rewards: list[dict] = field(default_factory=list)
    optimizers: dict[str, Adam] = field(default_factory=dict)


def update_baseline(state: ReinforceState, losses: Sequence[float]) -> ReinforceState:
    """b <- decay*b + (1-decay)*mean(L); the first call sets b = mean(L)."""
    if len(losses) == 0:
        raise ValueError("update_baseline needs at least one loss")
    mean = float(np.mean(losses))
    if state.baseline is None:
        state.baseline = mean
    else:
        state.baseline = state.decay * state.baseline + (1.0 - state.decay) * mean
    return state


def reward_factors(losses: Sequence[float], baseline: float, mode: str = "ratio") -> np.ndarray:
    """e^(b-L_k) ("ratio", the default) or e^(-L_k) - e^(-b) ("centered")."""
    losses = np.asarray(losses, dtype=np.float64)
    if mode == "ratio":
        return np.exp(baseline - losses)
    if mode == "centered":
        return np.exp(-losses) - np.exp(-baseline)
    raise ValueError(f"unknown advantage mode {mode!r}")


def log_likelihood_weights(decisions: np.ndarray, rewards: np.ndarray):
    """Per-row weights on log p and log(1-p) of (1/n) sum_k R_k log P(c_k)."""
    decisions = np.asarray(decisions, dtype=np.float64)
    if decisions.ndim == 1:
        decisions = decisions[None]
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    if rewards.shape[0] != decisions.shape[0]:
        raise ValueError(f"{rewards.shape[0]} rewards for {decisions.shape[0]} samples")
    n = decisions.shape[0]
    on = (rewards * decisions).sum(axis=0) / n
    off = (rewards * (1.0 - decisions)).sum(axis=0) / n
    return on.reshape(-1, 1), off.reshape(-1, 1)


def surrogate_objective(ctrl: GateController, inputs: np.ndarray, decisions: np.ndarray,
                        rewards: np.ndarray, leaves=None) -> nx.Tensor:
    """(1/n) sum_k R_k sum_i log P(c_ki | x_i), as a differentiable scalar."""
    on, off = log_likelihood_weights(decisions, rewards)
    p = nx.clip(ctrl.forward(inputs, leaves), PROB_FLOOR, 1.0 - PROB_FLOOR)
    log_p = nx.log(p)
    log_q = nx.log(nx.sub(nx.constant(np.ones(p.shape)), p))
    return nx.add(nx.sum_all(nx.hadamard(log_p, nx.constant(on))),
                  nx.sum_all(nx.hadamard(log_q, nx.constant(off))))


def policy_gradient(ctrl: GateController, inputs: np.ndarray, decisions: np.ndarray,
                    rewards: np.ndarray) -> dict[str, np.ndarray]:
    """REINFORCE estimate (1/n) sum_k sum_i grad log P(c_ki | x_i) * R_k."""
    leaves = ctrl.leaves()
    obj = surrogate_objective(ctrl, inputs, decisions, rewards, leaves)
    return nx.backward(obj, leaves.values())


def reinforce_update(ctrl: GateController, inputs: np.ndarray, decisions: np.ndarray,
                     losses: Sequence[float], state: ReinforceState, lr: float = 1e-4,
                     advantage_mode: str = "ratio") -> GateController:
    """One Adam ascent step on the REINFORCE estimate for ``ctrl``.

    ``inputs`` holds the modality vector of every sampled decision (rows),
    ``decisions`` is (n, rows) with the k-th sampled trace in row k and
    ``losses`` the matching validation MAEs. Before the first baseline
    update, b is taken as the mean of ``losses``.
    """
    decisions = np.atleast_2d(decisions)
    if decisions.shape[0] != len(losses):
        raise ValueError(f"{decisions.shape[0]} traces but {len(losses)} losses")
    baseline = state.baseline if state.baseline is not None else float(np.mean(losses))
    rewards = reward_factors(losses, baseline, advantage_mode)
    grads = policy_gradient(ctrl, inputs, decisions, rewards)
    opt = state.optimizers.setdefault(ctrl.modality, Adam(lr=lr))
    return GateController(ctrl.modality, opt.step(ctrl.tensors, grads, ascend=True))


# ------------------------------------------------------------- gate training

@dataclass
class GmeResult:
    controllers: dict[str, GateController]
    params: SequenceModelParams
    traces: dict[str, GateTrace]
    best_val_mae: float
    rewards: list[dict]
    inner_histories: list[list[dict]]


def _decision_rows(data: ClipArrays, traces: Mapping[str, GateTrace], modality: str):
    return traces[modality].decisions[data.mask].astype(np.float64)


def train_gme(controllers: Mapping[str, GateController], template: SequenceModelParams,
              train: ClipArrays, val: ClipArrays, train_config: TrainConfig = TrainConfig(),
              config: ReinforceConfig = ReinforceConfig(),
              update_controllers: bool = True,
              on_sample: Callable[[dict], None] | None = None) -> GmeResult:
    """Alternate gate sampling, inner LSTM(A) training and controller updates.

    Each epoch draws ``n_samples`` gate traces over train+val, trains a fresh
    copy of ``template`` on every gated dataset (same init and seed), scores
    it by validation MAE, then takes one REINFORCE step per controller and
    updates the loss baseline. Returns the final controllers and the sampled
    model with the lowest validation MAE.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_gme needs non-empty train and validation splits")
    ctrls = {c.modality: c.copy() for c in controllers.values()}
    state = ReinforceState(decay=config.decay, n=config.n_samples)
    pool = concat_arrays(train, val)
    n_train = len(train)
    best: tuple[float, SequenceModelParams, dict] | None = None
    inner_histories = []
    for epoch in range(1, config.epoch_num + 1):
        losses, sampled = [], []
        for k in range(1, config.n_samples + 1):
            seed = int(np.random.SeedSequence([config.seed, epoch, k]).generate_state(1)[0])
            traces = sample_gates(ctrls, pool, seed)
            gated = apply_gates(pool, traces)
            result = train_supervised(template, gated.take(range(n_train)),
                                      gated.take(range(n_train, len(pool))), train_config)
            losses.append(result.best_val_mae)
            sampled.append(traces)
            inner_histories.append(result.history)
            if best is None or result.best_val_mae < best[0]:
                best = (result.best_val_mae, result.params, traces)
        baseline = state.baseline if state.baseline is not None else float(np.mean(losses))
        rewards = reward_factors(losses, baseline, config.advantage_mode)
        for k, (loss, r) in enumerate(zip(losses, rewards), start=1):
            row = {"epoch": epoch, "k": k, "loss": float(loss), "baseline": baseline,
                   "reward": float(r)}
            state.rewards.append(row)
            if on_sample is not None:
                on_sample(row)
        if update_controllers:
            for mod, ctrl in ctrls.items():
                rows = pool.features(mod)[pool.mask]
                decisions = np.stack([_decision_rows(pool, tr, mod) for tr in sampled])
                ctrls[mod] = reinforce_update(ctrl, rows, decisions, losses, state,
                                              lr=config.lr, advantage_mode=config.advantage_mode)
        update_baseline(state, losses)
        log.info("epoch %d: val MAE %s, baseline %.4f", epoch,
                 " ".join(f"{x:.4f}" for x in losses), state.baseline)
    assert best is not None
    return GmeResult(ctrls, best[1], best[2], best[0], state.rewards, inner_histories)
