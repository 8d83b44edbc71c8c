"""Training loop with the desk-scale experiment schedule.

One master seed feeds named substreams (data, init, batches, perturbation,
ascent) so components can be varied independently; the per-epoch batch
order is a pure function of (seed, epoch), which is what makes checkpoint
resume bit-identical to an uninterrupted run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, minibatches
from .netgraph import NetworkGraph, forward
from .optim import OptimizerConfig, OptimizerState, loss_and_grad, optimizer_step
from .pathnorm import path_reg_dp

SUBSTREAMS = {"data": 0, "init": 1, "batches": 2, "perturbation": 3, "ascent": 4, "unbalance": 5}


def substream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), SUBSTREAMS[name]])


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig
    epochs: int = 20
    batch_size: int = 100
    seed: int = 0
    lr_decay: float = 1.0           # multiplicative, per epoch
    momentum_start: float | None = None
    momentum_max: float = 0.9
    momentum_step: float = 0.02
    log_gamma: bool = True


def init_params(net: NetworkGraph, seed: int, scheme: str = "balanced", rec_identity: bool = False) -> np.ndarray:
    """Balanced init: incoming weights N(0, 1/fan-in) per unit, zero bias weights.

    For RNNs, rec_identity=True sets each recurrent matrix to the identity
    and draws the non-recurrent weights uniformly in [-0.01, 0.01].
    """
    rng = substream(seed, "init")
    if net.rnn is not None:
        spec = net.rnn
        theta = np.zeros(spec.n_param)
        w_in, w_rec, w_out = spec.unpack(theta)
        sizes = (spec.n_in,) + spec.hidden
        mats_in, mats_rec = [], []
        for i, n_i in enumerate(spec.hidden):
            if rec_identity:
                mats_in.append(rng.uniform(-0.01, 0.01, size=(n_i, sizes[i])))
                mats_rec.append(np.eye(n_i))
            else:
                mats_in.append(rng.normal(0.0, 1.0 / np.sqrt(sizes[i]), size=(n_i, sizes[i])))
                mats_rec.append(rng.normal(0.0, 1.0 / np.sqrt(n_i), size=(n_i, n_i)))
        if rec_identity:
            out = rng.uniform(-0.01, 0.01, size=(spec.n_out, spec.hidden[-1]))
        else:
            out = rng.normal(0.0, 1.0 / np.sqrt(spec.hidden[-1]), size=(spec.n_out, spec.hidden[-1]))
        return spec.pack(mats_in, mats_rec, out)
    if net.dims is None:
        # generic DAG: N(0, 1/fan-in) per node
        theta = np.zeros(net.n_param)
        for v in range(net.n_nodes):
            if not net.in_edges[v]:
                continue
            _, _, pids = net.in_edges[v]
            theta[pids] = rng.normal(0.0, 1.0 / np.sqrt(len(pids)), size=len(pids))
        return theta
    slices = net.layer_param_slices()
    theta = np.zeros(net.n_param)
    for k, s in enumerate(slices, start=1):
        fan_in = net.dims[k - 1]
        cols = fan_in + (1 if net.has_bias else 0)
        W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(net.dims[k], cols))
        if net.has_bias:
            W[:, -1] = 0.0
        theta[s] = W.ravel()
    return theta


def evaluate(net: NetworkGraph, theta: np.ndarray, dataset: Dataset, loss_kind: str, margin_gamma: float = 0.0):
    """(mean loss, error) on a dataset; error is MSE for regression tasks."""
    X = dataset.flat_inputs()
    outs = forward(net, theta, X).outputs()
    if dataset.task == "regression":
        targets = dataset.labels.reshape(len(dataset), -1)
        loss, _ = loss_and_grad("squared", outs, targets)
        err = float(np.mean((outs - targets) ** 2))
    else:
        loss, _ = loss_and_grad(loss_kind, outs, dataset.labels, margin_gamma)
        err = float(np.mean(outs.argmax(axis=1) != dataset.labels))
    return float(loss), err


@dataclass
class Checkpoint:
    theta: np.ndarray
    velocity: np.ndarray | None
    epoch: int
    step: int


def train(net: NetworkGraph, train_set: Dataset, cfg: TrainConfig, test_set: Dataset | None = None, theta0: np.ndarray | None = None, start: Checkpoint | None = None):
    """Run the schedule and return (theta, per-epoch history rows, checkpoint).

    The per-epoch row holds the global step, epoch-mean training loss, the
    train/test error, the kappa range seen during the epoch and the path
    regularizer value at the epoch boundary.
    """
    if start is not None:
        theta = start.theta.copy()
        state = OptimizerState(velocity=None if start.velocity is None else start.velocity.copy(), step=start.step)
        first_epoch = start.epoch
    else:
        theta = theta0.copy() if theta0 is not None else init_params(net, cfg.seed)
        state = OptimizerState()
        first_epoch = 0

    is_regression = train_set.task == "regression"
    targets = train_set.labels.reshape(len(train_set), -1) if is_regression else train_set.labels
    X_all = train_set.flat_inputs()
    history = []
    for epoch in range(first_epoch, cfg.epochs):
        opt = OptimizerConfig(
            method=cfg.optimizer.method,
            lr=cfg.optimizer.lr * (cfg.lr_decay**epoch),
            alpha=cfg.optimizer.alpha,
            stat=cfg.optimizer.stat,
            use_kappa2=cfg.optimizer.use_kappa2,
            kappa_floor=cfg.optimizer.kappa_floor,
            seed=cfg.optimizer.seed,
            momentum=(min(cfg.momentum_max, cfg.momentum_start + cfg.momentum_step * epoch) if cfg.momentum_start is not None else cfg.optimizer.momentum),
            loss=cfg.optimizer.loss,
            margin_gamma=cfg.optimizer.margin_gamma,
        )
        n_before = len(state.reports)
        diverged = False
        for idx in minibatches(train_set, cfg.batch_size, cfg.seed, epoch):
            theta = optimizer_step(net, theta, X_all[idx], targets[idx], opt, state)
            if not np.isfinite(theta).all():
                diverged = True
                break
        if diverged:
            history.append({
                "step": state.step, "epoch": epoch, "train_loss": np.inf,
                "train_err": np.inf, "test_err": np.inf,
                "kappa_min": np.nan, "kappa_max": np.nan, "gamma2_net": np.nan,
                "diverged": True,
            })
            break
        epoch_reports = state.reports[n_before:]
        train_loss, train_err = evaluate(net, theta, train_set, opt.loss, opt.margin_gamma)
        test_loss, test_err = (np.nan, np.nan)
        if test_set is not None:
            test_loss, test_err = evaluate(net, theta, test_set, opt.loss, opt.margin_gamma)
        row = {
            "step": state.step,
            "epoch": epoch,
            "train_loss": train_loss,
            "train_err": train_err,
            "test_err": test_err,
            "kappa_min": min((r.kappa_min for r in epoch_reports), default=np.nan),
            "kappa_max": max((r.kappa_max for r in epoch_reports), default=np.nan),
            "gamma2_net": path_reg_dp(net, theta)[1] if cfg.log_gamma else np.nan,
        }
        history.append(row)
    return theta, history, Checkpoint(theta=theta.copy(), velocity=None if state.velocity is None else state.velocity.copy(), epoch=cfg.epochs, step=state.step)
