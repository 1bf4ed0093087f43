"""Field training: ratio loss, progressive speed blending, random batch buffer."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np
import torch

from .errors import ContractViolationError
from .field import FieldConfig, TimeFieldNet, predicted_speed_batch
from .sampling import Dataset


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    buffer_size: int = 0             # 0 -> 20 * batch_size
    learning_rate: float = 1e-3
    lr_decay: float = 0.5            # applied at 60% and 80% of the epochs
    warmup_epochs: int = 0           # 0 -> epochs // 2
    beta_shape: str = "linear"
    eta: float = 0.05
    seed: int = 0
    buffer_refresh: float = 0.1      # fraction of the buffer resampled per epoch
    skip_warn_fraction: float = 0.05
    divergence_loss: float = 1e6
    torch_threads: int = 1           # >1 oversubscribes on small matmuls

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ContractViolationError("epochs and batch_size must be > 0")
        if self.learning_rate <= 0:
            raise ContractViolationError("learning rate must be > 0")
        if self.buffer_size == 0:
            self.buffer_size = 20 * self.batch_size
        if self.buffer_size <= 0:
            raise ContractViolationError("buffer_size must be > 0")
        if self.warmup_epochs == 0:
            self.warmup_epochs = max(1, self.epochs // 2)
        if self.beta_shape != "linear":
            raise ContractViolationError(f"unknown beta shape {self.beta_shape!r}")


def blend_weight(epoch: int, cfg: TrainConfig) -> float:
    """Schedule weight in [0, 1]: 0 at epoch 0, linear ramp, 1 after warmup."""
    if epoch < 0:
        raise ContractViolationError("epoch must be >= 0")
    return float(min(1.0, epoch / cfg.warmup_epochs))


def isotropic_loss(s_pred, s_target) -> float:
    """Mean of s*/s + s/s* - 2 summed over both pair endpoints.

    Inputs are arrays of shape (B, 2) holding the speeds at the two endpoints
    of each training pair. Zero exactly when prediction matches the target.
    """
    s_pred = np.asarray(s_pred, dtype=float)
    s_target = np.asarray(s_target, dtype=float)
    if np.any(s_pred <= 0) or np.any(s_target <= 0):
        raise ContractViolationError("speeds must be positive")
    ratio = s_target / s_pred
    return float(np.mean(np.sum(ratio + 1.0 / ratio - 2.0, axis=-1)))


@dataclass
class TrainingLog:
    epoch: List[int] = dc_field(default_factory=list)
    beta: List[float] = dc_field(default_factory=list)
    loss: List[float] = dc_field(default_factory=list)
    skip_rate: List[float] = dc_field(default_factory=list)
    wall_clock: List[float] = dc_field(default_factory=list)
    aborted: bool = False

    def append(self, epoch, beta, loss, skip_rate, wall_clock):
        self.epoch.append(int(epoch))
        self.beta.append(float(beta))
        self.loss.append(float(loss))
        self.skip_rate.append(float(skip_rate))
        self.wall_clock.append(float(wall_clock))

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,beta,loss,skip_rate,wall_clock\n")
            for i in range(len(self.epoch)):
                fh.write(
                    f"{self.epoch[i]},{self.beta[i]:.6f},{self.loss[i]:.10g},"
                    f"{self.skip_rate[i]:.6f},{self.wall_clock[i]:.3f}\n"
                )


class BatchBuffer:
    """Fixed-size pool of dataset indices refreshed by uniform resampling."""

    def __init__(self, n_data: int, size: int, rng: np.random.Generator):
        self.n_data = n_data
        self.indices = rng.integers(0, n_data, size=size)

    def refresh(self, fraction: float, rng: np.random.Generator) -> None:
        n = int(round(fraction * len(self.indices)))
        if n == 0:
            return
        pos = rng.integers(0, len(self.indices), size=n)
        self.indices[pos] = rng.integers(0, self.n_data, size=n)

    def draw_pairs(self, batch_size: int, rng: np.random.Generator):
        i = self.indices[rng.integers(0, len(self.indices), size=batch_size)]
        j = self.indices[rng.integers(0, len(self.indices), size=batch_size)]
        return i, j


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    field_config: Optional[FieldConfig] = None,
    net: Optional[TimeFieldNet] = None,
    verbose: bool = False,
):
    """Train a time field on dataset pairs; returns (net, TrainingLog).

    Each epoch draws one batch of start/goal pairs from the buffer, predicts
    endpoint speeds through the chain-rule expansion with viscosity eta, and
    descends the ratio loss against the blended expert speed. Divergence
    aborts and restores the last finite-loss weights.
    """
    if len(dataset) == 0:
        raise ContractViolationError("dataset is empty")
    if net is None:
        if field_config is None:
            field_config = FieldConfig(dimension=dataset.dimension, seed=cfg.seed)
        net = TimeFieldNet(field_config)

    rng = np.random.default_rng(cfg.seed)
    configs = torch.as_tensor(dataset.configs, dtype=net.dtype)
    s_star = torch.as_tensor(dataset.s_star, dtype=net.dtype)

    optimizer = torch.optim.Adam(
        [p for p in net.parameters() if p.requires_grad], lr=cfg.learning_rate
    )
    milestones = [int(cfg.epochs * 0.6), int(cfg.epochs * 0.8)]
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=milestones, gamma=cfg.lr_decay
    )

    buffer = BatchBuffer(len(dataset), cfg.buffer_size, rng)
    log = TrainingLog()
    last_good = copy.deepcopy(net.state_dict())
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        buffer.refresh(cfg.buffer_refresh, rng)
        i0, iT = buffer.draw_pairs(cfg.batch_size, rng)
        q0 = configs[i0]
        qT = configs[iT]
        beta = blend_weight(epoch, cfg)

        s0, sT, valid, _ = predicted_speed_batch(
            net, q0, qT, cfg.eta, create_graph=True
        )
        target0 = (1.0 - beta) + beta * s_star[i0]
        targetT = (1.0 - beta) + beta * s_star[iT]
        valid = valid & torch.isfinite(s0) & torch.isfinite(sT) & (s0 > 0) & (sT > 0)
        n_valid = int(valid.sum())
        skip_rate = 1.0 - n_valid / cfg.batch_size
        if n_valid == 0:
            log.append(epoch, beta, float("nan"), 1.0, time.perf_counter() - t0)
            continue

        r0 = target0[valid] / s0[valid]
        rT = targetT[valid] / sT[valid]
        loss = (r0 + 1.0 / r0 + rT + 1.0 / rT - 4.0).mean()

        loss_val = float(loss)
        if not np.isfinite(loss_val) or loss_val > cfg.divergence_loss:
            log.append(epoch, beta, loss_val, skip_rate, time.perf_counter() - t0)
            log.aborted = True
            net.load_state_dict(last_good)
            break

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        last_good = copy.deepcopy(net.state_dict())
        log.append(epoch, beta, loss_val, skip_rate, time.perf_counter() - t0)
        if verbose and (epoch % max(1, cfg.epochs // 20) == 0 or epoch == cfg.epochs - 1):
            print(
                f"epoch {epoch:5d}  beta {beta:.2f}  loss {loss_val:.5f}  "
                f"skip {skip_rate:.3f}"
            )

    return net, log


def validation_loss(
    net: TimeFieldNet,
    dataset: Dataset,
    eta: float,
    n_pairs: int = 512,
    seed: int = 10_000,
) -> float:
    """Mean ratio loss against the unblended expert speed on held-out pairs."""
    rng = np.random.default_rng(seed)
    i0 = rng.integers(0, len(dataset), size=n_pairs)
    iT = rng.integers(0, len(dataset), size=n_pairs)
    q0 = torch.as_tensor(dataset.configs[i0], dtype=net.dtype)
    qT = torch.as_tensor(dataset.configs[iT], dtype=net.dtype)
    s0, sT, valid, _ = predicted_speed_batch(net, q0, qT, eta)
    t0 = torch.as_tensor(dataset.s_star[i0], dtype=net.dtype)
    tT = torch.as_tensor(dataset.s_star[iT], dtype=net.dtype)
    r0 = (t0[valid] / s0[valid]).detach().numpy()
    rT = (tT[valid] / sT[valid]).detach().numpy()
    return float(np.mean(r0 + 1.0 / r0 + rT + 1.0 / rT - 4.0))
