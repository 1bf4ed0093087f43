"""Neural time field: Fourier encoding, symmetric trunk/head, derivatives.

The network maps a start/goal pair to a strictly positive factor tau; the
arrival time is ||q0 - qT|| / tau. Speeds follow from tau, its gradient, and
its Laplacian through the chain-rule expansion of the damped first-arrival
equation. All activations are smooth so second derivatives exist everywhere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ContractViolationError, SpeedSingularityError

_CKPT_MAGIC = b"CMPCKPT1"
CHECKPOINT_VERSION = 1


def fourier_encode(freqs: np.ndarray, q: np.ndarray) -> np.ndarray:
    """[cos(2 pi Z^T q), sin(2 pi Z^T q)] for frequency matrix Z of shape (m, F)."""
    freqs = np.asarray(freqs, dtype=float)
    q = np.asarray(q, dtype=float)
    proj = 2.0 * np.pi * (q @ freqs)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


@dataclass
class FieldConfig:
    dimension: int
    n_frequencies: int = 128
    width: int = 256
    trunk_blocks: int = 3
    head_blocks: int = 3
    freq_std: float = 1.0
    tau_offset: float = 0.1
    train_frequencies: bool = False
    seed: int = 0
    center: Optional[list] = None      # input normalization offset
    halfrange: Optional[list] = None   # input normalization scale
    mixed_norm_term: bool = False      # literal published radicand (see predicted_speed)

    def __post_init__(self):
        if self.center is None:
            self.center = [0.0] * self.dimension
        if self.halfrange is None:
            self.halfrange = [1.0] * self.dimension
        if len(self.center) != self.dimension or len(self.halfrange) != self.dimension:
            raise ContractViolationError("normalization vectors must have length m")


class _ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h):
        return h + self.fc2(torch.tanh(self.fc1(torch.tanh(h))))


class TimeFieldNet(nn.Module):
    """Symmetric positive tau(q0, qT) with trainable trunk and head."""

    def __init__(self, config: FieldConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        m, F, W = config.dimension, config.n_frequencies, config.width

        self.freqs = nn.Parameter(
            torch.empty(m, F, dtype=dtype), requires_grad=config.train_frequencies
        )
        self.register_buffer("center", torch.zeros(m, dtype=dtype))
        self.register_buffer("halfrange", torch.ones(m, dtype=dtype))

        self.trunk_in = nn.Linear(2 * F, W)
        self.trunk = nn.ModuleList(_ResidualBlock(W) for _ in range(config.trunk_blocks))
        self.head_in = nn.Linear(2 * W, W)
        self.head = nn.ModuleList(_ResidualBlock(W) for _ in range(config.head_blocks))
        self.head_out = nn.Linear(W, 1)

        self.to(dtype)
        self._init_weights()
        with torch.no_grad():
            self.center.copy_(torch.as_tensor(config.center, dtype=dtype))
            self.halfrange.copy_(torch.as_tensor(config.halfrange, dtype=dtype))

    def _init_weights(self):
        g = torch.Generator().manual_seed(self.config.seed)
        dtype = self.freqs.dtype
        with torch.no_grad():
            self.freqs.copy_(
                torch.randn(self.freqs.shape, generator=g, dtype=dtype)
                * self.config.freq_std
            )
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    fan_in, fan_out = mod.in_features, mod.out_features
                    a = float(np.sqrt(6.0 / (fan_in + fan_out)))
                    mod.weight.uniform_(-a, a, generator=g)
                    mod.bias.zero_()
            # Start near tau == 1 so the initial predicted speed is ~1,
            # matching the fully blended schedule target at epoch 0.
            self.head_out.weight.mul_(0.01)
            self.head_out.bias.fill_(float(np.log(np.expm1(1.0 - self.config.tau_offset))))

    @property
    def dtype(self) -> torch.dtype:
        return self.freqs.dtype

    def encode(self, q: torch.Tensor) -> torch.Tensor:
        qn = (q - self.center) / self.halfrange
        proj = 2.0 * np.pi * qn @ self.freqs
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)

    def embed(self, q: torch.Tensor) -> torch.Tensor:
        h = self.trunk_in(self.encode(q))
        for block in self.trunk:
            h = block(h)
        return h

    def forward(self, q0: torch.Tensor, qT: torch.Tensor) -> torch.Tensor:
        """tau for a batch of pairs; exactly symmetric under argument swap."""
        h0 = self.embed(q0)
        hT = self.embed(qT)
        c = torch.cat([torch.maximum(h0, hT), torch.minimum(h0, hT)], dim=-1)
        h = self.head_in(c)
        for block in self.head:
            h = block(h)
        out = self.head_out(h).squeeze(-1)
        return nn.functional.softplus(out) + self.config.tau_offset

    def tensor(self, q) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(q, dtype=float), dtype=self.dtype)
        return t.reshape(-1, self.config.dimension)


@dataclass
class FieldEval:
    tau: float
    grad_q0: np.ndarray
    grad_qT: np.ndarray
    lap_q0: float
    lap_qT: float


def tau_value(net: TimeFieldNet, q0, qT) -> float:
    """Positive symmetric time factor for one pair."""
    with torch.no_grad():
        return float(net(net.tensor(q0), net.tensor(qT))[0])


def tau_batch(net: TimeFieldNet, Q0: np.ndarray, QT: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return net(net.tensor(Q0), net.tensor(QT)).numpy()


def _derivatives(
    net: TimeFieldNet,
    q0: torch.Tensor,
    qT: torch.Tensor,
    need_laplacian: bool = True,
    create_graph: bool = False,
) -> Tuple[torch.Tensor, ...]:
    """tau, grads, and Laplacians w.r.t. both endpoints for a batch of pairs."""
    q0 = q0.detach().clone().requires_grad_(True)
    qT = qT.detach().clone().requires_grad_(True)
    tau = net(q0, qT)
    inner = need_laplacian or create_graph
    g0, gT = torch.autograd.grad(tau.sum(), (q0, qT), create_graph=inner)
    if not need_laplacian:
        return tau, g0, gT, None, None
    m = q0.shape[1]
    lap0 = torch.zeros_like(tau)
    lapT = torch.zeros_like(tau)
    for i in range(m):
        keep = create_graph or i < m - 1
        h0 = torch.autograd.grad(
            g0[:, i].sum(), q0, create_graph=create_graph, retain_graph=True
        )[0][:, i]
        hT = torch.autograd.grad(
            gT[:, i].sum(), qT, create_graph=create_graph, retain_graph=keep
        )[0][:, i]
        lap0 = lap0 + h0
        lapT = lapT + hT
    return tau, g0, gT, lap0, lapT


def tau_derivatives(net: TimeFieldNet, q0, qT) -> FieldEval:
    """Exact first derivatives and Laplacians of tau at one pair."""
    tau, g0, gT, lap0, lapT = _derivatives(net, net.tensor(q0), net.tensor(qT))
    return FieldEval(
        tau=float(tau[0].detach()),
        grad_q0=g0[0].detach().numpy(),
        grad_qT=gT[0].detach().numpy(),
        lap_q0=float(lap0[0].detach()),
        lap_qT=float(lapT[0].detach()),
    )


def arrival_time(net: TimeFieldNet, q0, qT) -> float:
    """||q0 - qT|| / tau(q0, qT); zero iff the endpoints coincide."""
    q0 = np.asarray(q0, dtype=float).reshape(-1)
    qT = np.asarray(qT, dtype=float).reshape(-1)
    return float(np.linalg.norm(q0 - qT) / tau_value(net, q0, qT))


def _speed_from_parts(tau, grad, diff, dist2, eta, lap, grad_other, mixed):
    """Speed at the endpoint whose gradient is `grad`; `diff` points from the
    other endpoint toward it. `mixed` swaps in the other endpoint's gradient
    norm, reproducing the published radicand verbatim."""
    norm_grad = grad_other if mixed else grad
    radicand = (
        tau ** 2
        - 2.0 * tau * (diff * grad).sum(-1)
        + dist2 * (norm_grad ** 2).sum(-1)
    ) / tau ** 4
    radicand = torch.clamp(radicand, min=1e-12)
    denom = eta * lap + torch.sqrt(radicand)
    return 1.0 / denom, denom


def predicted_speed_batch(
    net: TimeFieldNet,
    q0: torch.Tensor,
    qT: torch.Tensor,
    eta: float,
    create_graph: bool = False,
):
    """Speeds at both endpoints plus a validity mask (positive denominators)."""
    need_lap = eta != 0.0
    tau, g0, gT, lap0, lapT = _derivatives(
        net, q0, qT, need_laplacian=need_lap, create_graph=create_graph
    )
    if not need_lap:
        lap0 = torch.zeros_like(tau)
        lapT = torch.zeros_like(tau)
    diff = qT - q0
    dist2 = (diff ** 2).sum(-1)
    mixed = net.config.mixed_norm_term
    sT, denT = _speed_from_parts(tau, gT, diff, dist2, eta, lapT, g0, mixed)
    s0, den0 = _speed_from_parts(tau, g0, -diff, dist2, eta, lap0, gT, mixed)
    valid = (den0 > 0) & (denT > 0)
    return s0, sT, valid, tau


def predicted_speed(net: TimeFieldNet, q0, qT, eta: float) -> Tuple[float, float]:
    """Chain-rule speed at (q0, qT); raises on a non-positive denominator."""
    s0, sT, valid, _ = predicted_speed_batch(
        net, net.tensor(q0), net.tensor(qT), eta
    )
    if not bool(valid[0]):
        raise SpeedSingularityError(
            "speed denominator is non-positive at the query pair"
        )
    return float(s0[0]), float(sT[0])


# ---------------------------------------------------------------------------
# Checkpoints: deterministic self-describing binary container


def save_checkpoint(net: TimeFieldNet, path, config_hash: int = 0) -> None:
    """Header (version, config hash, architecture, shapes) + float32 payload."""
    state = net.state_dict()
    keys = sorted(state.keys())
    cfg = dict(net.config.__dict__)
    header = {
        "version": CHECKPOINT_VERSION,
        "config_hash": int(config_hash),
        "field_config": cfg,
        "tensors": {k: list(state[k].shape) for k in keys},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<q", len(blob)))
        fh.write(blob)
        for k in keys:
            fh.write(
                np.ascontiguousarray(
                    state[k].detach().numpy(), dtype="<f4"
                ).tobytes()
            )


def load_checkpoint(
    path, expected_hash: Optional[int] = None, dtype: torch.dtype = torch.float64
) -> TimeFieldNet:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<q", fh.read(8))
        try:
            header = json.loads(fh.read(blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupted header") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {header.get('version')} "
                f"!= supported {CHECKPOINT_VERSION}"
            )
        if expected_hash is not None and header["config_hash"] != int(expected_hash):
            raise CheckpointError(
                f"{path}: config hash {header['config_hash']} does not match "
                f"expected {int(expected_hash)}"
            )
        net = TimeFieldNet(FieldConfig(**header["field_config"]), dtype=dtype)
        state = {}
        for k in sorted(header["tensors"].keys()):
            shape = header["tensors"][k]
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise CheckpointError(f"{path}: truncated payload for {k}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            state[k] = torch.as_tensor(arr.astype(np.float64)).to(dtype)
        net.load_state_dict(state)
    return net


def checkpoint_roundtrip(net: TimeFieldNet, path) -> TimeFieldNet:
    """Save then load; weights agree bitwise at 32-bit precision."""
    save_checkpoint(net, path)
    return load_checkpoint(path, dtype=net.dtype)
