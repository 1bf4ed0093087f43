"""Configuration sampling on and near constraint manifolds.

On-manifold samples come from constraint-specific strategies (parameter
domains, surface sampling, pose sampling + IK); off-manifold samples are
Gaussian perturbations filtered by a hard rejection band on the residual
norm. All generation is seed-deterministic.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import kinematics, manifolds
from .errors import (
    BandTooTightError,
    CheckpointError,
    ContractViolationError,
    IKFailureError,
    SamplingExhaustedError,
)
from .manifolds import MeshSurfaceConstraint, TSRConstraint
from .speed import SpeedModel

_DATASET_MAGIC = b"CMPDS001"


@dataclass
class TrainingSample:
    q: np.ndarray
    d: float
    s_star: float


@dataclass
class SamplerConfig:
    n_samples: int = 10000
    perturb_sigma: float = 0.025   # 0 collapses the off-manifold half onto the manifold
    band_delta: float = 0.05
    seed: int = 0
    on_manifold_fraction: float = 0.5
    ik_attempts: int = 50
    ik_tol: float = 1e-6
    projection_tol: float = 1e-6

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ContractViolationError("n_samples must be > 0")
        if self.perturb_sigma < 0:
            raise ContractViolationError("perturb_sigma must be >= 0")
        if self.band_delta <= 0:
            raise ContractViolationError("band_delta must be > 0")


class Dataset:
    """Columnar training set: configurations with distance and speed labels."""

    def __init__(self, configs: np.ndarray, d: np.ndarray, s_star: np.ndarray,
                 config_hash: int = 0):
        self.configs = np.asarray(configs, dtype=float)
        self.d = np.asarray(d, dtype=float)
        self.s_star = np.asarray(s_star, dtype=float)
        self.config_hash = int(config_hash)
        if not (len(self.configs) == len(self.d) == len(self.s_star)):
            raise ContractViolationError("dataset columns disagree in length")

    def __len__(self) -> int:
        return len(self.configs)

    def __getitem__(self, i: int) -> TrainingSample:
        return TrainingSample(self.configs[i], float(self.d[i]), float(self.s_star[i]))

    def __iter__(self) -> Iterator[TrainingSample]:
        return (self[i] for i in range(len(self)))

    @property
    def dimension(self) -> int:
        return self.configs.shape[1]

    def save(self, path) -> None:
        """Binary layout: magic, m, n, hash (64-bit), then float32 rows
        [q_0..q_{m-1}, d, s_star]."""
        with open(path, "wb") as fh:
            fh.write(_DATASET_MAGIC)
            fh.write(struct.pack("<qqQ", self.dimension, len(self), self.config_hash))
            rows = np.column_stack([self.configs, self.d, self.s_star])
            fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        with open(path, "rb") as fh:
            if fh.read(8) != _DATASET_MAGIC:
                raise CheckpointError(f"{path}: not a dataset file")
            m, n, h = struct.unpack("<qqQ", fh.read(24))
            payload = fh.read(4 * n * (m + 2))
            if len(payload) != 4 * n * (m + 2):
                raise CheckpointError(f"{path}: truncated dataset payload")
        rows = np.frombuffer(payload, dtype="<f4").reshape(n, m + 2).astype(float)
        return cls(rows[:, :m], rows[:, m], rows[:, m + 1], config_hash=h)


class ManifoldSampler:
    """Draws configurations on a constraint manifold and builds datasets.

    A scene may attach `on_manifold_hook(rng) -> q` for parametric manifolds
    and `ik_seed_hook(rng) -> q` to steer IK toward a chosen solution branch.
    """

    def __init__(
        self,
        speed_model: SpeedModel,
        bounds_lo,
        bounds_hi,
        on_manifold_hook=None,
        ik_seed_hook=None,
    ):
        self.speed_model = speed_model
        self.spec = speed_model.spec
        self.robot = speed_model.robot
        self.env = speed_model.env
        self.lo = np.asarray(bounds_lo, dtype=float)
        self.hi = np.asarray(bounds_hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ContractViolationError("bounds must satisfy lo < hi")
        self.on_manifold_hook = on_manifold_hook
        self.ik_seed_hook = ik_seed_hook

    # -- single-sample strategies ---------------------------------------------

    def sample_manifold_config(
        self, rng: np.random.Generator, cfg: Optional[SamplerConfig] = None
    ) -> np.ndarray:
        cfg = cfg or SamplerConfig()
        if self.on_manifold_hook is not None:
            return np.asarray(self.on_manifold_hook(rng), dtype=float)
        if isinstance(self.spec, MeshSurfaceConstraint):
            return self.spec.mesh.sample_surface(rng, 1)[0]
        if isinstance(self.spec, TSRConstraint):
            return self._sample_tsr(rng, cfg)
        return self._sample_projected(rng, cfg)

    def _sample_tsr(self, rng: np.random.Generator, cfg: SamplerConfig) -> np.ndarray:
        chain = self.spec.chain
        lims = chain.joint_limits
        for _ in range(cfg.ik_attempts):
            target = self.spec.sample_region_pose(rng)
            if self.ik_seed_hook is not None:
                seed = np.asarray(self.ik_seed_hook(rng), dtype=float)
            else:
                seed = rng.uniform(lims[:, 0], lims[:, 1])
            try:
                q = kinematics.ik_solve(chain, target, seed, tol=cfg.ik_tol)
            except IKFailureError:
                continue
            if np.all(q >= lims[:, 0]) and np.all(q <= lims[:, 1]):
                return q
        raise SamplingExhaustedError(
            f"no IK solution found in {cfg.ik_attempts} attempts"
        )

    def _sample_projected(self, rng: np.random.Generator, cfg: SamplerConfig) -> np.ndarray:
        for _ in range(cfg.ik_attempts):
            q = rng.uniform(self.lo, self.hi)
            try:
                q_proj = manifolds.project_to_manifold(
                    self.spec, q, tol=cfg.projection_tol
                )
            except Exception:
                continue
            if np.all(q_proj >= self.lo) and np.all(q_proj <= self.hi):
                return q_proj
        raise SamplingExhaustedError(
            f"projection sampling failed {cfg.ik_attempts} times"
        )

    # -- dataset construction ----------------------------------------------------

    def build_dataset(self, cfg: SamplerConfig, config_hash: int = 0) -> Dataset:
        """On-manifold plus band-rejected perturbed samples, labeled with the
        composite distance and expert speed."""
        rng = np.random.default_rng(cfg.seed)
        n_on = int(round(cfg.n_samples * cfg.on_manifold_fraction))
        n_off = cfg.n_samples - n_on

        on = np.stack([
            self.sample_manifold_config(rng, cfg) for _ in range(max(n_on, 1))
        ])[:n_on] if n_on else np.zeros((0, len(self.lo)))

        off = []
        if n_off:
            probe_attempts = 0
            probe_accepts = 0
            probe_size = 200
            attempts_cap = 200 * n_off
            attempts = 0
            while len(off) < n_off:
                base = self.sample_manifold_config(rng, cfg)
                q = base + rng.normal(0.0, cfg.perturb_sigma, size=base.shape)
                q = np.clip(q, self.lo, self.hi)
                attempts += 1
                ok = manifolds.manifold_distance(self.spec, q) <= cfg.band_delta
                if probe_attempts < probe_size:
                    probe_attempts += 1
                    probe_accepts += int(ok)
                    if probe_attempts == probe_size and probe_accepts < probe_size * 0.01:
                        raise BandTooTightError(
                            f"rejection band accepts {probe_accepts}/{probe_size} "
                            f"perturbed samples (sigma={cfg.perturb_sigma}, "
                            f"band_delta={cfg.band_delta})",
                            acceptance_rate=probe_accepts / probe_size,
                            probe_size=probe_size,
                        )
                if ok:
                    off.append(q)
                if attempts > attempts_cap:
                    raise SamplingExhaustedError(
                        "perturbation sampling exceeded the attempt budget"
                    )
            off = np.stack(off)
        else:
            off = np.zeros((0, len(self.lo)))

        configs = np.concatenate([on, off], axis=0)
        d = self.speed_model.composite_distance_batch(configs)
        s_star = self.speed_model.speed_from_distance(d)
        return Dataset(configs, d, s_star, config_hash=config_hash)

    # -- start/goal pairs ---------------------------------------------------------

    def sample_valid_config(
        self, rng: np.random.Generator, cfg: Optional[SamplerConfig] = None,
        max_attempts: int = 200,
    ) -> np.ndarray:
        """On-manifold and strictly collision-free configuration."""
        for _ in range(max_attempts):
            q = self.sample_manifold_config(rng, cfg)
            if kinematics.clearance(self.robot, self.env, q) > 0:
                return q
        raise SamplingExhaustedError(
            f"no collision-free manifold sample in {max_attempts} attempts"
        )

    def sample_pair(
        self, rng: np.random.Generator, cfg: Optional[SamplerConfig] = None,
        min_separation: float = 0.0, max_attempts: int = 200,
    ):
        """Two independent valid configurations; warns when the manifold is so
        small that distinct samples cannot be found."""
        q0 = self.sample_valid_config(rng, cfg)
        for _ in range(max_attempts):
            qT = self.sample_valid_config(rng, cfg)
            if np.linalg.norm(qT - q0) >= min_separation:
                return q0, qT
        warnings.warn(
            "manifold appears degenerate: returning a near-identical pair",
            stacklevel=2,
        )
        return q0, qT
