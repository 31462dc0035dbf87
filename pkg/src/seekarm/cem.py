"""Cross-entropy search over a Gaussian attention space of keypoints.

Each iteration samples candidate keypoints, scores every candidate by its
average task return over a few rollouts of the frozen actuator, keeps the
top ``k`` and refits the Gaussian to them. The loop stops when the
covariance collapses (Frobenius norm below ``epsilon``) or after
``iterations`` rounds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .env import DomainRandomizationConfig, PerturbationConfig, Scene
from .errors import ContractViolation, DegenerateCovarianceError, OptimizationAborted
from .kinematics import quat_from_axis_angle, quat_multiply
from .policy import PolicyConfig
from .rollout import run_episodes


@dataclass(frozen=True)
class AttentionSpace:
    mean: np.ndarray
    cov: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ContractViolation(f"covariance shape {cov.shape} does not match mean of length {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ContractViolation("attention space must be finite")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise ContractViolation("covariance is not symmetric")
        if d and np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ContractViolation("covariance is not positive semi-definite")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def isotropic(cls, mean, std: float) -> "AttentionSpace":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.eye(mean.shape[0]) * std * std)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class CemConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    samples: int = Field(128, ge=2, description="m, candidates per iteration")
    elites: int = Field(32, ge=1, description="k, candidates kept for the refit")
    rollouts: int = Field(4, ge=1, description="n, episodes per candidate")
    iterations: int = Field(20, ge=1, description="T, iteration cap")
    epsilon: float = Field(1e-5, gt=0.0, description="stop when the covariance Frobenius norm drops below this (m^2)")
    jitter: float = Field(1e-8, ge=0.0, description="delta, added as delta*I after each refit")
    dims: Literal[3, 6] = 3
    initial_std: float = Field(0.02, gt=0.0, description="isotropic std of the initial position Gaussian (m)")
    initial_angle_std: float = Field(0.1, gt=0.0, description="initial std of the orientation offset in 6-D mode (rad)")

    @model_validator(mode="after")
    def _elites(self):
        if self.elites > self.samples:
            raise ValueError("elite size cannot exceed the sample size")
        return self

    def initial_space(self, guess) -> AttentionSpace:
        guess = np.asarray(guess, dtype=float)
        if self.dims == 3:
            return AttentionSpace.isotropic(guess, self.initial_std)
        var = np.r_[np.full(3, self.initial_std ** 2), np.full(3, self.initial_angle_std ** 2)]
        return AttentionSpace(np.r_[guess, np.zeros(3)], np.diag(var))


@dataclass(frozen=True)
class CandidateEvaluation:
    x: np.ndarray
    returns: tuple
    out_of_workspace: bool = False

    @property
    def R(self) -> float:
        """Arithmetic mean of the rollout returns (0 for an out-of-workspace candidate)."""
        if self.out_of_workspace or not self.returns:
            return 0.0
        return math.fsum(self.returns) / len(self.returns)


def symmetric_factor(cov, jitter: float = 0.0) -> np.ndarray:
    """Symmetric square root ``A`` with ``A @ A = cov + jitter * I``."""
    S = np.asarray(cov, dtype=float) + jitter * np.eye(len(cov))
    S = 0.5 * (S + S.T)
    try:
        w, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(f"eigendecomposition failed: {exc}") from exc
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if not np.all(np.isfinite(w)) or w.min(initial=0.0) < -1e-12 * scale:
        raise DegenerateCovarianceError(f"covariance has negative eigenvalue {w.min():.3e} after jitter")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def sample_candidates(space: AttentionSpace, m: int, seed, jitter: float = 0.0) -> np.ndarray:
    """``m`` i.i.d. draws from ``N(mean, cov + jitter*I)``, shape ``(m, d)``."""
    A = symmetric_factor(space.cov, jitter)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((m, space.dim))
    return space.mean + z @ A


def refit(elites, jitter: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and biased (divide-by-k) covariance of the elites, plus ``jitter*I``."""
    X = np.atleast_2d(np.asarray(elites, dtype=float))
    if X.shape[0] < 1:
        raise ContractViolation("refit needs at least one elite")
    k = X.shape[0]
    mu = X.sum(0) / k
    C = X - mu
    cov = (C.T @ C) / k
    cov = 0.5 * (cov + cov.T) + jitter * np.eye(X.shape[1])
    return mu, cov


def select_elites(returns, k: int) -> np.ndarray:
    """Indices of the top ``k`` returns; ties go to the lower candidate index."""
    returns = np.asarray(returns, dtype=float)
    return np.argsort(-returns, kind="stable")[:k]


Objective = Callable[[np.ndarray, int, int], Sequence[CandidateEvaluation]]


@dataclass
class CemResult:
    space: AttentionSpace
    history: list = field(default_factory=list)
    converged: bool = False

    @property
    def spaces(self) -> list:
        return [h for h in self.history if h["kind"] == "refit"]


def optimize(space0: AttentionSpace, objective: Objective, config: CemConfig, seed: int) -> CemResult:
    """Run the cross-entropy loop.

    ``objective(candidates, iteration, seed)`` scores an ``(m, d)`` array and
    returns one :class:`CandidateEvaluation` per row.
    """
    space = space0
    history: list = [{"kind": "initial", **space.to_dict()}]
    converged = False
    for t in range(config.iterations):
        xs = sample_candidates(space, config.samples, [seed, t, 0x63656D], config.jitter)
        evals = list(objective(xs, t, seed))
        if len(evals) != config.samples:
            raise ContractViolation(f"objective returned {len(evals)} evaluations for {config.samples} candidates")
        for i, ev in enumerate(evals):
            history.append({
                "kind": "candidate", "iteration": t, "index": i, "x": np.asarray(ev.x).tolist(),
                "returns": [float(r) for r in ev.returns], "R": ev.R, "out_of_workspace": ev.out_of_workspace,
            })
        if all(ev.out_of_workspace for ev in evals):
            raise OptimizationAborted(
                f"iteration {t}: all {len(evals)} candidates fell outside the workspace "
                f"(mean {space.mean.tolist()}, cov diag {np.diag(space.cov).tolist()})"
            )
        R = np.array([ev.R for ev in evals])
        idx = select_elites(R, config.elites)
        mu, cov = refit(xs[idx], config.jitter)
        space = AttentionSpace(mu, cov, t + 1)
        norm = float(np.linalg.norm(cov, "fro"))
        history.append({
            "kind": "refit", **space.to_dict(), "elites": idx.tolist(), "best_return": float(R[idx[0]]),
            "elite_mean_return": float(R[idx].mean()), "population_mean_return": float(R.mean()), "cov_norm": norm,
        })
        if norm < config.epsilon:
            converged = True
            break
    return CemResult(space, history, converged)


def candidate_seeds(seed: int, iteration: int, index: int, n: int) -> np.ndarray:
    """Episode seed entropy for one candidate, independent of evaluation order."""
    return np.array([[seed, iteration, index, j] for j in range(n)], dtype=np.int64)


def keypoint_and_orientation(x, base_orientation):
    """Split a 3-D or 6-D candidate into (position, commanded orientation)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 3:
        return x, None
    rotvec = x[..., 3:]
    angle = np.linalg.norm(rotvec, axis=-1)
    safe = np.where(angle[..., None] > 0, rotvec / np.maximum(angle, 1e-300)[..., None], [1.0, 0.0, 0.0])
    dq = quat_from_axis_angle(safe, angle)
    return x[..., :3], quat_multiply(dq, np.broadcast_to(base_orientation, dq.shape))


@dataclass
class ActuatorObjective:
    """Average task return of the frozen actuator commanded to each candidate."""

    policy_cfg: PolicyConfig
    params: dict
    scene: Scene
    rollouts: int
    dr: DomainRandomizationConfig = field(default_factory=DomainRandomizationConfig)
    perturbation: PerturbationConfig | None = None
    training_half_width: float | None = None

    def __call__(self, xs, iteration: int, seed: int, indices=None) -> list:
        """Score each row of ``xs``; ``indices`` are the candidate numbers used for seeding."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        indices = np.arange(len(xs)) if indices is None else np.asarray(indices)
        pos, orient = keypoint_and_orientation(xs, self.scene.orientation)
        ok = self.scene.in_workspace(pos)
        if self.training_half_width is not None:
            outside = np.any(np.abs(pos - self.scene.guess) > self.training_half_width + 1e-12, axis=-1) & ok
            if np.any(outside):
                warnings.warn(f"{int(outside.sum())} candidate(s) lie outside the actuator's training box", RuntimeWarning, stacklevel=2)
        rows = np.flatnonzero(ok)
        out = [CandidateEvaluation(x, (), True) for x in xs]
        if rows.size == 0:
            return out
        n = self.rollouts
        kps = np.repeat(pos[rows], n, axis=0)
        seeds = np.concatenate([candidate_seeds(seed, iteration, int(indices[i]), n) for i in rows])
        ors = None if orient is None else np.repeat(orient[rows], n, axis=0)
        ep = run_episodes(self.policy_cfg, self.params, self.scene, kps, seeds, self.dr,
                          perturbation=self.perturbation, orientations=ors)
        ret = ep.task_returns(self.scene).reshape(rows.size, n)
        for j, i in enumerate(rows):
            out[i] = CandidateEvaluation(xs[i], tuple(float(r) for r in ret[j]))
        return out


def evaluate_candidate(x, policy_cfg: PolicyConfig, params: dict, scene: Scene, n: int, seed: int,
                       dr: DomainRandomizationConfig | None = None, iteration: int = 0, index: int = 0) -> CandidateEvaluation:
    """Score a single keypoint with ``n`` rollouts."""
    obj = ActuatorObjective(policy_cfg, params, scene, n, dr or DomainRandomizationConfig())
    return obj(np.asarray(x, dtype=float)[None], iteration, seed, indices=[index])[0]


@dataclass
class SyntheticObjective:
    """``R(x) = 1 - min(1, |x - x*|)`` plus Gaussian rollout noise."""

    optimum: np.ndarray
    rollouts: int = 1
    noise: float = 0.0

    def value(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return 1.0 - np.minimum(1.0, np.linalg.norm(xs - np.asarray(self.optimum), axis=-1))

    def __call__(self, xs, iteration: int, seed: int) -> list:
        base = self.value(xs)
        out = []
        for i, (x, b) in enumerate(zip(xs, base)):
            rng = np.random.default_rng([seed, iteration, i])
            out.append(CandidateEvaluation(np.asarray(x), tuple(float(v) for v in b + self.noise * rng.standard_normal(self.rollouts))))
        return out


def grid_points(center, half_extent: float, pitch: float) -> np.ndarray:
    """Axis-aligned lattice around ``center`` (inclusive of both ends)."""
    steps = int(round(half_extent / pitch))
    ticks = np.arange(-steps, steps + 1) * pitch
    g = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    return np.asarray(center, dtype=float) + g


def grid_search(objective: Objective, points, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Score every grid point; returns (best point, all averaged returns)."""
    evals = objective(np.asarray(points, dtype=float), 0, seed)
    R = np.array([e.R for e in evals])
    return np.asarray(points)[select_elites(R, 1)[0]], R
