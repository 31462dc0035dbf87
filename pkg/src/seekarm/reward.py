"""Step-reward shaping, curriculum weighting and task-level episode returns.

The per-step reward is the sum of three terms::

    r_dist = w_d1 * d + w_d2 * (1 - tanh(d / sigma1)) + w_d3 * (1 - tanh(d / sigma2))
    r_ori  = -w_ori * theta
    r_act  = -w_l2 * |a|^2 - w_rate * |a - a_prev|^2 - w_vel * |qdot|^2

where ``d`` is the end-effector to keypoint distance and ``theta`` the
geodesic angle to the commanded orientation. All functions broadcast over a
leading batch dimension.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

FIELDS = ("w_d1", "w_d2", "w_d3", "sigma1", "sigma2", "w_ori", "w_l2", "w_rate", "w_vel")


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class RewardWeights(_Frozen):
    w_d1: float = Field(-0.5, le=0.0)
    w_d2: float = 1.0
    w_d3: float = 2.0
    sigma1: float = 0.3
    sigma2: float = 0.05
    w_ori: float = Field(0.5, ge=0.0)
    w_l2: float = Field(0.01, ge=0.0)
    w_rate: float = Field(0.01, ge=0.0)
    w_vel: float = Field(0.005, ge=0.0)

    @model_validator(mode="after")
    def _kernel_order(self):
        if not self.sigma1 > self.sigma2 > 0:
            raise ValueError("need sigma1 > sigma2 > 0")
        return self

    def vector(self):
        return np.array([getattr(self, f) for f in FIELDS])

    @classmethod
    def from_vector(cls, v):
        return cls(**{f: float(x) for f, x in zip(FIELDS, v)})


class CurriculumPhase(_Frozen):
    progress: float = Field(ge=0.0, le=1.0)
    weights: RewardWeights


def _early_weights(w: RewardWeights) -> RewardWeights:
    return w.model_copy(update=dict(w_l2=0.1 * w.w_l2, w_rate=0.1 * w.w_rate, w_vel=0.1 * w.w_vel))


class CurriculumSchedule(_Frozen):
    """Piecewise-linear schedule of reward weights over training progress."""

    phases: tuple[CurriculumPhase, ...]

    @model_validator(mode="after")
    def _ordered(self):
        fr = [p.progress for p in self.phases]
        # a lone phase at 0 is a constant schedule
        if not fr or fr[0] != 0.0 or (len(fr) > 1 and fr[-1] != 1.0):
            raise ValueError("phase fractions must start at 0 and end at 1")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("phase fractions must be strictly increasing")
        return self

    @classmethod
    def default(cls, weights: RewardWeights | None = None) -> "CurriculumSchedule":
        """Actuation penalties ramp from 10% to full strength."""
        w = weights or RewardWeights()
        return cls(
            phases=(
                CurriculumPhase(progress=0.0, weights=_early_weights(w)),
                CurriculumPhase(progress=1.0, weights=w),
            )
        )

    @classmethod
    def constant(cls, weights: RewardWeights) -> "CurriculumSchedule":
        return cls(phases=(CurriculumPhase(progress=0.0, weights=weights),))


def curriculum_weights(schedule: CurriculumSchedule, progress: float) -> RewardWeights:
    phases = schedule.phases
    progress = float(np.clip(progress, 0.0, 1.0))
    if len(phases) == 1 or progress <= phases[0].progress:
        return phases[0].weights
    if progress >= phases[-1].progress:
        return phases[-1].weights
    for lo, hi in zip(phases, phases[1:]):
        if lo.progress <= progress <= hi.progress:
            t = (progress - lo.progress) / (hi.progress - lo.progress)
            # sigma1 > sigma2 holds for every convex combination of valid phases
            return RewardWeights.from_vector((1 - t) * lo.weights.vector() + t * hi.weights.vector())
    raise AssertionError("unreachable")


def distance_reward(d, w: RewardWeights):
    d = np.asarray(d, dtype=float)
    return (
        w.w_d1 * d
        + w.w_d2 * (1.0 - np.tanh(d / w.sigma1))
        + w.w_d3 * (1.0 - np.tanh(d / w.sigma2))
    )


def orientation_reward(theta, w: RewardWeights):
    return -w.w_ori * np.asarray(theta, dtype=float)


def action_reward(a, a_prev, qdot, w: RewardWeights):
    a = np.asarray(a, dtype=float)
    a_prev = np.asarray(a_prev, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    return (
        -w.w_l2 * np.sum(a * a, axis=-1)
        - w.w_rate * np.sum((a - a_prev) ** 2, axis=-1)
        - w.w_vel * np.sum(qdot * qdot, axis=-1)
    )


def reward_terms(info, a, a_prev, w: RewardWeights) -> dict:
    """Per-term step rewards plus their sum, keyed ``dist``, ``ori``, ``act``, ``total``."""
    terms = {
        "dist": distance_reward(info.distance, w),
        "ori": orientation_reward(info.angle, w),
        "act": action_reward(a, a_prev, info.velocities, w),
    }
    terms["total"] = terms["dist"] + terms["ori"] + terms["act"]
    return terms


def step_reward(info, a, a_prev, w: RewardWeights):
    return reward_terms(info, a, a_prev, w)["total"]


class TaskReturnSpec(_Frozen):
    """How an episode is scored for keypoint refinement.

    ``articulation-progress`` divides the final articulation coordinate by
    ``scale`` (the travel limit); ``reach-hold`` scores the fraction of the
    final quarter of the episode spent within ``scale`` meters of the goal.
    """

    kind: Literal["articulation-progress", "reach-hold"] = "articulation-progress"
    scale: float = Field(0.1, gt=0.0)


def task_return(trajectory, spec: TaskReturnSpec) -> float:
    """Score one episode in ``[0, 1]``.

    ``trajectory`` needs per-step sequences ``articulation`` and
    ``goal_distance``.
    """
    if spec.kind == "articulation-progress":
        art = np.asarray(trajectory.articulation, dtype=float)
        if art.size == 0:
            raise ValueError("empty trajectory")
        return float(np.clip(art[-1] / spec.scale, 0.0, 1.0))
    dist = np.asarray(trajectory.goal_distance, dtype=float)
    if dist.size == 0:
        raise ValueError("empty trajectory")
    tail = dist[-int(np.ceil(dist.size / 4)):]
    return float(np.mean(tail < spec.scale))


def task_return_batch(articulation_final, goal_distances, spec: TaskReturnSpec):
    """Vectorized :func:`task_return`: ``goal_distances`` has shape ``(T, N)``."""
    if spec.kind == "articulation-progress":
        return np.clip(np.asarray(articulation_final) / spec.scale, 0.0, 1.0)
    dist = np.asarray(goal_distances)
    tail = dist[-int(np.ceil(dist.shape[0] / 4)):]
    return np.mean(tail < spec.scale, axis=0)
