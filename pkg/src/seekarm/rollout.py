"""Batched episode execution with a frozen policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import Action, DomainRandomizationConfig, PerturbationConfig, Scene, advance_stage, observe, reset, step
from .policy import PolicyConfig, forward, sample_gaussian
from .reward import RewardWeights, reward_terms, task_return_batch


@dataclass
class Episodes:
    """Per-step traces with shape ``(T, N)`` (or ``(T, N, k)`` for vectors)."""

    distance: np.ndarray
    goal_distance: np.ndarray
    angle: np.ndarray
    articulation: np.ndarray
    stage: np.ndarray
    keypoints: np.ndarray       # commanded keypoints at reset, (N, 3)
    goals: np.ndarray           # (N, 3)
    records: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.distance.shape[1]

    def task_returns(self, scene: Scene) -> np.ndarray:
        return task_return_batch(self.articulation[-1], self.goal_distance, scene.task)

    def trajectory(self, i: int):
        """View of episode ``i`` usable with :func:`seekarm.reward.task_return`."""
        return _Trajectory(self.articulation[:, i], self.goal_distance[:, i])


@dataclass
class _Trajectory:
    articulation: np.ndarray
    goal_distance: np.ndarray


def episode_seeds(*prefix, count: int) -> np.ndarray:
    """Per-episode seed entropy ``[*prefix, i]`` for ``i < count``."""
    prefix = [int(p) for p in prefix]
    return np.array([prefix + [i] for i in range(count)], dtype=np.int64)


def run_episodes(
    cfg: PolicyConfig,
    params: dict,
    scene: Scene,
    keypoints,
    seeds,
    dr: DomainRandomizationConfig,
    *,
    deterministic: bool = True,
    perturbation: PerturbationConfig | None = None,
    goals=None,
    weights: RewardWeights | None = None,
    record: bool = False,
    horizon: int | None = None,
    orientations=None,
) -> Episodes:
    """Run one full episode per keypoint row and collect traces.

    ``goals`` defaults to the scene's affordance point. With ``record`` set,
    per-step dictionaries (joints, action, end-effector pose, reward terms,
    articulation) are kept for JSON-lines export; ``weights`` then selects
    the reward used for the logged terms.
    """
    keypoints = np.atleast_2d(np.asarray(keypoints, dtype=float))
    state = reset(scene, dr, keypoints, seeds, history=cfg.history, perturbation=perturbation, goal=goals,
                  orientation=orientations)
    T = horizon or scene.horizon
    n = state.n
    traces = {k: np.zeros((T, n)) for k in ("distance", "goal_distance", "angle", "articulation", "stage")}
    records = []
    weights = weights or RewardWeights()
    for t in range(T):
        state, cmd = advance_stage(scene, state)
        obs = observe(scene, state, dr, cfg.encoding)
        out = forward(cfg, obs, params)
        if deterministic:
            delta = out.mean
        else:
            delta, _ = sample_gaussian(out.mean, out.log_std, state.rngs)
        stage = state.stage
        state, info = step(scene, state, Action(delta, cmd))
        traces["distance"][t] = info.distance
        traces["goal_distance"][t] = info.goal_distance
        traces["angle"][t] = info.angle
        traces["articulation"][t] = info.articulation
        traces["stage"][t] = stage
        if record:
            terms = reward_terms(info, info.action, info.prev_action, weights)
            records.append(
                {
                    "step": t,
                    "joints": state.joints.copy(),
                    "action": info.action.copy(),
                    "gripper": cmd.copy(),
                    "ee_position": info.ee_position.copy(),
                    "ee_orientation": info.ee_orientation.copy(),
                    "reward": {k: np.asarray(v).copy() for k, v in terms.items()},
                    "articulation": info.articulation.copy(),
                }
            )
    return Episodes(
        keypoints=keypoints,
        goals=state.goal,
        records=records,
        **traces,
    )


def trajectory_rows(episodes: Episodes, i: int):
    """Yield JSON-ready per-step records for episode ``i``."""
    for rec in episodes.records:
        yield {
            "step": rec["step"],
            "joints": rec["joints"][i].tolist(),
            "action": rec["action"][i].tolist(),
            "gripper": int(rec["gripper"][i]),
            "ee_position": rec["ee_position"][i].tolist(),
            "ee_orientation": rec["ee_orientation"][i].tolist(),
            "reward": {k: float(v[i]) for k, v in rec["reward"].items()},
            "articulation": float(rec["articulation"][i]),
        }
