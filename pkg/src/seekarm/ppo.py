"""On-policy actor-critic training with the clipped surrogate objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .env import (
    Action,
    DomainRandomizationConfig,
    Observation,
    Scene,
    advance_stage,
    observe,
    reset,
    step,
)
from .errors import ContractViolation, NumericError
from .policy import PolicyConfig, backward, forward, gaussian_entropy, gaussian_log_prob, init_params, sample_gaussian
from .reward import CurriculumSchedule, curriculum_weights, reward_terms
from .rollout import episode_seeds, run_episodes


class PpoConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(0.99, gt=0.0, le=1.0)
    lam: float = Field(0.95, ge=0.0, le=1.0)
    clip: float = Field(0.2, gt=0.0)
    epochs: int = Field(4, ge=1)
    minibatch: int = Field(320, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    lr_schedule: Literal["constant", "linear"] = "linear"
    entropy_coef: float = Field(0.0, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    max_grad_norm: float = Field(0.5, gt=0.0)
    rollout_length: int | None = Field(None, ge=1, description="steps per environment; defaults to the scene horizon")
    num_envs: int = Field(64, ge=1)
    total_updates: int = Field(120, ge=0)
    keypoint_half_width: float = Field(0.10, ge=0.0)
    reward_scale: float = Field(0.1, gt=0.0)
    eval_every: int = Field(25, ge=1)
    eval_episodes: int = Field(32, ge=1)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    @model_validator(mode="after")
    def _betas(self):
        if not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ValueError("adam betas must lie in [0, 1)")
        return self


def sample_training_keypoint(guess, half_width: float, seed, size: int | None = None) -> np.ndarray:
    """Uniform draw from the axis-aligned box ``guess +- half_width``."""
    if half_width < 0:
        raise ContractViolation("half-width must be non-negative")
    guess = np.asarray(guess, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = guess.shape if size is None else (size,) + guess.shape
    return guess + rng.uniform(-half_width, half_width, shape)


@dataclass
class RolloutBuffer:
    """Time-major storage: every array has leading shape ``(T, N)``.

    Each column is one environment's contiguous episode segment.
    ``last_values`` bootstraps the segment ends that are not terminal.
    """

    keypoint_obs: np.ndarray
    joint_obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    keypoints: np.ndarray
    last_values: np.ndarray
    closed: bool = True

    @classmethod
    def from_arrays(cls, rewards, values, dones=None, last_values=None, **extra):
        """Buffer holding only what advantage estimation needs."""
        rewards = np.asarray(rewards, dtype=float)
        T, N = rewards.shape
        empty = np.zeros((T, N, 0))
        return cls(
            keypoint_obs=extra.get("keypoint_obs", empty),
            joint_obs=extra.get("joint_obs", empty[..., None]),
            actions=extra.get("actions", empty),
            log_probs=extra.get("log_probs", np.zeros((T, N))),
            rewards=rewards,
            values=np.asarray(values, dtype=float),
            dones=np.zeros((T, N), bool) if dones is None else np.asarray(dones, dtype=bool),
            keypoints=extra.get("keypoints", np.zeros((T, N, 3))),
            last_values=np.zeros(N) if last_values is None else np.asarray(last_values, dtype=float),
        )

    @property
    def size(self) -> int:
        return int(self.rewards.size)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])

    def observations(self, idx=None) -> Observation:
        kp, jt = self.flat("keypoint_obs"), self.flat("joint_obs")
        if idx is not None:
            kp, jt = kp[idx], jt[idx]
        return Observation(kp, jt)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets, both ``(T, N)``.

    A done flag at step ``t`` ends the episode there, so the successor value
    is taken as 0. Advantages are returned unnormalized.
    """
    if not buffer.closed:
        raise ContractViolation("buffer must be closed before computing advantages")
    if buffer.size == 0:
        raise ContractViolation("cannot compute advantages of an empty buffer")
    r, v, done = buffer.rewards, buffer.values, buffer.dones
    T = r.shape[0]
    adv = np.zeros_like(r)
    next_value = buffer.last_values
    running = np.zeros(r.shape[1])
    for t in reversed(range(T)):
        live = 1.0 - done[t]
        delta = r[t] + gamma * next_value * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = v[t]
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    centred = adv - adv.mean()
    std = centred.std()
    if std < 1e-12:
        return np.zeros_like(adv)
    out = centred / std
    return out - out.mean()


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            out[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out

    def snapshot(self):
        return self.t, {k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}

    def restore(self, snap):
        self.t, self.m, self.v = snap[0], snap[1], snap[2]


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def _minibatch_loss(cfg: PolicyConfig, params, obs, actions, logp_old, adv, ret, config: PpoConfig):
    out = forward(cfg, obs, params, keep_cache=True)
    M = actions.shape[0]
    logp = gaussian_log_prob(actions, out.mean, out.log_std)
    ratio = np.exp(logp - logp_old)
    lo, hi = 1.0 - config.clip, 1.0 + config.clip
    surr = np.minimum(ratio * adv, np.clip(ratio, lo, hi) * adv)
    vdiff = out.value - ret
    value_loss = 0.5 * float(np.mean(vdiff * vdiff))
    entropy = gaussian_entropy(out.log_std)
    loss = -float(np.mean(surr)) + config.value_coef * value_loss - config.entropy_coef * entropy
    if not math.isfinite(loss):
        raise NumericError("non-finite PPO loss")

    # gradient flows only where the unclipped branch attains the minimum
    active = ((adv >= 0) & (ratio < hi)) | ((adv < 0) & (ratio > lo))
    d_logp = -(active * ratio * adv) / M
    inv_var = np.exp(-2.0 * out.log_std)
    z2 = (actions - out.mean) ** 2 * inv_var
    d_mean = d_logp[:, None] * (actions - out.mean) * inv_var
    d_log_std = (d_logp[:, None] * (z2 - 1.0)).sum(0) - config.entropy_coef
    d_value = config.value_coef * vdiff / M
    grads = backward(cfg, out, params, d_mean, d_log_std, d_value)
    log_ratio = logp - logp_old
    stats = {
        "surrogate": float(np.mean(surr)),
        "value_loss": value_loss,
        "entropy": entropy,
        "approx_kl": float(np.mean(ratio - 1.0 - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip)),
    }
    return grads, stats


def ppo_update(
    cfg: PolicyConfig,
    params: dict,
    buffer: RolloutBuffer,
    config: PpoConfig,
    optimizer: Adam | None = None,
    lr: float | None = None,
    seed=0,
) -> tuple[dict, dict]:
    """Run the configured epochs of minibatch updates on one closed buffer.

    On a non-finite loss or gradient the update is abandoned, the incoming
    parameters are returned unchanged and ``metrics["aborted"]`` is set.
    """
    optimizer = optimizer or Adam(params, config.adam_betas, config.adam_eps)
    lr = config.lr if lr is None else lr
    adv, ret = compute_gae(buffer, config.gamma, config.lam)
    if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(ret))):
        return params, {"aborted": True, "reason": "non-finite advantages or returns"}
    adv = normalize_advantages(adv).ravel()
    ret = ret.ravel()
    actions = buffer.flat("actions")
    logp_old = buffer.flat("log_probs")
    n = adv.shape[0]
    mb = min(config.minibatch, n)
    rng = np.random.default_rng(seed)
    snap = optimizer.snapshot()
    new = params
    acc: dict[str, list] = {}
    norms = []
    try:
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start:start + mb]
                grads, stats = _minibatch_loss(cfg, new, buffer.observations(idx), actions[idx], logp_old[idx], adv[idx], ret[idx], config)
                grads, gn = clip_grad_norm(grads, config.max_grad_norm)
                norms.append(gn)
                new = optimizer.step(new, grads, lr)
                for k, v in stats.items():
                    acc.setdefault(k, []).append(v)
    except NumericError as exc:
        optimizer.restore(snap)
        return params, {"aborted": True, "reason": str(exc)}
    if not all(np.all(np.isfinite(v)) for v in new.values()):
        optimizer.restore(snap)
        return params, {"aborted": True, "reason": "non-finite parameters after update"}
    metrics = {k: float(np.mean(v)) for k, v in acc.items()}
    metrics["grad_norm"] = float(np.mean(norms))
    metrics["aborted"] = False
    return new, metrics


def collect_rollout(
    cfg: PolicyConfig,
    params: dict,
    scene: Scene,
    dr: DomainRandomizationConfig,
    config: PpoConfig,
    weights,
    seed: int,
    update: int,
) -> tuple[RolloutBuffer, dict]:
    """One episode segment per environment with fresh training keypoints.

    Segments shorter than the horizon are truncated by time, not terminated,
    so their ends are bootstrapped with the critic.
    """
    N = config.num_envs
    T = config.rollout_length or scene.horizon
    kps = sample_training_keypoint(scene.guess, config.keypoint_half_width, [seed, update, 0x6B70], size=N)
    state = reset(scene, dr, kps, episode_seeds(seed, update, count=N), history=cfg.history)
    J = cfg.dof
    buf = {
        "keypoint_obs": np.zeros((T, N, cfg.keypoint_width)),
        "joint_obs": np.zeros((T, N, J, cfg.joint_width)),
        "actions": np.zeros((T, N, J)),
        "log_probs": np.zeros((T, N)),
        "rewards": np.zeros((T, N)),
        "values": np.zeros((T, N)),
        "keypoints": np.zeros((T, N, 3)),
    }
    raw_reward = np.zeros(N)
    final_dist = np.zeros(N)
    for t in range(T):
        state, cmd = advance_stage(scene, state)
        obs = observe(scene, state, dr, cfg.encoding)
        out = forward(cfg, obs, params)
        a, logp = sample_gaussian(out.mean, out.log_std, state.rngs)
        buf["keypoints"][t] = state.keypoint
        state, info = step(scene, state, Action(a, cmd))
        r = reward_terms(info, info.action, info.prev_action, weights)["total"]
        buf["keypoint_obs"][t] = obs.keypoint
        buf["joint_obs"][t] = obs.joints
        buf["actions"][t] = a
        buf["log_probs"][t] = logp
        buf["rewards"][t] = config.reward_scale * r
        buf["values"][t] = out.value
        raw_reward += r
        final_dist = info.distance
    state, _ = advance_stage(scene, state)
    last = forward(cfg, observe(scene, state, dr, cfg.encoding), params).value
    buffer = RolloutBuffer(dones=np.zeros((T, N), bool), last_values=last, **buf)
    stats = {
        "episode_reward": float(raw_reward.mean()),
        "final_distance": float(final_dist.mean()),
        "train_success": float(np.mean(final_dist < SUCCESS_DISTANCE)),
    }
    return buffer, stats


SUCCESS_DISTANCE = 0.02


def evaluate_reach(cfg: PolicyConfig, params: dict, scene: Scene, episodes: int, seed: int, half_width: float, dr=None, perturbation=None) -> dict:
    """Deterministic-policy success rate on keypoints from the training box.

    Success means the final end-effector distance to the commanded keypoint
    is below 2 cm. Observation noise and domain randomization are off unless
    ``dr`` is given.
    """
    dr = dr or DomainRandomizationConfig(enabled=False)
    kps = sample_training_keypoint(scene.guess, half_width, [seed, 0x6576], size=episodes)
    ep = run_episodes(cfg, params, scene, kps, episode_seeds(seed, 0x6576, count=episodes), dr, perturbation=perturbation)
    final = ep.distance[-1]
    return {"success_rate": float(np.mean(final < SUCCESS_DISTANCE)), "final_distance": float(np.mean(final))}


@dataclass
class TrainingLog:
    updates: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)

    def records(self):
        for u in self.updates:
            yield {"kind": "update", **u}
        for e in self.evaluations:
            yield {"kind": "evaluation", **e}


def _lr_at(config: PpoConfig, update: int) -> float:
    if config.lr_schedule == "linear" and config.total_updates > 0:
        return config.lr * (1.0 - update / config.total_updates)
    return config.lr


def train(
    scene: Scene,
    policy_cfg: PolicyConfig,
    ppo_cfg: PpoConfig,
    dr: DomainRandomizationConfig,
    seed: int,
    schedule: CurriculumSchedule | None = None,
    callback=None,
) -> tuple[dict, TrainingLog]:
    """Train from scratch; returns the final parameters and the log.

    Curriculum progress is the fraction of updates completed. ``callback``
    (if given) receives each update record as it is produced.
    """
    if policy_cfg.dof != scene.chain.dof:
        raise ContractViolation(f"policy has {policy_cfg.dof} joints, scene arm has {scene.chain.dof}")
    if not np.allclose(policy_cfg.bound, scene.step_bound):
        raise ContractViolation("policy action bound differs from the scene's per-step bound")
    schedule = schedule or CurriculumSchedule.default()
    params = init_params(policy_cfg, seed)
    log = TrainingLog()
    if ppo_cfg.total_updates == 0:
        return params, log
    opt = Adam(params, ppo_cfg.adam_betas, ppo_cfg.adam_eps)
    for u in range(ppo_cfg.total_updates):
        weights = curriculum_weights(schedule, u / ppo_cfg.total_updates)
        buffer, roll = collect_rollout(policy_cfg, params, scene, dr, ppo_cfg, weights, seed, u)
        params, metrics = ppo_update(policy_cfg, params, buffer, ppo_cfg, opt, _lr_at(ppo_cfg, u), seed=[seed, u, 0x7570])
        rec = {"update": u, "progress": u / ppo_cfg.total_updates, **roll, **metrics}
        log.updates.append(rec)
        if callback:
            callback(rec)
        if (u + 1) % ppo_cfg.eval_every == 0 or u + 1 == ppo_cfg.total_updates:
            ev = evaluate_reach(policy_cfg, params, scene, ppo_cfg.eval_episodes, seed + 1, ppo_cfg.keypoint_half_width)
            log.evaluations.append({"update": u, **ev})
    return params, log
