"""Episodic kinematic arm environment.

States are batched: every array in :class:`EnvState` carries a leading
dimension ``N`` (the number of environments stepped in lockstep). Each
environment owns a private random generator seeded at :func:`reset`, so
results never depend on how environments are grouped into batches.

Interaction with articulated objects uses attachment kinematics: while the
gripper is closed and the end-effector is within the grasp radius of the
handle, the articulation coordinate follows the end-effector displacement
projected onto the articulation direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ContractViolation, OutOfWorkspaceError
from .kinematics import KinematicChain, Pose, canonical_quat, fk_batch, geodesic_angle_batch, quat_from_axis_angle, quat_rotate, trig_encode
from .reward import TaskReturnSpec

CONTROL_HZ = 20.0

# Incremented whenever a held-out perturbation parameter is sampled; the
# harness asserts it stays unchanged across training.
counters = {"perturbation_draws": 0}


class GripperCommand(IntEnum):
    HOLD = 0
    OPEN = 1
    CLOSE = 2


class DomainRandomizationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    joint_jitter: float = Field(0.1, ge=0.0)
    velocity_jitter: float = Field(0.2, ge=0.0)
    link_scale_jitter: float = Field(0.005, ge=0.0)
    obs_noise: float = Field(0.005, ge=0.0)
    keypoint_jitter: float = Field(0.0, ge=0.0)


class PerturbationConfig(BaseModel):
    """Held-out world used as a stand-in for real hardware."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    link_offset: float = Field(0.02, ge=0.0, description="uniform relative link-length error bound")
    action_noise: float = Field(0.005, ge=0.0, description="per-step execution noise std, radians")
    keypoint_error: float = Field(0.005, ge=0.0, description="keypoint placement error std, meters")
    initial_joint_offset: float = Field(0.15, ge=0.0, description="start-pose error std, radians")


@dataclass(frozen=True)
class Drawer:
    axis: np.ndarray
    travel: float
    handle: Pose
    kind: str = field(default="drawer", init=False)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", axis / np.linalg.norm(axis))
        if not self.travel > 0:
            raise ContractViolation("drawer travel must be > 0")

    @property
    def limits(self):
        return (0.0, self.travel)

    def handle_position(self, coord):
        return self.handle.position + np.asarray(coord)[..., None] * self.axis

    def coordinate_delta(self, coord, displacement):
        return displacement @ self.axis


@dataclass(frozen=True)
class Door:
    hinge_axis: np.ndarray
    hinge_origin: np.ndarray
    angle_limits: tuple
    handle: Pose
    kind: str = field(default="door", init=False)

    def __post_init__(self):
        axis = np.asarray(self.hinge_axis, dtype=float)
        object.__setattr__(self, "hinge_axis", axis / np.linalg.norm(axis))
        object.__setattr__(self, "hinge_origin", np.asarray(self.hinge_origin, dtype=float))
        lo, hi = self.angle_limits
        if not lo < hi:
            raise ContractViolation("door angle limits must satisfy lo < hi")
        if self._radius() <= 0:
            raise ContractViolation("door handle lies on the hinge axis")

    @property
    def limits(self):
        return tuple(self.angle_limits)

    def _lever(self):
        r = self.handle.position - self.hinge_origin
        return r - (r @ self.hinge_axis) * self.hinge_axis

    def _radius(self):
        return float(np.linalg.norm(self._lever()))

    def handle_position(self, coord):
        coord = np.asarray(coord, dtype=float)
        q = quat_from_axis_angle(self.hinge_axis, coord)
        return self.hinge_origin + quat_rotate(q, self.handle.position - self.hinge_origin)

    def coordinate_delta(self, coord, displacement):
        q = quat_from_axis_angle(self.hinge_axis, np.asarray(coord, dtype=float))
        lever = quat_rotate(q, self._lever())
        tangent = np.cross(self.hinge_axis, lever)
        radius = self._radius()
        return np.sum(displacement * tangent, axis=-1) / radius**2


@dataclass(frozen=True)
class Scene:
    """A parametric task world.

    ``target`` is the true affordance point, ``guess`` the biased initial
    keypoint a perception model would provide. ``pull`` (optional) is the
    offset from the grasp keypoint to the follow-up keypoint of a two-stage
    task; stage one ends when the keypoint is reached within
    ``reach_tolerance`` or after ``stage_steps`` steps.
    """

    name: str
    chain: KinematicChain
    home: np.ndarray
    target: np.ndarray
    guess: np.ndarray
    orientation: np.ndarray
    grasp_radius: float
    task: TaskReturnSpec
    articulated: Drawer | Door | None = None
    grasping: bool = False
    pull: np.ndarray | None = None
    horizon: int = 300
    stage_steps: int | None = None
    reach_tolerance: float = 0.02
    grip_falloff: Literal["none", "quadratic"] = "none"

    def __post_init__(self):
        home = np.asarray(self.home, dtype=float)
        if home.shape != (self.chain.dof,):
            raise ContractViolation(f"home pose has {home.shape}, chain has {self.chain.dof} joints")
        object.__setattr__(self, "home", self.chain.clamp(home))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        object.__setattr__(self, "guess", np.asarray(self.guess, dtype=float))
        object.__setattr__(self, "orientation", canonical_quat(self.orientation))
        if self.pull is not None:
            object.__setattr__(self, "pull", np.asarray(self.pull, dtype=float))
        if not self.grasp_radius > 0:
            raise ContractViolation("grasp radius must be > 0")
        if not self.horizon >= 1:
            raise ContractViolation("horizon must be >= 1")
        if np.linalg.norm(self.target - self.chain.base.position) > self.chain.reach:
            raise ContractViolation(f"scene {self.name!r}: affordance point is outside the arm's reach")

    @property
    def step_bound(self):
        """Per-step joint delta bound in radians."""
        return self.chain.max_speed / CONTROL_HZ

    @property
    def two_stage(self) -> bool:
        return self.pull is not None

    def in_workspace(self, keypoints):
        kp = np.atleast_2d(keypoints)
        ok = np.all(np.isfinite(kp), axis=-1)
        dist = np.linalg.norm(np.where(ok[:, None], kp, 0.0) - self.chain.base.position, axis=-1)
        return ok & (dist <= 1.5 * self.chain.reach)


@dataclass(frozen=True)
class Action:
    delta: np.ndarray
    gripper: np.ndarray

    @classmethod
    def make(cls, delta, gripper=GripperCommand.HOLD):
        delta = np.atleast_2d(np.asarray(delta, dtype=float))
        g = np.broadcast_to(np.asarray(gripper, dtype=np.int64), (delta.shape[0],)).copy()
        return cls(delta, g)


@dataclass(frozen=True)
class EnvState:
    joints: np.ndarray          # (N, J)
    velocities: np.ndarray      # (N, J), rad/s
    history: np.ndarray         # (N, H, J) previous clipped actions, newest first
    gripper_closed: np.ndarray  # (N,)
    articulation: np.ndarray    # (N,)
    step: int
    keypoint: np.ndarray        # (N, 3) commanded keypoint
    orientation: np.ndarray     # (N, 4) commanded orientation
    goal: np.ndarray            # (N, 3) true affordance point used for scoring
    lengths: np.ndarray         # (N, J) realized link lengths
    keypoint_offset: np.ndarray  # (N, 3) perception offset added to the observed keypoint
    action_noise: np.ndarray    # (N,) execution noise std
    ee_position: np.ndarray     # (N, 3)
    ee_orientation: np.ndarray  # (N, 4)
    stage: np.ndarray           # (N,) 0 = grasp/reach keypoint, 1 = follow-up keypoint
    grip: np.ndarray = None     # (N,) grasp quality latched when the gripper closed, 0 while open
    rngs: tuple = field(default=(), compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.joints.shape[0]

    def equals(self, other: "EnvState") -> bool:
        """Bitwise equality over every array field."""
        for name in self.__dataclass_fields__:
            if name == "rngs":
                continue
            a, b = getattr(self, name), getattr(other, name)
            if not np.array_equal(np.asarray(a), np.asarray(b)):
                return False
        return True


@dataclass(frozen=True)
class StepInfo:
    ee_position: np.ndarray
    ee_orientation: np.ndarray
    distance: np.ndarray
    angle: np.ndarray
    goal_distance: np.ndarray
    articulation: np.ndarray
    velocities: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray


@dataclass(frozen=True)
class Observation:
    """Keypoint token ``(N, 7)`` plus per-joint tokens ``(N, J, W)``."""

    keypoint: np.ndarray
    joints: np.ndarray

    @property
    def n_tokens(self) -> int:
        return 1 + self.joints.shape[1]

    def __getitem__(self, idx):
        return Observation(self.keypoint[idx], self.joints[idx])

    @staticmethod
    def concat(obs: Sequence["Observation"]) -> "Observation":
        return Observation(np.concatenate([o.keypoint for o in obs]), np.concatenate([o.joints for o in obs]))


def joint_token_width(encoding: str, history: int) -> int:
    return (2 if encoding == "trig" else 1) + history


def _as_batch(keypoint, seed):
    kp = np.asarray(keypoint, dtype=float)
    kp = kp[None] if kp.ndim == 1 else kp
    seeds = np.atleast_1d(np.asarray(seed))
    if seeds.shape[0] == 1 and kp.shape[0] > 1:
        raise ContractViolation("one seed per environment is required for batched resets")
    if seeds.shape[0] != kp.shape[0]:
        raise ContractViolation(f"{kp.shape[0]} keypoints but {seeds.shape[0]} seeds")
    return kp, seeds


def _orientations(scene: Scene, orientation, n: int) -> np.ndarray:
    if orientation is None:
        return np.tile(scene.orientation, (n, 1))
    q = np.broadcast_to(np.asarray(orientation, dtype=float), (n, 4))
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(q)) or np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractViolation("commanded orientations must be finite unit quaternions")
    return canonical_quat(q / norms)


def reset(
    scene: Scene,
    dr: DomainRandomizationConfig,
    keypoint,
    seed,
    history: int = 1,
    perturbation: PerturbationConfig | None = None,
    goal=None,
    orientation=None,
) -> EnvState:
    """Start ``N`` episodes commanding ``keypoint`` (shape ``(3,)`` or ``(N, 3)``).

    ``seed`` is one integer (or seed sequence entropy) per environment.
    ``orientation`` overrides the scene's target orientation (unit
    quaternion, one per environment or shared).
    """
    kp, seeds = _as_batch(keypoint, seed)
    bad = ~scene.in_workspace(kp)
    if np.any(bad):
        raise OutOfWorkspaceError(f"keypoint(s) {kp[bad].tolist()} outside 1.5x the reachable radius")
    if not 1 <= history <= 4:
        raise ContractViolation("action history length must be in [1, 4]")
    n, J = kp.shape[0], scene.chain.dof
    rngs = tuple(np.random.default_rng(s if np.ndim(s) else int(s)) for s in seeds)
    joints = np.tile(scene.home, (n, 1))
    vel = np.zeros((n, J))
    scale = np.ones((n, J))
    kp_off = np.zeros((n, 3))
    kp = kp.copy()
    noise = np.zeros(n)
    for i, g in enumerate(rngs):
        if dr.enabled:
            joints[i] += dr.joint_jitter * g.standard_normal(J)
            vel[i] = dr.velocity_jitter * g.standard_normal(J)
            scale[i] += dr.link_scale_jitter * g.standard_normal(J)
            kp_off[i] = dr.keypoint_jitter * g.standard_normal(3)
        if perturbation is not None:
            counters["perturbation_draws"] += 1
            scale[i] *= 1.0 + g.uniform(-perturbation.link_offset, perturbation.link_offset, J)
            joints[i] += perturbation.initial_joint_offset * g.standard_normal(J)
            kp[i] += perturbation.keypoint_error * g.standard_normal(3)
            noise[i] = perturbation.action_noise
    joints = scene.chain.clamp(joints)
    bound = scene.step_bound
    hist = np.zeros((n, history, J))
    hist[:, 0] = np.clip(vel / CONTROL_HZ, -bound, bound)
    lengths = scene.chain.lengths * np.maximum(scale, 0.1)
    ee_pos, ee_quat = fk_batch(scene.chain, joints, lengths)
    goal = np.broadcast_to(scene.target if goal is None else np.asarray(goal, dtype=float), (n, 3)).copy()
    closed = np.full(n, not scene.grasping)
    return EnvState(
        joints=joints,
        velocities=vel,
        history=hist,
        gripper_closed=closed,
        articulation=np.zeros(n),
        step=0,
        keypoint=kp,
        orientation=_orientations(scene, orientation, n),
        goal=goal,
        lengths=lengths,
        keypoint_offset=kp_off,
        action_noise=noise,
        ee_position=ee_pos,
        ee_orientation=ee_quat,
        stage=np.zeros(n, dtype=np.int64),
        grip=np.where(closed, grip_quality(scene, ee_pos, np.zeros(n)), 0.0),
        rngs=rngs,
    )


def handle_position(scene: Scene, articulation):
    if scene.articulated is None:
        return None
    return scene.articulated.handle_position(articulation)


def step(scene: Scene, state: EnvState, action: Action) -> tuple[EnvState, StepInfo]:
    """Advance every environment by one 20 Hz control tick."""
    delta = np.asarray(action.delta, dtype=float)
    if delta.shape != state.joints.shape:
        raise ContractViolation(f"action has shape {delta.shape}, expected {state.joints.shape}")
    bound = scene.step_bound
    a = np.clip(delta, -bound, bound)
    executed = a
    if np.any(state.action_noise > 0):
        noise = np.stack([g.standard_normal(a.shape[1]) for g in state.rngs])
        executed = a + state.action_noise[:, None] * noise
    joints = scene.chain.clamp(state.joints + executed)
    velocities = (joints - state.joints) * CONTROL_HZ

    cmd = np.asarray(action.gripper)
    closed = np.where(cmd == GripperCommand.CLOSE, True, np.where(cmd == GripperCommand.OPEN, False, state.gripper_closed))

    ee_pos, ee_quat = fk_batch(scene.chain, joints, state.lengths)
    art = state.articulation
    # quality is fixed at the moment of closing; an open gripper holds nothing
    grip = np.where(closed & ~state.gripper_closed, grip_quality(scene, state.ee_position, art),
                    np.where(closed, state.grip, 0.0))
    obj = scene.articulated
    if obj is not None:
        gap = np.linalg.norm(state.ee_position - obj.handle_position(art), axis=-1)
        attached = closed & (gap <= scene.grasp_radius)
        moved = obj.coordinate_delta(art, ee_pos - state.ee_position)
        lo, hi = obj.limits
        art = np.where(attached, np.clip(art + grip * moved, lo, hi), art)

    prev = state.history[:, 0]
    history = np.concatenate([a[:, None], state.history[:, :-1]], axis=1)
    new = replace(
        state,
        joints=joints,
        velocities=velocities,
        history=history,
        gripper_closed=closed,
        grip=grip,
        articulation=art,
        step=state.step + 1,
        ee_position=ee_pos,
        ee_orientation=ee_quat,
    )
    info = StepInfo(
        ee_position=ee_pos,
        ee_orientation=ee_quat,
        distance=np.linalg.norm(ee_pos - state.keypoint, axis=-1),
        angle=geodesic_angle_batch(ee_quat, state.orientation),
        goal_distance=np.linalg.norm(ee_pos - state.goal, axis=-1),
        articulation=art,
        velocities=velocities,
        action=a,
        prev_action=prev,
    )
    return new, info


def grip_quality(scene: Scene, ee_position, articulation):
    """Grasp quality for closing the gripper at ``ee_position``.

    1 inside the grasp radius without falloff; ``1 - (gap/r)^2`` with the
    quadratic falloff; 0 beyond the radius or without an articulated object.
    """
    obj = scene.articulated
    if obj is None:
        return np.zeros(np.shape(articulation))
    gap = np.linalg.norm(np.asarray(ee_position) - obj.handle_position(articulation), axis=-1)
    if scene.grip_falloff == "quadratic":
        return np.clip(1.0 - (gap / scene.grasp_radius) ** 2, 0.0, 1.0)
    return np.where(gap <= scene.grasp_radius, 1.0, 0.0)


def gripper_controller(grasping: bool, reached):
    """Open until the grasp keypoint is reached, closed afterwards.

    Non-grasping tasks keep the gripper closed throughout.
    """
    reached = np.asarray(reached, dtype=bool)
    if not grasping:
        return np.full(reached.shape, GripperCommand.CLOSE, dtype=np.int64)
    return np.where(reached, GripperCommand.CLOSE, GripperCommand.OPEN).astype(np.int64)


def advance_stage(scene: Scene, state: EnvState) -> tuple[EnvState, np.ndarray]:
    """Apply the task protocol before a control tick.

    Returns the (possibly re-targeted) state and the gripper command for the
    tick. In a two-stage scene, stage one ends when the commanded keypoint is
    reached or ``stage_steps`` elapse; the gripper then closes and the
    commanded keypoint moves by ``scene.pull``.
    """
    reached = state.stage > 0
    if scene.two_stage:
        near = np.linalg.norm(state.ee_position - state.keypoint, axis=-1) < scene.reach_tolerance
        timeout = scene.stage_steps is not None and state.step >= scene.stage_steps
        switch = (state.stage == 0) & (near | timeout)
        if np.any(switch):
            state = replace(
                state,
                keypoint=np.where(switch[:, None], state.keypoint + scene.pull, state.keypoint),
                stage=np.where(switch, 1, state.stage),
            )
        reached = reached | switch
    return state, gripper_controller(scene.grasping, reached)


def _draw_noise(rngs, shape):
    return np.stack([g.standard_normal(shape) for g in rngs])


def observe(scene: Scene, state: EnvState, dr: DomainRandomizationConfig, encoding: str = "trig", rng=None) -> Observation:
    """Assemble the keypoint-first token observation.

    Joint tokens hold the encoded angle (``(sin, cos)`` for ``"trig"``, the
    bare angle for ``"raw"``) followed by that joint's action history scaled
    by the per-step bound. When ``dr.enabled`` every entry receives i.i.d.
    Gaussian noise of std ``dr.obs_noise``, drawn from ``rng`` (an integer
    seed, a generator, or one generator per environment; defaults to the
    environments' own generators).
    """
    if encoding == "trig":
        angles = trig_encode(state.joints[..., None])
    elif encoding == "raw":
        angles = state.joints[..., None]
    else:
        raise ContractViolation(f"unknown encoding {encoding!r}")
    hist = np.swapaxes(state.history, 1, 2) / scene.step_bound[:, None]
    joints = np.concatenate([angles, hist], axis=-1)
    kp = np.concatenate([state.keypoint + state.keypoint_offset, state.orientation], axis=-1)
    if dr.enabled and dr.obs_noise > 0:
        n = state.n
        if rng is None:
            rngs = state.rngs
        elif isinstance(rng, (list, tuple)):
            rngs = rng
        else:
            g = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            rngs = (g,) * n
        kp = kp + dr.obs_noise * _draw_noise(rngs, kp.shape[1:])
        joints = joints + dr.obs_noise * _draw_noise(rngs, joints.shape[1:])
    return Observation(kp, joints)
