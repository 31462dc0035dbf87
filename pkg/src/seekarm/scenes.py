"""Built-in parametric scenes.

Both presets use a yaw-pitch-pitch(-pitch) arm mounted at the origin: the
first joint turns about +z, the rest pitch about their local +y.
"""

import numpy as np

from .env import Drawer, Scene
from .kinematics import KinematicChain, Link, Pose
from .reward import TaskReturnSpec

LIMIT = 2.6


def _arm(lengths, max_speed):
    axes = [(0, 0, 1)] + [(0, 1, 0)] * (len(lengths) - 1)
    links = [Link(l, a, (-LIMIT, LIMIT), max_speed) for l, a in zip(lengths, axes)]
    return KinematicChain(links, Pose(np.zeros(3)))


def reach3(horizon=50):
    """3-DoF reaching: hold the end-effector on a point in front of the arm."""
    guess = np.array([0.40, 0.12, 0.10])
    return Scene(
        name="reach3",
        chain=_arm([0.10, 0.30, 0.25], max_speed=1.6),
        home=np.array([0.0, -0.6, 1.2]),
        target=guess + np.array([0.02, -0.02, 0.02]),
        guess=guess,
        orientation=np.array([1.0, 0.0, 0.0, 0.0]),
        grasp_radius=0.02,
        task=TaskReturnSpec(kind="reach-hold", scale=0.02),
        horizon=horizon,
    )


def drawer(horizon=80):
    """4-DoF drawer opening: grasp the handle, then pull it 10 cm toward the base."""
    handle = np.array([0.50, 0.0, 0.15])
    travel = 0.10
    return Scene(
        name="drawer",
        chain=_arm([0.10, 0.30, 0.25, 0.08], max_speed=1.6),
        home=np.array([0.0, -0.6, 1.2, -0.6]),
        target=handle,
        guess=handle + np.array([0.02, 0.04, -0.02]),
        orientation=np.array([1.0, 0.0, 0.0, 0.0]),
        grasp_radius=0.04,
        task=TaskReturnSpec(kind="articulation-progress", scale=travel),
        articulated=Drawer(axis=np.array([-1.0, 0.0, 0.0]), travel=travel, handle=Pose(handle)),
        grasping=True,
        pull=np.array([-travel, 0.0, 0.0]),
        horizon=horizon,
        stage_steps=horizon // 2,
        reach_tolerance=0.005,
        grip_falloff="quadratic",
    )


PRESETS = {"reach3": reach3, "drawer": drawer}
