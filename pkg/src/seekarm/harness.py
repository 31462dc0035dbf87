"""End-to-end experiments: train, refine, and evaluate in nominal and perturbed worlds.

The perturbed world stands in for real hardware: link lengths, start pose,
execution and keypoint placement are disturbed by a held-out distribution
that training never samples.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, env
from .cem import ActuatorObjective, AttentionSpace, CemResult, SyntheticObjective, optimize
from .config import ExperimentConfig, canonical_json
from .env import DomainRandomizationConfig, Scene
from .policy import PolicyConfig
from .ppo import TrainingLog, sample_training_keypoint, train
from .rollout import episode_seeds, run_episodes

WORLDS = ("nominal", "perturbed")


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.__cause__ = exc


@dataclass
class RunReport:
    """Self-describing result of a pipeline run or ablation grid."""

    kind: str
    config_fingerprint: str
    seed: int | None
    cells: dict = field(default_factory=dict)       # cell -> world -> list of trial rows
    attention: list = field(default_factory=list)   # refit records of the keypoint search
    extras: dict = field(default_factory=dict)
    version: str = __version__

    def success_rate(self, cell: str, world: str, batch=None) -> float:
        rows = [r for r in self.cells[cell][world] if batch is None or r["batch"] == batch]
        if not rows:
            return float("nan")
        return sum(1 for r in rows if r["success"]) / len(rows)

    def success_rates(self) -> dict:
        return {c: {w: self.success_rate(c, w) for w in ws} for c, ws in self.cells.items()}

    def batches(self) -> list:
        return sorted({r["batch"] for ws in self.cells.values() for rows in ws.values() for r in rows})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "version": self.version,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "success_rates": _nan_to_none(self.success_rates()),
            "cells": self.cells,
            "attention": self.attention,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def table(self) -> str:
        """Plain-text success table: one row per cell, one column per world (and per batch)."""
        batches = self.batches()
        head = ["cell"] + [w for w in WORLDS]
        if len(batches) > 1:
            head += [f"perturbed[b{b}]" for b in batches]
        lines = [head]
        for cell, worlds in self.cells.items():
            row = [cell] + [_pct(self.success_rate(cell, w)) if w in worlds else "-" for w in WORLDS]
            if len(batches) > 1:
                row += [_pct(self.success_rate(cell, "perturbed", b)) for b in batches]
            lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
        out = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in lines]
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out)


def _pct(x: float) -> str:
    return "n/a" if x != x else f"{100 * x:.0f}%"


def _nan_to_none(d):
    if isinstance(d, dict):
        return {k: _nan_to_none(v) for k, v in d.items()}
    return None if isinstance(d, float) and d != d else d


# --- training -----------------------------------------------------------------


def cell_settings(config: ExperimentConfig, cell: str) -> tuple[DomainRandomizationConfig, str]:
    """Training DR and joint encoding for an ablation cell."""
    dr = config.harness.dr
    encoding = config.policy.encoding
    if cell == "no-DR":
        dr = dr.model_copy(update={"enabled": False})
    elif cell == "no-TE":
        encoding = "raw"
    elif cell != "full":
        raise ValueError(f"unknown ablation cell {cell!r}")
    return dr, encoding


def train_actuator(config: ExperimentConfig, seed: int, cell: str = "full", callback=None) -> tuple[PolicyConfig, dict, TrainingLog]:
    """Train the actuator for ``cell``; raises if a perturbation was sampled meanwhile."""
    scene = config.scene.build()
    dr, encoding = cell_settings(config, cell)
    pcfg = config.policy.build(scene, config.ppo.keypoint_half_width, encoding)
    before = env.counters["perturbation_draws"]
    params, log = train(scene, pcfg, config.ppo, dr, seed, config.reward.schedule(), callback)
    drawn = env.counters["perturbation_draws"] - before
    if drawn:
        raise AssertionError(f"{drawn} perturbation parameter draws happened during training")
    return pcfg, params, log


# --- evaluation -----------------------------------------------------------------


def trial_outcomes(config: ExperimentConfig, scene: Scene, episodes, batch: int) -> list:
    """Per-trial rows with the scene's success rule applied."""
    h = config.harness
    final_art = episodes.articulation[-1]
    returns = episodes.task_returns(scene)
    rows = []
    for i in range(episodes.n):
        if scene.articulated is not None:
            travel = scene.articulated.limits[1]
            success = bool(final_art[i] >= h.open_fraction * travel)
        else:
            tail = episodes.goal_distance[-h.hold_steps:, i]
            success = bool(np.all(tail < h.reach_tolerance))
        rows.append({
            "batch": batch,
            "trial": i,
            "success": success,
            "task_return": float(returns[i]),
            "final_goal_distance": float(episodes.goal_distance[-1, i]),
            "articulation": float(final_art[i]),
            "keypoint": [float(v) for v in episodes.keypoints[i]],
        })
    return rows


def evaluate_world(config: ExperimentConfig, pcfg: PolicyConfig, params: dict, keypoints, goals, world: str, seed: int, batch: int = 0) -> list:
    """Run one deterministic-policy episode per keypoint in the given world.

    The nominal world is the training simulator (with the configured domain
    randomization); the perturbed world switches randomization off and
    applies the held-out perturbation instead.
    """
    scene = config.scene.build()
    keypoints = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    if keypoints.shape[0] == 0:
        return []
    if world == "nominal":
        dr, pert = config.harness.dr, None
    elif world == "perturbed":
        dr, pert = DomainRandomizationConfig(enabled=False), config.harness.perturbation
    else:
        raise ValueError(f"unknown world {world!r}")
    tag = WORLDS.index(world)
    ep = run_episodes(pcfg, params, scene, keypoints, episode_seeds(seed, batch, tag, 0x7472, count=len(keypoints)), dr,
                      perturbation=pert, goals=goals)
    return trial_outcomes(config, scene, ep, batch)


# --- pipeline -----------------------------------------------------------------


def refine_keypoint(config: ExperimentConfig, pcfg: PolicyConfig | None, params: dict | None, seed: int) -> CemResult:
    scene = config.scene.build()
    cem = config.cem
    mean = np.asarray(cem.initial_mean if cem.initial_mean is not None else
                      (scene.guess if cem.dims == 3 else np.r_[scene.guess, np.zeros(3)]), dtype=float)
    space0 = cem.initial_space(mean[:3])
    space0 = AttentionSpace(mean, space0.cov)
    if cem.objective == "synthetic":
        optimum = scene.target if cem.synthetic_optimum is None else np.asarray(cem.synthetic_optimum)
        objective = SyntheticObjective(np.asarray(optimum, dtype=float), cem.rollouts, cem.synthetic_noise)
    else:
        objective = ActuatorObjective(pcfg, params, scene, cem.rollouts, config.harness.dr,
                                      training_half_width=config.ppo.keypoint_half_width)
    return optimize(space0, objective, cem.search(), seed)


def run_pipeline(config: ExperimentConfig, seed: int, callback=None) -> tuple[RunReport, dict]:
    """Train, refine the keypoint, then evaluate at the refined keypoint in both worlds.

    Returns the report and the artifacts (policy config, params, training log,
    CEM result) for the caller to persist.
    """
    scene = config.scene.build()
    try:
        pcfg, params, log = train_actuator(config, seed, "full", callback)
    except Exception as exc:
        raise StageError("train", exc) from exc
    try:
        result = refine_keypoint(config, pcfg, params, seed)
    except Exception as exc:
        raise StageError("refine", exc) from exc
    report = evaluate_report(config, pcfg, params, result.space.mean[:3], seed, kind="pipeline")
    report.attention = result.spaces
    report.extras.update({"initial_keypoint": scene.guess.tolist(), "converged": result.converged,
                          "final_space": result.space.to_dict()})
    return report, {"policy_config": pcfg, "params": params, "log": log, "cem": result}


def evaluate_report(config: ExperimentConfig, pcfg: PolicyConfig, params: dict, keypoint, seed: int, kind: str = "eval") -> RunReport:
    """Trials at a fixed keypoint (goal: the scene's affordance point) in both worlds."""
    scene = config.scene.build()
    n = config.harness.trials
    kps = np.tile(np.asarray(keypoint, dtype=float), (n, 1))
    try:
        cells = {"full": {w: evaluate_world(config, pcfg, params, kps, scene.target, w, seed) for w in WORLDS}}
    except Exception as exc:
        raise StageError("evaluate", exc) from exc
    rep = RunReport(kind, config.fingerprint(), seed, cells)
    rep.extras["keypoint"] = [float(v) for v in np.asarray(keypoint).ravel()]
    return rep


# --- ablation -----------------------------------------------------------------


def ablation_keypoints(config: ExperimentConfig, batch_seed: int) -> np.ndarray:
    """Per-batch trial keypoints drawn from the training box (shared by all cells)."""
    scene = config.scene.build()
    return sample_training_keypoint(scene.guess, config.ppo.keypoint_half_width, [batch_seed, 0x61626C], size=config.harness.trials)


def _ablation_job(args):
    config, cell, batch, seed = args
    pcfg, params, _ = train_actuator(config, seed, cell)
    kps = ablation_keypoints(config, seed)
    rows = {w: evaluate_world(config, pcfg, params, kps, kps, w, seed, batch) for w in WORLDS}
    return cell, batch, rows, pcfg, params


def run_ablation_grid(config: ExperimentConfig, cells=None, jobs: int = 1, on_cell=None) -> RunReport:
    """Train one actuator per (cell, seed batch) and evaluate each in both worlds.

    Each batch uses its own seed for training and for its trial keypoints;
    every cell of a batch sees the same keypoints. ``on_cell`` receives
    ``(cell, batch, policy_config, params)`` after each job.
    """
    cells = tuple(cells or config.harness.cells)
    for c in cells:
        cell_settings(config, c)
    jobs_list = [(config, c, b, s) for b, s in enumerate(config.harness.seeds) for c in cells]
    report = RunReport("ablation", config.fingerprint(), None, {c: {w: [] for w in WORLDS} for c in cells})
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_job, jobs_list))
    else:
        results = map(_ablation_job, jobs_list)
    for cell, batch, rows, pcfg, params in results:
        for w in WORLDS:
            report.cells[cell][w].extend(rows[w])
        if on_cell:
            on_cell(cell, batch, pcfg, params)
    report.extras["seeds"] = list(config.harness.seeds)
    report.extras["directional"] = directional_summary(report)
    return report


def directional_summary(report: RunReport) -> dict:
    """Per-batch comparisons of the full cell against each ablated cell (perturbed world).

    The nominal-world gap of the no-DR cell is an in-distribution sanity
    check, not a claim about transfer.
    """
    out = {}
    if "full" not in report.cells:
        return out
    batches = report.batches()
    for other in report.cells:
        if other == "full":
            continue
        wins = [report.success_rate("full", "perturbed", b) >= report.success_rate(other, "perturbed", b) for b in batches]
        out[f"full>={other}"] = {"batches_won": int(sum(wins)), "batches": len(batches)}
    if "no-DR" in report.cells:
        gap = report.success_rate("full", "nominal") - report.success_rate("no-DR", "nominal")
        out["nominal_gap_full_minus_noDR_sanity"] = None if gap != gap else gap
    return out


def load_report(text: str) -> dict:
    return json.loads(text)
