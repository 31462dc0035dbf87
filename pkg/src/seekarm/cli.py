"""``seekarm`` command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, canonical_json, validate, load, load_preset, provenance
from .errors import CheckpointError, ConfigError, ContractViolation, NumericError, OptimizationAborted
from .harness import StageError, WORLDS, evaluate_report, refine_keypoint, run_ablation_grid, run_pipeline, train_actuator
from .policy import PolicyConfig, load_checkpoint, save_checkpoint
from .rollout import episode_seeds, run_episodes, trajectory_rows

OUTPUT_ENV = "SEEKARM_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.preset:
        return load_preset(args.preset)
    if args.config:
        return load(args.config)
    return ExperimentConfig()


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "seekarm-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(config: ExperimentConfig, command: str, seed) -> dict:
    return {"kind": "header", "command": command, "seed": seed, **provenance(config)}


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for rec in records:
            fh.write(canonical_json(_jsonable(rec)) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def _checkpoint_meta(config: ExperimentConfig, seed: int, cell: str) -> dict:
    return {**provenance(config), "seed": seed, "cell": cell}


def _load_compatible(config: ExperimentConfig, path, encoding: str | None = None) -> tuple[PolicyConfig, dict]:
    cfg, params, _ = load_checkpoint(path)
    scene = config.scene.build()
    expected = config.policy.build(scene, config.ppo.keypoint_half_width, encoding)
    for name in ("dof", "layers", "heads", "width", "ff", "head_hidden", "joint_width", "encoding", "history"):
        a, b = getattr(cfg, name), getattr(expected, name)
        if a != b:
            raise CheckpointError(f"checkpoint/config mismatch in {name}: checkpoint has {a}, config implies {b}")
    if not np.allclose(cfg.bound, expected.bound):
        raise CheckpointError(f"checkpoint/config mismatch in action_bound: {list(cfg.action_bound)} vs {list(expected.action_bound)}")
    return cfg, params


def _print(msg: str) -> None:
    print(msg, flush=True)


# --- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    log_records = [_header(config, "train", args.seed)]

    def progress(rec):
        if args.verbose:
            _print(f"update {rec['update']}: reward {rec['episode_reward']:.2f} final distance {rec['final_distance']:.4f}")

    pcfg, params, log = train_actuator(config, args.seed, args.cell, progress)
    ckpt = out / "policy.ckpt"
    save_checkpoint(ckpt, pcfg, params, _checkpoint_meta(config, args.seed, args.cell))
    log_records.extend(log.records())
    _write_jsonl(out / "train_log.jsonl", log_records)
    last = log.evaluations[-1] if log.evaluations else None
    _print(f"checkpoint: {ckpt}")
    if last:
        _print(f"evaluation success rate: {last['success_rate']:.2f} (final distance {last['final_distance']:.4f} m)")
    return EXIT_OK


def cmd_refine(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    pcfg = params = None
    if config.cem.objective == "actuator":
        if not args.checkpoint:
            raise UsageError("refine needs --checkpoint unless cem.objective is 'synthetic'")
        pcfg, params = _load_compatible(config, args.checkpoint)
    result = refine_keypoint(config, pcfg, params, args.seed)
    _write_jsonl(out / "cem_history.jsonl", [_header(config, "refine", args.seed)] + result.history)
    final = {**provenance(config), "seed": args.seed, "converged": result.converged, "space": result.space.to_dict()}
    (out / "attention.json").write_text(canonical_json(_jsonable(final)) + "\n")
    mu = result.space.mean
    _print(f"final mean: {np.array2string(mu, precision=4)}  |cov|_F = {np.linalg.norm(result.space.cov):.3e}  "
           f"converged: {result.converged}")
    return EXIT_OK


def _keypoint(args, config: ExperimentConfig):
    if args.keypoint is not None:
        return np.asarray(args.keypoint, dtype=float)
    if args.attention:
        data = json.loads(Path(args.attention).read_text())
        return np.asarray(data["space"]["mean"][:3], dtype=float)
    return config.scene.build().guess


def _write_report(out: Path, report, name: str = "report") -> None:
    (out / f"{name}.json").write_text(report.to_json() + "\n")
    (out / f"{name}.txt").write_text(report.table() + "\n")


def cmd_eval(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    pcfg, params = _load_compatible(config, args.checkpoint)
    report = evaluate_report(config, pcfg, params, _keypoint(args, config), args.seed)
    _write_report(out, report)
    _print(report.table())
    _print(f"report fingerprint: {report.fingerprint()}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    report, art = run_pipeline(config, args.seed)
    save_checkpoint(out / "policy.ckpt", art["policy_config"], art["params"], _checkpoint_meta(config, args.seed, "full"))
    _write_jsonl(out / "train_log.jsonl", [_header(config, "pipeline", args.seed)] + list(art["log"].records()))
    _write_jsonl(out / "cem_history.jsonl", [_header(config, "pipeline", args.seed)] + art["cem"].history)
    _write_report(out, report)
    _print(report.table())
    _print(f"report fingerprint: {report.fingerprint()}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    cells = None
    if args.cells:
        cells = tuple(c.strip() for c in args.cells.split(",") if c.strip())
        doc = config.to_document()
        doc["harness"]["cells"] = list(cells)
        config = validate(doc)

    def save(cell, batch, pcfg, params):
        if args.save_checkpoints:
            ckdir = out / "checkpoints"
            ckdir.mkdir(exist_ok=True)
            seed = config.harness.seeds[batch]
            save_checkpoint(ckdir / f"{cell}-b{batch}.ckpt", pcfg, params, _checkpoint_meta(config, seed, cell))
        if args.verbose:
            _print(f"finished cell {cell}, batch {batch}")

    report = run_ablation_grid(config, cells, jobs=args.jobs, on_cell=save)
    _write_report(out, report)
    _print(report.table())
    for key, val in report.extras["directional"].items():
        _print(f"{key}: {val}")
    _print(f"report fingerprint: {report.fingerprint()}")
    return EXIT_OK


def cmd_export(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    pcfg, params = _load_compatible(config, args.checkpoint)
    scene = config.scene.build()
    kp = _keypoint(args, config)
    n = args.episodes
    if args.world == "nominal":
        dr, pert = config.harness.dr, None
    else:
        from .env import DomainRandomizationConfig
        dr, pert = DomainRandomizationConfig(enabled=False), config.harness.perturbation
    ep = run_episodes(pcfg, params, scene, np.tile(kp, (n, 1)), episode_seeds(args.seed, 0x6578, count=n), dr,
                      perturbation=pert, weights=config.reward.weights, record=True)
    records = [_header(config, "export", args.seed)]
    for i in range(n):
        records.extend({"kind": "step", "episode": i, **row} for row in trajectory_rows(ep, i))
    path = out / "trajectories.jsonl"
    _write_jsonl(path, records)
    _print(f"wrote {n} episode(s) x {scene.horizon} steps to {path}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seekarm", description="Keypoint-conditioned arm actuator: train, refine, evaluate.")
    p.add_argument("--version", action="version", version=f"seekarm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="experiment config file (YAML or JSON)")
        sp.add_argument("--preset", help="built-in experiment preset (reach3, drawer, ablation, ...)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./seekarm-out)")
        sp.add_argument("--jobs", type=int, default=1, help="maximum concurrent worker processes")
        sp.add_argument("-v", "--verbose", action="store_true")
        if checkpoint:
            sp.add_argument("--checkpoint", help="policy checkpoint written by 'train'")

    def keypoint_args(sp):
        sp.add_argument("--keypoint", type=float, nargs=3, metavar=("X", "Y", "Z"))
        sp.add_argument("--attention", help="attention.json from 'refine'; its mean is used as the keypoint")

    sp = sub.add_parser("train", help="train the actuator with PPO")
    common(sp)
    sp.add_argument("--cell", default="full", choices=["full", "no-DR", "no-TE"], help="ablation variant to train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("refine", help="cross-entropy keypoint search with a frozen actuator")
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("eval", help="evaluate a checkpoint at a keypoint in nominal and perturbed worlds")
    common(sp, checkpoint=True)
    keypoint_args(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pipeline", help="train, refine and evaluate in one run")
    common(sp)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    common(sp)
    sp.add_argument("--cells", help="comma-separated subset of full,no-DR,no-TE")
    sp.add_argument("--save-checkpoints", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export", help="write per-step trajectories as JSON lines")
    common(sp, checkpoint=True)
    keypoint_args(sp)
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--world", choices=list(WORLDS), default="nominal")
    sp.set_defaults(func=cmd_export)
    return p


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, StageError):
        return _exit_code(exc.__cause__) if exc.__cause__ else None
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, CheckpointError, ContractViolation, UsageError, OptimizationAborted, OSError)):
        return EXIT_CONFIG
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "checkpoint", None) is None and args.command in ("eval", "export"):
        parser.error(f"{args.command} requires --checkpoint")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except Exception as exc:  # map library failures to documented exit codes
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"seekarm {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
