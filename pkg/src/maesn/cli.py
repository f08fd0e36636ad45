"""Experiment runner: meta-train on dense tasks, meta-test on sparse ones, emit plot data.

Usage::

    maesn run config.json
    maesn metatest runs/x/seed_0/train/ckpt_300 runs/x/tasks_validation.json
    maesn export-plotdata runs/x
    maesn verify runs/x

Exit codes: 0 ok, 1 config error, 2 runtime error. ``MAESN_WORKERS`` sets the
rollout worker count; results do not depend on it.

Config schema (JSON object; unknown keys are rejected)::

    method               one of maesn, maml, latent_only, scratch, maml_bias_all, maml_bias_only
    family               point_nav, wheeled_nav, block_push, legged_nav or latent_bandit
    output_dir           artifact root (created)
    seeds                non-empty list of distinct ints, one full run per seed
    n_train_tasks        training tasks (dense rewards)
    n_validation_tasks   meta-test tasks (sparse rewards), >= 1
    meta_iters           outer iterations; for scratch, iterations per validation task
    task_batch_size      tasks per outer iteration
    episodes_pre         episodes per task before the inner update
    episodes_post        episodes per task after it
    latent_dim           latent or bias dimension
    task_seed            seed of the shared train/validation task sets
    horizon              episode length override (null keeps the family default)
    metatest_iters       adaptation iterations per validation task
    metatest_episodes    episodes per adaptation iteration (and per scratch iteration)
    checkpoint_every     checkpoint period (null saves only the first and last)
    trajectory_episodes  episodes dumped at the prior on the first validation task
    dispersion_episodes  episodes per endpoint-dispersion estimate
    scratch_optimizer    "trpo" or "reinforce"
    method_options       extra MethodConfig fields (hidden_sizes, kl_weight, ...)
    outer_options        extra OuterConfig fields (delta, optimizer, learning_rate, ...)
"""

from __future__ import annotations

import argparse
import csv
import filecmp
import json
import logging
import math
import os
import sys
import tempfile
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import envs
from .baselines import train_scratch
from .estimators import collect, dump_trajectories, endpoint_dispersion, load_trajectories
from .inner import metatest_adapt, write_trace
from .meta import (OuterConfig, TrainingAborted, load_checkpoint, make_policy, meta_train,
                   write_metrics)
from .methods import METHODS, MethodConfig
from .policy import VariationalParams
from .rng import stream, sub_seed

LOG = logging.getLogger("maesn.cli")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
WORKERS_ENV = "MAESN_WORKERS"
CURVE_FIELDS = ["iteration", "mean", "stderr", "n", "stderr_over", "method"]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"field {field_name!r}: {message}")
        self.field = field_name


class RunError(RuntimeError):
    """Mid-run failure; partial artifacts and an error manifest were written."""


# ----------------------------------------------------------------------------
# configuration


_RESERVED_METHOD_KEYS = {"method", "latent_dim"}
_RESERVED_OUTER_KEYS = {"task_batch_size", "episodes_pre", "episodes_post", "workers"}


@dataclass
class ExperimentConfig:
    method: str
    family: str
    output_dir: str
    seeds: list[int]
    n_train_tasks: int = 20
    n_validation_tasks: int = 20
    meta_iters: int = 100
    task_batch_size: int = 20
    episodes_pre: int = 10
    episodes_post: int = 10
    latent_dim: int = 2
    task_seed: int = 0
    horizon: int | None = None
    metatest_iters: int = 25
    metatest_episodes: int = 10
    checkpoint_every: int | None = None
    trajectory_episodes: int = 20
    dispersion_episodes: int = 50
    scratch_optimizer: str = "trpo"
    method_options: dict = field(default_factory=dict)
    outer_options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown field")
        for k in ("method", "family", "output_dir", "seeds"):
            if k not in d:
                raise ConfigError(k, "required field is missing")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError("<file>", f"config file {p} does not exist")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON in {p}: {exc}") from exc
        return cls.from_dict(d)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {list(METHODS)}, got {self.method!r}")
        try:
            envs.get_family(self.family)
        except (ValueError, KeyError) as exc:
            raise ConfigError("family", str(exc)) from exc
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigError("output_dir", "must be a non-empty string")
        if (not isinstance(self.seeds, list) or not self.seeds
                or not all(_is_int(s) and s >= 0 for s in self.seeds)):
            raise ConfigError("seeds", "must be a non-empty list of non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "must be distinct")
        minimums = {"n_train_tasks": 1, "n_validation_tasks": 1, "meta_iters": 0, "task_batch_size": 1,
                    "episodes_pre": 2, "episodes_post": 2, "latent_dim": 1, "task_seed": 0,
                    "metatest_iters": 0, "metatest_episodes": 2, "trajectory_episodes": 1,
                    "dispersion_episodes": 2}
        for name, lo in minimums.items():
            v = getattr(self, name)
            if not _is_int(v) or v < lo:
                raise ConfigError(name, f"must be an integer >= {lo}, got {v!r}")
        for name in ("horizon", "checkpoint_every"):
            v = getattr(self, name)
            if v is not None and (not _is_int(v) or v < 1):
                raise ConfigError(name, f"must be null or an integer >= 1, got {v!r}")
        if self.method != "scratch" and self.task_batch_size > self.n_train_tasks:
            raise ConfigError("task_batch_size", f"{self.task_batch_size} exceeds n_train_tasks "
                                                 f"{self.n_train_tasks}")
        if self.scratch_optimizer not in ("trpo", "reinforce"):
            raise ConfigError("scratch_optimizer", f"must be 'trpo' or 'reinforce', got {self.scratch_optimizer!r}")
        self._check_options("method_options", self.method_options, MethodConfig, _RESERVED_METHOD_KEYS)
        self._check_options("outer_options", self.outer_options, OuterConfig, _RESERVED_OUTER_KEYS)
        try:
            self.method_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("method_options", str(exc)) from exc
        try:
            self.outer_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("outer_options", str(exc)) from exc
        try:
            Path(self.output_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("output_dir", f"cannot create {self.output_dir}: {exc}") from exc

    @staticmethod
    def _check_options(name: str, opts, cls, reserved: set[str]) -> None:
        if not isinstance(opts, dict):
            raise ConfigError(name, "must be a JSON object")
        allowed = {f.name for f in fields(cls)} - reserved
        for k in opts:
            if k in reserved:
                raise ConfigError(f"{name}.{k}", "set this at the top level")
            if k not in allowed:
                raise ConfigError(f"{name}.{k}", "unknown option")

    def method_config(self) -> MethodConfig:
        opts = dict(self.method_options)
        if "hidden_sizes" in opts:
            opts["hidden_sizes"] = tuple(opts["hidden_sizes"])
        return MethodConfig(self.method, latent_dim=self.latent_dim, **opts)

    def outer_config(self, workers: int = 1) -> OuterConfig:
        return OuterConfig(task_batch_size=self.task_batch_size, episodes_pre=self.episodes_pre,
                           episodes_post=self.episodes_post, workers=workers, **self.outer_options)

    def to_dict(self) -> dict:
        return asdict(self)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(WORKERS_ENV, f"must be a positive integer, got {raw!r}")
    return n


# ----------------------------------------------------------------------------
# artifact writers


def task_sets(cfg: ExperimentConfig) -> tuple[list[envs.TaskSpec], list[envs.TaskSpec]]:
    """Shared train (dense) and validation (sparse) task sets."""
    train = envs.sample_tasks(cfg.family, cfg.n_train_tasks, "train", seed=cfg.task_seed,
                              reward_mode="dense", horizon=cfg.horizon)
    val = envs.sample_tasks(cfg.family, cfg.n_validation_tasks, "validation", seed=cfg.task_seed,
                            reward_mode="sparse", horizon=cfg.horizon)
    return train, val


def curve_stats(curves: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error across rows, per column."""
    a = np.asarray(curves, dtype=np.float64)
    mean = a.mean(axis=0)
    if len(a) < 2:
        return mean, np.zeros_like(mean)
    return mean, a.std(axis=0, ddof=1) / math.sqrt(len(a))


def write_curve(path, curves: Sequence[Sequence[float]], method: str, over: str) -> None:
    mean, se = curve_stats(curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for i, (m, s) in enumerate(zip(mean, se)):
            w.writerow([i, repr(float(m)), repr(float(s)), len(curves), over, method])


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_modes(path, expected: str) -> None:
    """Every row of a metrics or trace CSV must carry ``mode == expected``."""
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            if row.get("mode") != expected:
                raise RuntimeError(f"{path} row {i} has mode {row.get('mode')!r}, expected {expected!r}")


def write_latents(path, rows: Sequence[tuple[str, str, np.ndarray, np.ndarray]], dz: int) -> None:
    """``(task_id, tag, mu, sigma)`` rows; tag is ``pre`` or ``post``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "tag"] + [f"mu_{i}" for i in range(dz)] + [f"sigma_{i}" for i in range(dz)])
        for task_id, tag, mu, sigma in rows:
            w.writerow([task_id, tag] + [repr(float(x)) for x in mu] + [repr(float(x)) for x in sigma])


def dispersion_rows(ckpt_dir: Path, task: envs.TaskSpec, episodes: int, seed: int) -> list[list]:
    """Endpoint dispersion with z from the prior and with z fixed at 0 (same noise draws)."""
    ck = load_checkpoint(ckpt_dir)
    if ck.method.latent_kind != "sampled":
        return []
    dz = ck.policy.latent_dim
    rng_seed = sub_seed(seed, "dispersion", ck.state.iteration)
    sampled = collect(ck.policy, ck.state.theta, VariationalParams.prior(dz), task, episodes, rng_seed)
    fixed = collect(ck.policy, ck.state.theta, None, task, episodes, rng_seed, latent=np.zeros(dz))
    name = ckpt_dir.name
    return [[name, "sampled", repr(endpoint_dispersion(sampled))],
            [name, "fixed", repr(endpoint_dispersion(fixed))]]


def write_rows(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ----------------------------------------------------------------------------
# run


def _run_seed(cfg: ExperimentConfig, seed: int, sd: Path, train: list, val: list, workers: int,
              progress: dict) -> list[list[float]]:
    m = cfg.method_config()
    policy = make_policy(m, cfg.family)
    sd.mkdir(parents=True, exist_ok=True)
    curves: list[list[float]] = []
    latents = []
    disp: list[list] = []

    if m.method == "scratch":
        outer = cfg.outer_config(workers)
        progress["stage"] = "scratch"
        for j, t in enumerate(val):
            tr = train_scratch(t, m, cfg.meta_iters, cfg.metatest_episodes, sub_seed(seed, "scratch", j),
                               optimizer=cfg.scratch_optimizer, delta=outer.delta,
                               learning_rate=outer.learning_rate, workers=workers)
            d = sd / "scratch" / t.task_id
            d.mkdir(parents=True, exist_ok=True)
            write_metrics(d / "metrics.csv", tr.history)
            check_modes(d / "metrics.csv", "sparse")
            curves.append(tr.returns)
        theta = policy.init_params(stream(seed, "init"), init_log_std=m.init_log_std)
        vp = bias = None
    else:
        progress["stage"] = "meta_train"
        every = cfg.checkpoint_every or max(cfg.meta_iters, 1)
        res = meta_train(policy, m, train, cfg.outer_config(workers), cfg.meta_iters, seed, sd / "train",
                         checkpoint_every=every)
        check_modes(sd / "train" / "metrics.csv", "dense")
        progress["last_checkpoint"] = str(res.checkpoints[-1])
        theta, steps, bias = res.state.theta, res.state.steps, res.state.bias
        vp = VariationalParams.prior(m.latent_dim) if m.latent_kind == "sampled" else None

        progress["stage"] = "metatest"
        (sd / "metatest").mkdir(exist_ok=True)
        for j, t in enumerate(val):
            r = metatest_adapt(policy, m, theta, t, cfg.metatest_iters, cfg.metatest_episodes,
                               sub_seed(seed, "metatest", j), steps, bias=bias)
            trace = sd / "metatest" / f"{t.task_id}.csv"
            write_trace(trace, r)
            check_modes(trace, "sparse")
            curves.append(r.returns)
            if r.vp_trace:
                for tag, v in (("pre", r.vp_trace[0]), ("post", r.vp_trace[-1])):
                    latents.append((t.task_id, tag, v.mu, np.exp(v.log_sigma)))
            elif r.bias_trace:
                for tag, b in (("pre", r.bias_trace[0]), ("post", r.bias_trace[-1])):
                    latents.append((t.task_id, tag, b, np.zeros_like(b)))

        progress["stage"] = "dispersion"
        for ck in res.checkpoints:
            disp += [[seed] + row for row in dispersion_rows(ck, val[0], cfg.dispersion_episodes, seed)]

    progress["stage"] = "trajectories"
    dz = m.latent_dim if m.latent_kind != "none" else 0
    batch = collect(policy, theta, vp, val[0], cfg.trajectory_episodes, stream(seed, "trajectories"), latent=bias)
    dump_trajectories(sd / "trajectories_prior.jsonl", [batch])
    write_latents(sd / "latents.csv", latents, dz if latents else 0)
    write_rows(sd / "dispersion.csv", ["seed", "checkpoint", "kind", "dispersion"], disp)
    write_curve(sd / "adaptation_curve.csv", curves, m.method, "tasks")
    return curves


def run_experiment(cfg: ExperimentConfig, workers: int = 1, out_dir=None) -> Path:
    """Run every seed; returns the artifact root. Raises ``RunError`` after writing ``error.json``."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    err = out / "error.json"
    if err.exists():
        err.unlink()
    train, val = task_sets(cfg)
    envs.save_manifest(out / "tasks_train.json", train, seed=cfg.task_seed, split="train")
    envs.save_manifest(out / "tasks_validation.json", val, seed=cfg.task_seed, split="validation")

    seed_means = []
    progress: dict = {}
    for seed in cfg.seeds:
        progress = {"seed": seed, "stage": "setup", "last_checkpoint": None}
        try:
            curves = _run_seed(cfg, seed, out / f"seed_{seed}", train, val, workers, progress)
        except Exception as exc:
            if isinstance(exc, TrainingAborted) and exc.last_checkpoint is not None:
                progress["last_checkpoint"] = str(exc.last_checkpoint)
            manifest = dict(progress, error=type(exc).__name__, message=str(exc),
                            traceback=traceback.format_exc())
            err.write_text(json.dumps(manifest, indent=1) + "\n")
            raise RunError(f"seed {seed} failed during {progress['stage']}: {exc}") from exc
        seed_means.append(np.mean(curves, axis=0))
        LOG.info("seed %d done: final mean return %.3f", seed, seed_means[-1][-1])

    if len(seed_means) > 1:
        write_curve(out / "adaptation_curve.csv", seed_means, cfg.method, "seeds")
    else:
        (out / "adaptation_curve.csv").write_bytes((out / f"seed_{cfg.seeds[0]}" / "adaptation_curve.csv").read_bytes())
    return out


# ----------------------------------------------------------------------------
# metatest, export, verify


def run_metatest(ckpt, manifest, out_dir=None, n_iters: int = 25, episodes: int = 10, seed: int = 0) -> Path:
    """Meta-test a checkpoint on every task of a manifest (sparse rewards)."""
    ck = load_checkpoint(ckpt)
    if ck.method.method == "scratch":
        raise ValueError("scratch checkpoints have no meta-test procedure")
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"task manifest {manifest} does not exist")
    tasks = [t.with_mode("sparse") for t in envs.load_manifest(manifest)]
    out = Path(out_dir) if out_dir is not None else Path(ckpt) / "metatest"
    out.mkdir(parents=True, exist_ok=True)
    curves = []
    for j, t in enumerate(tasks):
        r = metatest_adapt(ck.policy, ck.method, ck.state.theta, t, n_iters, episodes, sub_seed(seed, "metatest", j),
                           ck.state.steps, bias=ck.state.bias)
        write_trace(out / f"{t.task_id}.csv", r)
        check_modes(out / f"{t.task_id}.csv", "sparse")
        curves.append(r.returns)
    write_curve(out / "adaptation_curve.csv", curves, ck.method.method, "tasks")
    return out


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path}")
    return path


def export_plotdata(run_dir, out_dir=None) -> Path:
    """Plot-ready CSVs from a run directory."""
    run = Path(run_dir)
    cfg = json.loads(_need(run / "config.json").read_text())
    out = Path(out_dir) if out_dir is not None else run / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    first = run / f"seed_{cfg['seeds'][0]}"

    rows = read_curve(_need(run / "adaptation_curve.csv"))
    write_rows(out / "adaptation_curves.csv", ["iteration", "mean", "stderr", "method"],
               [[r["iteration"], r["mean"], r["stderr"], r["method"]] for r in rows])

    traj = []
    for ep, rec in enumerate(load_trajectories(_need(first / "trajectories_prior.jsonl"))):
        for t, (x, y) in enumerate(rec["positions"]):
            traj.append([ep, t, repr(float(x)), repr(float(y))])
    write_rows(out / "trajectories.csv", ["episode", "t", "x", "y"], traj)

    with open(_need(first / "latents.csv"), newline="") as fh:
        lat = list(csv.reader(fh))
    header, body = lat[0], lat[1:]
    dz = (len(header) - 2) // 2
    write_rows(out / "ellipses.csv", ["task_id"] + header[2:] + ["tag"],
               [[r[0]] + r[2:2 + 2 * dz] + [r[1]] for r in body])

    disp = []
    for s in cfg["seeds"]:
        with open(_need(run / f"seed_{s}" / "dispersion.csv"), newline="") as fh:
            disp += list(csv.reader(fh))[1:]
    write_rows(out / "dispersion.csv", ["seed", "checkpoint", "kind", "dispersion"], disp)
    return out


def _artifact_files(root: Path) -> set[str]:
    return {str(p.relative_to(root)) for p in root.rglob("*")
            if p.is_file() and p.suffix in (".csv", ".jsonl") and "plotdata" not in p.parts}


def verify_run(run_dir, workers: int = 1) -> list[str]:
    """Re-run the stored config in a scratch directory; return the differing artifact files."""
    run = Path(run_dir)
    cfg = ExperimentConfig.from_dict(json.loads(_need(run / "config.json").read_text()))
    with tempfile.TemporaryDirectory() as tmp:
        fresh = run_experiment(cfg, workers, Path(tmp) / "rerun")
        a, b = _artifact_files(run), _artifact_files(fresh)
        diffs = sorted(a ^ b)
        diffs += sorted(f for f in a & b if not filecmp.cmp(run / f, fresh / f, shallow=False))
    return diffs


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maesn", description="Meta-RL experiments with latent exploration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="meta-train, meta-test and write artifacts")
    r.add_argument("config", help="experiment config JSON")
    m = sub.add_parser("metatest", help="meta-test a checkpoint on a task manifest")
    m.add_argument("checkpoint")
    m.add_argument("manifest")
    m.add_argument("--iters", type=int, default=25)
    m.add_argument("--episodes", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default=None)
    e = sub.add_parser("export-plotdata", help="write plot-ready CSVs from a run directory")
    e.add_argument("run_dir")
    e.add_argument("--out", default=None)
    v = sub.add_parser("verify", help="re-run a finished experiment and diff its artifacts")
    v.add_argument("run_dir")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        workers = workers_from_env()
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
            print(run_experiment(cfg, workers))
        elif args.command == "metatest":
            if args.iters < 0 or args.episodes < 2:
                raise ConfigError("--iters/--episodes", "need iters >= 0 and episodes >= 2")
            print(run_metatest(args.checkpoint, args.manifest, args.out, args.iters, args.episodes, args.seed))
        elif args.command == "export-plotdata":
            print(export_plotdata(args.run_dir, args.out))
        elif args.command == "verify":
            diffs = verify_run(args.run_dir, workers)
            if diffs:
                for d in diffs:
                    print(f"differs: {d}", file=sys.stderr)
                return EXIT_RUNTIME
            print("verified: all artifacts reproduced byte-for-byte")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any failure with the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
