"""Command-line experiment runner.

``safepdp run --config FILE [--seed N] [--out DIR]`` executes one pipeline and
writes its artifacts, ``safepdp validate --config FILE`` only parses the
config, and ``safepdp list-envs`` prints the available environments.

Exit codes: 0 success, 1 invalid config under ``validate``, 2 config error
under ``run``, 3 solver error, 4 safety breach.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import apps, experiments
from .envs import TEMPLATES, EnvConfig, make_demos, make_env, param_names
from .errors import ConfigError, NonFiniteError, SafetyError, SolverError
from .ocp import rollout
from .outer import OuterOptions, RunLog

log = logging.getLogger("safepdp")

PIPELINES = ("policy_opt", "plan", "learn_mpc", "gradcheck", "gamma_sweep", "timing")
RUNLOG_COLUMNS = ("iter", "W", "loss", "max_R", "max_g", "grad_norm")

# per-pipeline settings and their defaults
APP_DEFAULTS = {
    "policy_opt": {"init_scale": 0.1, "imitate_iters": 500, "imitate_lr": 0.1, "constrained": True},
    "plan": {"degree": 10},
    "learn_mpc": {"n_demos": 2, "init_spread": 0.5},
    "gradcheck": {"gamma": 1e-2, "h": 1e-5, "strategy": "B", "constrained_gamma": 1e-8},
    "gamma_sweep": {"gammas": [1.0, 1e-1, 1e-2, 1e-3], "gamma_ref": 1e-6, "with_grad": True},
    "timing": {"horizons": [50, 100, 200, 400], "gamma": 1e-2, "repeats": 20},
}


@dataclass
class RunConfig:
    pipeline: str
    env: EnvConfig
    outer: OuterOptions = field(default_factory=OuterOptions)
    output_dir: str = "runs/out"
    seed: int = 0
    app: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        extra = set(self.app) - set(APP_DEFAULTS[self.pipeline])
        if extra:
            raise ConfigError(f"unknown settings for {self.pipeline}: {sorted(extra)}")
        self.app = {**APP_DEFAULTS[self.pipeline], **self.app}

    def to_dict(self) -> dict:
        outer = asdict(self.outer)
        if outer["continuation"] is not None:
            outer["continuation"] = [list(map(float, p)) for p in outer["continuation"]]
        return {"pipeline": self.pipeline, "env": self.env.to_dict(), "outer": outer,
                "output_dir": self.output_dir, "seed": self.seed, "app": dict(self.app)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("pipeline", "env"):
            if key not in d:
                raise ConfigError(f"config needs {key!r}")
        try:
            env = EnvConfig.from_dict(d["env"])
            outer_d = dict(d.get("outer", {}))
            bad = set(outer_d) - {f.name for f in fields(OuterOptions)}
            if bad:
                raise ConfigError(f"unknown outer options: {sorted(bad)}")
            outer = OuterOptions(**outer_d)
            return cls(d["pipeline"], env, outer, d.get("output_dir", "runs/out"), d.get("seed", 0),
                       dict(d.get("app", {})))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e
    return RunConfig.from_dict(data)


def shipped_configs() -> list:
    """Paths of the configs bundled with the package."""
    root = resources.files("safepdp") / "configs"
    return sorted(str(p) for p in root.iterdir() if p.name.endswith(".json"))


# -- artifact writers --------------------------------------------------------

def _num(x) -> str:
    # repr is the shortest round-trip form, so equal runs give equal bytes
    return repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))


def write_runlog(path: Path, logbook: RunLog):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in logbook.records:
            w.writerow([_num(r[k]) for k in RUNLOG_COLUMNS])


def write_trajectories(path: Path, logbook: RunLog):
    first = next(iter(logbook.trajectories.values()))[0]
    n, m = first.states.shape[1], first.controls.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "episode", "t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)])
        for it in sorted(logbook.trajectories):
            for ep, tr in enumerate(logbook.trajectories[it]):
                for t in range(tr.T + 1):
                    u = [_num(v) for v in tr.controls[t]] if t < tr.T else [""] * m
                    w.writerow([it, ep, t] + [_num(v) for v in tr.states[t]] + u)


def write_table(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else repr(x)


# -- pipelines ---------------------------------------------------------------

def _run_app(cfg: RunConfig) -> RunLog:
    env, outer, app = cfg.env, cfg.outer, cfg.app
    if cfg.pipeline == "plan":
        ctrl = apps.PolyControl(env.T, TEMPLATES[env.env_id].m, int(app["degree"]))
        return apps.plan(env, ctrl, outer)
    if cfg.pipeline == "policy_opt":
        tpl = TEMPLATES[env.env_id]
        spec = make_env(env)
        reference = rollout(spec, env.theta_true(), np.zeros((env.T, tpl.m)))
        policy = apps.NeuralPolicy.random(tpl.n, tpl.m, cfg.seed, app["init_scale"])
        policy = apps.imitate_init(env, policy, reference, int(app["imitate_iters"]), float(app["imitate_lr"]))
        return apps.policy_opt(env, policy, outer, constrained=bool(app["constrained"]))
    demos = apps.DemoSet(make_demos(env, int(app["n_demos"]), cfg.seed))
    return apps.learn_mpc(env, demos, strategy=outer.gradient_strategy, opts=outer,
                          init_spread=float(app["init_spread"]))


def execute(cfg: RunConfig, out: Path) -> dict:
    """Run the configured pipeline, write its artifacts into ``out`` and return the summary."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    app = cfg.app
    summary = {"pipeline": cfg.pipeline, "env": cfg.env.env_id, "seed": cfg.seed}
    if cfg.pipeline in ("plan", "policy_opt", "learn_mpc"):
        logbook = _run_app(cfg)
        write_runlog(out / "runlog.csv", logbook)
        write_trajectories(out / "trajectories.csv", logbook)
        summary.update(theta=[float(v) for v in logbook.theta], converged=list(logbook.converged),
                       rung_loss=[float(v) for v in logbook.rung_loss], iterations=len(logbook.records),
                       final_loss=float(logbook.records[-1]["loss"]), wall_clock=logbook.wall_clock)
    elif cfg.pipeline == "gradcheck":
        res = experiments.gradcheck(cfg.env, float(app["gamma"]), float(app["h"]), app["strategy"],
                                    constrained_gamma=float(app["constrained_gamma"]))
        write_table(out / "gradcheck.csv", ["r", "rel_error", "seconds"], [[res.r, res.rel_error, res.seconds]])
        summary.update(rel_error=res.rel_error, r=res.r, wall_clock=res.seconds)
    elif cfg.pipeline == "gamma_sweep":
        rows = experiments.gamma_sweep(cfg.env, app["gammas"], float(app["gamma_ref"]), bool(app["with_grad"]))
        write_table(out / "gamma_sweep.csv", ["gamma", "rel_traj_error", "rel_grad_error", "solve_time"],
                    [[r.gamma, r.rel_traj_error, r.rel_grad_error, r.solve_time] for r in rows])
        errs = [r.rel_traj_error for r in rows]
        summary.update(rel_traj_error=errs, monotone=bool(all(b < a for a, b in zip(errs, errs[1:]))))
    else:
        res = experiments.timing(cfg.env, app["horizons"], float(app["gamma"]), int(app["repeats"]))
        write_table(out / "timing.csv", ["T", "backward_time"], list(zip(res.horizons, res.times)))
        summary.update(slope=_json_float(res.slope))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- entry point -------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safepdp", description="Safe differentiable optimal control experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute a pipeline from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    v = sub.add_parser("validate", help="parse a config without running it")
    v.add_argument("--config", required=True)
    sub.add_parser("list-envs", help="print the available environments")
    return p


def _setup_logging():
    level = os.environ.get("SAFEPDP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _fail(msg: str, code: int) -> int:
    print(f"safepdp: {msg}", file=sys.stderr)
    return code


def main(argv: Optional[list] = None) -> int:
    args = _parser().parse_args(argv)
    _setup_logging()
    if args.command == "list-envs":
        for env_id, tpl in TEMPLATES.items():
            print(f"{env_id}\tn={tpl.n}\tm={tpl.m}\tparams={','.join(param_names(env_id))}")
        return 0
    if args.command == "validate":
        try:
            load_config(args.config)
        except ConfigError as e:
            return _fail(f"invalid config: {e}", 1)
        return 0
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = int(args.seed)
        cfg.outer.seed = cfg.seed
        out = Path(args.out if args.out else cfg.output_dir)
        execute(cfg, out)
    except ConfigError as e:
        return _fail(f"config error: {e}", 2)
    except SafetyError as e:
        return _fail(f"safety breach: {e}", 4)
    except (SolverError, NonFiniteError) as e:
        return _fail(f"solver error: {e}", 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
