"""Command-line runner: ``mfac riccati | train | evaluate``.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
4 simulation overflow during training (the partial log is still written).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .actor import train
from .config import content_hash, read_config
from .exceptions import (
    ConfigError,
    MFACError,
    ParameterError,
    RiccatiConvergenceError,
    RiccatiSolvabilityError,
    SimulationOverflowError,
    TrainingError,
)
from .experiment import experiment_from_dict
from .models import LQRModel, check_lqr_assumptions
from .policy import GaussianPolicy
from .riccati import (
    discount_diagnostics,
    optimal_policy,
    reference_targets,
    riccati_residuals,
    solve_riccati,
    verify_hurwitz,
)
from .simulate import estimate_value

log = logging.getLogger("mfac")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_OVERFLOW = 4


class _Exit(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")
    os.replace(tmp, path)


def resolve_threads(flag: int | None) -> int:
    """``MFAC_THREADS`` wins over ``--threads``; the default is every available core."""
    env = os.environ.get("MFAC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise _Exit(EXIT_CONFIG, f"MFAC_THREADS must be an integer, got {env!r}") from None
    elif flag is not None:
        n = flag
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise _Exit(EXIT_CONFIG, "thread count must be positive")
    return n


def _load(path):
    try:
        cfg = read_config(path)
        return cfg, experiment_from_dict(cfg)
    except ConfigError as exc:
        raise _Exit(EXIT_CONFIG, str(exc)) from exc


def _growth_constant(sol, spec: LQRModel) -> float:
    """Lipschitz constant of the optimal closed-loop coefficients in ``(x, mean)``."""
    Sinv = np.linalg.inv(sol.S)
    a_x = spec.A - spec.B @ Sinv @ sol.U
    a_m = spec.Abar - spec.B @ Sinv @ (sol.W - sol.U)
    s_x = spec.D - spec.F @ Sinv @ sol.U
    s_m = spec.Dbar - spec.F @ Sinv @ (sol.W - sol.U)
    return float(max(np.linalg.norm(np.hstack([a_x, a_m]), 2), np.linalg.norm(np.hstack([s_x, s_m]), 2)))


def riccati_report(spec: LQRModel) -> dict:
    """Solve the Riccati system and collect everything ``mfac riccati`` prints."""
    diag = check_lqr_assumptions(spec)
    if not diag.h1:
        raise _Exit(EXIT_SOLVER, "definiteness check failed: " + "; ".join(diag.messages))
    try:
        sol = solve_riccati(spec, diag)
    except (RiccatiSolvabilityError, RiccatiConvergenceError) as exc:
        raise _Exit(EXIT_SOLVER, f"Riccati solver failed: {exc}") from exc
    ref = reference_targets(sol, spec)
    hur = verify_hurwitz(sol, spec)
    k_pi = _growth_constant(sol, spec)
    beta0, beta_var = discount_diagnostics(k_pi, spec.state_dim)
    out = {
        "solution": sol.to_dict(),
        "residuals": riccati_residuals(sol, spec),
        "omega_star": ref["omega"],
        "intercept_star": ref["intercept"],
        "hurwitz": {
            "representative_abscissa": hur.representative_abscissa,
            "mean_abscissa": hur.mean_abscissa,
            "passed": hur.passed,
        },
        "discount_diagnostics": {
            "growth_constant": k_pi,
            "beta0": beta0,
            "beta_var": beta_var,
            "discount": spec.discount,
        },
        "assumptions": {
            "h1": diag.h1,
            "h2": diag.h2,
            "messages": diag.messages,
        },
    }
    if "theta" in ref:
        out["theta_star"] = ref["theta"]
    return out, sol


def cmd_riccati(args) -> int:
    _, exp = _load(args.config)
    if not exp.is_lqr:
        raise _Exit(EXIT_CONFIG, f"model {exp.model.name!r} is not a mean-field LQR")
    report, sol = riccati_report(exp.model)
    if args.policy_out:
        optimal_policy(sol, exp.model).to_json(args.policy_out)
    json.dump(report, sys.stdout, indent=2, default=_json_default)
    sys.stdout.write("\n")
    return EXIT_OK


def _reference_columns(exp, report):
    """Reference actor/critic columns when they are expressed in the trained parametrization."""
    if report is None:
        return None
    omega = np.asarray(report["omega_star"]).ravel()
    theta = report.get("theta_star")
    if omega.size != exp.policy.weights.size or theta is None or len(theta) != len(exp.basis):
        return None
    if np.any(np.asarray(report["intercept_star"]) != 0):
        return None
    return {"omega": omega, "theta": np.asarray(theta)}


def cmd_train(args) -> int:
    started = _now()
    cfg, exp = _load(args.config)
    threads = resolve_threads(args.threads)
    schedule = exp.schedule
    overrides = {}
    if args.occupancy:
        schedule.occupancy = overrides["occupancy"] = args.occupancy
    if args.stepsize is not None:
        if not args.stepsize > 0:
            raise _Exit(EXIT_CONFIG, "--stepsize must be positive")
        schedule.stepsize = overrides["stepsize"] = args.stepsize
    if args.iterations is not None:
        if args.iterations < 0:
            raise _Exit(EXIT_CONFIG, "--iterations must be nonnegative")
        schedule.iterations = overrides["iterations"] = args.iterations
    seed = exp.seed if args.seed is None else args.seed
    if seed < 0:
        raise _Exit(EXIT_CONFIG, "--seed must be nonnegative")

    report = None
    if exp.is_lqr:
        report, _ = riccati_report(exp.model)
    reference = _reference_columns(exp, report)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    critic_dir = out / "critics"
    if args.dump_critic:
        critic_dir.mkdir(exist_ok=True)

    def on_iteration(rec, critic):
        if args.dump_critic:
            path = critic_dir / f"critic_{rec.iteration:05d}.json"
            _write_json(path, critic.to_dict())
            outputs.append(str(path.relative_to(out)))
        if rec.iteration % max(1, schedule.iterations // 20) == 0:
            log.info("iteration %d  J_hat %.6g  |grad| %.3g", rec.iteration, rec.J_hat, rec.grad_norm)

    status, code, error = "completed", EXIT_OK, None
    result = None
    try:
        result = train(exp.model, exp.policy, exp.basis, schedule, exp.initial, seed,
                       callback=on_iteration, threads=threads)
        train_log = result.log
    except TrainingError as exc:
        train_log = exc.log
        error = str(exc)
        if isinstance(exc.__cause__, SimulationOverflowError):
            status, code = "overflow", EXIT_OVERFLOW
        else:
            status, code = "solver-failure", EXIT_SOLVER

    log_path = out / "training_log.csv"
    train_log.to_csv(log_path, reference, exp.policy.weights.size, len(exp.basis))
    train_log.timing_to_csv(out / "timing.csv")
    outputs += ["training_log.csv", "timing.csv"]
    if result is not None:
        result.policy.to_json(out / "final_policy.json")
        outputs.append("final_policy.json")
        if result.critic is not None:
            _write_json(out / "final_critic.json", result.critic.to_dict())
            outputs.append("final_critic.json")

    manifest = {
        "command": "train",
        "package_version": __version__,
        "config_path": str(Path(args.config)),
        "config_hash": content_hash(args.config),
        "config": cfg,
        "overrides": overrides,
        "seed": seed,
        "threads": threads,
        "started": started,
        "finished": _now(),
        "status": status,
        "iterations_completed": len(train_log),
        "outputs": sorted(outputs) + ["manifest.json"],
    }
    if error:
        manifest["error"] = error
    if report is not None:
        manifest["riccati"] = report
    _write_json(out / "manifest.json", manifest)
    if error:
        raise _Exit(code, error)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, exp = _load(args.config)
    try:
        data = json.loads(Path(args.policy).read_text())
        policy = GaussianPolicy.from_dict(data)
    except (OSError, ValueError, KeyError, MFACError) as exc:
        raise _Exit(EXIT_CONFIG, f"cannot read policy {args.policy}: {exc}") from exc
    if policy.weights.shape[0] != exp.model.action_dim or policy.features.state_dim != exp.model.state_dim:
        raise _Exit(
            EXIT_CONFIG,
            f"policy maps {policy.features.state_dim}-dimensional states to "
            f"{policy.weights.shape[0]}-dimensional actions; the model needs "
            f"{exp.model.state_dim} -> {exp.model.action_dim}",
        )
    n_traj = args.trajectories or int(exp.evaluation.get("trajectories", exp.schedule.trajectories))
    seed = exp.evaluation.get("seed", exp.seed) if args.seed is None else args.seed
    threads = resolve_threads(args.threads)
    try:
        est = estimate_value(exp.model, policy, exp.initial, exp.schedule.horizon, exp.schedule.dt,
                             n_traj, seed, threads=threads)
    except SimulationOverflowError as exc:
        raise _Exit(EXIT_OVERFLOW, str(exc)) from exc
    except ParameterError as exc:
        raise _Exit(EXIT_CONFIG, str(exc)) from exc
    json.dump({"J_hat": est.value, "std_err": est.std_err, "trajectories": n_traj, "seed": seed},
              sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfac", description="Mean-field actor-critic experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("riccati", help="solve the LQR Riccati system and print the reference solution")
    p.add_argument("config")
    p.add_argument("--policy-out", help="also write the optimal policy as JSON")
    p.set_defaults(func=cmd_riccati)

    p = sub.add_parser("train", help="run the actor-critic loop")
    p.add_argument("config")
    p.add_argument("--occupancy", choices=["discounted", "uniform"])
    p.add_argument("--dump-critic", action="store_true", help="write every iteration's critic")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run")
    p.add_argument("--stepsize", type=float, help="override the configured stepsize")
    p.add_argument("--iterations", type=int, help="override the configured iteration count")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Monte-Carlo value of a stored policy")
    p.add_argument("policy")
    p.add_argument("config")
    p.add_argument("--trajectories", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _Exit as exc:
        print(f"mfac: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"mfac: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
