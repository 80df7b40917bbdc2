"""Assemble a full experiment (model, actor, initial law, critic basis, schedule) from a config.

Config layout (TOML shown; JSON with the same nesting is accepted)::

    seed = 0

    [model]            # kind = "lqr-systemic-risk" | "crowd-aversion" plus model fields
    [policy]           # features = {kind = ...}, covariance or action_std, weights
    [initial]          # state_mean, state_cov, pop_mean, pop_cov, particles
    [critic]           # basis = "systemic-risk" | "rbf-product" | ...
    [schedule]         # TrainingSchedule fields
    [evaluation]       # trajectories, seed for value estimates
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actor import TrainingSchedule
from .config import as_matrix, as_vector, read_config
from .cylindrical import CylindricalBasis, basis_from_dict
from .exceptions import ConfigError, MFACError
from .models import LQRModel, MeanFieldModel, model_from_dict
from .policy import AffineFeatureMap, GaussianPolicy
from .simulate import InitialCondition

__all__ = ["Experiment", "load_experiment", "experiment_from_dict", "policy_from_config"]


@dataclass(eq=False)
class Experiment:
    model: MeanFieldModel
    policy: GaussianPolicy
    initial: InitialCondition
    basis: CylindricalBasis
    schedule: TrainingSchedule
    seed: int
    evaluation: dict
    raw: dict

    @property
    def is_lqr(self) -> bool:
        return isinstance(self.model, LQRModel)


def _section(cfg, name):
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"missing [{name}] table")
    return sec


def policy_from_config(data: dict, model: MeanFieldModel) -> GaussianPolicy:
    feat = data.get("features", {"kind": "affine", "dim": model.state_dim})
    if isinstance(feat, str):
        feat = {"kind": feat, "dim": model.state_dim}
    try:
        features = AffineFeatureMap.from_dict(feat)
    except (KeyError, MFACError) as exc:
        raise ConfigError(f"policy.features: {exc}") from exc
    if features.state_dim != model.state_dim:
        raise ConfigError(
            f"policy features expect a {features.state_dim}-dimensional state, model has {model.state_dim}"
        )
    m = model.action_dim
    if "covariance" in data:
        cov = as_matrix(data["covariance"], (m, m), "policy.covariance")
    elif "action_std" in data:
        cov = float(data["action_std"]) ** 2 * np.eye(m)
    else:
        raise ConfigError("policy: need covariance or action_std")
    if "weights" in data:
        w = as_matrix(data["weights"], (m, features.dim), "policy.weights")
    else:
        w = np.zeros((m, features.dim))
    try:
        return GaussianPolicy(w, cov, features)
    except MFACError as exc:
        raise ConfigError(f"policy: {exc}") from exc


def _initial_from_config(data: dict, d: int) -> InitialCondition:
    try:
        sm = as_vector(data["state_mean"], d, "initial.state_mean")
        pm = as_vector(data.get("pop_mean", sm), d, "initial.pop_mean")
    except KeyError:
        raise ConfigError("initial: missing state_mean") from None

    def cov(key):
        if key in data:
            return as_matrix(data[key], (d, d), f"initial.{key}")
        std = data.get(key.replace("cov", "std"))
        return None if std is None else float(std) ** 2 * np.eye(d)

    sc = cov("state_cov")
    pc = cov("pop_cov")
    n = data.get("particles")
    try:
        return InitialCondition(sm, np.zeros((d, d)) if sc is None else sc, pm, pc,
                                None if n is None else int(n))
    except MFACError as exc:
        raise ConfigError(f"initial: {exc}") from exc


def experiment_from_dict(cfg: dict) -> Experiment:
    try:
        model = model_from_dict(_section(cfg, "model"))
    except ConfigError:
        raise
    except MFACError as exc:
        raise ConfigError(f"model: {exc}") from exc
    policy = policy_from_config(_section(cfg, "policy"), model)
    initial = _initial_from_config(_section(cfg, "initial"), model.state_dim)
    try:
        basis = basis_from_dict(_section(cfg, "critic"))
    except ConfigError:
        raise
    except (MFACError, KeyError, TypeError) as exc:
        raise ConfigError(f"critic: {exc}") from exc
    if basis.dim != model.state_dim:
        raise ConfigError(f"critic basis is {basis.dim}-dimensional, model is {model.state_dim}-dimensional")
    try:
        schedule = TrainingSchedule.from_dict(dict(_section(cfg, "schedule")))
    except (MFACError, TypeError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return Experiment(model, policy, initial, basis, schedule, seed, dict(cfg.get("evaluation", {})), cfg)


def load_experiment(path) -> Experiment:
    return experiment_from_dict(read_config(path))
