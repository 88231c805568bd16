"""Experiment configuration files, overrides and run manifests.

Configs are YAML with a fixed schema; unknown keys are rejected so typos
fail fast. Every run directory receives the fully resolved config (all
defaults materialized), which together with the manifest makes any artifact
reproducible from its own directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import yaml

from .physics import LossWeights, VdpConfig, vdp_ivp
from .rootfind import SolverConfig
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "SEED_ENV_VAR",
    "load_config",
    "apply_overrides",
    "apply_env_seed",
    "resolved_yaml",
    "config_hash",
    "run_id",
    "to_train_config",
    "to_ivp",
    "RunManifest",
]

SEED_ENV_VAR = "PIDEQ_LAB_SEED"


class ConfigError(ValueError):
    """Malformed configuration or command usage."""


DEFAULTS: dict = {
    "ivp": {
        "mu": 1.0,
        "t0": 0.0,
        "y0": [0.0, 0.1],
        "horizon": 2.0,
    },
    "model": {
        "kind": "pideq",            # pideq | pinn
        "n_z": 80,
        "hidden": [20, 20, 20, 20],
    },
    "solver": {
        "method": "anderson",
        "tolerance": 1.0e-4,
        "max_iterations": 200,
        "anderson_memory": 5,
        "anderson_damping": 1.0,
    },
    "loss": {
        "lambda": 0.1,
        "kappa": 1.0,
    },
    "train": {
        "epochs": 50000,
        "collocation_n": 100,
        "seed": 0,
        "eval_every": 10,
        "lr": 1.0e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1.0e-8,
        "n_runs": 5,
    },
    "reference": {
        "n_steps": 20000,
        "eval_points": 1000,
    },
    "sweep": {
        "states": [80, 40, 20, 10, 5, 2],
        "kappa": [0.0, 0.1, 1.0, 10.0],
        "solver": ["simple", "anderson", "broyden"],
        "kappa_zero_runs": 1,       # kappa = 0 is run with fewer seeds
        "iae_threshold": 0.1,       # for the epochs-to-threshold summary column
    },
}


def _check_keys(user: dict, defaults: dict, path: str = "") -> None:
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            _check_keys(value, defaults[key], where)


def _merge(user: dict, defaults: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(defaults.get(key), dict):
            out[key] = _merge(value, defaults[key])
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Load a YAML config and materialize all defaults; None means defaults."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path, encoding="utf-8") as fh:
        user = yaml.safe_load(fh)
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _check_keys(user, DEFAULTS)
    return _merge(user, DEFAULTS)


def _locate_bare_key(key: str) -> str:
    hits = [section for section, body in DEFAULTS.items()
            if isinstance(body, dict) and key in body]
    if not hits:
        raise ConfigError(f"unknown override key '{key}'")
    if len(hits) > 1:
        raise ConfigError(
            f"override key '{key}' is ambiguous ({', '.join(f'{h}.{key}' for h in hits)}); use a dotted path"
        )
    return f"{hits[0]}.{key}"


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply KEY=VALUE overrides; values are parsed as YAML scalars.

    Bare keys are resolved to their unique section (``epochs`` means
    ``train.epochs``); dotted paths address nested keys directly.
    """
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like KEY=VALUE")
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = _locate_bare_key(key)
        parts = key.split(".")
        node = cfg
        schema = DEFAULTS
        for part in parts[:-1]:
            if part not in schema or not isinstance(schema[part], dict):
                raise ConfigError(f"unknown override section '{part}' in '{key}'")
            node = node.setdefault(part, {})
            schema = schema[part]
        leaf = parts[-1]
        if leaf not in schema:
            raise ConfigError(f"unknown override key '{key}'")
        if isinstance(schema[leaf], dict):
            raise ConfigError(f"override key '{key}' addresses a section, not a value")
        node[leaf] = yaml.safe_load(raw)
    return cfg


def apply_env_seed(cfg: dict) -> dict:
    """PIDEQ_LAB_SEED takes precedence over the configured seed."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return cfg
    cfg = copy.deepcopy(cfg)
    try:
        cfg["train"]["seed"] = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR}={raw!r} is not an integer") from exc
    return cfg


def resolved_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:8]


def run_id(cfg: dict, kind: str | None = None) -> str:
    kind = kind or cfg["model"]["kind"]
    return f"{kind}-{cfg['train']['seed']}-{config_hash(cfg)}"


def to_train_config(cfg: dict) -> TrainConfig:
    solver = SolverConfig(
        method=cfg["solver"]["method"],
        tolerance=float(cfg["solver"]["tolerance"]),
        max_iterations=int(cfg["solver"]["max_iterations"]),
        anderson_memory=int(cfg["solver"]["anderson_memory"]),
        anderson_damping=float(cfg["solver"]["anderson_damping"]),
    )
    weights = LossWeights(lam=float(cfg["loss"]["lambda"]), kappa=float(cfg["loss"]["kappa"]))
    try:
        return TrainConfig(
            model_kind=cfg["model"]["kind"],
            n_z=int(cfg["model"]["n_z"]),
            hidden=tuple(int(h) for h in cfg["model"]["hidden"]),
            solver=solver,
            weights=weights,
            epochs=int(cfg["train"]["epochs"]),
            collocation_n=int(cfg["train"]["collocation_n"]),
            seed=int(cfg["train"]["seed"]),
            eval_every=int(cfg["train"]["eval_every"]),
            lr=float(cfg["train"]["lr"]),
            beta1=float(cfg["train"]["beta1"]),
            beta2=float(cfg["train"]["beta2"]),
            epsilon=float(cfg["train"]["epsilon"]),
            reference_steps=int(cfg["reference"]["n_steps"]),
            eval_points=int(cfg["reference"]["eval_points"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def to_ivp(cfg: dict):
    ivp_cfg = cfg["ivp"]
    return vdp_ivp(
        VdpConfig(mu=float(ivp_cfg["mu"])),
        t0=float(ivp_cfg["t0"]),
        y0=[float(v) for v in ivp_cfg["y0"]],
        horizon=float(ivp_cfg["horizon"]),
    )


@dataclass
class RunManifest:
    run_id: str
    config: dict
    version: str
    status: str = "running"
    started_at: str = ""
    finished_at: str = ""
    artifacts: list[str] = field(default_factory=list)
    error: str = ""

    def write(self, path) -> None:
        body = {
            "run_id": self.run_id,
            "status": self.status,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "version": self.version,
            "artifacts": sorted(self.artifacts),
            "error": self.error,
            "config": self.config,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def now() -> str:
        return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def start_manifest(run_id_: str, cfg: dict, version: str, path) -> RunManifest:
    manifest = RunManifest(run_id=run_id_, config=cfg, version=version,
                           started_at=RunManifest.now())
    manifest.write(path)
    return manifest


def finalize_manifest(manifest: RunManifest, path, status: str, artifacts, error: str = "") -> None:
    manifest.status = status
    manifest.finished_at = RunManifest.now()
    manifest.artifacts = [str(a) for a in artifacts]
    manifest.error = error
    manifest.write(path)
