"""Federated low-rank adaptation of a toy diffusion model across edge clients."""

import json
import os
from pathlib import Path

from ._edgefl import (
    ConfigError,
    EdgeflError,
    ProtocolError,
    frechet_2d,
    neutrality_score,
    svd,
)
from . import _edgefl

__all__ = [
    "ConfigError",
    "EdgeflError",
    "ProtocolError",
    "frechet_2d",
    "load_config",
    "neutrality_score",
    "report",
    "run",
    "svd",
    "sweep",
    "verify",
]


def _config_text(config=None, *, seed=None, rounds=None, out=None):
    if config is None:
        data = {}
    elif isinstance(config, dict):
        data = dict(config)
    elif isinstance(config, (str, os.PathLike)) and Path(config).is_file():
        data = json.loads(Path(config).read_text())
    else:
        data = json.loads(config)
    if seed is not None:
        data["seed"] = int(seed)
    if rounds is not None:
        data["rounds"] = int(rounds)
    if out is not None:
        data["output_dir"] = os.fspath(out)
    return json.dumps(data)


def load_config(config=None, **overrides):
    """Full validated configuration with every default filled in."""
    return json.loads(_edgefl.normalize_config(_config_text(config, **overrides)))


def run(config=None, *, seed=None, rounds=None, out=None):
    """Run one scenario, write its artifacts and return the parsed report."""
    return json.loads(_edgefl.run(_config_text(config, seed=seed, rounds=rounds, out=out)))


def sweep(config=None, seeds=(0, 1, 2), *, rounds=None, out=None):
    """Run the scenario once per seed and return summary.csv as text."""
    return _edgefl.sweep(_config_text(config, rounds=rounds, out=out), [int(s) for s in seeds])


def report(run_dir):
    return _edgefl.report(os.fspath(run_dir))


def verify(only=(), seeds=(0, 1, 2), work_dir="verify_runs"):
    """Run acceptance checks; returns one dict per criterion."""
    return _edgefl.verify(list(only), [int(s) for s in seeds], os.fspath(work_dir))
