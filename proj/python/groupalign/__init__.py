"""Group-preference reward modeling and preference-aligned diffusion.

The native core exposes the full experiment pipeline (`run`), the ranking
metrics, the sequential-choice ranking probability, and the synthetic world.
Configuration is one flat dict; unknown keys are rejected.
"""

import json

from groupalign._core import (
    ConfigError,
    DegenerateInputError,
    MissingArtifactError,
    NumericalError,
    World,
    checkpoint_names,
    config_defaults,
    gauc_metric,
    map_metric,
    pl_probability,
    read_gen_metrics,
    read_rm_metrics,
    run_command,
    run_id_for,
    world_defaults,
)

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "MissingArtifactError",
    "NumericalError",
    "World",
    "checkpoint_names",
    "config_defaults",
    "default_config",
    "gauc_metric",
    "map_metric",
    "pl_probability",
    "read_gen_metrics",
    "read_rm_metrics",
    "run",
    "run_command",
    "run_id_for",
    "world_defaults",
]


def default_config():
    """The default experiment configuration as a dict."""
    return json.loads(config_defaults())


def run(command, config=None, **overrides):
    """Run one experiment command and return its artifact paths.

    `config` is a flat dict of overrides on the defaults; keyword arguments
    override both. Commands: gen-data, pretrain-backbone, train-rm, eval-rm,
    train-diffusion, sample, eval-gen, sweep.
    """
    merged = dict(config or {})
    merged.update(overrides)
    return run_command(command, json.dumps(merged))
