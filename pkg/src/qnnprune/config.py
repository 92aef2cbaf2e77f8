"""Flat key-value config files.

One ``key = value`` pair per line; ``#`` starts a comment.  Keys mirror the
run configuration dataclasses so the same file drives training and pruning.
Unknown keys are rejected to catch typos early.
"""

from __future__ import annotations

from pathlib import Path

from qnnprune.bayesopt import BoConfig, GpConfig
from qnnprune.errors import QnnError
from qnnprune.pipeline import PruneRunConfig
from qnnprune.train import TrainConfig

KNOWN_KEYS = {
    # architecture
    "arch", "scheme", "channels", "classes", "hidden",
    # data normalization
    "norm_mean", "norm_std",
    # training
    "lr0", "lr_decay_factor", "decay_every", "epochs", "momentum",
    "batch_size", "seed",
    # pruning pipeline
    "direction", "metric", "finetune_trigger_pct", "finetune_epochs",
    "final_finetune_epochs", "calib_size", "speedup_passes",
    # ratio search
    "alpha1", "kappa", "n_init", "n_explore", "bound_lo", "bound_hi",
    "grid_points", "length_scale", "noise_var",
}


def parse_config(path) -> dict:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise QnnError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise QnnError(f"{path}:{lineno}: unknown key '{key}'")
        values[key] = value.strip()
    return values


def _get(values, key, cast, default):
    if key not in values:
        return default
    try:
        return cast(values[key])
    except ValueError as e:
        raise QnnError(f"config key '{key}': {e}") from None


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        lr0=_get(values, "lr0", float, 0.005),
        lr_decay_factor=_get(values, "lr_decay_factor", float, 10.0),
        decay_every=_get(values, "decay_every", int, 10),
        epochs=_get(values, "epochs", int, 10),
        momentum=_get(values, "momentum", float, 0.9),
        batch_size=_get(values, "batch_size", int, 100),
        seed=_get(values, "seed", int, 0),
    )


def bo_config(values: dict) -> BoConfig:
    return BoConfig(
        bounds=(_get(values, "bound_lo", float, 0.0),
                _get(values, "bound_hi", float, 0.40)),
        kappa=_get(values, "kappa", float, 2.5),
        n_init=_get(values, "n_init", int, 5),
        n_explore=_get(values, "n_explore", int, 5),
        alpha1=_get(values, "alpha1", float, 1.0),
        grid_points=_get(values, "grid_points", int, 401),
        gp=GpConfig(
            length_scale=_get(values, "length_scale", float, 0.2),
            noise_var=_get(values, "noise_var", float, 1e-6),
        ),
    )


def prune_run_config(values: dict) -> PruneRunConfig:
    return PruneRunConfig(
        direction=_get(values, "direction", str, "up"),
        metric=_get(values, "metric", str, "angle"),
        finetune_trigger_pct=_get(values, "finetune_trigger_pct", float, 5.0),
        finetune_epochs=_get(values, "finetune_epochs", int, 5),
        final_finetune_epochs=_get(values, "final_finetune_epochs", int, 10),
        calib_size=_get(values, "calib_size", int, 500),
        speedup_passes=_get(values, "speedup_passes", int, 10),
        seed=_get(values, "seed", int, 0),
        bo=bo_config(values),
        train=train_config(values),
    )


def norm_constants(values: dict) -> tuple:
    mean = _get(values, "norm_mean", _floats, (0.5, 0.5, 0.5))
    std = _get(values, "norm_std", _floats, (0.5, 0.5, 0.5))
    return mean, std


def build_network(values: dict):
    """Instantiate the architecture a config names."""
    from qnnprune import zoo

    arch = values.get("arch", "desk4")
    scheme = values.get("scheme", "bnn")
    seed = _get(values, "seed", int, 0)
    classes = _get(values, "classes", int, 10)
    if arch == "desk4":
        channels = _get(values, "channels", _ints, (12, 24, 32, 48))
        return zoo.desk4(scheme, channels=channels, classes=classes, seed=seed)
    if arch == "desk-residual":
        return zoo.desk_residual(scheme, classes=classes, seed=seed)
    if arch == "resnet18":
        return zoo.resnet18_imagenet(scheme)
    if arch == "mlp":
        hidden = _get(values, "hidden", int, 32)
        channels = _get(values, "channels", _ints, (2,))
        return zoo.mlp(channels[0], hidden, classes, scheme, seed=seed)
    raise QnnError(f"unknown arch '{arch}'")
