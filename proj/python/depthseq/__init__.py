"""Landmark localization along the slice axis of head CT volumes.

Thin wrappers over the compiled ``_core`` module. Configs and reports cross
the boundary as JSON and come back here as dicts.
"""

import json

from . import _core
from ._core import (
    DivergenceError,
    Model,
    ValidationError,
    Volume,
    assign_segments,
    dice,
    generate_phantom,
    infer,
    load_checkpoint,
    load_volume,
    quadratic_weighted_kappa,
    save_checkpoint,
    save_volume,
    separate_hemispheres,
    write_cohort,
)

__all__ = [
    "DivergenceError",
    "Model",
    "ValidationError",
    "Volume",
    "assign_segments",
    "dice",
    "estimate_flops",
    "evaluate",
    "generate_phantom",
    "gradcheck",
    "infer",
    "init_model",
    "load_checkpoint",
    "load_volume",
    "make_folds",
    "model_config",
    "quadratic_weighted_kappa",
    "save_checkpoint",
    "save_volume",
    "separate_hemispheres",
    "train",
    "write_cohort",
]


def _dump(config):
    return json.dumps(config or {})


def estimate_flops(config=None, dims=(32, 32, 24)):
    return json.loads(_core.estimate_flops(_dump(config), list(dims)))


def init_model(config=None, seed=0):
    return _core.init_model(_dump(config), seed)


def model_config(model):
    return json.loads(model.config_json)


def train(config, manifest, checkpoint=""):
    """Train one fold of ``manifest``. Returns (report dict, best Model)."""
    report, model = _core.train(_dump(config), str(manifest), str(checkpoint))
    return json.loads(report), model


def evaluate(model, manifest, fold=0, k=5, fold_seed=0):
    return json.loads(_core.evaluate(model, str(manifest), fold, k, fold_seed))


def make_folds(ids, k=5, seed=0):
    return json.loads(_core.make_folds(list(ids), k, seed))


def gradcheck(seed=0, shapes=10, eps=1e-3):
    return json.loads(_core.gradcheck(seed, shapes, eps))
