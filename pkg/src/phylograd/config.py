"""Model configuration files.

A configuration is a JSON object such as::

    {"model": "codon-m0", "kappa": 2.0, "omega": 0.3,
     "geneticCode": "universal", "gamma": {"alpha": 0.5, "categories": 4}}

Supported ``model`` values: ``jc``, ``gtr``, ``codon-m0`` and ``generic``
(a raw generator under ``"matrix"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import (
    CodonModelParams,
    RateCategories,
    SubstitutionModel,
    build_codon_m0,
    build_gtr,
    discrete_gamma,
    from_generator,
    jukes_cantor,
)

MODELS = ("jc", "gtr", "codon-m0", "generic")


@dataclass(frozen=True)
class ModelSpec:
    model: SubstitutionModel
    alphabet: str
    genetic_code: str
    raw: dict


def _categories(cfg):
    gamma = cfg.get("gamma")
    if gamma is None:
        return RateCategories.single()
    if not isinstance(gamma, dict) or "alpha" not in gamma:
        raise ValidationError('"gamma" must be an object with "alpha" and "categories"')
    return discrete_gamma(float(gamma["alpha"]), int(gamma.get("categories", 4)))


def model_from_config(cfg: dict) -> ModelSpec:
    if not isinstance(cfg, dict):
        raise ValidationError("model configuration must be a JSON object")
    kind = cfg.get("model", "jc")
    if kind not in MODELS:
        raise ValidationError(f"unknown model {kind!r}; expected one of {MODELS}")
    code = cfg.get("geneticCode", "universal")
    cats = _categories(cfg)
    if kind == "jc":
        rm, alphabet = jukes_cantor(), "nuc"
    elif kind == "gtr":
        ex = cfg.get("exchangeabilities", [1.0] * 6)
        freqs = cfg.get("frequencies", [0.25] * 4)
        rm, alphabet = build_gtr(ex, freqs), "nuc"
    elif kind == "codon-m0":
        for key in ("kappa", "omega"):
            if key not in cfg:
                raise ValidationError(f'codon-m0 configuration needs "{key}"')
        params = CodonModelParams(float(cfg["kappa"]), float(cfg["omega"]),
                                  cfg.get("frequencies"), code)
        rm, alphabet = build_codon_m0(params), "codon"
    else:
        if "matrix" not in cfg:
            raise ValidationError('generic model needs "matrix"')
        rm = from_generator(np.array(cfg["matrix"], dtype=float), cfg.get("frequencies"))
        alphabet = "nuc" if rm.state_count == 4 else "generic"
    return ModelSpec(SubstitutionModel(rm, cats), alphabet, code, cfg)


def load_model_config(path=None) -> ModelSpec:
    """Read a configuration file; no path means Jukes-Cantor."""
    if path is None:
        return model_from_config({"model": "jc"})
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"model configuration {path}: {exc}") from None
    return model_from_config(cfg)
