"""JSON model files, validated against `MODEL_SCHEMA` on load."""
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import jsonschema

from pmc_volatility.data import NormalizationParams
from pmc_volatility.errors import ConfigError, InvalidInputError
from pmc_volatility.models.base import (
    FNN_HIDDEN_LAYERS,
    ModelKind,
    SequenceModel,
    base_model_from_dict,
)
from pmc_volatility.models.hmc import HmcModel
from pmc_volatility.models.networks import DeltaWeightNet, TransitionWeightNet
from pmc_volatility.models.pmc import PmcModel

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_VECTOR = {"type": "array", "items": {"type": "number"}}
_LAYER = {
    "type": "object",
    "required": ["weights", "bias"],
    "properties": {"weights": _MATRIX, "bias": _VECTOR},
}
_WEIGHT_NET = {
    "type": "object",
    "required": ["n_states", "obs_dim", "hidden", "output"],
    "properties": {
        "n_states": {"type": "integer", "minimum": 1},
        "obs_dim": {"type": "integer", "minimum": 1},
        "hidden": _LAYER,
        "output": _LAYER,
    },
}
_GARCH = {
    "type": "object",
    "required": ["kind", "params"],
    "properties": {
        "kind": {"const": "garch"},
        "params": {
            "type": "object",
            "required": ["omega", "alpha", "beta"],
            "properties": {
                "omega": {"type": "number"},
                "alpha": {"type": "number"},
                "beta": {"type": "number"},
            },
        },
    },
}
_FNN = {
    "type": "object",
    "required": ["kind", "params"],
    "properties": {
        "kind": {"enum": [kind.value for kind in FNN_HIDDEN_LAYERS]},
        "params": {
            "type": "object",
            "required": ["layers"],
            "properties": {"layers": {"type": "array", "items": _LAYER, "minItems": 2}},
        },
    },
}
_BASE = {"oneOf": [_GARCH, _FNN]}
_PMC = {
    "type": "object",
    "required": ["kind", "n_states", "experts", "weight_net", "initial_logits"],
    "properties": {
        "kind": {"const": "pmc"},
        "n_states": {"type": "integer", "minimum": 1},
        "base": {"type": "string"},
        "experts": {"type": "array", "items": _BASE, "minItems": 1},
        "weight_net": _WEIGHT_NET,
        "initial_logits": _VECTOR,
    },
}
_HMC = {
    "type": "object",
    "required": ["kind", "n_states", "heads", "delta_net", "initial_logits"],
    "properties": {
        "kind": {"const": "hmc"},
        "n_states": {"type": "integer", "minimum": 1},
        "constants_only": {"type": "boolean"},
        "heads": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["c", "a", "b"],
                "properties": {
                    "c": {"type": "number"},
                    "a": {"type": "number"},
                    "b": {"type": "number"},
                },
            },
        },
        "delta_net": _WEIGHT_NET,
        "initial_logits": _VECTOR,
    },
}

MODEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "pmc-volatility model",
    "type": "object",
    "required": ["format_version", "model"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "label": {"type": "string"},
        "norm": {
            "type": "object",
            "required": ["shift", "scale"],
            "properties": {"shift": _VECTOR, "scale": _VECTOR},
        },
        "model": {"oneOf": [_GARCH, _FNN, _PMC, _HMC]},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(MODEL_SCHEMA)


def model_to_dict(model: SequenceModel, norm: Optional[NormalizationParams] = None) -> Dict:
    document = {
        "format_version": FORMAT_VERSION,
        "label": model.label,
        "model": model.to_dict(),
    }
    if norm is not None:
        document["norm"] = norm.to_dict()
    return document


def model_from_dict(document: Dict) -> SequenceModel:
    """Build a model from a validated document; the inverse of `model_to_dict`."""
    errors = sorted(_VALIDATOR.iter_errors(document), key=lambda e: list(e.path))
    if errors:
        raise ConfigError(f"Invalid model document: {errors[0].message}")

    data = document["model"]
    kind = ModelKind(data["kind"])
    if kind == ModelKind.PMC:
        model = PmcModel.from_dict(data)
    elif kind == ModelKind.HMC:
        model = HmcModel.from_dict(data)
    else:
        model = base_model_from_dict(data)
    if data.get("n_states", model.n_states) != model.n_states:
        raise ConfigError(
            f"The document announces {data['n_states']} states, the model has {model.n_states}"
        )
    if isinstance(model, PmcModel) and model.weight_net.obs_dim != TransitionWeightNet.OBS_DIM:
        raise ConfigError(
            f"The weight net reads {model.weight_net.obs_dim} features, "
            f"expected {TransitionWeightNet.OBS_DIM}"
        )
    if isinstance(model, HmcModel) and model.delta_net.obs_dim != DeltaWeightNet.OBS_DIM:
        raise ConfigError(
            f"The delta net reads {model.delta_net.obs_dim} features, "
            f"expected {DeltaWeightNet.OBS_DIM}"
        )
    return model


def write_model(
    model: SequenceModel, path: Union[str, Path], norm: Optional[NormalizationParams] = None
) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model, norm), indent=2) + "\n")
    logger.debug("Wrote %s to %s", model.label, path)
    return path


def read_model(
    path: Union[str, Path]
) -> Tuple[SequenceModel, Optional[NormalizationParams]]:
    """Load a model file; returns the model and the normalization it was trained with."""
    try:
        document = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{path} is not valid JSON: {e}") from e
    model = model_from_dict(document)
    norm = document.get("norm")
    return model, NormalizationParams.from_dict(norm) if norm is not None else None


__all__ = [
    "FORMAT_VERSION",
    "MODEL_SCHEMA",
    "model_from_dict",
    "model_to_dict",
    "read_model",
    "write_model",
]
