"""Volatility forecasters: base models, their PMC extensions and the HMC baseline."""
from .base import (
    BASE_KINDS,
    LABELS,
    FnnModel,
    GarchModel,
    GarchParams,
    ModelKind,
    fnn_forward,
    garch_forecast,
    init_model,
)
from .filtering import FilteredPosterior, FilterResult
from .hmc import HmcModel, delta_step, hmc_filter, hmc_predict
from .pmc import PmcModel, forward_filter, gamma_step, pmc_predict
from .serialization import model_from_dict, model_to_dict, read_model, write_model

__all__ = [
    "BASE_KINDS",
    "LABELS",
    "FilteredPosterior",
    "FilterResult",
    "FnnModel",
    "GarchModel",
    "GarchParams",
    "HmcModel",
    "ModelKind",
    "PmcModel",
    "delta_step",
    "fnn_forward",
    "forward_filter",
    "gamma_step",
    "garch_forecast",
    "hmc_filter",
    "hmc_predict",
    "init_model",
    "model_from_dict",
    "model_to_dict",
    "pmc_predict",
    "read_model",
    "write_model",
]
