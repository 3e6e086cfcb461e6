"""Residual 1x1 adapters as domain decouplers for few-shot segmentation, at desk scale.

Submodules: ``tensor`` (reverse-mode autodiff), ``linalg`` (Jacobi SVD),
``model`` (backbone, navigators, correlation head), ``optim`` (Adam, SAM
variants), ``metrics`` (CKA, HSIC, MMD, sharpness), ``synthbench`` (synthetic
domains and episodes), ``harness`` and ``cli`` (experiments).
"""
from .config import ExperimentConfig, load_config, parse_config
from .linalg import SvdFactors, reconstruct, svd
from .metrics import cka, gram_linear, hsic, mmd_rbf, sharpness_probe
from .model import AdapterSpec, Backbone, CDFSSModel, Navigator, dfn_specs
from .optim import SAM, Adam, SamConfig
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdapterSpec", "Backbone", "CDFSSModel", "ExperimentConfig", "Navigator", "SAM", "SamConfig",
    "SvdFactors", "Tensor", "cka", "dfn_specs", "gram_linear", "hsic", "load_config", "mmd_rbf", "no_grad",
    "parse_config", "reconstruct", "sharpness_probe", "svd",
]
