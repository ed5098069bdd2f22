"""Input-conditioned skip-connection patching for frozen convolutional backbones.

Everything runs on numpy: ``tensor`` holds a small reverse-mode autodiff
engine, ``nets`` the residual backbones, ``delta`` the patch machinery,
``engine`` the training scenarios and ``variance`` the initialization study.
"""

from .config import ConfigError, RunConfig, load_config
from .data import DataError
from .delta import PatchState, build_topology, forward_base_via_patched_model, forward_patched, trainable_params
from .engine import RunReport, arithmetic_mean, harmonic_mean
from .nets import Backbone, attach_head, build_backbone, digest, forward_base

__all__ = [
    "Backbone", "ConfigError", "DataError", "PatchState", "RunConfig", "RunReport", "arithmetic_mean",
    "attach_head", "build_backbone", "build_topology", "digest", "forward_base",
    "forward_base_via_patched_model", "forward_patched", "harmonic_mean", "load_config", "trainable_params",
]

__version__ = "0.1.0"
