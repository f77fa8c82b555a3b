"""Occlusion-aware instance segmentation toolkit.

Multicameral encoder-decoder networks built on a small reverse-mode autodiff
core, balanced cross-entropy losses, ground-truth derivation from instance
labels plus depth, boundary-detection metrics (ODS/AP/AP60), and a
deterministic synthetic dense-pile data generator, all behind one CLI.
"""

__version__ = "0.1.0"

from mcseg.autodiff import Tape, Tensor, backward  # noqa: F401
from mcseg.networks import (FilterTable, MCConfig, build_multicameral,  # noqa: F401
                            count_parameters, forward, preset_config)
