"""Three-stream adaptive graph convolutional network for two-person interaction
recognition from skeleton sequences, on a small numpy autodiff engine."""

import os as _os

# EGCN_THREADS caps the BLAS/OpenMP/numba thread pools; it must be read before numpy loads.
if _os.environ.get("EGCN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["EGCN_THREADS"])

from .model import InteractionModel, ModelConfig, model_name, predict, scale_config

__version__ = "0.1.0"

__all__ = ["InteractionModel", "ModelConfig", "model_name", "predict", "scale_config", "__version__"]
