"""Point-prompted mask classification at desk scale.

Modules: ``tensor``/``optim`` (autograd, SGD, schedule), ``model`` (the
point-prompted transformer), ``pipeline`` (point choice, score fusion,
segmentation assembly), ``metrics``, ``synth``, ``io``, ``trainer`` and ``cli``.

Set ``VITP_THREADS`` to cap the BLAS thread pool; it only takes effect when
numpy has not been imported yet.
"""
import os

_threads = os.environ.get("VITP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
