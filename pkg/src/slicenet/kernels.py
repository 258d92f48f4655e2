"""Backend selection for the hot kernels.

The compiled extension (``slicenet._kernels``) is used when it imports and
``SLICENET_PURE_PYTHON`` is unset or ``0``. Otherwise the numpy fallback in
``slicenet._kernels_py`` is used. ``BACKEND`` records which one won.

Both backends produce the same values to within rounding (the test suite
holds them to 1e-12), but they are not bit-identical to each other, so
determinism guarantees hold per backend.
"""

import os

from . import _kernels_py


def _load():
    if os.environ.get("SLICENET_PURE_PYTHON", "0") not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return _kernels_py, "python"
    return _kernels, "cython"


_impl, BACKEND = _load()

depthwise_fwd = getattr(_impl, "depthwise_fwd")
depthwise_bwd = getattr(_impl, "depthwise_bwd")
conv_fwd = getattr(_impl, "conv_fwd")
conv_bwd = getattr(_impl, "conv_bwd")
layernorm_fwd = getattr(_impl, "layernorm_fwd")
layernorm_bwd = getattr(_impl, "layernorm_bwd")
softmax_fwd = getattr(_impl, "softmax_fwd")
softmax_bwd = getattr(_impl, "softmax_bwd")


def backends():
    """Map of backend name to kernel namespace, for parity tests and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
