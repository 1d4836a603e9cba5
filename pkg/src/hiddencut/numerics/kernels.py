"""Backend selection for the row kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback takes over. Set ``HIDDENCUT_KERNELS=python`` to force the fallback.
Both backends agree to rounding (about 1e-15 relative); each is
deterministic on its own.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("HIDDENCUT_KERNELS", "").lower() == "python":
        raise ImportError("compiled kernels disabled by HIDDENCUT_KERNELS")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "python"


def _rows(a):
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, a.shape[-1])


class _CompiledKernels:
    name = "compiled"

    @staticmethod
    def layer_norm_forward(x, gain, bias, eps):
        y, xhat, rstd = _ckernels.layer_norm_forward(
            _rows(x), np.ascontiguousarray(gain, dtype=np.float64),
            np.ascontiguousarray(bias, dtype=np.float64), float(eps))
        lead = x.shape[:-1]
        return y.reshape(x.shape), xhat.reshape(x.shape), rstd.reshape(lead + (1,))

    @staticmethod
    def layer_norm_backward(gy, xhat, rstd, gain):
        gx, ggain, gbias = _ckernels.layer_norm_backward(
            _rows(gy), _rows(xhat), _rows(rstd), np.ascontiguousarray(gain, dtype=np.float64))
        return gx.reshape(gy.shape), ggain, gbias

    @staticmethod
    def masked_softmax_forward(x, valid):
        valid = np.ascontiguousarray(np.broadcast_to(valid, x.shape), dtype=np.uint8)
        y = _ckernels.masked_softmax_forward(_rows(x), valid.reshape(-1, x.shape[-1]))
        return y.reshape(x.shape)

    @staticmethod
    def masked_softmax_backward(gy, y):
        return _ckernels.masked_softmax_backward(_rows(gy), _rows(y)).reshape(gy.shape)

    # numpy's vectorized tanh beats a scalar libm loop, so the forward is shared
    gelu_forward = staticmethod(_kernels_py.gelu_forward)

    @staticmethod
    def gelu_backward(gy, x, t):
        return _ckernels.gelu_backward(_rows(gy), _rows(x), _rows(t)).reshape(gy.shape)


class _PythonKernels:
    name = "python"
    layer_norm_forward = staticmethod(_kernels_py.layer_norm_forward)
    layer_norm_backward = staticmethod(_kernels_py.layer_norm_backward)
    masked_softmax_forward = staticmethod(_kernels_py.masked_softmax_forward)
    masked_softmax_backward = staticmethod(_kernels_py.masked_softmax_backward)
    gelu_forward = staticmethod(_kernels_py.gelu_forward)
    gelu_backward = staticmethod(_kernels_py.gelu_backward)


compiled = _CompiledKernels if _ckernels is not None else None
python = _PythonKernels
active = compiled if compiled is not None else python
