"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

The operation order mirrors the Cython loops exactly so both backends give
bitwise identical results.
"""

import numpy as np


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    g64 = g.astype(np.float64)
    m[:] = beta1 * m.astype(np.float64) + (1.0 - beta1) * g64
    v[:] = beta2 * v.astype(np.float64) + (1.0 - beta2) * (g64 * g64)
    p64 = p.astype(np.float64)
    upd = (m.astype(np.float64) / bc1) / (np.sqrt(v.astype(np.float64) / bc2) + eps) + wd * p64
    with np.errstate(over="ignore"):  # divergence shows up as inf and is caught by the caller
        p[:] = p64 - lr * upd


def nesterov_update(p, g, buf, lr, mu):
    buf[:] = mu * buf.astype(np.float64) + g
    p[:] = p.astype(np.float64) - lr * (g + mu * buf.astype(np.float64))


def f32_to_f16(x):
    with np.errstate(over="ignore"):
        h = np.asarray(x, dtype=np.float32).astype(np.float16)
    overflow = int(np.count_nonzero(np.isinf(h) & np.isfinite(x)))
    return h.view(np.uint16), overflow


def f16_to_f32(h):
    return np.asarray(h, dtype=np.uint16).view(np.float16).astype(np.float32)
