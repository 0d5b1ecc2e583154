"""Pure-numpy twin of ``_adam_kernel.adam_direction`` (used when the extension is absent)."""
import numpy as np


def adam_direction(g, m, v, beta1, beta2, bc1, bc2, eps, use_atan2, atan2_a, atan2_b, out, want_sumsq=True):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mh = m / bc1
    vh = v / bc2
    if use_atan2:
        np.arctan2(mh, atan2_b * np.sqrt(vh), out=out)
        out *= atan2_a
    else:
        np.divide(mh, np.sqrt(vh) + eps, out=out)
    return float(np.dot(out, out)) if want_sumsq else None
