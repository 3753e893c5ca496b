"""Independent reference computations shared by the unit and acceptance tests."""
import math

import numpy as np
import torch


def central_fd(fn, tensor, index, eps=1e-6):
    """Central difference of scalar ``fn()`` w.r.t. ``tensor[index]``, restoring the entry afterwards."""
    with torch.no_grad():
        old = tensor[index].item()
        tensor[index] = old + eps
        plus = float(fn())
        tensor[index] = old - eps
        minus = float(fn())
        tensor[index] = old
    return (plus - minus) / (2 * eps)


def rel_err(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe_indices(shape, n, seed):
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(np.prod(shape)), size=min(n, int(np.prod(shape))), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def softplus_ref(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def adam_ref(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam with bias correction, written out from the textbook recurrences."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def ssim_binary_inverse(c1=1e-4, c2=9e-4):
    """SSIM of a window of a balanced 0/1 pattern against its complement, from the formula directly.

    Both windows have mean 1/2 and variance 1/4, covariance -1/4.
    """
    mu = 0.5
    var = 0.25
    cov = -0.25
    return ((2 * mu * mu + c1) * (2 * cov + c2)) / ((2 * mu * mu + c1) * (2 * var + c2))
