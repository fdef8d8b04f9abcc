"""Shared test utilities: finite-difference gradient checking and tiny
scene/model factories."""

import numpy as np

from nerfblocks import autodiff as ad
from nerfblocks.autodiff import Tensor


def central_difference_check(fn, tensors, step=1e-5, rel_tol=1e-4, min_grad=1e-6):
    """Compare reverse-mode gradients of scalar ``fn(*tensors)`` against
    central finite differences, parameter by parameter (float64).

    Returns the worst relative error over entries with |gradient| > min_grad.
    """
    for t in tensors:
        assert t.data.dtype == np.float64, "gradient checks are 64-bit"
        t.grad = None
    loss = fn()
    ad.backward(loss)
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(ad.data_of(fn()))
            flat[i] = orig - step
            down = float(ad.data_of(fn()))
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            if abs(gflat[i]) <= min_grad and abs(fd) <= min_grad:
                continue
            rel = abs(gflat[i] - fd) / max(abs(fd), abs(gflat[i]), 1e-12)
            worst = max(worst, rel)
            assert rel <= rel_tol, f"gradient mismatch at entry {i}: ad={gflat[i]:.8g} fd={fd:.8g} rel={rel:.3g}"
    return worst


def rand_tensor(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
