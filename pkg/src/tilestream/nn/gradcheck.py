"""Central finite-difference gradient checking."""
import numpy as np


def numeric_grad(fn, tensor, h=1e-5):
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(fn, tensors, h=1e-5, per_tensor=False):
    """Normwise relative error between analytic and numeric gradients.

    ``max|a - n| / max(max|a|, max|n|, 1e-8)`` taken over all tensors jointly.
    With ``per_tensor`` the ratio is formed per tensor and the worst is
    returned; that is stricter, and for tensors whose gradients sit near the
    finite-difference noise floor (about 1e-10 at h=1e-5) it measures noise.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    errs, scales = [], []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(fn, t, h)
        errs.append(float(np.abs(analytic - numeric).max()))
        scales.append(max(float(np.abs(analytic).max()), float(np.abs(numeric).max())))
    if per_tensor:
        return max(e / max(s, 1e-8) for e, s in zip(errs, scales))
    return max(errs) / max(max(scales), 1e-8)
