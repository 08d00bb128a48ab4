"""Central-difference gradient checking."""

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f, point, eps=1e-5):
    """Compare analytic and central-difference gradients of a scalar function.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. Returns
    the max over coordinates of ``|a - n| / max(1, |a|, |n|)`` where ``a`` is
    the analytic gradient at ``point`` and ``n`` the (f(x+eps) - f(x-eps)) /
    (2 eps) estimate.
    """
    x = Tensor(np.array(point.data, copy=True), requires_grad=True)
    loss = f(x)
    loss.backward()
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(Tensor(x.data)).item()
            flat[i] = orig - eps
            f_minus = f(Tensor(x.data)).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def pack_params(params):
    """Concatenate a name->Tensor dict into one flat vector (sorted by name)."""
    names = sorted(params)
    vec = np.concatenate([params[n].data.reshape(-1) for n in names])
    return names, vec


def unpack_params(names, vec, params):
    """Write a flat vector back into the tensors of ``params`` in-place."""
    pos = 0
    for n in names:
        t = params[n]
        t.data = vec[pos:pos + t.data.size].reshape(t.data.shape).copy()
        pos += t.data.size


def grad_check_params(objective, params, eps=1e-5):
    """grad_check over every tensor in a parameter dict jointly.

    ``objective`` is a zero-argument callable evaluating a scalar Tensor from
    the current contents of ``params``; the check perturbs each coordinate of
    each parameter and restores everything afterwards.
    """
    names, base = pack_params(params)

    unpack_params(names, base, params)
    for n in names:
        params[n].zero_grad()
    loss = objective()
    loss.backward()
    # Parameters the loss never touches legitimately have a zero gradient.
    analytic = np.concatenate([
        params[n].grad.reshape(-1) if params[n].grad is not None
        else np.zeros(params[n].data.size)
        for n in names
    ])

    worst = 0.0
    with no_grad():
        for i in range(base.size):
            orig = base[i]
            base[i] = orig + eps
            unpack_params(names, base, params)
            f_plus = objective().item()
            base[i] = orig - eps
            unpack_params(names, base, params)
            f_minus = objective().item()
            base[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    unpack_params(names, base, params)
    return worst
