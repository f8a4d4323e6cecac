"""Modified Bessel function of the second kind K_nu(x) for real order.

Values come from ``scipy.special.kve``; this module adds argument
checking, a log-space evaluation that survives underflow of K itself, and
a torch autograd wrapper so the function can sit inside a likelihood.
"""
import numpy as np
import scipy.special
import torch

__all__ = ["bessel_k", "bessel_kve", "log_bessel_k", "LogBesselK"]


def _check(nu, x):
    nu, x = np.broadcast_arrays(np.abs(np.asarray(nu, dtype=float)), np.asarray(x, dtype=float))
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("bessel_k requires finite x > 0")
    if np.any(~np.isfinite(nu)):
        raise ValueError("bessel_k requires a finite order")
    return nu, x


def bessel_kve(nu, x):
    """Exponentially scaled ``exp(x) * K_nu(x)``.

    Parameters
    ----------
    nu : array_like
        Order; K is even in the order so the sign is ignored.
    x : array_like
        Positive argument.
    """
    nu, x = _check(nu, x)
    return scipy.special.kve(nu, x)


def bessel_k(nu, x):
    """Modified Bessel function of the second kind K_nu(x)."""
    nu, x = _check(nu, x)
    return scipy.special.kv(nu, x)


def log_bessel_k(nu, x):
    """log K_nu(x); finite even where K_nu(x) underflows."""
    nu, x = _check(nu, x)
    return np.log(scipy.special.kve(nu, x)) - x


def _dlogk_dnu(nu, x, rel_step=1e-5):
    # no closed form for the order derivative; central difference on log K
    step = rel_step * np.maximum(1.0, np.abs(nu))
    return (log_bessel_k(nu + step, x) - log_bessel_k(nu - step, x)) / (2.0 * step)


class LogBesselK(torch.autograd.Function):
    """log K_nu(x) as a differentiable torch op (x > 0)."""

    @staticmethod
    def forward(ctx, nu, x):
        nu_np, x_np = _check(nu.detach().cpu().numpy(), x.detach().cpu().numpy())
        k0 = scipy.special.kve(nu_np, x_np)
        out = torch.as_tensor(np.log(k0) - x_np, dtype=x.dtype)
        ctx.save_for_backward(nu, x, torch.as_tensor(k0, dtype=x.dtype))
        return out

    @staticmethod
    def backward(ctx, grad_out):
        nu, x, k0 = ctx.saved_tensors
        nu_np, x_np = _check(nu.detach().cpu().numpy(), x.detach().cpu().numpy())
        grad_nu = grad_x = None
        if ctx.needs_input_grad[1]:
            # d/dx log K_nu = |nu|/x - K_{|nu|+1}/K_nu
            k1 = torch.as_tensor(scipy.special.kve(nu_np + 1.0, x_np), dtype=x.dtype)
            grad_x = grad_out * (torch.as_tensor(nu_np / x_np, dtype=x.dtype) - k1 / k0)
            if grad_x.shape != x.shape:
                grad_x = grad_x.sum_to_size(x.shape)
        if ctx.needs_input_grad[0]:
            d = torch.as_tensor(_dlogk_dnu(nu_np, x_np), dtype=x.dtype)
            grad_nu = grad_out * d
            if grad_nu.shape != nu.shape:
                grad_nu = grad_nu.sum_to_size(nu.shape)
        return grad_nu, grad_x
