"""Central-difference gradient oracle.

The oracle never touches autograd: it re-evaluates the scalar loss an element
at a time under symmetric perturbation. Comparisons use the norm-level
relative error ||a - f|| / max(||a||, ||f||), which stays meaningful when
individual components are near zero. Intended for float64 toy-scale models;
cost is two forward passes per checked element.
"""

from __future__ import annotations

import math

import torch

from .seeding import torch_generator


def fd_gradient(f, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of the scalar callable w.r.t. each element
    of ``tensor``, perturbing it in place and restoring it afterwards."""
    grad = torch.zeros_like(tensor)
    with torch.no_grad():
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].clone()
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom


def compare_gradients(loss_fn, wrt: dict, h: float = 1e-5) -> dict:
    """Relative error between autograd and central differences for each named
    tensor in ``wrt``. A tensor the loss does not depend on counts as an
    exact zero gradient on the analytic side.
    """
    loss = loss_fn()
    tensors = list(wrt.values())
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    errors = {}
    for (name, tensor), a in zip(wrt.items(), analytic):
        a = torch.zeros_like(tensor) if a is None else a.detach()
        n = fd_gradient(lambda: loss_fn().detach(), tensor, h)
        errors[name] = relative_error(a, n)
    return errors


def module_parameter_map(module, prefix: str) -> dict:
    return {f"{prefix}.{name}": p for name, p in module.named_parameters() if p.requires_grad}


def randomize_for_check(module, seed: int) -> None:
    """Move parameters to a generic position before a finite-difference check.

    The shipped GAN initialization (0.02-std weights, zero biases) collapses
    activations toward zero, parking most ReLU inputs within the difference
    step of their kink. Fan-in-scaled weights with small random offsets keep
    activations O(1), where kink crossings are measure-zero in practice.
    """
    gen = torch_generator(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                fan_in = p.numel() // p.shape[0]
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif name.endswith("weight"):
                p.uniform_(0.8, 1.2, generator=gen)  # norm scales stay near 1
            else:
                p.uniform_(-0.2, 0.2, generator=gen)
