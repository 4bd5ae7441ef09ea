"""Shared oracles for the test modules."""

import torch


def central_difference(fn, inputs, h=1e-6):
    """Numerical gradient of scalar ``fn(*inputs)`` w.r.t. every input tensor."""
    grads = []
    for t in inputs:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn(*inputs).item()
            flat[i] = old - h
            down = fn(*inputs).item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradient_errors(fn, inputs):
    """Norm-wise relative error between autograd and central differences, per input."""
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    auto = torch.autograd.grad(fn(*leaves), leaves, allow_unused=True)
    numeric = central_difference(fn, [t.detach().clone() for t in inputs])
    errs = []
    for a, n in zip(auto, numeric):
        a = torch.zeros_like(n) if a is None else a
        scale = max(a.norm().item(), n.norm().item(), 1e-12)
        errs.append((a - n).norm().item() / scale)
    return errs
