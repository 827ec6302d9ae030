"""Shared fixtures-by-function for the test modules."""

import torch

from mass.nets import forward, init_uniform_


def randomize(net, seed):
    """Random weights everywhere (including a modifier's zero head) and non-trivial BN stats."""
    g = torch.Generator().manual_seed(seed)
    init_uniform_(net, g)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm1d):
                m.weight.copy_(1 + 0.3 * torch.randn(m.weight.shape, generator=g, dtype=m.weight.dtype))
                m.bias.copy_(0.3 * torch.randn(m.bias.shape, generator=g, dtype=m.bias.dtype))
                m.running_mean.copy_(0.2 * torch.randn(m.running_mean.shape, generator=g, dtype=m.running_mean.dtype))
                m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=g, dtype=m.running_var.dtype))
    return net


def relu_margin(net, x):
    """Smallest |pre-activation| feeding a ReLU; finite differences are meaningless near 0."""
    seen = []
    hooks = []
    for layer in net.modules():
        spec = getattr(layer, "spec", None)
        if spec is not None and spec.activation == "relu":
            src = layer.bn if layer.bn is not None else layer.affine
            hooks.append(src.register_forward_hook(lambda m, i, o: seen.append(float(o.detach().abs().min()))))
    try:
        forward(net, x, "train" if net.training else "eval")
    finally:
        for h in hooks:
            h.remove()
    return min(seen) if seen else float("inf")
