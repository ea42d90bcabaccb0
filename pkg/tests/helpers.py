"""Shared test utilities: finite-difference gradient oracles."""

import torch


def grad_of(f, inputs):
    xs = [x.clone().detach().requires_grad_(True) for x in inputs]
    out = f(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    return [g if g is not None else torch.zeros_like(x) for g, x in zip(grads, xs)]


def fd_directional_check(f, inputs, eps=1e-3, rtol=1e-3, n_dirs=4, seed=0):
    """Central finite differences along random directions against autograd.

    For each input tensor, compares (f(x+eps*v) - f(x-eps*v)) / (2*eps) with
    <grad, v> for unit directions v. Returns the worst relative error.
    """
    gen = torch.Generator().manual_seed(seed)
    grads = grad_of(f, inputs)
    worst = 0.0
    with torch.no_grad():
        for target_idx in range(len(inputs)):
            x = inputs[target_idx]
            for _ in range(n_dirs):
                v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
                v = v / v.norm()
                xs_plus = [x + eps * v if i == target_idx else inputs[i] for i in range(len(inputs))]
                xs_minus = [x - eps * v if i == target_idx else inputs[i] for i in range(len(inputs))]
                fd = (f(*xs_plus) - f(*xs_minus)) / (2 * eps)
                an = (grads[target_idx] * v).sum()
                denom = max(abs(float(fd)), abs(float(an)))
                if denom < 1e-7:
                    err = abs(float(fd) - float(an))
                    assert err < 1e-6, f"near-zero derivative mismatch: {err}"
                    continue
                rel = abs(float(fd) - float(an)) / denom
                worst = max(worst, rel)
                assert rel <= rtol, f"directional FD mismatch: rel={rel:.2e} (fd={fd}, an={an})"
    return worst


def fd_elementwise_check(f, x, eps=1e-2, rtol=1e-3):
    """Per-coordinate central differences against the full autograd gradient.

    Errors are measured relative to the gradient's largest magnitude.
    """
    (g,) = grad_of(f, [x])
    flat = x.flatten()
    fd = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f(x))
            flat[i] = orig - eps
            lo = float(f(x))
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * eps)
    fd = fd.reshape(x.shape)
    scale = max(float(fd.abs().max()), float(g.abs().max()), 1e-8)
    err = float((fd - g).abs().max()) / scale
    assert err <= rtol, f"elementwise FD mismatch: rel={err:.2e}"
    return err
