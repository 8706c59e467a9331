import torch


def numerical_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of scalar ``fn`` at every element of float64 ``x``."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = float(fn(x))
            flat[i] = old - eps
            lo = float(fn(x))
            flat[i] = old
            grad[i] = (hi - lo) / (2 * eps)
    return grad.view_as(x)


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / b.norm().clamp_min(1e-30))


def grad_error(fn, x: torch.Tensor, eps: float = 1e-6) -> float:
    return relative_error(analytic_grad(fn, x), numerical_grad(fn, x, eps))
