"""Central finite-difference verification of analytic gradients.

Backpropagated gradients of the bottleneck block, the decoder, the
projection and the perceptual loss are compared against central
differences at double precision on toy dimensions. The finite-difference
route never touches autograd, so the two sides are independent.
"""

from __future__ import annotations

import torch

from .decoder import TokenDecoder
from .encoder import BackboneSpec, make_projection, make_toy_backbone, seeded_init_
from .perceptual import MultiScalePerceptual, PerceptualConfig, perceptual_loss
from .qformer import QFormerBlock, init_queries

DEFAULT_TOLERANCE = 1e-4


def finite_difference_grad(fn, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of a scalar function w.r.t. every element.

    h sits near the eps**(1/3) optimum for central differences at double
    precision, balancing truncation against cancellation roundoff.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """Element-wise |a - n| / max(|a|, |n|, floor), maximized.

    The floor keeps structurally-zero gradients (e.g. attention key biases,
    which cancel under softmax shift invariance) from dividing central-
    difference roundoff (~1e-10 at these scales) by zero.
    """
    a = analytic.detach().double()
    n = numeric.double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max())


def _check_params(loss_fn, params: list[torch.Tensor]) -> float:
    """Backprop vs finite differences for every element of every tensor."""
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        numeric = finite_difference_grad(loss_fn, p)
        worst = max(worst, max_relative_error(p.grad, numeric))
    return worst


def check_qformer(seed: int = 0) -> float:
    torch.manual_seed(seed)
    dim, heads, m, n = 8, 2, 3, 5
    block = QFormerBlock(dim, heads).double()
    seeded_init_(block, seed + 1)
    queries = init_queries(m, dim, seed + 2).queries.detach().double().requires_grad_(True)
    context = torch.randn(n, dim, dtype=torch.float64)
    weights = torch.randn(m, dim, dtype=torch.float64)

    def loss_fn():
        return (block(queries, context) * weights).sum()

    params = [queries] + [p for p in block.parameters()]
    return _check_params(loss_fn, params)


def check_decoder(seed: int = 0) -> float:
    torch.manual_seed(seed)
    dec = TokenDecoder(dim=8, depth=1, heads=2, patch_size=2, grid=2, channels=1).double()
    seeded_init_(dec, seed + 1)
    z = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)

    def loss_fn():
        return dec.decode(z).mean()

    params = [z] + [p for p in dec.parameters()]
    return _check_params(loss_fn, params)


def check_projection(seed: int = 0) -> float:
    torch.manual_seed(seed)
    proj = make_projection(6, 8, seed=seed).double()
    x = torch.randn(5, 6, dtype=torch.float64)
    weights = torch.randn(5, 8, dtype=torch.float64)

    def loss_fn():
        return (proj(x) * weights).sum()

    return _check_params(loss_fn, list(proj.parameters()))


def check_perceptual(seed: int = 0) -> float:
    spec = BackboneSpec(depth=2, width=8, heads=2, patch_size=4, special_tokens=1, tap_layers=(0, 1), pos_grid=4)
    backbone = make_toy_backbone(seed, spec).double()
    model = MultiScalePerceptual(backbone)
    cfg = PerceptualConfig(tap_layers=(0, 1), patch_sizes=(4, 8))
    g = torch.Generator().manual_seed(seed + 9)
    x = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    x_rec = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64).requires_grad_(True)

    def loss_fn():
        return perceptual_loss(model, x, x_rec, cfg)

    return _check_params(loss_fn, [x_rec])


def run_all(seed: int = 0) -> dict[str, float]:
    return {
        "qformer": check_qformer(seed),
        "decoder": check_decoder(seed),
        "projection": check_projection(seed),
        "perceptual_loss": check_perceptual(seed),
    }
