# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union, Iterable

import torch

from .attention import (
    AttentionMode, PositionGrid, LinearAttentionFunction, linear_attention_backward,
    linear_attention, softmax_attention, position_weights, angle_encode, EPS
)

logger = logging.getLogger(__name__)

Sampler = Callable[[torch.Generator], Sequence[torch.Tensor]]


@dataclass
class GradCheckReport:
    name: str
    seed: int
    step: float
    tol: float
    max_rel_error: float = 0.0
    errors: dict = field(default_factory=dict)  # tensor name -> relative error
    resamples: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _redraw_like(inputs: Sequence[torch.Tensor]) -> Sampler:
    shapes = [(t.shape, t.dtype) for t in inputs]
    first = [True]

    def sampler(generator: torch.Generator):
        if first[0]:
            first[0] = False
            return [t.detach().clone() for t in inputs]
        return [torch.randn(s, dtype=dt, generator=generator) for s, dt in shapes]
    return sampler


def _has_kink(probe: Optional[Callable], inputs: Sequence[torch.Tensor], step: float) -> bool:
    if probe is None:
        return False
    with torch.no_grad():
        return any(bool((t.abs() < 10 * step).any()) for t in probe(*inputs))


def _numerical_grad(loss_fn: Callable[[], torch.Tensor], t: torch.Tensor, step: float,
                    indices: Optional[torch.Tensor]) -> torch.Tensor:
    """ Central differences of loss_fn() with respect to the entries of t (modified in place, then restored). """
    grad = torch.zeros_like(t)
    flat = t.data.view(-1)
    grad_flat = grad.view(-1)
    positions = range(flat.numel()) if indices is None else indices.tolist()
    with torch.no_grad():
        for i in positions:
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = loss_fn().item()
            flat[i] = orig - step
            f_minus = loss_fn().item()
            flat[i] = orig
            grad_flat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def grad_check(
        op: Callable[..., torch.Tensor],
        sample: Union[Sampler, Sequence[torch.Tensor]],
        seed: int = 0,
        step: float = 1e-5,
        tol: float = 1e-5,
        name: str = "op",
        input_names: Optional[Sequence[str]] = None,
        params: Iterable[tuple] = (),
        kink_probe: Optional[Callable[..., Iterable[torch.Tensor]]] = None,
        max_resamples: int = 20,
        max_entries: Optional[int] = None
) -> GradCheckReport:
    """
    Compare the implemented gradients of loss = sum(op(*inputs) * R), R a fixed random matrix,
    against central finite differences. Run in double precision.

    :param op: The function under test
    :param sample: Either input tensors or a function drawing them from a torch.Generator
    :param seed: Seeds the input draw, R and the checked-entry subset
    :param step: Finite-difference step
    :param tol: Pass threshold on the largest relative error
    :param params: (name, tensor) pairs checked in addition to the inputs, e.g. module parameters
    :param kink_probe: Returns the tensors that enter a ReLU; a draw with an entry closer than
        10 * step to the kink is discarded and redrawn
    :param max_entries: Check at most this many randomly chosen entries per tensor
    """
    generator = torch.Generator().manual_seed(seed)
    sampler = sample if callable(sample) else _redraw_like(sample)
    params = list(params)

    resamples = 0
    inputs = [t.detach().clone() for t in sampler(generator)]
    while _has_kink(kink_probe, inputs, step):
        if resamples >= max_resamples:
            logger.warning("%s: still near a ReLU kink after %d resamples", name, resamples)
            break
        resamples += 1
        inputs = [t.detach().clone() for t in sampler(generator)]
    if resamples:
        logger.info("%s: resampled inputs %d time(s) away from ReLU kinks", name, resamples)

    out_shape = op(*inputs).shape
    r = torch.randn(out_shape, dtype=inputs[0].dtype, generator=generator)

    # analytic
    leaves = [t.clone().requires_grad_(True) for t in inputs]
    loss = (op(*leaves) * r).sum()
    tensors = leaves + [p for _, p in params]
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    # numerical, on plain copies so autograd state does not leak in
    plain = [t.detach().clone() for t in inputs]

    def loss_fn():
        return (op(*plain) * r).sum()

    names = list(input_names or ["input%d" % i for i in range(len(inputs))]) + [n for n, _ in params]
    targets = plain + [p for _, p in params]

    report = GradCheckReport(name=name, seed=seed, step=step, tol=tol, resamples=resamples)
    for tensor_name, target, a in zip(names, targets, analytic):
        indices = None
        if max_entries is not None and target.numel() > max_entries:
            indices = torch.randperm(target.numel(), generator=generator)[:max_entries]
        numerical = _numerical_grad(loss_fn, target, step, indices)
        a = torch.zeros_like(target) if a is None else a.detach()
        if indices is not None:
            a = a.reshape(-1)[indices]
            numerical = numerical.reshape(-1)[indices]
        # relative to the gradient scale, floored at 1 so vanishing gradients compare absolutely
        scale = max(numerical.abs().max().item(), 1.0)
        err = (a - numerical).abs().max().item() / scale
        report.errors[tensor_name] = err
        report.max_rel_error = max(report.max_rel_error, err)

    logger.debug("%s seed=%d max_rel_error=%.3e", name, seed, report.max_rel_error)
    return report


class CorruptedLinearAttentionFunction(LinearAttentionFunction):
    """ Same forward as LinearAttentionFunction, backward without the key-side normalizer term. """

    @staticmethod
    def backward(ctx, grad_out):
        d_q, d_k, d_v = linear_attention_backward(ctx.saved_tensors, grad_out, ctx.eps, keep_normalizer_term=False)
        return d_q, d_k, d_v, None, None


def corrupted_linear_attention(q, k, v, grid: PositionGrid, mode: AttentionMode = AttentionMode.VICINITY_2D, eps: float = EPS):
    weights = position_weights(angle_encode(grid, dtype=q.dtype), mode)
    return CorruptedLinearAttentionFunction.apply(q, k, v, weights, eps)


def qkv_sampler(tokens: int, dim: int, value_dim: Optional[int] = None, batch: int = 1) -> Sampler:
    value_dim = value_dim or dim

    def sampler(generator: torch.Generator):
        return [
            torch.randn((batch, tokens, dim), dtype=torch.float64, generator=generator),
            torch.randn((batch, tokens, dim), dtype=torch.float64, generator=generator),
            torch.randn((batch, tokens, value_dim), dtype=torch.float64, generator=generator),
        ]
    return sampler


def check_linear_attention(grid: PositionGrid, mode: AttentionMode, dim: int = 4, seed: int = 0,
                           step: float = 1e-5, tol: float = 1e-5, corrupted: bool = False) -> GradCheckReport:
    fn = corrupted_linear_attention if corrupted else linear_attention
    return grad_check(
        lambda q, k, v: fn(q, k, v, grid, mode),
        qkv_sampler(grid.size, dim),
        seed=seed, step=step, tol=tol,
        name="%slinear_attention[%s]" % ("corrupted_" if corrupted else "", mode.value),
        input_names=("Q", "K", "V"),
        kink_probe=lambda q, k, v: (q, k)
    )


def check_softmax_attention(tokens: int = 8, dim: int = 4, seed: int = 0, step: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    return grad_check(
        softmax_attention,
        qkv_sampler(tokens, dim),
        seed=seed, step=step, tol=tol,
        name="softmax_attention",
        input_names=("Q", "K", "V")
    )
