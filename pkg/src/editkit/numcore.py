"""Numeric substrate: dtype policy, named-leaf graphs, and gradient checking.

All trainable modules in this package are torch modules and get their
reverse-mode gradients from autograd. This module pins down the numeric
contract around that machinery:

* float32 is the training dtype, float64 the verification dtype
  (finite differences are not trustworthy at float32),
* ``Graph``/``evaluate``/``backward`` give a uniform named-leaf view of a
  scalar computation, used by the gradient-check tooling,
* ``finite_diff_check`` is the independent oracle: central differences,
  computed coordinate by coordinate, never through autograd,
* ``PRIMITIVES`` enumerates the differentiable primitives every model in
  this package composes from, so the check surface stays enumerable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import NonFiniteValues, ShapeMismatch

DTYPE_TRAIN = torch.float32
DTYPE_CHECK = torch.float64

TensorMap = Dict[str, torch.Tensor]


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise NonFiniteValues if ``t`` contains NaN or Inf; return ``t``."""
    if not torch.isfinite(t).all():
        raise NonFiniteValues(f"non-finite values in {what}")
    return t


@dataclass(frozen=True)
class Graph:
    """A computation over named leaf tensors.

    ``fn`` maps a dict of named tensors to one output tensor. Leaves listed
    in ``trainable`` receive gradients from :func:`backward`; everything
    else is treated as a constant input.
    """

    fn: Callable[[TensorMap], torch.Tensor]
    trainable: tuple[str, ...] = ()


def evaluate(graph: Graph, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Run the graph forward and check the output is finite.

    Deterministic: identical inputs produce bit-identical outputs (no
    stochastic ops are permitted inside a Graph).
    """
    bound = {name: t.detach() for name, t in inputs.items()}
    out = graph.fn(bound)
    return assert_finite(out, "graph output")


def backward(graph: Graph, inputs: Mapping[str, torch.Tensor]) -> TensorMap:
    """Gradients of a scalar graph output w.r.t. every trainable leaf.

    Leaves the output does not depend on get an explicit zero gradient.
    """
    leaves = {
        name: t.detach().clone().requires_grad_(name in graph.trainable)
        for name, t in inputs.items()
    }
    out = graph.fn(leaves)
    if out.numel() != 1:
        raise ShapeMismatch(f"backward needs a scalar output, got shape {tuple(out.shape)}")
    assert_finite(out, "graph output")
    wanted = [leaves[name] for name in graph.trainable]
    if out.requires_grad:
        grads = torch.autograd.grad(out, wanted, allow_unused=True)
    else:
        grads = [None] * len(wanted)
    return {
        name: (g if g is not None else torch.zeros_like(leaves[name]))
        for name, g in zip(graph.trainable, grads)
    }


def finite_diff_check(
    fn: Callable[[TensorMap], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between autograd and central finite differences.

    Everything runs at float64. For each coordinate i the numeric gradient
    is (f(p + h e_i) - f(p - h e_i)) / 2h and the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Returns the
    max over all coordinates of all params (0.0 for empty params).
    """
    params64 = {k: v.detach().to(DTYPE_CHECK) for k, v in params.items()}

    leaves = {k: v.clone().requires_grad_(True) for k, v in params64.items()}
    out = fn(leaves)
    if out.numel() != 1:
        raise ShapeMismatch("finite_diff_check needs a scalar function")
    assert_finite(out, "function value")
    if out.requires_grad:
        grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    else:
        grads = [None] * len(leaves)
    analytic = {
        k: (g if g is not None else torch.zeros_like(params64[k]))
        for k, g in zip(leaves.keys(), grads)
    }

    def eval_at(shifted: TensorMap) -> float:
        with torch.no_grad():
            val = fn({k: v.clone() for k, v in shifted.items()})
        if not torch.isfinite(val).all():
            raise NonFiniteValues("non-finite function value at perturbed point")
        return float(val)

    worst = 0.0
    for name, base in params64.items():
        flat = base.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            f_plus = eval_at(params64)
            flat[i] = orig - step
            f_minus = eval_at(params64)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad_flat[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Primitive registry
#
# The fixed set of differentiable primitives. Each case builds a scalar
# function plus its named parameters on small random shapes; scalarization
# uses a fixed random weighting so every output coordinate contributes.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable[[torch.Generator], tuple[Callable[[TensorMap], torch.Tensor], TensorMap]]


def _randn(gen: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=DTYPE_CHECK)


def _wsum(t: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (t * w).sum()


def _case_matmul(gen):
    a, b = _randn(gen, 3, 4), _randn(gen, 4, 2)
    w = _randn(gen, 3, 2)
    return (lambda p: _wsum(p["a"] @ p["b"], w)), {"a": a, "b": b}


def _case_conv(gen):
    x = _randn(gen, 1, 2, 6, 6)
    k = _randn(gen, 3, 2, 3, 3) * 0.5
    bias = _randn(gen, 3) * 0.1
    w = _randn(gen, 1, 3, 6, 6)
    return (
        lambda p: _wsum(F.conv2d(p["x"], p["k"], p["bias"], padding=1), w),
        {"x": x, "k": k, "bias": bias},
    )


def _case_layer_norm(gen):
    x = _randn(gen, 4, 8)
    g = 1.0 + 0.1 * _randn(gen, 8)
    b = 0.1 * _randn(gen, 8)
    w = _randn(gen, 4, 8)
    return (
        lambda p: _wsum(F.layer_norm(p["x"], (8,), p["g"], p["b"]), w),
        {"x": x, "g": g, "b": b},
    )


def _case_softmax(gen):
    x = _randn(gen, 3, 5)
    w = _randn(gen, 3, 5)
    return (lambda p: _wsum(F.softmax(p["x"], dim=-1), w)), {"x": x}


def _case_gelu(gen):
    x = _randn(gen, 4, 6)
    w = _randn(gen, 4, 6)
    return (lambda p: _wsum(F.gelu(p["x"]), w)), {"x": x}


def _case_relu(gen):
    # keep samples away from the kink at 0 where the derivative is undefined
    x = _randn(gen, 4, 6)
    x = torch.where(x.abs() < 0.1, x.sign() * 0.1 + x, x)
    w = _randn(gen, 4, 6)
    return (lambda p: _wsum(F.relu(p["x"]), w)), {"x": x}


def _case_attention(gen):
    q, k, v = _randn(gen, 5, 8), _randn(gen, 5, 8), _randn(gen, 5, 8)
    w = _randn(gen, 5, 8)

    def fn(p):
        scores = p["q"] @ p["k"].T / math.sqrt(8)
        return _wsum(F.softmax(scores, dim=-1) @ p["v"], w)

    return fn, {"q": q, "k": k, "v": v}


def _case_cross_entropy(gen):
    logits = _randn(gen, 4, 7)
    targets = torch.arange(4) % 7
    return (lambda p: F.cross_entropy(p["logits"], targets)), {"logits": logits}


def _case_cosine(gen):
    u = _randn(gen, 8) + 0.5
    v = _randn(gen, 8) - 0.5
    return (
        lambda p: (p["u"] * p["v"]).sum() / (p["u"].norm() * p["v"].norm()),
        {"u": u, "v": v},
    )


def _case_mean_square(gen):
    x = _randn(gen, 5, 5)
    y = _randn(gen, 5, 5)
    return (lambda p: ((p["x"] - p["y"]) ** 2).mean()), {"x": x, "y": y}


PRIMITIVES: tuple[GradCase, ...] = (
    GradCase("matmul", _case_matmul),
    GradCase("conv", _case_conv),
    GradCase("layer_norm", _case_layer_norm),
    GradCase("softmax", _case_softmax),
    GradCase("gelu", _case_gelu),
    GradCase("relu", _case_relu),
    GradCase("attention", _case_attention),
    GradCase("cross_entropy", _case_cross_entropy),
    GradCase("cosine", _case_cosine),
    GradCase("mean_square", _case_mean_square),
)


def run_primitive_checks(
    names: Iterable[str] | None = None, seed: int = 0, step: float = 1e-5
) -> Dict[str, float]:
    """finite_diff_check every registered primitive; returns name -> max error."""
    chosen: Sequence[GradCase] = PRIMITIVES
    if names is not None:
        wanted = set(names)
        chosen = [c for c in PRIMITIVES if c.name in wanted]
        missing = wanted - {c.name for c in chosen}
        if missing:
            raise KeyError(f"unknown primitives: {sorted(missing)}")
    results: Dict[str, float] = {}
    for case in chosen:
        gen = torch.Generator().manual_seed(seed)
        fn, params = case.build(gen)
        results[case.name] = finite_diff_check(fn, params, step=step)
    return results
