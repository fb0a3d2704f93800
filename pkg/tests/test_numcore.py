import math

import pytest
import torch

from editkit import numcore
from editkit.errors import NonFiniteValues, ShapeMismatch
from editkit.numcore import Graph, backward, evaluate, finite_diff_check


def test_evaluate_square():
    g = Graph(fn=lambda p: p["x"] * p["x"])
    out = evaluate(g, {"x": torch.tensor(3.0)})
    assert float(out) == 9.0


def test_evaluate_sum_of_zeros():
    g = Graph(fn=lambda p: p["x"].sum())
    assert float(evaluate(g, {"x": torch.zeros(4)})) == 0.0


def test_evaluate_softmax_symmetry():
    g = Graph(fn=lambda p: torch.softmax(p["x"], dim=-1))
    out = evaluate(g, {"x": torch.zeros(2)})
    assert torch.allclose(out, torch.tensor([0.5, 0.5]))


def test_evaluate_rejects_nonfinite():
    g = Graph(fn=lambda p: p["x"].log())
    with pytest.raises(NonFiniteValues):
        evaluate(g, {"x": torch.tensor(-1.0)})


def test_evaluate_deterministic(tiny_bundle, tiny_triplets):
    t = tiny_triplets[0]
    pair = torch.cat([t.input, t.edited], dim=0).unsqueeze(0)
    g = Graph(fn=lambda p: tiny_bundle.pair(p["img"])[1])
    a = evaluate(g, {"img": pair})
    b = evaluate(g, {"img": pair})
    assert torch.equal(a, b)


def test_backward_square():
    g = Graph(fn=lambda p: p["x"] * p["x"], trainable=("x",))
    grads = backward(g, {"x": torch.tensor(3.0)})
    assert float(grads["x"]) == 6.0


def test_backward_sum_gives_ones():
    g = Graph(fn=lambda p: p["x"].sum(), trainable=("x",))
    grads = backward(g, {"x": torch.zeros(4, dtype=torch.float64)})
    assert torch.equal(grads["x"], torch.ones(4, dtype=torch.float64))


def test_backward_untouched_leaf_gets_zeros():
    g = Graph(fn=lambda p: p["x"].sum(), trainable=("x", "unused"))
    grads = backward(g, {"x": torch.ones(2), "unused": torch.ones(3)})
    assert torch.equal(grads["unused"], torch.zeros(3))


def test_backward_requires_scalar():
    g = Graph(fn=lambda p: p["x"] * 2, trainable=("x",))
    with pytest.raises(ShapeMismatch):
        backward(g, {"x": torch.ones(3)})


def test_backward_layernorm_linear_matches_fd():
    """Layer-norm composed with a linear map on an 8-dim input: analytic
    gradients agree with central differences to 1e-6 at float64."""
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(8, 8, generator=gen, dtype=torch.float64)
    b = torch.randn(8, generator=gen, dtype=torch.float64)
    probe = torch.randn(8, generator=gen, dtype=torch.float64)

    def fn(p):
        h = torch.nn.functional.layer_norm(p["x"] @ w + b, (8,))
        return (h * probe).sum()

    err = finite_diff_check(fn, {"x": torch.randn(8, generator=gen, dtype=torch.float64)})
    assert err < 1e-6


def test_fd_check_square_tight():
    err = finite_diff_check(lambda p: p["x"] ** 2, {"x": torch.tensor(1.0)})
    assert err < 1e-9


def test_fd_check_constant_function_is_zero():
    err = finite_diff_check(lambda p: torch.tensor(2.5, dtype=torch.float64), {"x": torch.ones(3)})
    assert err == 0.0


def test_fd_check_nonfinite_at_perturbed_point():
    # log(x) becomes NaN once the perturbation pushes x below zero
    with pytest.raises(NonFiniteValues):
        finite_diff_check(lambda p: p["x"].log().sum(), {"x": torch.tensor([5e-6])})


def test_all_primitives_pass_gradcheck():
    results = numcore.run_primitive_checks()
    assert set(results) == {c.name for c in numcore.PRIMITIVES}
    for name, err in results.items():
        assert err < 1e-4, f"{name}: {err}"


def test_unknown_primitive_rejected():
    with pytest.raises(KeyError):
        numcore.run_primitive_checks(names=["warp_drive"])


def test_backward_linearity():
    """backward(a*f + b*g) equals a*grad(f) + b*grad(g) to 1e-12 at float64."""
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(6, generator=gen, dtype=torch.float64)
    w = torch.randn(6, generator=gen, dtype=torch.float64)
    a, b = 1.7, -2.3

    f = Graph(fn=lambda p: (p["x"] ** 2 * w).sum(), trainable=("x",))
    g = Graph(fn=lambda p: (p["x"].sin() * w).sum(), trainable=("x",))
    combined = Graph(
        fn=lambda p: a * (p["x"] ** 2 * w).sum() + b * (p["x"].sin() * w).sum(),
        trainable=("x",),
    )
    gf = backward(f, {"x": x})["x"]
    gg = backward(g, {"x": x})["x"]
    gc = backward(combined, {"x": x})["x"]
    assert torch.allclose(gc, a * gf + b * gg, atol=1e-12, rtol=0.0)
