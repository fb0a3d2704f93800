"""End-to-end gradient checks.

Extends the primitive registry with two composed cases at float64: the full
contrastive loss of a miniature tower pair, and the full diffusion training
objective of a miniature denoiser + projector. Model parameters are exposed
to the finite-difference oracle through functional_call, so every coordinate
of every trainable tensor is perturbed.
"""

from __future__ import annotations

from typing import Dict, Iterable

import torch
from torch.func import functional_call

from . import numcore
from .contrastive import info_nce_loss
from .editdiffusion import (
    ConditionProjector,
    Denoiser,
    DenoiserConfig,
    make_schedule,
    total_loss,
)
from .encoders import EncoderConfig, Tokenizer, build_bundle
from .metrics import PerceptualNet


def _tiny_bundle():
    tok = Tokenizer.from_texts(["paint the circle blue", "add a square"], max_tokens=8)
    cfg = EncoderConfig(
        image_size=8, patch_size=4, depth=1, heads=2, d_model=8, d_proj=4,
        vocab_size=len(tok), max_tokens=8,
    )
    return build_bundle(cfg, tok, seed=0).double()


def contrastive_case():
    """Scalar contrastive loss of a 2-triplet batch as a function of the
    paired tower's parameters and the temperature."""
    bundle = _tiny_bundle()
    gen = torch.Generator().manual_seed(1)
    pairs = torch.rand(2, 6, 8, 8, generator=gen, dtype=torch.float64)
    texts = ["paint the circle blue", "add a square"]
    ids_list = [bundle.tokenizer.tokenize(t) for t in texts]
    width = max(len(i) for i in ids_list)
    ids = torch.zeros(2, width, dtype=torch.long)
    for i, toks in enumerate(ids_list):
        ids[i, : len(toks)] = torch.tensor(toks)
    lengths = torch.tensor([len(i) for i in ids_list])
    with torch.no_grad():
        _, text_proj = bundle.text(ids, lengths)
        text_n = torch.nn.functional.normalize(text_proj, dim=-1)

    base = {f"pair.{k}": v for k, v in bundle.pair.state_dict().items()}
    base["log_inv_temp"] = bundle.log_inv_temp.detach().clone()

    def fn(params: Dict[str, torch.Tensor]) -> torch.Tensor:
        pair_params = {k[len("pair."):]: v for k, v in params.items() if k.startswith("pair.")}
        _, edit_proj = functional_call(bundle.pair, pair_params, (pairs,))
        edit_n = torch.nn.functional.normalize(edit_proj, dim=-1)
        temp = (1.0 / params["log_inv_temp"].exp()).clamp(1e-3, 100.0)
        return info_nce_loss(edit_n, text_n, temp)

    return fn, base


def diffusion_case():
    """Scalar total training loss (noise + perceptual term) of a miniature
    denoiser and condition projector on a 2-sample batch."""
    gen = torch.Generator().manual_seed(2)
    dcfg = DenoiserConfig(base_width=8, channel_mult=1, d_cond=4, t_dim=4, latent_channels=3)
    torch.manual_seed(3)
    denoiser = Denoiser(dcfg).double()
    projector = ConditionProjector(d_in=4, d_cond=4).double()
    schedule = make_schedule(5, 0.05, 0.4)
    perceptual = PerceptualNet().double()

    x0 = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    c_img = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    inputs = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    hidden = torch.randn(2, 3, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    t_idx = torch.tensor([2, 4])

    base = {f"denoiser.{k}": v for k, v in denoiser.state_dict().items()}
    base.update({f"projector.{k}": v for k, v in projector.state_dict().items()})

    class _IdCodec:
        def decode(self, z):
            return z

    def fn(params: Dict[str, torch.Tensor]) -> torch.Tensor:
        den_params = {k[len("denoiser."):]: v for k, v in params.items() if k.startswith("denoiser.")}
        proj_params = {k[len("projector."):]: v for k, v in params.items() if k.startswith("projector.")}
        cond = functional_call(projector, proj_params, (hidden,))

        def run(x_t, cond_image, t, tokens):
            return functional_call(denoiser, den_params, (x_t, cond_image, t, tokens))

        class _Den:
            def __call__(self, *args):
                return run(*args)

        loss, _ = total_loss(
            x0, c_img, cond, inputs, t_idx, eps,
            (_Den(), schedule, _IdCodec()), perceptual, 1.0, 0.05,
        )
        return loss

    return fn, base


def projector_case():
    """Condition projector alone (linear + layer norm) on random tokens."""
    torch.manual_seed(4)
    projector = ConditionProjector(d_in=6, d_cond=6).double()
    gen = torch.Generator().manual_seed(5)
    hidden = torch.randn(2, 4, 6, generator=gen, dtype=torch.float64)
    w = torch.randn(2, 4, 6, generator=gen, dtype=torch.float64)
    base = dict(projector.state_dict())

    def fn(params):
        out = functional_call(projector, params, (hidden,))
        return (out * w).sum()

    return fn, base


END_TO_END = {
    "contrastive_loss": contrastive_case,
    "diffusion_total_loss": diffusion_case,
    "condition_projector": projector_case,
}


def run_suite(which: str = "all", step: float = 1e-5) -> Dict[str, float]:
    """Gradient-check the requested surface; returns name -> max rel error."""
    results: Dict[str, float] = {}
    if which in ("all", "primitives"):
        results.update(numcore.run_primitive_checks(step=step))
    if which in ("all", "contrastive"):
        fn, params = contrastive_case()
        results["contrastive_loss"] = numcore.finite_diff_check(fn, params, step=step)
    if which in ("all", "diffusion"):
        for name in ("condition_projector", "diffusion_total_loss"):
            fn, params = END_TO_END[name]()
            results[name] = numcore.finite_diff_check(fn, params, step=step)
    if not results:
        raise ValueError(f"unknown suite {which!r}")
    return results
