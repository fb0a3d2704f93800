"""Deterministic reverse sampling with dual classifier-free guidance.

Each step combines three denoiser evaluations: fully unconditional, image-
conditioned only, and fully conditioned. The image scale pulls the output
toward the query image; the edit scale pushes it along the demonstrated
edit. Reverse steps are DDIM-style (no stochastic churn), so the output is
a pure function of weights, config, and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from .editdiffusion import Editor, predict_x0_latent
from .errors import ConfigError, ShapeMismatch
from .numcore import assert_finite


@dataclass
class GuidanceConfig:
    s_edit: float = 7.0
    s_image: float = 1.5
    steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.s_edit < 0 or self.s_image < 0:
            raise ConfigError("guidance scales must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def guided_epsilon(
    x_t: torch.Tensor,
    t: int,
    cond_image_latent: torch.Tensor,
    cond_tokens: torch.Tensor,
    editor: Editor,
    cfg: GuidanceConfig,
) -> torch.Tensor:
    """Linear combination of the three conditioned noise estimates:

    eps(0,0) + s_image * (eps(img,0) - eps(0,0))
             + s_edit  * (eps(img,tok) - eps(img,0))
    """
    n_tokens = cond_tokens.shape[0]
    null_tok = editor.projector.null_tokens(n_tokens)[0]
    xs = torch.stack([x_t, x_t, x_t])
    imgs = torch.stack([torch.zeros_like(cond_image_latent), cond_image_latent, cond_image_latent])
    toks = torch.stack([null_tok, null_tok, cond_tokens])
    ts = torch.tensor([t, t, t], dtype=torch.long)
    with torch.no_grad():
        eps = editor.denoiser(xs, imgs, ts, toks)
    eps_uncond, eps_img, eps_full = eps[0], eps[1], eps[2]
    return (
        eps_uncond
        + cfg.s_image * (eps_img - eps_uncond)
        + cfg.s_edit * (eps_full - eps_img)
    )


def sampling_timesteps(t_max: int, steps: int) -> List[int]:
    """Descending, duplicate-free subsequence of 1..t_max starting at t_max."""
    grid = np.linspace(t_max, 1, num=min(steps, t_max))
    ts = sorted({int(round(v)) for v in grid}, reverse=True)
    return ts


def ddim_reverse(
    editor: Editor,
    x_start: torch.Tensor,
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    steps: int,
    clamp_latent: Optional[tuple] = None,
) -> torch.Tensor:
    """Run the deterministic reverse recursion from x_{t_max} to the clean
    latent, using eps_fn(x_t, t) as the noise estimate.

    With an identity codec the latent is the image, so the one-step
    reconstruction may be clamped to the valid pixel range each step
    (``clamp_latent=(0, 1)``); this is a no-op for in-range latents.
    """
    schedule = editor.schedule
    x = x_start
    ts = sampling_timesteps(schedule.t_max, steps)
    for i, t in enumerate(ts):
        eps = eps_fn(x, t)
        x0_hat = predict_x0_latent(x, eps, t, schedule)
        if clamp_latent is not None:
            x0_hat = x0_hat.clamp(*clamp_latent)
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        a_prev = schedule.alpha_bar(t_prev)
        x = math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps
    return x


def edit(
    query: torch.Tensor,
    exemplar_input: torch.Tensor,
    exemplar_edited: torch.Tensor,
    editor: Editor,
    cfg: GuidanceConfig,
    instruction: str = "",
    require_trained: bool = True,
) -> torch.Tensor:
    """Apply the exemplar's edit to the query image.

    The edit embedding is computed once from the exemplar pair; the encoded
    query rides along the whole trajectory as the image condition. Output is
    clamped to [0, 1].
    """
    if exemplar_input.shape != exemplar_edited.shape:
        raise ShapeMismatch("exemplar pair shapes differ")
    if query.shape != exemplar_input.shape:
        raise ShapeMismatch("query and exemplar shapes differ")
    if require_trained and not editor.trained:
        raise ConfigError("editor checkpoint is untrained; pass --allow-untrained to override")
    hidden = editor.condition_hidden((exemplar_input, exemplar_edited, instruction))
    with torch.no_grad():
        cond_tokens = editor.projector(hidden)
        c_img = editor.codec.encode(query)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_start = torch.randn(c_img.shape, generator=gen)
    clamp = (0.0, 1.0) if editor.codec.mode == "identity" else None
    latent = ddim_reverse(
        editor,
        x_start,
        lambda x, t: guided_epsilon(x, t, c_img, cond_tokens, editor, cfg),
        cfg.steps,
        clamp_latent=clamp,
    )
    with torch.no_grad():
        out = editor.codec.decode(latent)
    assert_finite(out, "edited image")
    return out.clamp(0.0, 1.0)


def edit_with_text(
    query: torch.Tensor,
    instruction: str,
    editor: Editor,
    cfg: GuidanceConfig,
    require_trained: bool = True,
) -> torch.Tensor:
    """Instruction-conditioned variant; needs a text-conditioned denoiser.

    An empty instruction is the null condition, which by construction
    matches s_edit = 0 behavior.
    """
    if editor.cond_source != "text":
        raise ConfigError(f"editor was trained with {editor.cond_source!r} conditioning, not text")
    if require_trained and not editor.trained:
        raise ConfigError("editor checkpoint is untrained; pass --allow-untrained to override")
    with torch.no_grad():
        c_img = editor.codec.encode(query)
        if editor.encoders.tokenizer.normalize(instruction):
            hidden = editor.condition_hidden((None, None, instruction))
            cond_tokens = editor.projector(hidden)
        else:
            cond_tokens = editor.projector.null_tokens(editor.encoders.cfg.max_tokens)[0]
    gen = torch.Generator().manual_seed(cfg.seed)
    x_start = torch.randn(c_img.shape, generator=gen)
    clamp = (0.0, 1.0) if editor.codec.mode == "identity" else None
    latent = ddim_reverse(
        editor,
        x_start,
        lambda x, t: guided_epsilon(x, t, c_img, cond_tokens, editor, cfg),
        cfg.steps,
        clamp_latent=clamp,
    )
    with torch.no_grad():
        out = editor.codec.decode(latent)
    assert_finite(out, "edited image")
    return out.clamp(0.0, 1.0)
