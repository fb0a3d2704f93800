import pytest
import torch

from editkit import editdiffusion as ed, sampler
from editkit.editdiffusion import TrainConfig, build_editor, finetune
from editkit.errors import ConfigError, ShapeMismatch
from editkit.sampler import GuidanceConfig, ddim_reverse, edit, edit_with_text, guided_epsilon, sampling_timesteps


@pytest.fixture(scope="module")
def trained_tiny_editor(tiny_bundle, tiny_triplets):
    cfg = TrainConfig(iterations=4, batch_size=4, base_width=8, t_max=8, seed=0)
    editor, _ = finetune(tiny_triplets[:8], tiny_bundle, cfg)
    return editor


class _StubDenoiser:
    """Returns fixed tensors for the (uncond, image-only, full) call order."""

    def __init__(self, eps00, epsI0, epsIE):
        self.outs = torch.stack([eps00, epsI0, epsIE])

    def __call__(self, xs, imgs, ts, toks):
        return self.outs.clone()


def _stubbed(editor, eps00, epsI0, epsIE):
    import copy

    stub = copy.copy(editor)
    stub.denoiser = _StubDenoiser(eps00, epsI0, epsIE)
    return stub


def test_guidance_linear_combination(trained_tiny_editor):
    """With eps(0,0)=0, eps(img,0)=a, eps(img,tok)=b and scales (1.5, 7) the
    combination collapses to 7b - 5.5a."""
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(3, 8, 8, generator=gen)
    b = torch.randn(3, 8, 8, generator=gen)
    stub = _stubbed(trained_tiny_editor, torch.zeros(3, 8, 8), a, b)
    cfg = GuidanceConfig(s_edit=7.0, s_image=1.5, steps=1, seed=0)
    d_cond = trained_tiny_editor.denoiser.cfg.d_cond
    out = guided_epsilon(torch.zeros(3, 8, 8), 1, torch.zeros(3, 8, 8),
                         torch.zeros(4, d_cond), stub, cfg)
    assert torch.allclose(out, 7.0 * b - 5.5 * a, atol=1e-6)


def test_guidance_unit_scales_telescope(trained_tiny_editor, tiny_triplets):
    """s_image = s_edit = 1 reduces to the fully conditioned estimate."""
    editor = trained_tiny_editor
    t = tiny_triplets[0]
    hidden = editor.condition_hidden((t.input, t.edited, t.instruction))
    with torch.no_grad():
        tok = editor.projector(hidden)
        c_img = editor.codec.encode(t.input)
    gen = torch.Generator().manual_seed(1)
    x_t = torch.randn(c_img.shape, generator=gen)
    cfg = GuidanceConfig(s_edit=1.0, s_image=1.0, steps=1, seed=0)
    combined = guided_epsilon(x_t, 3, c_img, tok, editor, cfg)
    with torch.no_grad():
        direct = editor.denoiser(
            x_t.unsqueeze(0), c_img.unsqueeze(0), torch.tensor([3]), tok.unsqueeze(0)
        )[0]
    assert float((combined - direct).abs().max()) < 1e-6


def test_guidance_zero_scales_give_unconditional(trained_tiny_editor, tiny_triplets):
    editor = trained_tiny_editor
    t = tiny_triplets[0]
    hidden = editor.condition_hidden((t.input, t.edited, t.instruction))
    with torch.no_grad():
        tok = editor.projector(hidden)
        c_img = editor.codec.encode(t.input)
        null_tok = editor.projector.null_tokens(tok.shape[0])[0]
    gen = torch.Generator().manual_seed(2)
    x_t = torch.randn(c_img.shape, generator=gen)
    cfg = GuidanceConfig(s_edit=0.0, s_image=0.0, steps=1, seed=0)
    combined = guided_epsilon(x_t, 2, c_img, tok, editor, cfg)
    with torch.no_grad():
        uncond = editor.denoiser(
            x_t.unsqueeze(0), torch.zeros_like(c_img).unsqueeze(0),
            torch.tensor([2]), null_tok.unsqueeze(0),
        )[0]
    assert float((combined - uncond).abs().max()) < 1e-6


def test_sampling_timesteps_descending_unique():
    ts = sampling_timesteps(50, 20)
    assert ts[0] == 50
    assert ts[-1] == 1
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert sampling_timesteps(10, 99) == list(range(10, 0, -1))


def test_oracle_denoiser_recovers_x0(trained_tiny_editor):
    """The reverse recursion driven by the true noise reproduces the clean
    latent (identity codec)."""
    editor = trained_tiny_editor
    sch = editor.schedule
    gen = torch.Generator().manual_seed(3)
    x0 = torch.rand(3, 64, 64, generator=gen)
    eps = torch.randn(3, 64, 64, generator=gen)
    x_start = ed.add_noise(x0, eps, sch.t_max, sch)
    out = ddim_reverse(editor, x_start, lambda x, t: eps, steps=sch.t_max)
    assert float((out - x0).abs().max()) < 1e-4


def test_edit_deterministic(trained_tiny_editor, tiny_triplets):
    t = tiny_triplets[0]
    q = tiny_triplets[1].input
    cfg = GuidanceConfig(s_edit=1.5, s_image=1.2, steps=4, seed=9)
    a = edit(q, t.input, t.edited, trained_tiny_editor, cfg)
    b = edit(q, t.input, t.edited, trained_tiny_editor, cfg)
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_edit_seed_changes_output(trained_tiny_editor, tiny_triplets):
    t = tiny_triplets[0]
    q = tiny_triplets[1].input
    a = edit(q, t.input, t.edited, trained_tiny_editor, GuidanceConfig(steps=4, seed=0))
    b = edit(q, t.input, t.edited, trained_tiny_editor, GuidanceConfig(steps=4, seed=1))
    assert not torch.equal(a, b)


def test_edit_shape_checks(trained_tiny_editor, tiny_triplets):
    t = tiny_triplets[0]
    small = torch.rand(3, 16, 16)
    with pytest.raises(ShapeMismatch):
        edit(small, t.input, t.edited, trained_tiny_editor, GuidanceConfig(steps=2))
    with pytest.raises(ShapeMismatch):
        edit(t.input, t.input, small, trained_tiny_editor, GuidanceConfig(steps=2))


def test_untrained_editor_flag(tiny_bundle):
    cfg = TrainConfig(iterations=1, batch_size=2, base_width=8, t_max=5)
    editor = build_editor(tiny_bundle, cfg)
    q = torch.rand(3, 64, 64)
    with pytest.raises(ConfigError):
        edit(q, q, q, editor, GuidanceConfig(steps=2))
    out = edit(q, q, q, editor, GuidanceConfig(steps=2), require_trained=False)
    assert out.shape == (3, 64, 64)


@pytest.fixture(scope="module")
def text_editor(tiny_bundle, tiny_triplets):
    cfg = TrainConfig(iterations=4, batch_size=4, base_width=8, t_max=8, seed=1,
                      condition_source="text")
    editor, _ = finetune(tiny_triplets[:8], tiny_bundle, cfg)
    return editor


def test_edit_with_text_deterministic(text_editor, tiny_triplets):
    q = tiny_triplets[0].input
    cfg = GuidanceConfig(s_edit=2.0, s_image=1.2, steps=4, seed=5)
    a = edit_with_text(q, tiny_triplets[0].instruction, text_editor, cfg)
    b = edit_with_text(q, tiny_triplets[0].instruction, text_editor, cfg)
    assert torch.equal(a, b)


def test_edit_with_text_requires_text_conditioning(trained_tiny_editor, tiny_triplets):
    with pytest.raises(ConfigError):
        edit_with_text(tiny_triplets[0].input, "anything", trained_tiny_editor,
                       GuidanceConfig(steps=2))


def test_empty_instruction_matches_zero_edit_scale(text_editor, tiny_triplets):
    """An empty instruction is the null condition: the edit-scale term
    cancels, so any s_edit gives the s_edit=0 trajectory."""
    q = tiny_triplets[0].input
    hi = edit_with_text(q, "", text_editor, GuidanceConfig(s_edit=7.0, s_image=1.3, steps=4, seed=2))
    lo = edit_with_text(q, "", text_editor, GuidanceConfig(s_edit=0.0, s_image=1.3, steps=4, seed=2))
    assert float((hi - lo).abs().max()) < 1e-6


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        GuidanceConfig(s_edit=-1.0)
    with pytest.raises(ConfigError):
        GuidanceConfig(steps=0)
