import math

import numpy as np
import pytest
import torch

from editkit import checkpoint, editdiffusion as ed, encoders
from editkit.editdiffusion import (
    ConditionProjector,
    IdentityCodec,
    TinyConvAE,
    TrainConfig,
    add_noise,
    apply_condition_dropout,
    build_editor,
    condition_project,
    finetune,
    finetune_step,
    load_editor,
    make_codec,
    make_schedule,
    mix,
    noise_loss,
    predict_x0,
    predict_x0_latent,
    prepare_triplets,
    save_editor,
    total_loss,
    train_codec,
)
from editkit.errors import ConfigError, DegenerateInput, NonFiniteValues, ShapeMismatch
from editkit.metrics import PerceptualNet


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def test_schedule_single_step():
    sch = make_schedule(1, 0.5, 0.5)
    assert sch.alpha_bar(1) == 0.5


def test_schedule_two_constant_betas():
    sch = make_schedule(2, 1e-4, 1e-4)
    assert abs(sch.alpha_bar(2) - (1.0 - 1e-4) ** 2) < 1e-15


@pytest.mark.parametrize("t_max,b0,b1", [(10, 1e-4, 2e-2), (50, 0.02, 0.32), (1000, 1e-4, 2e-2)])
def test_alpha_bar_strictly_decreasing(t_max, b0, b1):
    sch = make_schedule(t_max, b0, b1)
    assert (np.diff(sch.alpha_bars) < 0).all()
    assert abs(sch.alpha_bar(0) - 1.0) == 0.0


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        make_schedule(10, 0.0, 0.1)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.3, 0.2)
    with pytest.raises(ConfigError):
        make_schedule(0, 0.1, 0.2)


def test_schedule_table_consistency_enforced():
    betas = np.array([0.1, 0.2])
    with pytest.raises(ConfigError):
        ed.NoiseSchedule(betas=betas, alpha_bars=np.array([0.9, 0.5]))


# ---------------------------------------------------------------------------
# Forward process algebra
# ---------------------------------------------------------------------------


def test_mix_extremes():
    x0 = torch.randn(3, 4, 4, generator=torch.Generator().manual_seed(0))
    eps = torch.randn(3, 4, 4, generator=torch.Generator().manual_seed(1))
    assert torch.equal(mix(x0, eps, 1.0), x0)
    assert torch.equal(mix(x0, eps, 0.0), eps)


def test_mix_hand_value():
    x0 = torch.tensor(1.0)
    eps = torch.tensor(2.0)
    out = float(mix(x0, eps, 0.25))
    assert abs(out - 2.232050807568877) < 1e-6


def test_add_noise_range_check():
    sch = make_schedule(5, 0.1, 0.3)
    x = torch.zeros(2, 2)
    with pytest.raises(ConfigError):
        add_noise(x, x, 6, sch)


def test_predict_x0_round_trip_identity_codec():
    sch = make_schedule(20, 0.02, 0.3)
    gen = torch.Generator().manual_seed(2)
    x0 = torch.rand(3, 8, 8, generator=gen)
    eps = torch.randn(3, 8, 8, generator=gen)
    codec = IdentityCodec()
    for t in (1, 7, 20):
        x_t = add_noise(x0, eps, t, sch)
        rec = predict_x0(x_t, eps, t, sch, codec)
        assert float((rec - x0).abs().max()) < 1e-6


def test_predict_x0_zero_eps_hand_value():
    sch = make_schedule(1, 0.75, 0.75)  # alpha_bar(1) = 0.25
    latent = predict_x0_latent(torch.tensor(1.0), torch.tensor(0.0), 1, sch)
    assert abs(float(latent) - 2.0) < 1e-6


def test_predict_x0_alpha_one_returns_decoded_xt():
    sch = make_schedule(3, 0.1, 0.3)
    x_t = torch.rand(3, 4, 4)
    out = predict_x0(x_t, torch.randn(3, 4, 4) * 0.0, 0, sch, IdentityCodec())
    assert torch.equal(out, x_t)


def test_predict_x0_alpha_underflow_rejected():
    sch = make_schedule(80, 0.9, 0.99)
    assert sch.alpha_bar(80) < 1e-12
    with pytest.raises(DegenerateInput):
        predict_x0_latent(torch.ones(1), torch.ones(1), 80, sch)


def test_noised_population_reaches_unit_variance():
    """For unit-variance data, E[|x_t|^2 / n] approaches 1 as alpha_bar
    approaches 0 (schedule sanity)."""
    sch = make_schedule(50, 0.02, 0.32)
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn(64, 32, generator=gen)
    eps = torch.randn(64, 32, generator=gen)
    x_t = add_noise(x0, eps, 50, sch)
    assert abs(float((x_t ** 2).mean()) - 1.0) < 0.1


# ---------------------------------------------------------------------------
# Codecs
# ---------------------------------------------------------------------------


def test_identity_codec_exact():
    codec = make_codec("identity")
    x = torch.rand(3, 16, 16)
    assert torch.equal(codec.decode(codec.encode(x)), x)


def test_unknown_codec_rejected():
    with pytest.raises(ConfigError):
        make_codec("jpeg2000")


def test_tiny_conv_ae_reaches_25db(tiny_corpus):
    from editkit import bench

    images = [t.input for t in bench.load_triplets(tiny_corpus, split="train")]
    codec = TinyConvAE(seed=0)
    psnr = train_codec(codec, images, steps=500, lr=3e-3, seed=0)
    assert psnr > 25.0, f"codec PSNR {psnr:.1f} dB"


# ---------------------------------------------------------------------------
# Condition projector
# ---------------------------------------------------------------------------


def test_projector_zeros_map_to_zeros():
    proj = ConditionProjector(8, 8)
    with torch.no_grad():
        proj.linear.bias.zero_()
    out = condition_project(torch.zeros(3, 8), proj)
    assert torch.equal(out, torch.zeros(3, 8))


def test_projector_rows_normalized_at_init():
    torch.manual_seed(0)
    proj = ConditionProjector(32, 64)
    gen = torch.Generator().manual_seed(1)
    out = condition_project(torch.randn(5, 32, generator=gen), proj)
    mean = out.mean(dim=-1)
    var = out.var(dim=-1, unbiased=False)
    assert float(mean.abs().max()) < 1e-5
    assert float((var - 1.0).abs().max()) < 1e-4


def test_projector_width_mismatch():
    proj = ConditionProjector(8, 8)
    with pytest.raises(ShapeMismatch):
        condition_project(torch.zeros(3, 9), proj)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def test_noise_loss_oracle_is_zero():
    eps = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(0))
    assert float(noise_loss(eps, eps.clone())) == 0.0


def test_noise_loss_zero_prediction_near_one():
    gen = torch.Generator().manual_seed(1)
    eps = torch.randn(10, 1000, generator=gen)
    assert abs(float(noise_loss(eps, torch.zeros_like(eps))) - 1.0) < 0.1


def test_noise_loss_matches_hand_mse():
    gen = torch.Generator().manual_seed(2)
    eps = torch.randn(4, 4, generator=gen)
    pred = torch.randn(4, 4, generator=gen)
    by_hand = float(np.mean((eps.numpy() - pred.numpy()) ** 2))
    assert abs(float(noise_loss(eps, pred)) - by_hand) < 1e-6


def test_noise_loss_rejects_nonfinite():
    eps = torch.ones(2, 2)
    with pytest.raises(NonFiniteValues):
        noise_loss(eps, eps * float("inf"))


def _loss_inputs(seed=0, n=2, size=8):
    gen = torch.Generator().manual_seed(seed)
    return dict(
        x0=torch.rand(n, 3, size, size, generator=gen),
        c_img=torch.rand(n, 3, size, size, generator=gen),
        inputs=torch.rand(n, 3, size, size, generator=gen),
        hidden=torch.randn(n, 4, 8, generator=gen),
        eps=torch.randn(n, 3, size, size, generator=gen),
        t_idx=torch.tensor([1, 3][:n]),
    )


def _tiny_editor_parts(seed=0):
    torch.manual_seed(seed)
    dcfg = ed.DenoiserConfig(base_width=8, channel_mult=1, d_cond=8, t_dim=8)
    denoiser = ed.Denoiser(dcfg)
    projector = ConditionProjector(8, 8)
    schedule = make_schedule(5, 0.05, 0.4)
    return denoiser, projector, schedule


def test_total_loss_lambda2_zero_equals_noise_loss():
    denoiser, projector, schedule = _tiny_editor_parts()
    perc = PerceptualNet()
    b = _loss_inputs()
    cond = projector(b["hidden"])
    loss, parts = total_loss(
        b["x0"], b["c_img"], cond, b["inputs"], b["t_idx"], b["eps"],
        (denoiser, schedule, IdentityCodec()), perc, 1.0, 0.0,
    )
    assert parts["lpips_loss"] == 0.0
    assert abs(parts["total"] - parts["noise_loss"]) < 1e-9


def test_total_loss_oracle_eps_identical_images_zero_perceptual():
    """With lambda1=0, an oracle noise prediction, and edited == input, the
    perceptual term compares the input with itself and the loss vanishes."""
    denoiser, projector, schedule = _tiny_editor_parts()
    perc = PerceptualNet()
    b = _loss_inputs()

    class Oracle:
        def __call__(self, x_t, c, t, tok):
            return b["eps"]

    loss, parts = total_loss(
        b["inputs"], b["c_img"], projector(b["hidden"]), b["inputs"], b["t_idx"], b["eps"],
        (Oracle(), schedule, IdentityCodec()), perc, 0.0, 0.05,
    )
    assert abs(float(loss)) < 1e-8


def test_total_loss_default_weights_and_part_sum():
    cfg = TrainConfig()
    assert cfg.lambda1 == 1.0 and cfg.lambda2 == 0.05
    denoiser, projector, schedule = _tiny_editor_parts()
    perc = PerceptualNet()
    b = _loss_inputs()
    loss, parts = total_loss(
        b["x0"], b["c_img"], projector(b["hidden"]), b["inputs"], b["t_idx"], b["eps"],
        (denoiser, schedule, IdentityCodec()), perc, cfg.lambda1, cfg.lambda2,
    )
    assert abs(parts["total"] - (cfg.lambda1 * parts["noise_loss"] + cfg.lambda2 * parts["lpips_loss"])) < 1e-6


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda1=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(cond_dropout_p=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(condition_source="telepathy")


# ---------------------------------------------------------------------------
# Condition dropout
# ---------------------------------------------------------------------------


def test_dropout_p_zero_never_nulls():
    torch.manual_seed(0)
    projector = ConditionProjector(8, 8)
    gen = torch.Generator().manual_seed(0)
    tok = torch.randn(16, 4, 8, generator=gen)
    img = torch.randn(16, 3, 8, 8, generator=gen)
    dropped_tok = dropped_img = 0
    for _ in range(1000):
        _, _, dt, di = apply_condition_dropout(tok, img, projector, 0.0, gen)
        dropped_tok += dt
        dropped_img += di
    assert dropped_tok == 0 and dropped_img == 0


def test_dropout_applies_null_token_and_zero_image():
    torch.manual_seed(0)
    projector = ConditionProjector(8, 8)
    gen = torch.Generator().manual_seed(1)
    tok = torch.randn(64, 4, 8, generator=gen)
    img = torch.randn(64, 3, 4, 4, generator=gen)
    out_tok, out_img, dt, di = apply_condition_dropout(tok, img, projector, 0.5, gen)
    assert dt > 0 and di > 0
    null = projector.null_tokens(4)[0]
    tok_dropped = [i for i in range(64) if torch.equal(out_tok[i], null)]
    img_dropped = [i for i in range(64) if torch.equal(out_img[i], torch.zeros_like(img[i]))]
    assert len(tok_dropped) == dt
    assert len(img_dropped) == di


def test_dropout_rates_roughly_match():
    # each condition independently dropped with p plus a joint draw:
    # P(drop) = 1 - (1-p)^2 per condition
    torch.manual_seed(0)
    projector = ConditionProjector(4, 4)
    gen = torch.Generator().manual_seed(2)
    tok = torch.zeros(1, 2, 4)
    img = torch.ones(1, 3, 2, 2)
    p = 0.1
    n, hits = 4000, 0
    for _ in range(n):
        _, _, dt, _ = apply_condition_dropout(tok, img, projector, p, gen)
        hits += dt
    expected = 1 - (1 - p) ** 2
    assert abs(hits / n - expected) < 0.02


# ---------------------------------------------------------------------------
# Fine-tuning contracts
# ---------------------------------------------------------------------------


def _enc_sha(bundle):
    return checkpoint.sha256_of({k: v for k, v in bundle.state_dict().items()})


def test_finetune_keeps_encoders_frozen(tiny_bundle, tiny_triplets):
    cfg = TrainConfig(iterations=5, batch_size=4, base_width=8, t_max=5, seed=0)
    before = _enc_sha(tiny_bundle)
    editor, rows = finetune(tiny_triplets[:8], tiny_bundle, cfg)
    assert _enc_sha(tiny_bundle) == before
    assert len(rows) == 5
    assert editor.trained


def test_finetune_step_aborts_on_nonfinite(tiny_bundle, tiny_triplets):
    cfg = TrainConfig(iterations=1, batch_size=2, base_width=8, t_max=5, seed=0)
    editor = build_editor(tiny_bundle, cfg)
    with torch.no_grad():
        editor.denoiser.out.weight.fill_(float("nan"))
    prepared = prepare_triplets(tiny_triplets[:2], editor)
    perc = PerceptualNet()
    opt = torch.optim.Adam(editor.denoiser.parameters(), lr=1e-4)
    gen = torch.Generator().manual_seed(0)
    with pytest.raises(NonFiniteValues):
        finetune_step(prepared, editor, perc, opt, cfg, gen)


def test_logged_parts_sum_to_total(tiny_bundle, tiny_triplets):
    cfg = TrainConfig(iterations=3, batch_size=4, base_width=8, t_max=5, seed=1, lambda2=0.05)
    _, rows = finetune(tiny_triplets[:8], tiny_bundle, cfg)
    for r in rows:
        assert abs(r["total"] - (cfg.lambda1 * r["noise_loss"] + cfg.lambda2 * r["lpips_loss"])) < 1e-6


def test_editor_checkpoint_round_trip(tmp_path, tiny_bundle, tiny_triplets):
    cfg = TrainConfig(iterations=2, batch_size=2, base_width=8, t_max=5, seed=0)
    editor, _ = finetune(tiny_triplets[:4], tiny_bundle, cfg)
    path = tmp_path / "editor.eclp"
    save_editor(path, editor)
    loaded = load_editor(path)
    assert loaded.trained
    assert loaded.cond_source == editor.cond_source
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 64, 64, generator=gen)
    c = torch.rand(2, 3, 64, 64, generator=gen)
    tok = torch.randn(2, 4, editor.denoiser.cfg.d_cond, generator=gen)
    t_idx = torch.tensor([1, 3])
    with torch.no_grad():
        a = editor.denoiser(x, c, t_idx, tok)
        b = loaded.denoiser(x, c, t_idx, tok)
    assert torch.equal(a, b)
    assert np.array_equal(loaded.schedule.betas, editor.schedule.betas)


def test_condition_sources_produce_expected_widths(tiny_bundle, tiny_triplets):
    t = tiny_triplets[0]
    d = tiny_bundle.cfg.d_model
    for source, width in [
        ("edit", d), ("text", d), ("edited_only", d), ("sum", d),
        ("channel_concat", 2 * d), ("sequence_append", d),
    ]:
        cfg = TrainConfig(iterations=1, batch_size=2, base_width=8, t_max=5,
                          condition_source=source)
        editor = build_editor(tiny_bundle, cfg)
        hidden = editor.condition_hidden((t.input, t.edited, t.instruction))
        assert hidden.shape[-1] == width
        assert editor.projector.d_in == width
