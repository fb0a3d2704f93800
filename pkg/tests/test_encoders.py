import numpy as np
import pytest
import torch

from editkit import encoders
from editkit.encoders import (
    EncoderConfig,
    Tokenizer,
    VisionTower,
    baseline_condition,
    build_bundle,
    cls_attention_map,
    embed_pair,
    embed_text,
    expand_first_conv,
    load_bundle,
    save_bundle,
)
from editkit.errors import ConfigError, DegenerateInput, ShapeMismatch


def small_bundle(vocab_texts=("turn the red circle blue", "add a green square"), **kw):
    tok = Tokenizer.from_texts(list(vocab_texts))
    defaults = dict(image_size=32, patch_size=8, depth=2, heads=2, d_model=32, d_proj=16)
    defaults.update(kw)
    cfg = EncoderConfig(vocab_size=len(tok), **defaults)
    return build_bundle(cfg, tok, seed=1)


def rand_img(gen, size=32):
    return torch.rand(3, size, size, generator=gen)


def test_token_count_32px_patch8():
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(0)
    emb = embed_pair(rand_img(gen), rand_img(gen), bundle)
    assert emb.hidden.shape == (17, 32)  # 1 + 16 patches
    assert emb.projected.shape == (16,)


@pytest.mark.parametrize("size,patch", [(32, 8), (64, 8), (32, 16)])
def test_token_count_formula(size, patch):
    bundle = small_bundle(image_size=size, patch_size=patch)
    gen = torch.Generator().manual_seed(0)
    emb = embed_pair(rand_img(gen, size), rand_img(gen, size), bundle)
    assert emb.hidden.shape[0] == 1 + (size // patch) ** 2


def test_pair_shape_mismatch_rejected():
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(0)
    with pytest.raises(ShapeMismatch):
        embed_pair(rand_img(gen), torch.rand(3, 16, 16, generator=gen), bundle)


def test_projected_finite_nonzero():
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(2)
    emb = embed_pair(rand_img(gen), rand_img(gen), bundle)
    assert torch.isfinite(emb.hidden).all()
    assert float(emb.projected.norm()) > 0


def test_expand_first_conv_identity_on_duplicated_image():
    """Duplicate-and-halve initialization reproduces the single tower's patch
    embeddings when both channel halves see the same image. Verified at
    float64 (training dtype adds ~2e-6 of summation-order noise)."""
    bundle = small_bundle()
    bundle.pair.load_state_dict(expand_first_conv(bundle.image, "halved_duplicate"))
    b64 = bundle.double()
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for _ in range(50):
            img = rand_img(gen).double()
            single = b64.image.patch_embed(img.unsqueeze(0))
            paired = b64.pair.patch_embed(torch.cat([img, img]).unsqueeze(0))
            assert float((single - paired).abs().max()) < 1e-6


def test_expand_first_conv_ones_kernel_halves_patch_sums():
    # with an all-ones kernel, (input=0, edited=1) halves the response that a
    # single tower gives on an all-ones image
    bundle = small_bundle()
    with torch.no_grad():
        bundle.image.patch.weight.fill_(1.0)
        bundle.image.patch.bias.zero_()
    bundle.pair.load_state_dict(expand_first_conv(bundle.image, "halved_duplicate"))
    ones = torch.ones(3, 32, 32)
    single = bundle.image.patch_embed(ones.unsqueeze(0))
    paired = bundle.pair.patch_embed(torch.cat([torch.zeros(3, 32, 32), ones]).unsqueeze(0))
    assert torch.allclose(paired, 0.5 * single, atol=1e-5)


def test_expanded_encoder_distinguishes_pair_from_either_image():
    bundle = small_bundle()
    bundle.pair.load_state_dict(expand_first_conv(bundle.image, "halved_duplicate"))
    gen = torch.Generator().manual_seed(4)
    a, b = rand_img(gen), rand_img(gen)
    paired = embed_pair(a, b, bundle).projected
    on_a = embed_pair(a, a, bundle).projected
    on_b = embed_pair(b, b, bundle).projected
    assert float((paired - on_a).norm()) > 1e-3
    assert float((paired - on_b).norm()) > 1e-3


def test_expand_first_conv_zero_second_half():
    bundle = small_bundle(pair_conv_init="zero_second_half")
    bundle.pair.load_state_dict(expand_first_conv(bundle.image, "zero_second_half"))
    gen = torch.Generator().manual_seed(5)
    a = rand_img(gen)
    # second half ignored entirely
    p1 = bundle.pair.patch_embed(torch.cat([a, rand_img(gen)]).unsqueeze(0))
    p2 = bundle.pair.patch_embed(torch.cat([a, rand_img(gen)]).unsqueeze(0))
    assert torch.equal(p1, p2)


def test_embed_pair_is_order_sensitive():
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(6)
    a, b = rand_img(gen), rand_img(gen)
    ab = embed_pair(a, b, bundle).projected
    ba = embed_pair(b, a, bundle).projected
    assert float((ab - ba).norm()) > 1e-4


def test_embed_text_shape_and_determinism():
    bundle = small_bundle()
    t1 = embed_text("turn the red circle blue", bundle)
    t2 = embed_text("turn the red circle blue", bundle)
    assert t1.hidden.shape[1] == 32
    assert t1.hidden.shape[0] == len(bundle.tokenizer.tokenize("turn the red circle blue"))
    assert torch.equal(t1.projected, t2.projected)


def test_embed_text_empty_instruction_rejected():
    bundle = small_bundle()
    with pytest.raises(DegenerateInput):
        embed_text("  ", bundle)


def test_tokenizer_round_trip():
    tok = Tokenizer.from_texts(["Turn the RED circle blue!", "add a green square"])
    for s in ["turn the red circle blue", "add a green square", "Add a GREEN square."]:
        ids = tok.tokenize(s)
        assert tok.detokenize(ids) == tok.normalize(s)
        assert all(i < len(tok) for i in ids)


def test_tokenizer_unknown_word_maps_to_unk():
    tok = Tokenizer.from_texts(["add a square"])
    ids = tok.tokenize("add a zeppelin")
    assert tok.index[encoders.UNK] in ids


def test_tokenizer_respects_max_tokens():
    tok = Tokenizer.from_texts(["a b c d e f g h i j k l"], max_tokens=6)
    ids = tok.tokenize("a b c d e f g h i j k l")
    assert len(ids) == 6
    assert ids[-1] == tok.index[encoders.EOS]


def test_cls_attention_map_is_a_distribution():
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(7)
    heat = cls_attention_map(rand_img(gen), rand_img(gen), bundle)
    assert heat.shape == (4, 4)
    assert (heat >= 0).all()
    assert abs(heat.sum() - 1.0) < 1e-6


def test_cls_attention_near_uniform_on_uniform_images():
    bundle = small_bundle()
    half = torch.full((3, 32, 32), 0.5)
    heat = cls_attention_map(half, half, bundle)
    assert heat.max() / heat.min() < 2.0


def test_baseline_condition_shapes_and_identities():
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(8)
    a, b = rand_img(gen), rand_img(gen)
    d_e, d = 17, 32

    assert baseline_condition("edited_only", a, b, bundle).shape == (d_e, d)
    assert baseline_condition("sum", a, b, bundle).shape == (d_e, d)
    assert baseline_condition("channel_concat", a, b, bundle).shape == (d_e, 2 * d)
    assert baseline_condition("sequence_append", a, b, bundle).shape == (2 * d_e, d)

    # sum with identical pair doubles the single-image tokens
    same = baseline_condition("sum", a, a, bundle)
    single, _ = bundle.image(a.unsqueeze(0))
    assert torch.allclose(same, 2 * single[0], atol=1e-6)

    # edited_only ignores the input image entirely
    e1 = baseline_condition("edited_only", a, b, bundle)
    e2 = baseline_condition("edited_only", rand_img(gen), b, bundle)
    assert torch.equal(e1, e2)

    with pytest.raises(ConfigError):
        baseline_condition("teleport", a, b, bundle)


def test_config_invariants():
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=30, heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        VisionTower(EncoderConfig(), in_channels=4)


def test_bundle_checkpoint_round_trip(tmp_path):
    bundle = small_bundle()
    gen = torch.Generator().manual_seed(9)
    a, b = rand_img(gen), rand_img(gen)
    before = embed_pair(a, b, bundle).projected
    path = tmp_path / "enc.eclp"
    save_bundle(path, bundle)
    loaded = load_bundle(path)
    after = embed_pair(a, b, loaded).projected
    assert torch.equal(before, after)
    assert loaded.tokenizer.vocab == bundle.tokenizer.vocab
