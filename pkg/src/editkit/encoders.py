"""Vision and text towers for edit-pair representation learning.

The paired visual tower consumes an (input, edited) image pair concatenated
along channels and emits an edit embedding: the full last-layer token matrix
plus a projected vector taken at the [CLS] position. A single-image tower
with identical architecture serves as the baseline encoder for CLIP-style
metrics and the conditioning ablations; the text tower encodes instructions
with a word-level tokenizer and projects from the end-sentinel position.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigError, DegenerateInput, ShapeMismatch
from .numcore import assert_finite

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"

BASELINE_MODES = ("edited_only", "sum", "channel_concat", "sequence_append")
PAIR_CONV_INIT_MODES = ("halved_duplicate", "zero_second_half", "random")


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    heads: int = 4
    d_model: int = 128
    d_proj: int = 64
    channels: int = 3
    vocab_size: int = 64
    max_tokens: int = 16
    pair_conv_init: str = "halved_duplicate"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.pair_conv_init not in PAIR_CONV_INIT_MODES:
            raise ConfigError(f"unknown pair_conv_init {self.pair_conv_init!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_image_tokens(self) -> int:
        # one [CLS] token plus one token per patch
        return 1 + self.n_patches


@dataclass
class EditEmbedding:
    """Edit representation: last-layer tokens plus the projected [CLS] vector."""

    hidden: torch.Tensor  # (n_tokens, d_model)
    projected: torch.Tensor  # (d_proj,)


@dataclass
class ImageEmbedding:
    hidden: torch.Tensor  # (n_tokens, d_model)
    projected: torch.Tensor  # (d_proj,)


@dataclass
class TextEmbedding:
    hidden: torch.Tensor  # (n_tokens, d_model)
    projected: torch.Tensor  # (d_proj,)


@dataclass
class Instruction:
    text: str
    tokens: List[int]


_WORD_RE = re.compile(r"[a-z0-9]+")


class Tokenizer:
    """Deterministic word-level tokenizer with begin/end sentinels.

    Normalization lowercases and strips punctuation; detokenize reproduces
    the normalized string for in-vocabulary text.
    """

    def __init__(self, words: Sequence[str], max_tokens: int = 16):
        specials = [PAD, BOS, EOS, UNK]
        dedup = sorted(set(words) - set(specials))
        self.vocab: List[str] = specials + dedup
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_tokens = max_tokens

    @classmethod
    def from_texts(cls, texts: Sequence[str], max_tokens: int = 16) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(cls.normalize(t).split())
        return cls(sorted(words), max_tokens=max_tokens)

    @staticmethod
    def normalize(text: str) -> str:
        return " ".join(_WORD_RE.findall(text.lower()))

    def tokenize(self, text: str) -> List[int]:
        words = self.normalize(text).split()
        if not words:
            raise DegenerateInput("empty instruction")
        unk = self.index[UNK]
        ids = [self.index[BOS]] + [self.index.get(w, unk) for w in words]
        ids = ids[: self.max_tokens - 1] + [self.index[EOS]]
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        keep = [self.vocab[i] for i in ids if self.vocab[i] not in (PAD, BOS, EOS)]
        return " ".join(keep)

    def instruction(self, text: str) -> Instruction:
        return Instruction(text=text, tokens=self.tokenize(text))

    def __len__(self) -> int:
        return len(self.vocab)


class Block(nn.Module):
    """Pre-norm transformer block with plain scaled dot-product attention."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.to_q = nn.Linear(d_model, d_model)
        # a key bias shifts every attention row by a constant, so it is
        # unidentifiable (zero gradient); leave it out
        self.to_k = nn.Linear(d_model, d_model, bias=False)
        self.to_v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x, key_mask=None, need_attn=False):
        B, N, D = x.shape
        h = self.ln1(x)
        q, k, v = self.to_q(h), self.to_k(h), self.to_v(h)
        q = q.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            # key_mask: (B, N) True where the key is padding
            scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, N, D)
        x = x + self.out(ctx)
        x = x + self.mlp(self.ln2(x))
        return (x, attn) if need_attn else (x, None)


class VisionTower(nn.Module):
    def __init__(self, cfg: EncoderConfig, in_channels: int):
        super().__init__()
        if in_channels not in (cfg.channels, 2 * cfg.channels):
            raise ConfigError(f"in_channels must be C or 2C, got {in_channels}")
        self.cfg = cfg
        self.in_channels = in_channels
        self.patch = nn.Conv2d(in_channels, cfg.d_model, cfg.patch_size, stride=cfg.patch_size)
        self.cls = nn.Parameter(torch.randn(1, 1, cfg.d_model) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, cfg.n_image_tokens, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.heads) for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_proj, bias=False)

    def _check(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(images.shape)}"
            )
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ShapeMismatch(
                f"tower built for {self.cfg.image_size}px inputs, got {tuple(images.shape[2:])}"
            )

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C_in, H, W) -> (B, n_patches, d_model) patch tokens."""
        self._check(images)
        return self.patch(images).flatten(2).transpose(1, 2)

    def forward(self, images: torch.Tensor, need_attn: bool = False):
        """Returns (hidden, projected[, last_attn]).

        hidden: (B, 1 + P, d_model) last-layer tokens after the final norm;
        projected: (B, d_proj) from the [CLS] position.
        """
        tokens = self.patch_embed(images)
        B = tokens.shape[0]
        x = torch.cat([self.cls.expand(B, -1, -1), tokens], dim=1) + self.pos
        attn = None
        for i, block in enumerate(self.blocks):
            want = need_attn and i == len(self.blocks) - 1
            x, a = block(x, need_attn=want)
            if a is not None:
                attn = a
        hidden = self.ln_f(x)
        projected = self.proj(hidden[:, 0])
        if need_attn:
            return hidden, projected, attn
        return hidden, projected


class TextTower(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Parameter(torch.randn(1, cfg.max_tokens, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.heads) for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_proj, bias=False)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        """ids: (B, L) padded with 0; lengths: (B,) true lengths.

        Returns hidden (B, L, d_model) and projected (B, d_proj) taken at
        each sequence's end-sentinel position.
        """
        B, L = ids.shape
        if L > self.cfg.max_tokens:
            raise ShapeMismatch(f"sequence length {L} exceeds max_tokens {self.cfg.max_tokens}")
        x = self.tok(ids) + self.pos[:, :L]
        positions = torch.arange(L, device=ids.device)
        pad_mask = positions[None, :] >= lengths[:, None]
        for block in self.blocks:
            x, _ = block(x, key_mask=pad_mask)
        hidden = self.ln_f(x)
        projected = self.proj(hidden[torch.arange(B), lengths - 1])
        return hidden, projected


class EncoderBundle(nn.Module):
    """Single-image tower, paired tower, text tower, and the contrastive
    temperature, bundled for joint checkpointing."""

    def __init__(self, cfg: EncoderConfig, tokenizer: Tokenizer):
        super().__init__()
        if cfg.vocab_size != len(tokenizer):
            raise ConfigError(
                f"config vocab_size {cfg.vocab_size} != tokenizer vocab {len(tokenizer)}"
            )
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.image = VisionTower(cfg, cfg.channels)
        self.pair = VisionTower(cfg, 2 * cfg.channels)
        self.text = TextTower(cfg)
        # log of the inverse temperature, CLIP-style init at 1/0.07
        self.log_inv_temp = nn.Parameter(torch.tensor(math.log(1.0 / 0.07)))

    def temperature(self) -> torch.Tensor:
        return (1.0 / self.log_inv_temp.exp()).clamp(1e-3, 100.0)


def build_bundle(cfg: EncoderConfig, tokenizer: Tokenizer, seed: int = 0) -> EncoderBundle:
    torch.manual_seed(seed)
    return EncoderBundle(cfg, tokenizer)


def _pair_batch(input_img: torch.Tensor, edited_img: torch.Tensor) -> torch.Tensor:
    if input_img.shape != edited_img.shape:
        raise ShapeMismatch(
            f"pair shape mismatch: {tuple(input_img.shape)} vs {tuple(edited_img.shape)}"
        )
    return torch.cat([input_img, edited_img], dim=0).unsqueeze(0)


@torch.no_grad()
def embed_pair(input_img: torch.Tensor, edited_img: torch.Tensor, bundle: EncoderBundle) -> EditEmbedding:
    """Encode an (input, edited) image pair into an edit embedding."""
    hidden, projected = bundle.pair(_pair_batch(input_img, edited_img))
    assert_finite(hidden, "edit embedding")
    return EditEmbedding(hidden=hidden[0], projected=projected[0])


@torch.no_grad()
def embed_image(img: torch.Tensor, bundle: EncoderBundle) -> ImageEmbedding:
    """Single-image encoding with the baseline tower."""
    hidden, projected = bundle.image(img.unsqueeze(0))
    assert_finite(hidden, "image embedding")
    return ImageEmbedding(hidden=hidden[0], projected=projected[0])


@torch.no_grad()
def embed_text(instr: Instruction | str, bundle: EncoderBundle) -> TextEmbedding:
    if isinstance(instr, str):
        instr = bundle.tokenizer.instruction(instr)
    ids = torch.tensor([instr.tokens], dtype=torch.long)
    lengths = torch.tensor([len(instr.tokens)], dtype=torch.long)
    hidden, projected = bundle.text(ids, lengths)
    assert_finite(hidden, "text embedding")
    return TextEmbedding(hidden=hidden[0], projected=projected[0])


def expand_first_conv(single: VisionTower, mode: str = "halved_duplicate") -> dict:
    """Build a paired-tower state dict from single-tower weights.

    The patch-embedding kernel is widened from C to 2C input channels. In
    ``halved_duplicate`` mode each source channel is copied into both halves
    at half weight, so the paired tower reproduces the single tower exactly
    on a duplicated image; ``zero_second_half`` keeps the original kernel on
    the first half; ``random`` leaves the target kernel as initialized.
    """
    if mode not in PAIR_CONV_INIT_MODES:
        raise ConfigError(f"unknown pair_conv_init {mode!r}")
    state = {k: v.clone() for k, v in single.state_dict().items()}
    kernel = state.pop("patch.weight")
    if mode == "halved_duplicate":
        state["patch.weight"] = torch.cat([kernel, kernel], dim=1) * 0.5
    elif mode == "zero_second_half":
        state["patch.weight"] = torch.cat([kernel, torch.zeros_like(kernel)], dim=1)
    else:
        gen = torch.Generator().manual_seed(0)
        state["patch.weight"] = torch.randn(
            kernel.shape[0], 2 * kernel.shape[1], *kernel.shape[2:], generator=gen
        ) * kernel.std()
    return state


@torch.no_grad()
def cls_attention_map(
    input_img: torch.Tensor, edited_img: torch.Tensor, bundle: EncoderBundle
) -> np.ndarray:
    """Attention of the [CLS] query in the last head of the final layer,
    restricted to patch keys and renormalized to sum to 1.

    Returns a (grid, grid) float64 array.
    """
    _, _, attn = bundle.pair(_pair_batch(input_img, edited_img), need_attn=True)
    row = attn[0, -1, 0, 1:]  # last head, CLS query, patch keys
    row = row / row.sum()
    g = bundle.cfg.grid
    return row.reshape(g, g).to(torch.float64).cpu().numpy()


@torch.no_grad()
def baseline_condition(
    mode: str, input_img: torch.Tensor, edited_img: torch.Tensor, bundle: EncoderBundle
) -> torch.Tensor:
    """Conditioning token matrices built from the single-image tower only.

    Shapes: edited_only/sum -> (d_e, d_model); channel_concat ->
    (d_e, 2 d_model); sequence_append -> (2 d_e, d_model).
    """
    if mode not in BASELINE_MODES:
        raise ConfigError(f"unknown baseline conditioning mode {mode!r}")
    if input_img.shape != edited_img.shape:
        raise ShapeMismatch("baseline_condition pair shape mismatch")
    h_e, _ = bundle.image(edited_img.unsqueeze(0))
    if mode == "edited_only":
        return h_e[0]
    h_i, _ = bundle.image(input_img.unsqueeze(0))
    if mode == "sum":
        return h_i[0] + h_e[0]
    if mode == "channel_concat":
        return torch.cat([h_i[0], h_e[0]], dim=-1)
    return torch.cat([h_i[0], h_e[0]], dim=0)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def encoder_meta(bundle: EncoderBundle) -> dict:
    cfg = bundle.cfg
    return {
        "kind": "encoders",
        "config": {
            "image_size": cfg.image_size,
            "patch_size": cfg.patch_size,
            "depth": cfg.depth,
            "heads": cfg.heads,
            "d_model": cfg.d_model,
            "d_proj": cfg.d_proj,
            "channels": cfg.channels,
            "vocab_size": cfg.vocab_size,
            "max_tokens": cfg.max_tokens,
            "pair_conv_init": cfg.pair_conv_init,
        },
        "vocab": bundle.tokenizer.vocab,
    }


def save_bundle(path, bundle: EncoderBundle, extra_meta: dict | None = None) -> None:
    meta = encoder_meta(bundle)
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save_tensors(path, dict(bundle.state_dict()), meta)


def bundle_from_meta(meta: dict) -> EncoderBundle:
    cfg = EncoderConfig(**meta["config"])
    vocab = meta["vocab"]
    tokenizer = Tokenizer(vocab[4:], max_tokens=cfg.max_tokens)
    if tokenizer.vocab != vocab:
        raise ConfigError("checkpoint vocabulary is not in canonical order")
    return EncoderBundle(cfg, tokenizer)


def load_bundle(path) -> EncoderBundle:
    tensors, meta = checkpoint.load_tensors(path)
    bundle = bundle_from_meta(meta)
    bundle.load_state_dict(tensors)
    return bundle
