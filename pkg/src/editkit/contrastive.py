"""Contrastive pre-training of the edit encoder.

Two stages. The caption stage jointly trains the single-image tower and the
text tower on (image, caption) pairs, standing in for an off-the-shelf
pretrained dual encoder. The edit stage then freezes the text tower (and the
single-image tower), expands the single tower's patch kernel into the paired
tower, and trains the paired tower against frozen instruction embeddings
with a split learning rate: one rate for the widened first convolution,
a base rate for everything else including the projection head and the
learnable temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F

from .encoders import EncoderBundle, EncoderConfig, Tokenizer, build_bundle, expand_first_conv
from .errors import ConfigError, DegenerateInput, NonFiniteValues, ShapeMismatch
from .numcore import assert_finite


@dataclass
class Triplet:
    input: torch.Tensor
    edited: torch.Tensor
    instruction: str
    edit_class: str


@dataclass
class CaptionExample:
    image: torch.Tensor
    caption: str


@dataclass
class PretrainConfig:
    batch_size: int = 16
    lr_first_conv: float = 2e-4
    lr_other: float = 2e-6
    temperature_init: float = 0.07
    epochs: int = 30
    seed: int = 0
    caption_epochs: int = 5
    caption_lr: float = 3e-4
    # stop the edit stage once held-out in-batch retrieval reaches this level
    early_stop_retrieval: float = 0.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        for name in ("lr_first_conv", "lr_other", "caption_lr", "temperature_init"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")


def info_nce_loss(
    edit_proj: torch.Tensor, text_proj: torch.Tensor, temperature: torch.Tensor | float
) -> torch.Tensor:
    """Symmetric InfoNCE over an N x N cosine-similarity matrix.

    Rows must already be L2-normalized; diagonal entries are the positives.
    """
    if edit_proj.shape != text_proj.shape:
        raise ShapeMismatch(
            f"projection shape mismatch {tuple(edit_proj.shape)} vs {tuple(text_proj.shape)}"
        )
    n = edit_proj.shape[0]
    if n < 2:
        raise DegenerateInput("contrastive batch needs at least 2 rows")
    for t, side in ((edit_proj, "edit"), (text_proj, "text")):
        if bool((t.norm(dim=-1) < 1e-12).any()):
            raise DegenerateInput(f"zero-norm row in {side} projections")
    logits = edit_proj @ text_proj.T / temperature
    targets = torch.arange(n, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def in_batch_top1(edit_proj: torch.Tensor, text_proj: torch.Tensor) -> float:
    """Fraction of rows whose best-matching text is their own."""
    sims = edit_proj @ text_proj.T
    hits = sims.argmax(dim=1) == torch.arange(sims.shape[0])
    return float(hits.to(torch.float64).mean())


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


def _distinct_class_batches(
    items: Sequence, key: Callable, batch_size: int, gen: torch.Generator
) -> List[List]:
    """Shuffled batches in which ``key(item)`` is pairwise distinct."""
    order = torch.randperm(len(items), generator=gen).tolist()
    batches: List[List] = []
    pool = [items[i] for i in order]
    while len(pool) >= batch_size:
        batch, seen, rest = [], set(), []
        for item in pool:
            k = key(item)
            if len(batch) < batch_size and k not in seen:
                batch.append(item)
                seen.add(k)
            else:
                rest.append(item)
        if len(batch) < batch_size:
            break
        batches.append(batch)
        pool = rest
    return batches


def _text_batch(
    texts: Sequence[str], tokenizer: Tokenizer
) -> Tuple[torch.Tensor, torch.Tensor]:
    token_lists = [tokenizer.tokenize(t) for t in texts]
    lengths = torch.tensor([len(t) for t in token_lists], dtype=torch.long)
    width = int(lengths.max())
    ids = torch.zeros(len(texts), width, dtype=torch.long)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    return ids, lengths


def encode_texts(texts: Sequence[str], bundle: EncoderBundle) -> torch.Tensor:
    """Projected text embeddings, one row per string (no gradient)."""
    ids, lengths = _text_batch(texts, bundle.tokenizer)
    with torch.no_grad():
        _, proj = bundle.text(ids, lengths)
    return proj


def make_edit_optimizer(bundle: EncoderBundle, cfg: PretrainConfig) -> torch.optim.Adam:
    first_conv = list(bundle.pair.patch.parameters())
    first_ids = {id(p) for p in first_conv}
    base = [p for p in bundle.pair.parameters() if id(p) not in first_ids]
    base.append(bundle.log_inv_temp)
    return torch.optim.Adam(
        [
            {"params": first_conv, "lr": cfg.lr_first_conv},
            {"params": base, "lr": cfg.lr_other},
        ],
        betas=(0.9, 0.999),
    )


def pretrain_step(
    batch: Sequence[Triplet],
    bundle: EncoderBundle,
    optimizer: torch.optim.Optimizer,
) -> Tuple[float, float]:
    """One gradient step of the edit stage. Returns (loss, in-batch top-1).

    The text tower is consulted without gradients; a non-finite loss aborts
    the step before any parameter is touched.
    """
    instructions = [t.instruction for t in batch]
    if len(set(instructions)) != len(instructions):
        raise DegenerateInput("instructions within a batch must be pairwise distinct")
    pairs = torch.stack([torch.cat([t.input, t.edited], dim=0) for t in batch])
    _, edit_proj = bundle.pair(pairs)
    text_proj = encode_texts(instructions, bundle)
    edit_n, text_n = _normalize(edit_proj), _normalize(text_proj)
    loss = info_nce_loss(edit_n, text_n, bundle.temperature())
    if not torch.isfinite(loss):
        raise NonFiniteValues("non-finite contrastive loss; step aborted")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach()), in_batch_top1(edit_n.detach(), text_n)


@torch.no_grad()
def eval_retrieval(
    triplets: Sequence[Triplet], bundle: EncoderBundle, batch_size: int, seed: int = 0
) -> float:
    """Average in-batch top-1 retrieval over distinct-instruction batches."""
    gen = torch.Generator().manual_seed(seed)
    batches = _distinct_class_batches(triplets, lambda t: t.instruction, batch_size, gen)
    if not batches:
        raise DegenerateInput("not enough triplets for one evaluation batch")
    scores = []
    for batch in batches:
        pairs = torch.stack([torch.cat([t.input, t.edited], dim=0) for t in batch])
        _, edit_proj = bundle.pair(pairs)
        text_proj = encode_texts([t.instruction for t in batch], bundle)
        scores.append(in_batch_top1(_normalize(edit_proj), _normalize(text_proj)))
    return float(sum(scores) / len(scores))


def caption_pretrain(
    examples: Sequence[CaptionExample], bundle: EncoderBundle, cfg: PretrainConfig
) -> List[dict]:
    """Stage one: joint single-image/text tower training on caption pairs."""
    if len(examples) < cfg.batch_size:
        raise DegenerateInput("dataset smaller than batch_size")
    params = list(bundle.image.parameters()) + list(bundle.text.parameters())
    params.append(bundle.log_inv_temp)
    optimizer = torch.optim.Adam(params, lr=cfg.caption_lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)
    rows: List[dict] = []
    step = 0
    for epoch in range(cfg.caption_epochs):
        for batch in _distinct_class_batches(examples, lambda e: e.caption, cfg.batch_size, gen):
            images = torch.stack([e.image for e in batch])
            _, img_proj = bundle.image(images)
            ids, lengths = _text_batch([e.caption for e in batch], bundle.tokenizer)
            _, text_proj = bundle.text(ids, lengths)
            img_n, text_n = _normalize(img_proj), _normalize(text_proj)
            loss = info_nce_loss(img_n, text_n, bundle.temperature())
            if not torch.isfinite(loss):
                raise NonFiniteValues("non-finite caption loss; step aborted")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            rows.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "loss": float(loss.detach()),
                    "retrieval_top1": in_batch_top1(img_n.detach(), text_n.detach()),
                }
            )
    return rows


def edit_pretrain(
    triplets: Sequence[Triplet],
    bundle: EncoderBundle,
    cfg: PretrainConfig,
    holdout: Sequence[Triplet] | None = None,
) -> List[dict]:
    """Stage two: train the paired tower against the frozen text tower.

    The paired tower is initialized from the single tower with the widened
    first convolution; text and single-image towers do not move.
    """
    if len(triplets) < cfg.batch_size:
        raise DegenerateInput("dataset smaller than batch_size")
    bundle.pair.load_state_dict(expand_first_conv(bundle.image, bundle.cfg.pair_conv_init))
    bundle.text.requires_grad_(False)
    bundle.image.requires_grad_(False)
    bundle.log_inv_temp.data = torch.tensor(math.log(1.0 / cfg.temperature_init))
    optimizer = make_edit_optimizer(bundle, cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rows: List[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for batch in _distinct_class_batches(
            triplets, lambda t: t.instruction, cfg.batch_size, gen
        ):
            loss, top1 = pretrain_step(batch, bundle, optimizer)
            step += 1
            rows.append({"epoch": epoch, "step": step, "loss": loss, "retrieval_top1": top1})
        if cfg.early_stop_retrieval > 0 and holdout:
            if eval_retrieval(holdout, bundle, cfg.batch_size, seed=cfg.seed) >= cfg.early_stop_retrieval:
                break
    return rows


def pretrain(
    triplets: Sequence[Triplet],
    captions: Sequence[CaptionExample],
    model_cfg: EncoderConfig,
    cfg: PretrainConfig,
    holdout: Sequence[Triplet] | None = None,
) -> Tuple[EncoderBundle, List[dict], List[dict]]:
    """Full pipeline: build towers, run both stages, return the bundle and
    the per-step loss curves (caption stage, edit stage)."""
    texts = [t.instruction for t in triplets] + [c.caption for c in captions]
    if holdout:
        texts += [t.instruction for t in holdout]
    tokenizer = Tokenizer.from_texts(texts, max_tokens=model_cfg.max_tokens)
    model_cfg.vocab_size = len(tokenizer)
    bundle = build_bundle(model_cfg, tokenizer, seed=cfg.seed)
    bundle.log_inv_temp.data = torch.tensor(math.log(1.0 / cfg.temperature_init))
    caption_rows = caption_pretrain(captions, bundle, cfg) if captions else []
    edit_rows = edit_pretrain(triplets, bundle, cfg, holdout=holdout)
    return bundle, caption_rows, edit_rows
