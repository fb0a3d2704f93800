"""Edit-quality metrics.

Embedding metrics (pair-to-text, pair-to-pair, CLIP score, directional
similarity, visual direction similarity) all operate on projected
embeddings. The perceptual distance is a fixed-seed random-feature conv
pyramid standing in for a pretrained perceptual network: it keeps the
identity/symmetry/nonnegativity/monotonicity contract that matters to the
training loss and the report, without external weights.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EncoderBundle, embed_image, embed_pair, embed_text
from .errors import DegenerateInput, ShapeMismatch

METRIC_COLUMNS = ("e2t", "e2e", "clip_score", "clip_dir", "s_visual", "lpips")

_EPS = 1e-12


def cosine(u: torch.Tensor, v: torch.Tensor) -> float:
    if u.shape != v.shape:
        raise ShapeMismatch(f"cosine shape mismatch {tuple(u.shape)} vs {tuple(v.shape)}")
    nu, nv = float(u.norm()), float(v.norm())
    if nu < _EPS or nv < _EPS:
        raise DegenerateInput("cosine of a zero vector")
    return float(torch.dot(u.flatten().double(), v.flatten().double()) / (nu * nv))


def e2t(input_img, edited_img, instruction: str, bundle: EncoderBundle) -> float:
    """Cosine between the pair's edit embedding and the instruction embedding."""
    pair = embed_pair(input_img, edited_img, bundle)
    text = embed_text(instruction, bundle)
    return cosine(pair.projected, text.projected)


def e2e(input_img, edited_img, query_img, output_img, bundle: EncoderBundle) -> float:
    """Cosine between the edit embeddings of the reference and target pairs."""
    ref = embed_pair(input_img, edited_img, bundle)
    tgt = embed_pair(query_img, output_img, bundle)
    return cosine(ref.projected, tgt.projected)


def clip_score(output_img, caption: str, bundle: EncoderBundle) -> float:
    img = embed_image(output_img, bundle)
    text = embed_text(caption, bundle)
    return cosine(img.projected, text.projected)


def clip_directional(query_img, output_img, text_spec, bundle: EncoderBundle) -> float:
    """Directional similarity between the image change and the text change.

    ``text_spec`` is either a (query caption, output caption) pair or an
    instruction string. A zero image or caption difference is degenerate.
    """
    img_diff = embed_image(query_img, bundle).projected - embed_image(output_img, bundle).projected
    if float(img_diff.norm()) < _EPS:
        raise DegenerateInput("identical images give a zero direction")
    if isinstance(text_spec, str):
        text_vec = embed_text(text_spec, bundle).projected
    else:
        t_q, t_o = text_spec
        text_vec = embed_text(t_q, bundle).projected - embed_text(t_o, bundle).projected
        if float(text_vec.norm()) < _EPS:
            raise DegenerateInput("identical captions give a zero direction")
    return cosine(img_diff, text_vec)


def s_visual(input_img, edited_img, query_img, output_img, bundle: EncoderBundle) -> float:
    """Cosine between (query - output) and (input - edited) image embeddings."""
    q = embed_image(query_img, bundle).projected
    o = embed_image(output_img, bundle).projected
    i = embed_image(input_img, bundle).projected
    e = embed_image(edited_img, bundle).projected
    diff_target, diff_ref = q - o, i - e
    if float(diff_target.norm()) < _EPS or float(diff_ref.norm()) < _EPS:
        raise DegenerateInput("zero image difference in s_visual")
    return cosine(diff_target, diff_ref)


class PerceptualNet(nn.Module):
    """Fixed random three-stage conv pyramid with channel-unit-normalized
    features. Weights are seeded and frozen; the distance is differentiable
    with respect to its image inputs."""

    WIDTHS = (3, 16, 32, 64)

    def __init__(self, seed: int = 7):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        for cin, cout in zip(self.WIDTHS[:-1], self.WIDTHS[1:]):
            conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
            gain = math.sqrt(2.0 / (cin * 9))
            conv.weight.data = torch.randn(conv.weight.shape, generator=gen) * gain
            conv.bias.data = torch.randn(conv.bias.shape, generator=gen) * 0.01
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x * 2.0 - 1.0
        for i, conv in enumerate(self.convs):
            h = F.relu(conv(h))
            feats.append(h)
            if i < len(self.convs) - 1:
                h = F.avg_pool2d(h, 2)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Perceptual distance; accepts (C, H, W) or batched (B, C, H, W).

        Returns a scalar tensor (mean over the batch when batched).
        """
        if a.shape != b.shape:
            raise ShapeMismatch(f"perceptual shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.dim() == 3:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        total = torch.zeros((), dtype=a.dtype)
        for fa, fb in zip(self.features(a), self.features(b)):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-8)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-8)
            total = total + ((na - nb) ** 2).mean()
        return total


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, net: PerceptualNet) -> float:
    with torch.no_grad():
        return float(net(a, b))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation. Requires length >= 2 and nonzero variance."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 1 or xa.shape != ya.shape:
        raise ShapeMismatch(f"pearson needs two equal-length series, got {xa.shape}, {ya.shape}")
    if xa.size < 2:
        raise DegenerateInput("pearson needs at least 2 points")
    xd, yd = xa - xa.mean(), ya - ya.mean()
    vx, vy = float(xd @ xd), float(yd @ yd)
    if vx <= 0.0 or vy <= 0.0:
        raise DegenerateInput("pearson on a zero-variance series")
    return float(xd @ yd / math.sqrt(vx * vy))


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

AGGREGATE_ID = "__aggregate__"


@dataclass
class MetricReport:
    """Per-sample metric rows plus aggregate means.

    Each row carries ``id``, ``record_id``, ``seed``, one value (or None)
    per metric column, and an ``error`` string for failed rows. Rows whose
    editor failed outright have all metrics None; rows where only one
    metric was degenerate keep their other values.
    """

    rows: List[dict] = field(default_factory=list)

    def add_row(self, row_id: str, record_id: str, seed: int, values: Dict[str, float | None], error: str = "") -> None:
        row = {"id": row_id, "record_id": record_id, "seed": seed, "error": error}
        for col in METRIC_COLUMNS:
            row[col] = values.get(col)
        self.rows.append(row)

    def aggregates(self) -> Dict[str, float | None]:
        out: Dict[str, float | None] = {}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in self.rows if r[col] is not None]
            out[col] = (sum(vals) / len(vals)) if vals else None
        return out

    def valid_counts(self) -> Dict[str, int]:
        return {c: sum(1 for r in self.rows if r[c] is not None) for c in METRIC_COLUMNS}

    def failed_rows(self) -> int:
        """Rows that contribute to no aggregate at all (editor failures)."""
        return sum(1 for r in self.rows if all(r[c] is None for c in METRIC_COLUMNS))

    def column(self, name: str, ids: Sequence[str] | None = None) -> Tuple[List[str], List[float]]:
        """(row ids, values) for one metric, skipping missing values."""
        got_ids, vals = [], []
        wanted = set(ids) if ids is not None else None
        for r in self.rows:
            if r[name] is None:
                continue
            if wanted is not None and r["id"] not in wanted:
                continue
            got_ids.append(r["id"])
            vals.append(r[name])
        return got_ids, vals

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        agg = self.aggregates()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "record_id", "seed", *METRIC_COLUMNS, "error"])
            for r in self.rows:
                writer.writerow(
                    [r["id"], r["record_id"], r["seed"]]
                    + [_fmt(r[c]) for c in METRIC_COLUMNS]
                    + [r["error"]]
                )
            writer.writerow(
                [AGGREGATE_ID, "", ""]
                + [_fmt(agg[c]) for c in METRIC_COLUMNS]
                + [f"failed_rows={self.failed_rows()}"]
            )

    def to_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "rows": self.rows,
            "aggregates": self.aggregates(),
            "valid_counts": self.valid_counts(),
            "failed_rows": self.failed_rows(),
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        report = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for raw in reader:
                if raw["id"] == AGGREGATE_ID:
                    continue
                values = {c: (float(raw[c]) if raw[c] != "" else None) for c in METRIC_COLUMNS}
                report.add_row(raw["id"], raw["record_id"], int(raw["seed"]), values, raw["error"])
        return report


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))
