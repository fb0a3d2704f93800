"""Synthetic corpus, dataset manifest, exemplar/query pairing, and the
evaluation harness.

The generator renders colored geometric scenes over textured backgrounds
and applies parameterized edits from five families: recolor an object, add
an object, a global hue/saturation/brightness shift, a texture overlay, and
compounds of a recolor with an add. Every class carries a templated
instruction; generation is fully deterministic from the seed. Benchmarking
pairs each class's train records (exemplars) with its test records
(queries) and scores every editor output with the full metric set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import pngio
from .contrastive import CaptionExample, Triplet
from .encoders import EncoderBundle
from .errors import ConfigError, DegenerateInput, EditkitError
from .metrics import (
    METRIC_COLUMNS,
    MetricReport,
    PerceptualNet,
    clip_directional,
    clip_score,
    e2e,
    e2t,
    pearson,
    perceptual_distance,
    s_visual,
)

SCHEMA_VERSION = 1

OBJECT_COLORS = {
    "red": (0.86, 0.12, 0.10),
    "green": (0.12, 0.72, 0.16),
    "blue": (0.16, 0.30, 0.88),
    "yellow": (0.92, 0.86, 0.12),
    "purple": (0.58, 0.16, 0.74),
    "orange": (0.95, 0.55, 0.08),
    "cyan": (0.08, 0.76, 0.80),
    "pink": (0.95, 0.45, 0.66),
}
BACKGROUND_COLORS = {
    "navy": (0.10, 0.12, 0.28),
    "olive": (0.24, 0.26, 0.10),
    "teal": (0.08, 0.26, 0.26),
    "slate": (0.22, 0.24, 0.28),
    "maroon": (0.28, 0.10, 0.12),
    "forest": (0.10, 0.24, 0.12),
}
SHAPE_KINDS = ("circle", "square", "triangle")
BG_PATTERNS = ("plain", "stripes_h", "stripes_v", "checker")
GLOBAL_OPS = ("warm", "cool", "bright", "dark", "desat", "satur")
TEXTURE_PATTERNS = ("stripes", "dots", "grid")

GLOBAL_INSTRUCTIONS = {
    "warm": "make the image warmer",
    "cool": "make the image cooler",
    "bright": "brighten the image",
    "dark": "darken the image",
    "desat": "wash out the colors",
    "satur": "boost the colors",
}
GLOBAL_CAPTION_SUFFIX = {
    "warm": "with warm colors",
    "cool": "with cool colors",
    "bright": "brightly lit",
    "dark": "dimly lit",
    "desat": "with washed out colors",
    "satur": "with vivid colors",
}


# ---------------------------------------------------------------------------
# Scene model and rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: float
    cy: float
    size: float  # radius as a fraction of image size


@dataclass(frozen=True)
class Scene:
    pattern: str
    bg_color: str
    bg_color2: str
    shapes: Tuple[Shape, ...]


def _shape_mask(shape: Shape, size: int) -> np.ndarray:
    py, px = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy, r = shape.cx * size, shape.cy * size, shape.size * size
    if shape.kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape.kind == "square":
        return np.maximum(np.abs(px - cx), np.abs(py - cy)) <= r
    if shape.kind == "triangle":
        # apex up: width grows linearly from the apex to the base
        rel = (py - (cy - r)) / (2.0 * r)
        return (rel >= 0) & (rel <= 1) & (np.abs(px - cx) <= rel * r)
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def _background(scene: Scene, size: int) -> np.ndarray:
    c1 = np.array(BACKGROUND_COLORS[scene.bg_color])
    c2 = np.array(BACKGROUND_COLORS[scene.bg_color2])
    py, px = np.mgrid[0:size, 0:size]
    if scene.pattern == "plain":
        sel = np.zeros((size, size), dtype=bool)
    elif scene.pattern == "stripes_h":
        sel = (py // 6) % 2 == 1
    elif scene.pattern == "stripes_v":
        sel = (px // 6) % 2 == 1
    elif scene.pattern == "checker":
        sel = ((px // 8) + (py // 8)) % 2 == 1
    else:
        raise ConfigError(f"unknown background pattern {scene.pattern!r}")
    img = np.where(sel[..., None], c2[None, None], c1[None, None])
    return img


def render_scene(scene: Scene, size: int) -> np.ndarray:
    """Render to an HWC float64 array in [0, 1]."""
    img = _background(scene, size)
    for shape in scene.shapes:
        mask = _shape_mask(shape, size)
        img[mask] = np.array(OBJECT_COLORS[shape.color])
    return np.clip(img, 0.0, 1.0)


def apply_global_op(img: np.ndarray, op: str) -> np.ndarray:
    out = img.copy()
    if op == "warm":
        out[..., 0] = out[..., 0] * 1.2 + 0.08
        out[..., 2] = out[..., 2] * 0.8
    elif op == "cool":
        out[..., 0] = out[..., 0] * 0.8
        out[..., 2] = out[..., 2] * 1.2 + 0.08
    elif op == "bright":
        out = out * 0.7 + 0.3
    elif op == "dark":
        out = out * 0.55
    elif op == "desat":
        gray = out.mean(axis=-1, keepdims=True)
        out = out + 0.65 * (gray - out)
    elif op == "satur":
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + 1.8 * (out - gray)
    else:
        raise ConfigError(f"unknown global op {op!r}")
    return np.clip(out, 0.0, 1.0)


def apply_texture(img: np.ndarray, pattern: str) -> np.ndarray:
    size = img.shape[0]
    py, px = np.mgrid[0:size, 0:size]
    if pattern == "stripes":
        sel = ((px + py) // 5) % 2 == 0
        overlay, alpha = np.ones(3), 0.40
    elif pattern == "dots":
        sel = (px % 8 - 4) ** 2 + (py % 8 - 4) ** 2 < 4
        overlay, alpha = np.zeros(3), 0.55
    elif pattern == "grid":
        sel = (px % 8 < 1) | (py % 8 < 1)
        overlay, alpha = np.ones(3), 0.50
    else:
        raise ConfigError(f"unknown texture pattern {pattern!r}")
    out = img.copy()
    out[sel] = (1 - alpha) * out[sel] + alpha * overlay[None]
    return np.clip(out, 0.0, 1.0)


def caption_of(scene: Scene, suffix: str = "") -> str:
    parts = [f"a {s.color} {s.kind}" for s in scene.shapes]
    listing = " and ".join(parts) if parts else "an empty scene"
    pattern_word = {
        "plain": "plain",
        "stripes_h": "striped",
        "stripes_v": "striped",
        "checker": "checkered",
    }[scene.pattern]
    cap = f"{listing} on a {pattern_word} {scene.bg_color} background"
    return f"{cap} {suffix}".strip()


# ---------------------------------------------------------------------------
# Edit classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditClass:
    class_id: str
    family: str  # recolor | add | global | texture | compound
    params: tuple

    @property
    def instruction(self) -> str:
        return _instruction_of(self.family, self.params)


def _instruction_of(family: str, params: tuple) -> str:
    if family == "recolor":
        kind, src, dst = params
        return f"turn the {src} {kind} {dst}"
    if family == "add":
        kind, color = params
        return f"add a {color} {kind}"
    if family == "global":
        return GLOBAL_INSTRUCTIONS[params[0]]
    if family == "texture":
        return f"overlay a {params[0]} pattern"
    if family == "compound":
        first, second = params
        return f"{_instruction_of(first[0], first[1])} and {_instruction_of(second[0], second[1])}"
    raise ConfigError(f"unknown edit family {family!r}")


def build_edit_classes(n_classes: int, rng: np.random.Generator) -> List[EditClass]:
    """Deterministic catalog of pairwise-distinct edit classes."""
    colors = list(OBJECT_COLORS)
    recolor_pool = [
        ("recolor", (kind, src, dst))
        for kind in SHAPE_KINDS
        for src in colors
        for dst in colors
        if src != dst
    ]
    add_pool = [("add", (kind, color)) for kind in SHAPE_KINDS for color in colors]
    global_pool = [("global", (op,)) for op in GLOBAL_OPS]
    texture_pool = [("texture", (p,)) for p in TEXTURE_PATTERNS]
    for pool in (recolor_pool, add_pool):
        rng.shuffle(pool)

    quota = {
        "recolor": max(1, int(round(n_classes * 0.40))),
        "add": max(1, int(round(n_classes * 0.25))),
        "global": min(len(global_pool), max(1, int(round(n_classes * 0.10)))),
        "texture": min(len(texture_pool), max(1, int(round(n_classes * 0.05)))),
    }
    picked: List[tuple] = []
    picked += recolor_pool[: quota["recolor"]]
    picked += add_pool[: quota["add"]]
    picked += global_pool[: quota["global"]]
    picked += texture_pool[: quota["texture"]]
    # compounds (recolor + add) fill the remainder; constituents stay disjoint
    n_compound = n_classes - len(picked)
    used_adds = set(add_pool[: quota["add"]])
    spare_adds = [a for a in add_pool if a not in used_adds] or add_pool
    for i in range(max(0, n_compound)):
        rec = recolor_pool[(quota["recolor"] + i) % len(recolor_pool)]
        add = spare_adds[i % len(spare_adds)]
        picked.append(("compound", (rec, add)))
    picked = picked[:n_classes]
    if len(picked) < n_classes:
        raise ConfigError(f"cannot build {n_classes} distinct edit classes")

    classes = []
    for family, params in picked:
        slug = _instruction_of(family, params).replace(" ", "_")
        classes.append(EditClass(class_id=f"{family}.{slug}", family=family, params=params))
    if len({c.instruction for c in classes}) != len(classes):
        raise ConfigError("edit class instructions collide")
    return classes


def _recolor_scene(scene: Scene, kind: str, src: str, dst: str) -> Scene:
    shapes = []
    hit = False
    for s in scene.shapes:
        if not hit and s.kind == kind and s.color == src:
            shapes.append(replace(s, color=dst))
            hit = True
        else:
            shapes.append(s)
    if not hit:
        raise DegenerateInput(f"scene lacks a {src} {kind} to recolor")
    return replace(scene, shapes=tuple(shapes))


def _free_spot(
    scene: Scene, size_frac: float, rng: np.random.Generator, margin: float = 0.04
) -> Tuple[float, float]:
    for _ in range(200):
        cx = float(rng.uniform(0.15, 0.85))
        cy = float(rng.uniform(0.15, 0.85))
        ok = all(
            math.hypot(cx - s.cx, cy - s.cy) > (size_frac + s.size + margin)
            for s in scene.shapes
        )
        if ok:
            return cx, cy
    raise DegenerateInput("no free spot for a new object")


def _add_to_scene(scene: Scene, kind: str, color: str, rng: np.random.Generator) -> Scene:
    size_frac = float(rng.uniform(0.10, 0.15))
    cx, cy = _free_spot(scene, size_frac, rng)
    return replace(
        scene, shapes=scene.shapes + (Shape(kind=kind, color=color, cx=cx, cy=cy, size=size_frac),)
    )


def apply_edit(
    scene: Scene, image: np.ndarray, cls: EditClass, rng: np.random.Generator, size: int
) -> Tuple[np.ndarray, str]:
    """Apply one edit class; returns (edited image, edited caption)."""
    if cls.family == "recolor":
        kind, src, dst = cls.params
        edited_scene = _recolor_scene(scene, kind, src, dst)
        return render_scene(edited_scene, size), caption_of(edited_scene)
    if cls.family == "add":
        kind, color = cls.params
        edited_scene = _add_to_scene(scene, kind, color, rng)
        return render_scene(edited_scene, size), caption_of(edited_scene)
    if cls.family == "global":
        op = cls.params[0]
        return apply_global_op(image, op), caption_of(scene, GLOBAL_CAPTION_SUFFIX[op])
    if cls.family == "texture":
        pattern = cls.params[0]
        return apply_texture(image, pattern), caption_of(scene, f"with a {pattern} overlay")
    if cls.family == "compound":
        (f1, p1), (f2, p2) = cls.params
        kind, src, dst = p1
        edited_scene = _recolor_scene(scene, kind, src, dst)
        edited_scene = _add_to_scene(edited_scene, *p2, rng)
        return render_scene(edited_scene, size), caption_of(edited_scene)
    raise ConfigError(f"unknown edit family {cls.family!r}")


def sample_scene(cls: EditClass, rng: np.random.Generator) -> Scene:
    """Random base scene compatible with the class (recolor targets present,
    reserved color/kind combos kept unambiguous)."""
    forbidden: set = set()
    required: List[Tuple[str, str]] = []
    for family, params in _constituents(cls):
        if family == "recolor":
            kind, src, dst = params
            required.append((kind, src))
            forbidden.update({(kind, src), (kind, dst)})
        elif family == "add":
            forbidden.add(tuple(params))
    pattern = str(rng.choice(BG_PATTERNS))
    bg_names = list(BACKGROUND_COLORS)
    bg1 = str(rng.choice(bg_names))
    bg2 = str(rng.choice([b for b in bg_names if b != bg1]))
    scene = Scene(pattern=pattern, bg_color=bg1, bg_color2=bg2, shapes=())
    for kind, color in required:
        scene = _add_to_scene(scene, kind, color, rng)
    n_extra = int(rng.integers(1, 3))
    for _ in range(n_extra):
        for _ in range(50):
            kind = str(rng.choice(SHAPE_KINDS))
            color = str(rng.choice(list(OBJECT_COLORS)))
            if (kind, color) not in forbidden and (color, kind) not in _kindcolor(forbidden):
                break
        try:
            scene = _add_to_scene(scene, kind, color, rng)
        except DegenerateInput:
            break
    return scene


def _kindcolor(pairs: set) -> set:
    return {(c, k) for (k, c) in pairs}


def _constituents(cls: EditClass) -> List[Tuple[str, tuple]]:
    if cls.family == "compound":
        return [tuple(p) for p in cls.params]
    return [(cls.family, cls.params)]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    input_path: str
    edited_path: str
    instruction: str
    edit_class: str
    split: str
    input_caption: str = ""
    edited_caption: str = ""


@dataclass
class DatasetManifest:
    root: Path
    records: List[ManifestRecord]
    schema_version: int = SCHEMA_VERSION

    def path(self, rel: str) -> Path:
        return self.root / rel

    def by_class(self) -> Dict[str, List[ManifestRecord]]:
        out: Dict[str, List[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.edit_class, []).append(r)
        return out


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    payload = {
        "schema_version": manifest.schema_version,
        "records": [vars(r) for r in manifest.records],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported manifest schema {payload.get('schema_version')!r}")
    records = [ManifestRecord(**r) for r in payload["records"]]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigError("manifest ids are not unique")
    manifest = DatasetManifest(root=path.parent, records=records)
    if check_paths:
        for r in records:
            for rel in (r.input_path, r.edited_path):
                if not manifest.path(rel).exists():
                    raise ConfigError(f"manifest references missing file {rel}")
    return manifest


def check_benchmark_mode(manifest: DatasetManifest) -> None:
    for cls, records in manifest.by_class().items():
        splits = {r.split for r in records}
        if not {"train", "test"} <= splits:
            raise ConfigError(f"edit class {cls} lacks a train or test split")


@dataclass
class GenConfig:
    classes: int = 64
    samples_per_class: int = 20
    image_size: int = 64
    seed: int = 0
    patch_size: int = 8
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.classes < 1 or self.samples_per_class < 2:
            raise ConfigError("need >= 1 class and >= 2 samples per class")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


def generate_synthetic(out_dir, cfg: GenConfig) -> DatasetManifest:
    """Render the corpus under ``out_dir`` and write manifest.json."""
    out_dir = Path(out_dir)
    rng_master = np.random.default_rng(cfg.seed)
    classes = build_edit_classes(cfg.classes, rng_master)
    n_train = max(1, min(cfg.samples_per_class - 1, round(cfg.samples_per_class * cfg.train_fraction)))
    records: List[ManifestRecord] = []
    for ci, cls in enumerate(classes):
        for si in range(cfg.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(ci, si)))
            scene = sample_scene(cls, rng)
            base = render_scene(scene, cfg.image_size)
            edited, edited_caption = apply_edit(scene, base, cls, rng, cfg.image_size)
            rec_id = f"{cls.class_id}.{si:03d}"
            rel_in = f"images/{ci:03d}/{si:03d}_in.png"
            rel_ed = f"images/{ci:03d}/{si:03d}_ed.png"
            pngio.save_image(pngio.to_tensor(base.astype(np.float32)), out_dir / rel_in)
            pngio.save_image(pngio.to_tensor(edited.astype(np.float32)), out_dir / rel_ed)
            records.append(
                ManifestRecord(
                    id=rec_id,
                    input_path=rel_in,
                    edited_path=rel_ed,
                    instruction=cls.instruction,
                    edit_class=cls.class_id,
                    split="train" if si < n_train else "test",
                    input_caption=caption_of(scene),
                    edited_caption=edited_caption,
                )
            )
    manifest = DatasetManifest(root=out_dir, records=records)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# Loading into training structures
# ---------------------------------------------------------------------------


def load_record_images(manifest: DatasetManifest, record: ManifestRecord):
    return (
        pngio.load_image(manifest.path(record.input_path)),
        pngio.load_image(manifest.path(record.edited_path)),
    )


def load_triplets(
    manifest: DatasetManifest, split: str | None = None, classes: Sequence[str] | None = None
) -> List[Triplet]:
    wanted = set(classes) if classes is not None else None
    out = []
    for r in manifest.records:
        if split is not None and r.split != split:
            continue
        if wanted is not None and r.edit_class not in wanted:
            continue
        inp, ed = load_record_images(manifest, r)
        out.append(Triplet(input=inp, edited=ed, instruction=r.instruction, edit_class=r.edit_class))
    return out


def load_captions(manifest: DatasetManifest, split: str | None = None) -> List[CaptionExample]:
    out = []
    for r in manifest.records:
        if split is not None and r.split != split:
            continue
        inp, ed = load_record_images(manifest, r)
        if r.input_caption:
            out.append(CaptionExample(image=inp, caption=r.input_caption))
        if r.edited_caption:
            out.append(CaptionExample(image=ed, caption=r.edited_caption))
    return out


# ---------------------------------------------------------------------------
# Benchmark pairing and evaluation
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRecord:
    record_id: str
    edit_class: str
    instruction: str
    exemplar_input: str
    exemplar_edited: str
    query_input: str
    query_edited: str  # ground-truth output of the query
    output_caption: str


def build_benchmark(manifest: DatasetManifest) -> List[BenchmarkRecord]:
    """Cross product of train exemplars and test queries within each class."""
    check_benchmark_mode(manifest)
    records: List[BenchmarkRecord] = []
    for cls, recs in sorted(manifest.by_class().items()):
        train = [r for r in recs if r.split == "train"]
        test = [r for r in recs if r.split == "test"]
        for ex in train:
            for q in test:
                records.append(
                    BenchmarkRecord(
                        record_id=f"{ex.id}->{q.id}",
                        edit_class=cls,
                        instruction=ex.instruction,
                        exemplar_input=ex.input_path,
                        exemplar_edited=ex.edited_path,
                        query_input=q.input_path,
                        query_edited=q.edited_path,
                        output_caption=q.edited_caption or q.instruction,
                    )
                )
    return records


EditorFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, str, int], torch.Tensor]
"""(query, exemplar_input, exemplar_edited, instruction, seed) -> output image."""


def identity_editor(query, exemplar_input, exemplar_edited, instruction, seed):
    return query.clone()


def run_benchmark(
    records: Sequence[BenchmarkRecord],
    editor_fn: EditorFn,
    manifest: DatasetManifest,
    bundle: EncoderBundle,
    perceptual: PerceptualNet,
    seeds: Sequence[int],
    out_dir: Optional[Path] = None,
    metric_set: Sequence[str] = METRIC_COLUMNS,
) -> MetricReport:
    """Evaluate every (record, seed) pair; rows appear in deterministic
    (record, seed) order. Editor failures are recorded per row and excluded
    from aggregates; per-metric degenerate inputs leave that cell empty."""
    report = MetricReport()
    out_dir = Path(out_dir) if out_dir is not None else None
    for rec in records:
        ex_in, ex_ed = (
            pngio.load_image(manifest.path(rec.exemplar_input)),
            pngio.load_image(manifest.path(rec.exemplar_edited)),
        )
        query = pngio.load_image(manifest.path(rec.query_input))
        for seed in seeds:
            row_id = f"{rec.record_id}#s{seed}"
            try:
                output = editor_fn(query, ex_in, ex_ed, rec.instruction, seed)
            except EditkitError as exc:
                report.add_row(row_id, rec.record_id, seed, {}, error=f"editor: {exc}")
                continue
            if out_dir is not None:
                pngio.save_image(output, out_dir / "outputs" / f"{row_id}.png")
            values: Dict[str, float | None] = {}
            notes: List[str] = []

            def _guard(name: str, fn: Callable[[], float]) -> None:
                if name not in metric_set:
                    return
                try:
                    values[name] = fn()
                except DegenerateInput as exc:
                    values[name] = None
                    notes.append(f"{name}: {exc}")

            _guard("e2t", lambda: e2t(query, output, rec.instruction, bundle))
            _guard("e2e", lambda: e2e(ex_in, ex_ed, query, output, bundle))
            _guard("clip_score", lambda: clip_score(output, rec.output_caption, bundle))
            _guard("clip_dir", lambda: clip_directional(query, output, rec.instruction, bundle))
            _guard("s_visual", lambda: s_visual(ex_in, ex_ed, query, output, bundle))
            _guard("lpips", lambda: perceptual_distance(query, output, perceptual))
            report.add_row(row_id, rec.record_id, seed, values, error="; ".join(notes))
    return report


# ---------------------------------------------------------------------------
# Human-score correlation
# ---------------------------------------------------------------------------


@dataclass
class HumanScores:
    scores: Dict[str, Tuple[float, float]]  # id -> (edit, preserve)

    @classmethod
    def from_csv(cls, path) -> "HumanScores":
        import csv as _csv

        scores = {}
        with open(path, newline="") as f:
            for raw in _csv.DictReader(f):
                scores[raw["id"]] = (float(raw["edit_score"]), float(raw["preserve_score"]))
        return cls(scores)


def correlate_with_humans(report: MetricReport, humans: HumanScores) -> List[dict]:
    """Pearson r of each metric column against both human dimensions.

    Returns rows {metric, edit, preserve, n}; a metric with a constant or
    empty column gets None entries."""
    rows = []
    any_overlap = 0
    for col in METRIC_COLUMNS:
        ids, vals = report.column(col, ids=list(humans.scores))
        any_overlap = max(any_overlap, len(ids))
        entry: dict = {"metric": col, "n": len(ids), "edit": None, "preserve": None}
        if len(ids) >= 2:
            edit_scores = [humans.scores[i][0] for i in ids]
            pres_scores = [humans.scores[i][1] for i in ids]
            for key, target in (("edit", edit_scores), ("preserve", pres_scores)):
                try:
                    entry[key] = pearson(vals, target)
                except DegenerateInput:
                    entry[key] = None
        rows.append(entry)
    if any_overlap < 2:
        raise DegenerateInput("fewer than 2 overlapping ids between report and human scores")
    return rows


def correlation_csv(rows: List[dict], path) -> None:
    import csv as _csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["metric", "edit", "preserve", "n"])
        for r in rows:
            writer.writerow(
                [
                    r["metric"],
                    "" if r["edit"] is None else repr(float(r["edit"])),
                    "" if r["preserve"] is None else repr(float(r["preserve"])),
                    r["n"],
                ]
            )
