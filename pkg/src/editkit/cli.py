"""Command-line entry point.

One binary, subcommand style: gen-data, pretrain, finetune, edit, evaluate,
bench, attn, gradcheck. Every run writes its effective configuration and a
log file into --out-dir; outputs are deterministic given config + seed.
Exit codes: 0 success, 1 categorized runtime failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import bench as bench_mod
from . import checkpoint, configs, contrastive, editdiffusion, encoders, gradsuite, plots, pngio, sampler
from .errors import ConfigError, EditkitError
from .metrics import MetricReport, PerceptualNet, perceptual_distance

log = logging.getLogger("editkit")


def _setup_threads(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get("EDITKIT_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    torch.set_num_threads(max(1, threads))
    return threads


def _start_run(out_dir: Path, command: str, sections: Dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": configs.effective_dict(sections)}
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=list) + "\n"
    )
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.info("command=%s out_dir=%s", command, out_dir)
    return out_dir


def _write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_cell(r.get(c)) for c in columns])


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    file_cfg = configs.load_config_file(args.config)
    gen_cfg = configs.build_section(
        "gen",
        file_cfg,
        {
            "classes": args.classes,
            "samples_per_class": args.samples_per_class,
            "image_size": args.image_size,
            "seed": args.seed,
            "patch_size": args.patch_size,
            "train_fraction": args.train_fraction,
        },
    )
    out_dir = _start_run(args.out_dir, "gen-data", {"gen": gen_cfg})
    manifest = bench_mod.generate_synthetic(out_dir, gen_cfg)
    counts = {}
    for r in manifest.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    log.info("generated %d records (%s) across %d classes",
             len(manifest.records), counts, gen_cfg.classes)
    print(f"wrote {len(manifest.records)} triplets to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    file_cfg = configs.load_config_file(args.config)
    model_cfg = configs.build_section("model", file_cfg, {})
    cfg = configs.build_section(
        "pretrain",
        file_cfg,
        {
            "batch_size": args.batch_size,
            "epochs": args.epochs,
            "seed": args.seed,
            "lr_first_conv": args.lr_first_conv,
            "lr_other": args.lr_other,
            "caption_epochs": args.caption_epochs,
            "early_stop_retrieval": args.early_stop_retrieval,
        },
    )
    out_dir = _start_run(args.out_dir, "pretrain", {"model": model_cfg, "pretrain": cfg})
    manifest = bench_mod.load_manifest(args.data)
    train = bench_mod.load_triplets(manifest, split="train")
    holdout = bench_mod.load_triplets(manifest, split="test")
    captions = bench_mod.load_captions(manifest, split="train")
    log.info("pretraining on %d triplets (+%d captions), %d held out",
             len(train), len(captions), len(holdout))
    bundle, cap_rows, edit_rows = contrastive.pretrain(
        train, captions, model_cfg, cfg, holdout=holdout
    )
    columns = ("epoch", "step", "loss", "retrieval_top1")
    _write_rows_csv(cap_rows, columns, out_dir / "pretrain_caption.csv")
    _write_rows_csv(edit_rows, columns, out_dir / "pretrain_edit.csv")
    plots.save_loss_curves(edit_rows, ("loss", "retrieval_top1"),
                           out_dir / "pretrain_edit.png", "edit-stage contrastive loss")
    if cap_rows:
        plots.save_loss_curves(cap_rows, ("loss", "retrieval_top1"),
                               out_dir / "pretrain_caption.png", "caption-stage contrastive loss")
    ckpt = out_dir / "encoders.eclp"
    encoders.save_bundle(ckpt, bundle)
    score = None
    if holdout:
        score = contrastive.eval_retrieval(holdout, bundle, cfg.batch_size, seed=cfg.seed)
        log.info("held-out in-batch top-1 retrieval: %.4f", score)
    summary = {"holdout_retrieval_top1": score, "steps": len(edit_rows)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"checkpoint: {ckpt}" + (f" (holdout retrieval {score:.3f})" if score is not None else ""))
    return 0


def cmd_finetune(args) -> int:
    file_cfg = configs.load_config_file(args.config)
    cfg = configs.build_section(
        "finetune",
        file_cfg,
        {
            "iterations": args.iterations,
            "seed": args.seed,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "condition_source": args.condition_source,
            "lambda1": args.lambda1,
            "lambda2": args.lambda2,
            "cond_dropout_p": args.cond_dropout_p,
            "base_width": args.base_width,
            "t_max": args.t_max,
            "codec": args.codec,
        },
    )
    out_dir = _start_run(args.out_dir, "finetune", {"finetune": cfg})
    bundle = encoders.load_bundle(args.encoders)
    manifest = bench_mod.load_manifest(args.data)
    families = tuple(args.families.split(",")) if args.families else ()
    classes = None
    if families:
        classes = [
            c for c in {r.edit_class for r in manifest.records}
            if c.split(".", 1)[0] in families
        ]
    triplets = bench_mod.load_triplets(manifest, split="train", classes=classes)
    if not triplets:
        raise ConfigError("no training triplets after filtering")
    log.info("finetuning on %d triplets, condition_source=%s", len(triplets), cfg.condition_source)
    perceptual = PerceptualNet()
    editor, rows = editdiffusion.finetune(triplets, bundle, cfg, perceptual=perceptual)
    _write_rows_csv(rows, ("step", "noise_loss", "lpips_loss", "total"), out_dir / "finetune.csv")
    plots.save_loss_curves(rows, ("noise_loss", "lpips_loss", "total"),
                           out_dir / "finetune.png", "diffusion training loss")
    ckpt = out_dir / "editor.eclp"
    editdiffusion.save_editor(ckpt, editor)
    print(f"checkpoint: {ckpt} (final total loss {rows[-1]['total']:.4f})")
    return 0


def _load_editor_ckpt(path) -> editdiffusion.Editor:
    return editdiffusion.load_editor(path)


def cmd_edit(args) -> int:
    file_cfg = configs.load_config_file(args.config)
    cfg = configs.build_section(
        "sample",
        file_cfg,
        {"s_edit": args.s_edit, "s_image": args.s_image, "steps": args.steps, "seed": args.seed},
    )
    out_path = Path(args.out)
    out_dir = _start_run(args.out_dir or out_path.parent, "edit", {"sample": cfg})
    editor = _load_editor_ckpt(args.ckpt)
    query = pngio.load_image(args.query)
    if args.instruction is not None:
        output = sampler.edit_with_text(
            query, args.instruction, editor, cfg, require_trained=not args.allow_untrained
        )
    else:
        if not args.exemplar_input or not args.exemplar_edited:
            raise ConfigError("edit needs --exemplar-input and --exemplar-edited (or --instruction)")
        ex_in = pngio.load_image(args.exemplar_input)
        ex_ed = pngio.load_image(args.exemplar_edited)
        output = sampler.edit(
            query, ex_in, ex_ed, editor, cfg, require_trained=not args.allow_untrained
        )
    pngio.save_image(output, out_path)
    log.info("wrote %s", out_path)
    print(out_path)
    return 0


def cmd_evaluate(args) -> int:
    out_dir = _start_run(args.out_dir, "evaluate", {})
    bundle = _load_any_encoders(args.ckpt)
    perceptual = PerceptualNet(seed=args.perceptual_seed)
    report = MetricReport()
    base = Path(args.samples).parent
    with open(args.samples, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigError("samples CSV is empty")
    from .metrics import clip_directional, clip_score, e2e, e2t, s_visual
    from .errors import DegenerateInput

    for raw in rows:
        imgs = {
            key: pngio.load_image(base / raw[key])
            for key in ("exemplar_input", "exemplar_edited", "query", "output")
        }
        values: Dict[str, Optional[float]] = {}
        notes: List[str] = []

        def guard(name, fn):
            try:
                values[name] = fn()
            except DegenerateInput as exc:
                values[name] = None
                notes.append(f"{name}: {exc}")

        instruction = raw["instruction"]
        caption = raw.get("output_caption") or instruction
        guard("e2t", lambda: e2t(imgs["query"], imgs["output"], instruction, bundle))
        guard("e2e", lambda: e2e(imgs["exemplar_input"], imgs["exemplar_edited"],
                                 imgs["query"], imgs["output"], bundle))
        guard("clip_score", lambda: clip_score(imgs["output"], caption, bundle))
        guard("clip_dir", lambda: clip_directional(imgs["query"], imgs["output"], instruction, bundle))
        guard("s_visual", lambda: s_visual(imgs["exemplar_input"], imgs["exemplar_edited"],
                                           imgs["query"], imgs["output"], bundle))
        guard("lpips", lambda: perceptual_distance(imgs["query"], imgs["output"], perceptual))
        report.add_row(raw["id"], raw["id"], 0, values, error="; ".join(notes))
    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "report.json")
    plots.save_metric_summary(report, out_dir / "report.png")
    print(f"report: {out_dir / 'report.csv'} ({len(report.rows)} rows)")
    return 0


def _load_any_encoders(path) -> encoders.EncoderBundle:
    """Accept either an encoder checkpoint or a full editor checkpoint."""
    _, meta = checkpoint.load_tensors(path)
    if meta.get("kind") == "editor":
        return editdiffusion.load_editor(path).encoders
    return encoders.load_bundle(path)


def cmd_bench(args) -> int:
    file_cfg = configs.load_config_file(args.config)
    bcfg = configs.build_section(
        "bench",
        file_cfg,
        {
            "seeds": tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None,
            "editor_kind": args.editor_kind,
            "families": tuple(args.families.split(",")) if args.families else None,
            "max_records": args.max_records,
        },
    )
    scfg = configs.build_section(
        "sample",
        file_cfg,
        {"s_edit": args.s_edit, "s_image": args.s_image, "steps": args.steps, "seed": None},
    )
    out_dir = _start_run(args.out_dir, "bench", {"bench": bcfg, "sample": scfg})
    manifest = bench_mod.load_manifest(args.manifest)
    records = bench_mod.build_benchmark(manifest)
    if bcfg.families:
        records = [r for r in records if r.edit_class.split(".", 1)[0] in bcfg.families]
    if bcfg.max_records:
        records = records[: bcfg.max_records]
    if not records:
        raise ConfigError("no benchmark records selected")

    if bcfg.editor_kind == "model":
        if not args.editor:
            raise ConfigError("editor_kind=model needs --editor")
        editor = _load_editor_ckpt(args.editor)
        bundle = editor.encoders

        def editor_fn(query, ex_in, ex_ed, instruction, seed):
            cfg = sampler.GuidanceConfig(
                s_edit=scfg.s_edit, s_image=scfg.s_image, steps=scfg.steps, seed=seed
            )
            if editor.cond_source == "text":
                return sampler.edit_with_text(query, instruction, editor, cfg)
            return sampler.edit(query, ex_in, ex_ed, editor, cfg, instruction=instruction)

    else:
        bundle = _load_any_encoders(args.encoders or args.editor)
        if bcfg.editor_kind == "identity":
            editor_fn = bench_mod.identity_editor
        else:
            gt = {r.record_id: r.query_edited for r in records}

            def editor_fn(query, ex_in, ex_ed, instruction, seed, _gt=gt):
                raise ConfigError("ground_truth editor resolved per record")

    perceptual = PerceptualNet(seed=bcfg.perceptual_seed)
    if bcfg.editor_kind == "ground_truth":
        report = MetricReport()
        for rec in records:
            output = pngio.load_image(manifest.path(rec.query_edited))
            fn = lambda q, a, b, instr, s, _o=output: _o.clone()
            partial = bench_mod.run_benchmark(
                [rec], fn, manifest, bundle, perceptual, bcfg.seeds, out_dir=out_dir
            )
            report.rows.extend(partial.rows)
    else:
        report = bench_mod.run_benchmark(
            records, editor_fn, manifest, bundle, perceptual, bcfg.seeds, out_dir=out_dir
        )
    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "report.json")
    plots.save_metric_summary(report, out_dir / "report.png")
    if args.human_scores:
        humans = bench_mod.HumanScores.from_csv(args.human_scores)
        corr = bench_mod.correlate_with_humans(report, humans)
        bench_mod.correlation_csv(corr, out_dir / "correlations.csv")
        plots.save_correlation_table(corr, out_dir / "correlations.png")
    agg = {k: v for k, v in report.aggregates().items() if v is not None}
    log.info("aggregates: %s", agg)
    print(f"report: {out_dir / 'report.csv'} rows={len(report.rows)} failed={report.failed_rows()}")
    return 0


def cmd_attn(args) -> int:
    out_path = Path(args.out)
    _start_run(args.out_dir or out_path.parent, "attn", {})
    bundle = _load_any_encoders(args.ckpt)
    heat = encoders.cls_attention_map(
        pngio.load_image(args.input), pngio.load_image(args.edited), bundle
    )
    pngio.save_heatmap(heat, out_path)
    print(out_path)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(args.suite)
    failed = False
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e} {status}")
        failed = failed or err >= 1e-4
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="editkit",
        description="Edit-pair representation learning, exemplar-based diffusion "
        "editing, and edit-quality metrics at desk scale.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="torch thread count (default: EDITKIT_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic edit corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--samples-per-class", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive pre-training (caption + edit stages)")
    p.add_argument("--data", required=True, help="manifest.json of the training corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--caption-epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr-first-conv", type=float, default=None)
    p.add_argument("--lr-other", type=float, default=None)
    p.add_argument("--early-stop-retrieval", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the conditional diffusion editor")
    p.add_argument("--data", required=True)
    p.add_argument("--encoders", required=True, help="encoder checkpoint (.eclp)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--cond-dropout-p", type=float, default=None)
    p.add_argument("--base-width", type=int, default=None)
    p.add_argument("--t-max", type=int, default=None)
    p.add_argument("--codec", default=None, choices=[None, "identity", "tiny_conv_ae"])
    p.add_argument("--condition-source", default=None,
                   choices=[None, *editdiffusion.CONDITION_SOURCES])
    p.add_argument("--families", default=None,
                   help="comma-separated edit families to train on (e.g. recolor)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("edit", help="apply an exemplar edit to a query image")
    p.add_argument("--query", required=True)
    p.add_argument("--exemplar-input", default=None)
    p.add_argument("--exemplar-edited", default=None)
    p.add_argument("--instruction", default=None,
                   help="use text conditioning instead of an exemplar pair")
    p.add_argument("--ckpt", required=True, help="editor checkpoint (.eclp)")
    p.add_argument("--s-edit", type=float, default=None)
    p.add_argument("--s-image", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--allow-untrained", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="score externally supplied edit samples")
    p.add_argument("--ckpt", required=True, help="encoder or editor checkpoint")
    p.add_argument("--samples", required=True,
                   help="CSV: id,exemplar_input,exemplar_edited,query,output,instruction[,output_caption]")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--perceptual-seed", type=int, default=7)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="run the exemplar benchmark end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--editor", default=None, help="editor checkpoint for editor_kind=model")
    p.add_argument("--encoders", default=None, help="encoder checkpoint for identity/ground_truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--editor-kind", default=None, choices=[None, "model", "identity", "ground_truth"])
    p.add_argument("--families", default=None)
    p.add_argument("--max-records", type=int, default=None)
    p.add_argument("--s-edit", type=float, default=None)
    p.add_argument("--s-image", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--human-scores", default=None, help="CSV: id,edit_score,preserve_score")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attn", help="write the [CLS] attention heatmap for a pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--suite", default="all",
                   choices=["all", "primitives", "contrastive", "diffusion"])
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_threads(args.threads)
    try:
        return args.func(args)
    except (EditkitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in list(log.handlers):
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
