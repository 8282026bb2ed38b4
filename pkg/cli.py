"""
Command line interface.

Every subcommand delegates to the library modules, writes JSON (or TSV
for transcriptions) to stdout or ``--out`` and logs to stderr. Operational
failures exit with status 1 and a single ``error: <message>`` line; usage
errors exit with status 2.
"""

import glob
import json
import os
import sys
from dataclasses import asdict
from typing import List, Optional, Sequence

import click

from config import Config, load_train_config
from corpus import (
    Corpus,
    LineSample,
    concat_lines_to_page,
    extract_line,
    load_corpus,
    page_image_filename,
    parse_page_xml,
    save_corpus,
    select_balanced,
    write_page_xml,
)
from data_processor import TranscriptionTable, group_of, pair_transcriptions
from evaluation import cer, cer_by_group, confusion_table, prepare_pairs
from imgproc import VARIANT_PRESETS, load_raster, make_variant, prepare_line_image, save_raster
from models.checkpoint import save_checkpoint
from models.model_manager import ModelManager
from models.network import ARCH_PRESETS, ArchSpec
from synth import BUILTIN_STYLES, SynthSpec, generate_corpus
from textnorm import NormalizationRuleSet, alphabet_of, dump_rules, normalize
from trainer import as_groups, finetune, train_crossfold, train_two_stage, variant_image
from utils.exceptions import HistOCRError
from utils.logger import Logger, set_global_level
from visualization import Visualizer
from vote import predict_batch

logger = Logger("cli")


def emit(result, out: Optional[str] = None) -> None:
    text = json.dumps(result, indent=2, sort_keys=True, ensure_ascii=False)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        click.echo(text)


def _rules(rules_path: Optional[str], fold_virgula: bool = False) -> NormalizationRuleSet:
    return NormalizationRuleSet.from_file(rules_path, fold_virgula)


def _csv(value: Optional[str]) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


class HistOCRGroup(click.Group):
    """Turns library errors into ``error: ...`` on stderr and exit status 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (HistOCRError, OSError, ValueError) as e:
            message = str(e).splitlines()[0] if str(e) else type(e).__name__
            click.echo(f"error: {message}", err=True)
            ctx.exit(1)


@click.group(cls=HistOCRGroup)
@click.version_option(
    Config.VERSION,
    prog_name="histocr",
    message=f"%(prog)s %(version)s (checkpoint format {Config.CHECKPOINT_FORMAT})",
)
@click.option("-v", "--verbose", count=True, help="Log INFO (-v) or DEBUG (-vv) to stderr.")
@click.option("--threads", default=Config.DEFAULT_THREADS, show_default=True, type=click.IntRange(1),
              help="Worker threads; results do not depend on it.")
@click.pass_context
def cli(ctx, verbose, threads):
    """Historical OCR toolkit: ground truth, training, voting and evaluation."""
    if verbose:
        set_global_level("DEBUG" if verbose > 1 else "INFO")
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


# ------------------------------------------------------------------ corpus


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--work", "work_id", required=True, help="Work identifier for all inputs.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@click.option("--line-gt", is_flag=True, help="Inputs are line images with sibling .gt.txt files.")
@click.option("--image-dir", type=click.Path(file_okay=False), help="Where page images live (default: next to the XML).")
@click.option("--normalize/--no-normalize", "apply_rules", default=True, show_default=True)
@click.option("--rules", "rules_path", type=click.Path(dir_okay=False), help="Rule table replacing the default.")
@click.option("--balance-cap", type=click.IntRange(1), help="Select at most this many lines per work.")
@click.option("--seed", type=int, default=0, show_default=True)
def ingest(inputs, work_id, out_dir, line_gt, image_dir, apply_rules, rules_path, balance_cap, seed):
    """Build a corpus from PAGE XML files or line images with .gt.txt files."""
    rules = _rules(rules_path)
    text_of = (lambda t: normalize(t, rules)) if apply_rules else (lambda t: t)
    lines: List[LineSample] = []
    warnings: List[str] = []

    if line_gt:
        pages_dir = os.path.join(out_dir, "pages")
        os.makedirs(pages_dir, exist_ok=True)
        loaded = []
        for path in inputs:
            stem = os.path.splitext(path)[0]
            with open(stem + ".gt.txt", "r", encoding="utf-8") as f:
                text = text_of(f.read().rstrip("\n"))
            loaded.append((load_raster(path), text, os.path.basename(stem)))
        per_page = Config.LINES_PER_SYNTH_PAGE
        for number, start in enumerate(range(0, len(loaded), per_page)):
            page_id = f"page{number:04d}"
            chunk = [
                LineSample(image, text, work_id, page_id, line_id)
                for image, text, line_id in loaded[start : start + per_page]
            ]
            page, regions = concat_lines_to_page(chunk)
            save_raster(page, os.path.join(pages_dir, page_id + ".png"))
            with open(os.path.join(pages_dir, page_id + ".xml"), "w", encoding="utf-8") as f:
                f.write(write_page_xml(regions, page_id + ".png", page.shape[1], page.shape[0]))
            lines.extend(chunk)
    else:
        for path in inputs:
            with open(path, "rb") as f:
                xml = f.read()
            filename = page_image_filename(xml)
            if not filename:
                raise HistOCRError(f"{path}: Page/@imageFilename is missing")
            page = load_raster(os.path.join(image_dir or os.path.dirname(path), filename))
            regions, page_warnings = parse_page_xml(xml, page)
            warnings.extend(f"{path}: {w}" for w in page_warnings)
            page_id = os.path.splitext(os.path.basename(path))[0]
            for i, region in enumerate(regions):
                lines.append(LineSample(extract_line(page, region), text_of(region.text), work_id, page_id, f"l{i:04d}"))

    corpus = Corpus.from_lines(lines)
    if balance_cap:
        corpus = select_balanced(corpus, balance_cap, seed)
    manifest = save_corpus(corpus, out_dir)
    emit({"manifest": manifest, "lines": len(corpus), "works": len(corpus.works), "warnings": warnings})


@cli.command(name="normalize")
@click.argument("table", type=click.Path(dir_okay=False))
@click.option("--rules", "rules_path", type=click.Path(dir_okay=False))
@click.option("--fold-virgula", is_flag=True, help="Also map '/' to ','.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output TSV (default: stdout).")
def normalize_cmd(table, rules_path, fold_virgula, out):
    """Normalize the text column of a line_id/text TSV."""
    rules = _rules(rules_path, fold_virgula)
    src = TranscriptionTable.load(table)
    result = TranscriptionTable.from_records((i, normalize(t, rules)) for i, t in src.records())
    if out:
        result.save(out)
    else:
        click.echo(result.to_tsv(), nl=False)


@cli.command(name="dump-rules")
@click.option("--out", type=click.Path(dir_okay=False))
def dump_rules_cmd(out):
    """Print the default normalization rule table."""
    text = dump_rules()
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        click.echo(text, nl=False)


@cli.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--variants", default="ocro", show_default=True,
              help=f"Preset ({', '.join(VARIANT_PRESETS)}) or comma separated variants.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def preprocess(manifest, variants, out_dir):
    """Add preprocessing variants derived from each line's raw image."""
    wanted = VARIANT_PRESETS.get(variants) or tuple(_csv(variants))
    corpus = load_corpus(manifest)
    lines = []
    for group in corpus.line_groups().values():
        by_variant = {l.variant: l for l in group}
        lines.extend(group)
        raw = by_variant.get("raw")
        for variant in wanted:
            if variant in by_variant or raw is None:
                continue
            lines.append(
                LineSample(make_variant(raw.image, variant), raw.transcription, raw.work_id,
                           raw.page_id, raw.line_id, variant, raw.selected)
            )
    result = Corpus.from_lines(lines, corpus.work_tags())
    emit({"manifest": save_corpus(result, out_dir), "lines": len(result), "variants": list(wanted)})


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, required=True)
@click.option("--lines", "total", default=100, show_default=True, type=click.IntRange(0))
@click.option("--styles", default=",".join(BUILTIN_STYLES), show_default=True)
@click.option("--weights", help="Comma separated, one per style.")
@click.option("--alphabet", default="abcdefghijklmnopqrstuvwxyz ", show_default=True)
@click.option("--min-length", default=5, show_default=True, type=click.IntRange(1))
@click.option("--max-length", default=20, show_default=True, type=click.IntRange(1))
@click.option("--balance-cap", type=click.IntRange(1))
def synth(out_dir, seed, total, styles, weights, alphabet, min_length, max_length, balance_cap):
    """Generate a synthetic corpus, one work per built-in style."""
    spec = SynthSpec(
        styles=tuple(_csv(styles)),
        total_lines=total,
        weights=tuple(float(w) for w in _csv(weights)) or None,
        alphabet=alphabet,
        length_range=(min_length, max_length),
    )
    corpus = generate_corpus(spec, seed)
    if balance_cap:
        corpus = select_balanced(corpus, balance_cap, seed)
    emit({"manifest": save_corpus(corpus, out_dir), "lines": len(corpus), "counts": spec.line_counts()})


# ---------------------------------------------------------------- training


def _train_options(f):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="KEY=VALUE training config."),
        click.option("--seed", type=int, required=True),
        click.option("--model-dir", required=True, type=click.Path(file_okay=False)),
        click.option("--arch", "arch_name", default="default", show_default=True, type=click.Choice(list(ARCH_PRESETS))),
        click.option("--voters", type=click.IntRange(1)),
        click.option("--max-epochs", type=click.IntRange(1)),
        click.option("--patience", type=click.IntRange(1)),
        click.option("--augmentations", type=click.IntRange(0)),
        click.option("--lr", type=float),
        click.option("--batch-size", type=click.IntRange(1)),
        click.option("--variants", help="Preset or comma separated variant list."),
        click.option("--out", type=click.Path(dir_okay=False), help="Report JSON (default: stdout)."),
        click.option("--history-plot", type=click.Path(dir_okay=False), help="Write the validation curves as HTML."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _load_config(config_path, seed, voters, max_epochs, patience, augmentations, lr, batch_size, variants):
    return load_train_config(
        config_path,
        {
            "seed": seed,
            "voters": voters,
            "max_epochs": max_epochs,
            "patience": patience,
            "augmentations_per_sample": augmentations,
            "lr": lr,
            "batch_size": batch_size,
            "variant_list": variants,
        },
    )


def _save_ensemble(checkpoints, model_dir: str, prefix: str = "voter") -> List[str]:
    os.makedirs(model_dir, exist_ok=True)
    paths = []
    for i, ckpt in enumerate(checkpoints):
        path = os.path.join(model_dir, f"{prefix}{i}.ckpt")
        save_checkpoint(ckpt, path)
        paths.append(path)
    return paths


@cli.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@_train_options
@click.option("--two-stage", is_flag=True, help="Continue each voter on the selected lines.")
@click.option("--stage2-config", type=click.Path(dir_okay=False))
@click.pass_context
def train(ctx, manifest, config_path, seed, model_dir, arch_name, voters, max_epochs, patience,
          augmentations, lr, batch_size, variants, out, history_plot, two_stage, stage2_config):
    """Cross-fold train a voter ensemble on a corpus."""
    threads = ctx.obj["threads"]
    config = _load_config(config_path, seed, voters, max_epochs, patience, augmentations, lr, batch_size, variants)
    corpus = load_corpus(manifest)
    codec = alphabet_of(corpus)
    arch = ArchSpec.preset(arch_name, codec.size)
    result = {"config": config.to_dict(), "arch": asdict(arch)}

    if two_stage:
        config2 = load_train_config(stage2_config, {"seed": seed}) if stage2_config else config
        outcome = train_two_stage(config, config2, corpus, arch, threads)
        result["stage1_checkpoints"] = _save_ensemble([c for c, _ in outcome.stage1], os.path.join(model_dir, "stage1"))
        result["stage1_reports"] = [r.to_dict() for _, r in outcome.stage1]
        checkpoints, reports = outcome.ensemble, outcome.stage2_reports
        all_reports = [r for _, r in outcome.stage1] + reports
    else:
        trained = train_crossfold(config, corpus, arch=arch, codec=codec, threads=threads)
        checkpoints, reports = [c for c, _ in trained], [r for _, r in trained]
        all_reports = reports

    result["checkpoints"] = _save_ensemble(checkpoints, model_dir)
    result["reports"] = [r.to_dict() for r in reports]
    if history_plot:
        visualizer = Visualizer()
        visualizer.write_figure(visualizer.training_history_figure(all_reports), history_plot)
    emit(result, out)


@cli.command(name="finetune")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--folds", default=1, show_default=True, type=click.IntRange(1))
@click.option("--heldout", type=click.Path(dir_okay=False), help="Corpus manifest evaluated after training.")
@_train_options
@click.pass_context
def finetune_cmd(ctx, manifest, model_path, folds, heldout, config_path, seed, model_dir, arch_name, voters,
                 max_epochs, patience, augmentations, lr, batch_size, variants, out, history_plot):
    """Finetune from a checkpoint, adapting its codec to the corpus."""
    threads = ctx.obj["threads"]
    config = _load_config(config_path, seed, voters, max_epochs, patience, augmentations, lr, batch_size, variants)
    start = ModelManager.from_files([model_path]).voters[0]
    corpus = load_corpus(manifest)
    held = load_corpus(heldout) if heldout else None
    outcome = finetune(start, config, corpus, folds, held, threads=threads)

    result = outcome.to_dict()
    result["config"] = config.to_dict()
    result["checkpoints"] = []
    for index, ensemble in enumerate(outcome.ensembles):
        target = model_dir if len(outcome.ensembles) == 1 else os.path.join(model_dir, f"fold{index}")
        result["checkpoints"].append(_save_ensemble(ensemble, target))
    if history_plot:
        visualizer = Visualizer()
        reports = [r for fold in outcome.reports for r in fold]
        visualizer.write_figure(visualizer.training_history_figure(reports), history_plot)
    emit(result, out)


# ------------------------------------------------------------- prediction


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--model", "model_paths", required=True, multiple=True, type=click.Path(dir_okay=False),
              help="Voter checkpoint; repeat for an ensemble (globs allowed).")
@click.option("--variant", default="bin", show_default=True)
@click.option("--batch-size", default=16, show_default=True, type=click.IntRange(1))
@click.option("--out", type=click.Path(dir_okay=False), help="Prediction TSV (default: stdout).")
@click.pass_context
def predict(ctx, inputs, model_paths, variant, batch_size, out):
    """Recognize a corpus manifest (.json) or line images with a voted ensemble."""
    paths = sorted(p for pattern in model_paths for p in (glob.glob(pattern) or [pattern]))
    manager = ModelManager.from_files(paths)
    ids, images = [], []
    for path in inputs:
        if path.endswith(".json"):
            for group in as_groups(load_corpus(path)):
                ids.append("/".join(group[0].key))
                images.append(variant_image(group, variant, manager.input_height))
        else:
            ids.append(os.path.splitext(os.path.basename(path))[0])
            images.append(prepare_line_image(load_raster(path), variant, manager.input_height))

    results = predict_batch(manager.voters, images, manager.codec, batch_size, ctx.obj["threads"])
    table = TranscriptionTable.from_records(zip(ids, (r.text for r in results)))
    if out:
        table.save(out)
        emit(
            {
                "out": out,
                "lines": len(table),
                "sequence_confidences": {i: r.sequence_confidence for i, r in zip(ids, results)},
            }
        )
    else:
        click.echo(table.to_tsv(), nl=False)


# ------------------------------------------------------------- evaluation


def _eval_pairs(gt, pred, normalize_flag, rules_path, fold_virgula):
    rules = _rules(rules_path, fold_virgula) if (normalize_flag or rules_path or fold_virgula) else None
    triples = pair_transcriptions(TranscriptionTable.load(gt), TranscriptionTable.load(pred))
    pairs = prepare_pairs(((g, p) for _, g, p in triples), rules)
    return [t[0] for t in triples], pairs


def _eval_options(f):
    for option in reversed(
        [
            click.option("--gt", required=True, type=click.Path(dir_okay=False)),
            click.option("--pred", required=True, type=click.Path(dir_okay=False)),
            click.option("--normalize", "normalize_flag", is_flag=True, help="Apply the default rules to both sides."),
            click.option("--rules", "rules_path", type=click.Path(dir_okay=False)),
            click.option("--fold-virgula", is_flag=True),
            click.option("--out", type=click.Path(dir_okay=False)),
        ]
    ):
        f = option(f)
    return f


@cli.command(name="eval")
@_eval_options
@click.option("--by-work", is_flag=True, help="Also report CER per work (line_id prefix before '/').")
def eval_cmd(gt, pred, normalize_flag, rules_path, fold_virgula, out, by_work):
    """Character error rate of predictions against ground truth."""
    ids, pairs = _eval_pairs(gt, pred, normalize_flag, rules_path, fold_virgula)
    result = cer(pairs).to_dict()
    if by_work:
        groups = {}
        for line_id, pair in zip(ids, pairs):
            groups.setdefault(group_of(line_id), []).append(pair)
        grouped = cer_by_group(groups)
        result["macro_cer"] = grouped.macro_cer
        result["by_work"] = {k: v.to_dict() for k, v in grouped.groups.items()}
    emit(result, out)


@cli.command()
@_eval_options
@click.option("--top-n", default=Config.DEFAULT_TOP_N, show_default=True, type=click.IntRange(1))
@click.option("--format", "fmt", default="json", show_default=True, type=click.Choice(["json", "tsv"]))
@click.option("--plot", type=click.Path(dir_okay=False), help="Write a bar chart as HTML.")
def confusions(gt, pred, normalize_flag, rules_path, fold_virgula, out, top_n, fmt, plot):
    """Most common confusions between ground truth and predictions."""
    _, pairs = _eval_pairs(gt, pred, normalize_flag, rules_path, fold_virgula)
    report = confusion_table(pairs, top_n)
    if plot:
        visualizer = Visualizer()
        visualizer.write_figure(visualizer.confusion_figure(report), plot)
    if fmt == "tsv":
        text = report.to_tsv()
        if out:
            with open(out, "w", encoding="utf-8") as f:
                f.write(text)
        else:
            click.echo(text, nl=False)
    else:
        emit(report.to_dict(), out)


# -------------------------------------------------------------- entrypoint


def run(argv: Sequence[str]) -> int:
    """Run the CLI on ``argv`` and return the exit status."""
    try:
        status = cli.main(args=list(argv), prog_name="histocr", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    return status if isinstance(status, int) else 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
