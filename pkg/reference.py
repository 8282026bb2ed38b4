"""
Desk-scale reference runs on synthetic corpora.

This module handles:
- The cross-fold voting ensemble on four balanced styles
- Two-stage training on an imbalanced corpus
- Finetuning a three-style model on a held-out style against training from scratch
- An augmentation and preprocessing-variant grid (bin, ocro, all-var, each with and without augmentation)

Every run is seeded; the results are written to REFERENCE_RESULTS.json together with
the checked claims, and optionally summarized in a plotly chart.
"""

import json
import statistics
import time
from typing import Any, Dict, Optional, Sequence

import click
import numpy as np

from config import Config, TrainConfig
from corpus import Corpus, select_balanced, split_corpus, split_folds
from imgproc import VARIANT_PRESETS
from models.network import ArchSpec
from synth import BUILTIN_STYLES, SynthSpec, generate_corpus
from textnorm import alphabet_of
from trainer import adapt_codec, as_groups, ensemble_cer, train_crossfold, train_two_stage
from utils.logger import Logger, set_global_level
from visualization import Visualizer

logger = Logger("reference")

RESULTS_FILE = "REFERENCE_RESULTS.json"
IMBALANCED_WEIGHTS = (0.91, 0.03, 0.03, 0.03)
ABLATION_VARIANTS = ("bin", "ocro", "all-var")
ABLATION_AUGMENTATIONS = 1

# desk-scale bounds on the pinned reference corpus
MAX_VOTED_CER = 0.02
MAX_VAL_CER = 0.10


def _train_config(seed: int, max_epochs: int) -> TrainConfig:
    return TrainConfig(
        seed=seed, voters=5, max_epochs=max_epochs, patience=5, augmentations_per_sample=ABLATION_AUGMENTATIONS
    )


def _split(corpus: Corpus, train: int, val: int, test: int, seed: int):
    """(train+val, test); validation shards come from the cross-fold split."""
    fit, held, test_part = split_corpus(corpus, (train, val, test), seed)
    return Corpus.from_lines(fit.lines() + held.lines(), corpus.work_tags()), test_part


def _balanced_reference(seed: int, scale: float):
    """The four-style reference corpus: (train+val, test, codec, desk arch)."""
    train_n, val_n, test_n = (int(round(n * scale)) for n in (2000, 200, 200))
    corpus = generate_corpus(SynthSpec(total_lines=train_n + val_n + test_n), seed)
    fit, test = _split(corpus, train_n, val_n, test_n, seed)
    codec = alphabet_of(corpus)
    return fit, test, codec, ArchSpec.preset("desk", codec.size)


def run_ensemble(seed: int, scale: float, max_epochs: int, threads: int) -> Dict[str, Any]:
    """Voted test CER of a five-voter ensemble against its individual voters."""
    fit, test, codec, arch = _balanced_reference(seed, scale)

    started = time.perf_counter()
    trained = train_crossfold(_train_config(seed, max_epochs), fit, arch=arch, codec=codec, threads=threads)
    evaluation = ensemble_cer([c for c, _ in trained], test, threads=threads)
    median_voter = statistics.median(evaluation.voter_cers)
    logger.info(f"ensemble: voted CER {evaluation.overall.cer:.4f}, median voter {median_voter:.4f}")
    return {
        "lines": {"train+val": len(as_groups(fit)), "test": len(as_groups(test))},
        "voted_cer": evaluation.overall.cer,
        "voter_cers": evaluation.voter_cers,
        "median_voter_cer": median_voter,
        "voted_le_median": evaluation.overall.cer <= median_voter,
        "best_val_cers": [report.best_cer for _, report in trained],
        "by_style": {k: v.cer for k, v in evaluation.by_work.groups.items()},
        "wall_time": time.perf_counter() - started,
    }


def run_two_stage(seed: int, scale: float, max_epochs: int, threads: int) -> Dict[str, Any]:
    """Macro per-style CER of the stage-1 and stage-2 ensembles on an imbalanced corpus."""
    train_n, val_n, test_n = (int(round(n * scale)) for n in (2000, 200, 200))
    spec = SynthSpec(total_lines=train_n + val_n + test_n, weights=IMBALANCED_WEIGHTS)
    corpus = generate_corpus(spec, seed)
    fit, test = _split(corpus, train_n, val_n, test_n, seed)
    cap = max(1, min(spec.line_counts().values()) // 2)
    fit = select_balanced(fit, cap, seed)
    arch = ArchSpec.preset("desk", alphabet_of(corpus).size)

    config = _train_config(seed, max_epochs)
    outcome = train_two_stage(config, config, fit, arch, threads)
    stage1 = ensemble_cer([c for c, _ in outcome.stage1], test, threads=threads, per_voter=False)
    stage2 = ensemble_cer(outcome.ensemble, test, threads=threads, per_voter=False)
    logger.info(f"two-stage: macro CER {stage1.macro_cer:.4f} -> {stage2.macro_cer:.4f}")
    return {
        "weights": list(IMBALANCED_WEIGHTS),
        "line_counts": spec.line_counts(),
        "balance_cap": cap,
        "stage1_macro_cer": stage1.macro_cer,
        "stage2_macro_cer": stage2.macro_cer,
        "stage1_by_style": {k: v.cer for k, v in stage1.by_work.groups.items()},
        "stage2_by_style": {k: v.cer for k, v in stage2.by_work.groups.items()},
        "stage2_le_stage1": stage2.macro_cer <= stage1.macro_cer,
    }


def run_finetune(seed: int, scale: float, max_epochs: int, threads: int) -> Dict[str, Any]:
    """Two-fold CER on a held-out style: finetuned from a three-style model vs from scratch."""
    pretrain_styles, target_style = BUILTIN_STYLES[:3], BUILTIN_STYLES[3]
    pretrain = generate_corpus(SynthSpec(styles=pretrain_styles, total_lines=int(round(1500 * scale))), seed)
    target = generate_corpus(SynthSpec(styles=(target_style,), total_lines=int(round(500 * scale))), seed + 1)
    codec = alphabet_of(pretrain)
    arch = ArchSpec.preset("desk", codec.size)
    config = _train_config(seed, max_epochs)

    base = train_crossfold(config.with_overrides(voters=1), pretrain, arch=arch, codec=codec, threads=threads)[0][0]
    adapted = adapt_codec(base, alphabet_of(target))
    shared_rows_exact = all(
        np.array_equal(adapted.tensors["out.w"][adapted.codec.index(ch)], base.tensors["out.w"][base.codec.index(ch)])
        for ch in adapted.codec.chars
        if base.codec.covers(ch)
    )

    finetuned, scratch = [], []
    for train, test in split_folds(as_groups(target), 2, seed):
        tuned = train_crossfold(config, train, init=adapted, stage="finetune", threads=threads)
        fresh = train_crossfold(config, train, arch=arch, codec=adapted.codec, stage="scratch", threads=threads)
        finetuned.append(ensemble_cer([c for c, _ in tuned], test, per_voter=False, threads=threads).overall.cer)
        scratch.append(ensemble_cer([c for c, _ in fresh], test, per_voter=False, threads=threads).overall.cer)
    logger.info(f"finetune: {np.mean(finetuned):.4f} vs scratch {np.mean(scratch):.4f}")
    return {
        "pretrain_styles": list(pretrain_styles),
        "target_style": target_style,
        "finetuned_fold_cers": finetuned,
        "scratch_fold_cers": scratch,
        "finetuned_cer": float(np.mean(finetuned)),
        "scratch_cer": float(np.mean(scratch)),
        "finetuned_le_scratch": float(np.mean(finetuned)) <= float(np.mean(scratch)),
        "shared_rows_exact": shared_rows_exact,
    }


def run_ablation(seed: int, scale: float, max_epochs: int, threads: int) -> Dict[str, Any]:
    """Voted test CER for each variant preset, with and without augmentation."""
    fit, test, codec, arch = _balanced_reference(seed, scale)
    base = _train_config(seed, max_epochs)
    rows = []
    for preset in ABLATION_VARIANTS:
        for augmentations in (0, ABLATION_AUGMENTATIONS):
            config = base.with_overrides(variant_list=VARIANT_PRESETS[preset], augmentations_per_sample=augmentations)
            trained = train_crossfold(config, fit, arch=arch, codec=codec, threads=threads)
            evaluation = ensemble_cer([c for c, _ in trained], test, threads=threads)
            logger.info(f"ablation {preset} aug={augmentations}: voted CER {evaluation.overall.cer:.4f}")
            rows.append(
                {
                    "variants": preset,
                    "augmentations_per_sample": augmentations,
                    "voted_cer": evaluation.overall.cer,
                    "median_voter_cer": statistics.median(evaluation.voter_cers),
                }
            )
    return {"rows": rows}


EXPERIMENTS = {
    "ensemble": run_ensemble,
    "two-stage": run_two_stage,
    "finetune": run_finetune,
    "ablation": run_ablation,
}


def check_claims(results: Dict[str, Any]) -> Dict[str, bool]:
    """The directional claims that hold for the experiments present in ``results``."""
    claims: Dict[str, bool] = {}
    if "ensemble" in results:
        ensemble = results["ensemble"]
        claims["voted_le_median"] = ensemble["voted_le_median"]
        claims["voted_cer_within_bound"] = ensemble["voted_cer"] <= MAX_VOTED_CER
        claims["val_cer_within_bound"] = all(c is not None and c < MAX_VAL_CER for c in ensemble["best_val_cers"])
    if "two-stage" in results:
        claims["stage2_le_stage1"] = results["two-stage"]["stage2_le_stage1"]
    if "finetune" in results:
        claims["finetuned_le_scratch"] = results["finetune"]["finetuned_le_scratch"]
        claims["shared_rows_exact"] = results["finetune"]["shared_rows_exact"]
    return claims


def run_all(
    seed: int = 42,
    scale: float = 1.0,
    max_epochs: int = 10,
    threads: int = 1,
    only: Optional[Sequence[str]] = None,
    out: Optional[str] = RESULTS_FILE,
    plot: Optional[str] = None,
) -> Dict[str, Any]:
    if isinstance(only, str):
        only = (only,)
    results: Dict[str, Any] = {"version": Config.VERSION, "seed": seed, "scale": scale, "max_epochs": max_epochs}
    for name, experiment in EXPERIMENTS.items():
        if only and name not in only:
            continue
        logger.info(f"running {name}")
        results[name] = experiment(seed, scale, max_epochs, threads)
    results["claims"] = check_claims(results)
    failed = sorted(name for name, held in results["claims"].items() if not held)
    if failed:
        logger.warning(f"claims not met: {', '.join(failed)}")
    if out:
        with open(out, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2, sort_keys=True)
    if plot:
        visualizer = Visualizer()
        visualizer.write_figure(visualizer.reference_summary_figure(results), plot)
    return results


@click.command()
@click.option("--seed", default=42, show_default=True)
@click.option("--scale", default=1.0, show_default=True, type=click.FloatRange(0.01), help="Multiplies every line count.")
@click.option("--max-epochs", default=10, show_default=True, type=click.IntRange(1))
@click.option("--threads", default=Config.DEFAULT_THREADS, show_default=True, type=click.IntRange(1))
@click.option("--only", multiple=True, type=click.Choice(list(EXPERIMENTS)), help="Repeat to run several.")
@click.option("--out", default=RESULTS_FILE, show_default=True, type=click.Path(dir_okay=False))
@click.option("--plot", type=click.Path(dir_okay=False), help="Write an HTML summary chart.")
def main(seed, scale, max_epochs, threads, only, out, plot):
    """Run the reference experiments and write their results as JSON."""
    set_global_level("INFO")
    run_all(seed, scale, max_epochs, threads, only, out, plot)


if __name__ == "__main__":
    main()
