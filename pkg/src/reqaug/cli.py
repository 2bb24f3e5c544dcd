"""Pipeline orchestration: ingest, augment, train-detector, detect, evaluate,
ablate. Every stage reads its inputs from the run directory, writes one
manifest (config snapshot, seeds, artifact checksums, timings, counts), and
is re-runnable from that manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import click

from . import augment as aug
from . import detect as det
from . import metrics as met
from .config import (
    CONFIG_ENV_VAR,
    DEMO,
    PROFILES,
    PipelineConfig,
    load_config,
    profile_config,
    to_dict,
)
from .demo import make_desk_corpus
from .errors import ConfigError, DataError, NumericalError
from .ingest import (
    CANONICAL,
    NORMAL,
    RequestCorpus,
    load_corpus,
    split_corpus,
    write_canonical,
)
from .lexicon import build_reserved, save_reserved
from .lm.bbpe import load_tokenizer, save_tokenizer, train_bbpe
from .lm.mlm import load_model, save_model, train_mlm


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(config: PipelineConfig, stage: str, artifacts: list[Path],
                    counts: dict, elapsed: float) -> Path:
    out = Path(config.out_dir)
    manifest_dir = out / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "config": to_dict(config),
        "seeds": {"master": config.seed},
        "checksums": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
        "timings": {"seconds": elapsed},
        "counts": counts,
    }
    path = manifest_dir / f"{stage}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")
    return path


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path} missing; run `{producer}` first")
    return path


def _load_split(config: PipelineConfig) -> tuple[RequestCorpus, RequestCorpus]:
    out = Path(config.out_dir)
    train = load_corpus(_require(out / "corpus" / "train.jsonl", "ingest"), CANONICAL)
    test = load_corpus(_require(out / "corpus" / "test.jsonl", "ingest"), CANONICAL)
    return train, test


def _strategy(config: PipelineConfig) -> aug.Top1Novel | aug.SampleTopK:
    if config.strategy == "top1-novel":
        return aug.Top1Novel()
    if config.strategy == "sample-topk":
        return aug.SampleTopK(k=config.topk, temperature=config.temperature,
                              seed=config.sampling_seed)
    raise ConfigError(f"unknown strategy {config.strategy!r}")


# --- stages --------------------------------------------------------------------


def run_ingest(config: PipelineConfig) -> dict:
    start = time.perf_counter()
    if config.dataset_format == DEMO:
        corpus = make_desk_corpus(config.demo_size, seed=config.demo_seed,
                                  abnormal_fraction=config.abnormal_fraction)
    else:
        if config.dataset_path is None:
            raise ConfigError("dataset_path required for non-demo formats")
        corpus = load_corpus(config.dataset_path, config.dataset_format)
    split = split_corpus(corpus, config.train_fraction, config.split_seed)

    out = Path(config.out_dir)
    paths = [out / "corpus" / "full.jsonl", out / "corpus" / "train.jsonl",
             out / "corpus" / "test.jsonl"]
    write_canonical(corpus, paths[0])
    write_canonical(split.train, paths[1])
    write_canonical(split.test, paths[2])

    counts = {"records": len(corpus), "skipped": corpus.skipped,
              "train": len(split.train), "test": len(split.test),
              "train_labels": split.train.label_counts(),
              "test_labels": split.test.label_counts()}
    _write_manifest(config, "ingest", paths, counts, time.perf_counter() - start)
    return counts


def _ensure_generator(config: PipelineConfig, train: RequestCorpus):
    """Load the generator tokenizer and model, training and saving if absent."""
    out = Path(config.out_dir)
    tok_dir = out / "generator" / "tokenizer"
    mlm_dir = out / "generator" / "mlm"
    if (tok_dir / "vocab.json").exists() and (mlm_dir / "weights.bin").exists():
        tokenizer = load_tokenizer(tok_dir)
        return tokenizer, load_model(mlm_dir, tokenizer)
    tokenizer = train_bbpe(train, config.generator_lm.vocab_size,
                           seed=config.generator_lm.seed)
    model = train_mlm(tokenizer, train, config.generator_lm)
    save_tokenizer(tokenizer, tok_dir)
    save_model(model, mlm_dir)
    return tokenizer, model


def run_augment(config: PipelineConfig) -> dict:
    start = time.perf_counter()
    train, _ = _load_split(config)
    out = Path(config.out_dir)

    table, reserved = build_reserved(train, config.confidence, config.z_override)
    reserved_path = out / "lexicon" / "reserved.txt"
    save_reserved(reserved, reserved_path)

    tokenizer, generator = _ensure_generator(config, train)
    strategy = _strategy(config)
    candidates, gen_stats = aug.generate_candidates(train, generator, reserved, strategy)
    if not candidates:
        raise DataError("no candidates could be generated")

    encoder_config = replace(config.generator_lm, seed=config.discriminator.seed)
    disc = aug.train_discriminator(encoder_config, tokenizer, train, candidates,
                                   config.discriminator)
    datastore = aug.build_datastore(train, generator, disc, reserved, strategy,
                                    precomputed=(candidates, gen_stats))
    datastore_path = out / "datastore.jsonl"
    aug.save_datastore(datastore, datastore_path)

    counts = {"reserved_tokens": len(reserved.tokens),
              "threshold": reserved.threshold, "z": reserved.z,
              "distinct_tokens": len(table.counts), **datastore.stats}
    artifacts = [reserved_path, datastore_path,
                 out / "generator" / "tokenizer" / "vocab.json",
                 out / "generator" / "tokenizer" / "merges.txt",
                 out / "generator" / "mlm" / "weights.bin",
                 out / "generator" / "mlm" / "manifest.json"]
    _write_manifest(config, "augment", artifacts, counts, time.perf_counter() - start)
    return counts


def run_train_detector(config: PipelineConfig) -> dict:
    start = time.perf_counter()
    out = Path(config.out_dir)
    datastore = aug.load_datastore(_require(out / "datastore.jsonl", "augment"))
    detector = det.train_detector(datastore, config.detector_lm, config.forest,
                                  config.calibration_percentile)
    det.save_detector(detector, out / "detector")

    counts = {"theta": detector.theta,
              "percentile": detector.calibration_percentile,
              "training_records": len(datastore.all_records()),
              "mlm_training_records": len(detector.audit["mlm_training_ids"])}
    artifacts = [out / "detector" / "forest.json",
                 out / "detector" / "calibration.json",
                 out / "detector" / "audit.json",
                 out / "detector" / "mlm" / "weights.bin",
                 out / "detector" / "mlm" / "manifest.json",
                 out / "detector" / "tokenizer" / "vocab.json",
                 out / "detector" / "tokenizer" / "merges.txt"]
    _write_manifest(config, "train-detector", artifacts, counts,
                    time.perf_counter() - start)
    return counts


def run_detect(config: PipelineConfig, input_path: str | None = None) -> dict:
    start = time.perf_counter()
    out = Path(config.out_dir)
    detector = det.load_detector(_require(out / "detector", "train-detector"))
    if input_path is None:
        input_path = _require(out / "corpus" / "test.jsonl", "ingest")
    corpus = load_corpus(input_path, CANONICAL)
    verdicts = [det.classify(detector, record) for record in corpus]
    verdict_path = out / "verdicts.jsonl"
    det.write_verdicts(verdicts, verdict_path)

    flagged = sum(1 for v in verdicts if v.flagged != NORMAL)
    counts = {"classified": len(verdicts), "flagged_abnormal": flagged,
              "theta": detector.theta}
    _write_manifest(config, "detect", [verdict_path], counts,
                    time.perf_counter() - start)
    return counts


def _classification_for(detector: det.DetectorModel,
                        test: RequestCorpus) -> met.ClassificationReport:
    verdicts = [det.classify(detector, record) for record in test]
    cm = met.confusion(verdicts, [record.label for record in test])
    return met.classification_report(cm)


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def run_evaluate(config: PipelineConfig) -> dict:
    start = time.perf_counter()
    out = Path(config.out_dir)
    train, test = _load_split(config)
    datastore = aug.load_datastore(_require(out / "datastore.jsonl", "augment"))
    detector = det.load_detector(_require(out / "detector", "train-detector"))

    baseline_store = aug.AugmentedDatastore(originals=train, synthetics=[],
                                            provenance={})
    baseline = det.train_detector(baseline_store, config.detector_lm, config.forest,
                                  config.calibration_percentile)
    base_report = _classification_for(baseline, test)
    aug_report = _classification_for(detector, test)

    tokenizer = load_tokenizer(out / "generator" / "tokenizer")
    generator = load_model(out / "generator" / "mlm", tokenizer)
    by_id = {record.id: record for record in train}
    pairs = [(s.filled_request, by_id[s.source_id]) for s in datastore.synthetics
             if s.source_id in by_id]
    idf = met.compute_idf(train)
    sim = met.similarity_report(generator, pairs, idf)

    reports = out / "reports"
    _write_table(reports / "similarity.csv", ["metric", "value"], [
        ["bleu", sim.bleu], ["bert_precision", sim.bert_p],
        ["bert_recall", sim.bert_r], ["bert_f1", sim.bert_f1],
        ["mover", sim.mover]])
    rows = []
    for arm, rep in (("baseline", base_report), ("augmented", aug_report)):
        rows.append([arm, rep.precision, rep.recall, rep.f1, rep.mcc])
    rows.append(["delta", aug_report.precision - base_report.precision,
                 aug_report.recall - base_report.recall,
                 aug_report.f1 - base_report.f1,
                 aug_report.mcc - base_report.mcc])
    _write_table(reports / "classification.csv",
                 ["arm", "precision", "recall", "f1", "mcc"], rows)
    doc = {
        "similarity": {"bleu": sim.bleu, "bert_precision": sim.bert_p,
                       "bert_recall": sim.bert_r, "bert_f1": sim.bert_f1,
                       "mover": sim.mover},
        "classification": {
            "baseline": vars(base_report), "augmented": vars(aug_report),
            "delta_f1": aug_report.f1 - base_report.f1},
    }
    (reports / "evaluation.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")

    counts = {"pairs_scored": len(pairs), "delta_f1": doc["classification"]["delta_f1"]}
    artifacts = [reports / "similarity.csv", reports / "classification.csv",
                 reports / "evaluation.json"]
    _write_manifest(config, "evaluate", artifacts, counts, time.perf_counter() - start)
    return doc


def run_ablate(config: PipelineConfig, confidence_levels: list[float]) -> list[dict]:
    """Rebuild reserved tokens, augmentation, and detection per confidence level."""
    start = time.perf_counter()
    out = Path(config.out_dir)
    train, test = _load_split(config)
    tokenizer, generator = _ensure_generator(config, train)
    strategy = _strategy(config)

    baseline_store = aug.AugmentedDatastore(originals=train, synthetics=[],
                                            provenance={})
    baseline = det.train_detector(baseline_store, config.detector_lm, config.forest,
                                  config.calibration_percentile)
    base_f1 = _classification_for(baseline, test).f1

    rows = []
    for level in confidence_levels:
        _, reserved = build_reserved(train, confidence=level, z_override=None)
        candidates, gen_stats = aug.generate_candidates(train, generator, reserved,
                                                        strategy)
        if candidates:
            encoder_config = replace(config.generator_lm,
                                     seed=config.discriminator.seed)
            disc = aug.train_discriminator(encoder_config, tokenizer, train,
                                           candidates, config.discriminator)
            datastore = aug.build_datastore(train, generator, disc, reserved,
                                            strategy, precomputed=(candidates, gen_stats))
        else:
            datastore = aug.AugmentedDatastore(originals=train, synthetics=[],
                                               provenance={})
        detector = det.train_detector(datastore, config.detector_lm, config.forest,
                                      config.calibration_percentile)
        level_f1 = _classification_for(detector, test).f1
        rows.append({"confidence": level, "reserved_tokens": len(reserved.tokens),
                     "synthetics": len(datastore.synthetics),
                     "f1_baseline": base_f1, "f1_augmented": level_f1,
                     "delta_f1": level_f1 - base_f1})

    reports = out / "reports"
    _write_table(reports / "ablation.csv",
                 ["confidence", "reserved_tokens", "synthetics",
                  "f1_baseline", "f1_augmented", "delta_f1"],
                 [[r["confidence"], r["reserved_tokens"], r["synthetics"],
                   r["f1_baseline"], r["f1_augmented"], r["delta_f1"]] for r in rows])
    (reports / "ablation.json").write_text(
        json.dumps(rows, sort_keys=True, indent=2), encoding="utf-8")
    _write_manifest(config, "ablate", [reports / "ablation.csv",
                                       reports / "ablation.json"],
                    {"levels": len(rows)}, time.perf_counter() - start)
    return rows


# --- command line ------------------------------------------------------------------


@click.group()
@click.option("--config", "config_path", envvar=CONFIG_ENV_VAR, default=None,
              type=click.Path(), help="YAML/JSON config or a run manifest.")
@click.option("--profile", type=click.Choice(PROFILES), default="desk",
              show_default=True, help="Base configuration preset.")
@click.option("--seed", type=int, default=None, help="Master seed for all stages.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory for artifacts.")
@click.pass_context
def cli(ctx, config_path, profile, seed, out_dir):
    """Augment sparse API request corpora and train a calibrated anomaly detector."""
    config = profile_config(profile, seed if seed is not None else 1234)
    if config_path:
        config = load_config(config_path, base=config)
    if seed is not None:
        config.seed = seed
        config = config.reseeded()
    if out_dir is not None:
        config.out_dir = out_dir
    ctx.obj = config


@cli.command()
@click.pass_obj
def ingest(config: PipelineConfig):
    """Load or generate the corpus and write the stratified split."""
    counts = run_ingest(config)
    click.echo(f"ingest: {counts['records']} records "
               f"({counts['train']} train / {counts['test']} test)")


@cli.command()
@click.pass_obj
def augment(config: PipelineConfig):
    """Build the reserved set, train the generator, and emit the datastore."""
    counts = run_augment(config)
    click.echo(f"augment: {counts['accepted']}/{counts['attempted']} synthetics "
               f"accepted ({counts['reserved_tokens']} reserved tokens, "
               f"T={counts['threshold']:.2f})")


@cli.command("train-detector")
@click.pass_obj
def train_detector_cmd(config: PipelineConfig):
    """Train tokenizer, normal-only MLM, forest, and calibrate the threshold."""
    counts = run_train_detector(config)
    click.echo(f"train-detector: theta={counts['theta']:.4f} "
               f"({counts['training_records']} training records)")


@cli.command()
@click.option("--input", "input_path", type=click.Path(exists=True), default=None,
              help="Canonical corpus to classify (defaults to the test split).")
@click.pass_obj
def detect(config: PipelineConfig, input_path):
    """Classify a corpus with the trained detector."""
    counts = run_detect(config, input_path)
    click.echo(f"detect: flagged {counts['flagged_abnormal']}/{counts['classified']} "
               f"records (theta={counts['theta']:.4f})")


@cli.command()
@click.pass_obj
def evaluate(config: PipelineConfig):
    """Similarity and classification reports, with and without augmentation."""
    doc = run_evaluate(config)
    click.echo(f"evaluate: bleu={doc['similarity']['bleu']:.4f} "
               f"delta_f1={doc['classification']['delta_f1']:+.4f}")


@cli.command()
@click.option("--levels", default="0.97,0.99,0.995", show_default=True,
              help="Comma-separated confidence levels.")
@click.pass_obj
def ablate(config: PipelineConfig, levels):
    """Sweep the reserved-token confidence level and report F1 deltas."""
    try:
        parsed = [float(x) for x in levels.split(",") if x.strip()]
    except ValueError as err:
        raise ConfigError(f"bad --levels value {levels!r}") from err
    rows = run_ablate(config, parsed)
    for row in rows:
        click.echo(f"ablate: confidence={row['confidence']} "
                   f"delta_f1={row['delta_f1']:+.4f}")


def main():
    try:
        cli(standalone_mode=False)
    except click.ClickException as err:
        err.show()
        sys.exit(2)
    except click.Abort:
        sys.exit(130)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(2)
    except DataError as err:
        click.echo(f"data error: {err}", err=True)
        sys.exit(3)
    except NumericalError as err:
        click.echo(f"numerical failure: {err}", err=True)
        sys.exit(4)


if __name__ == "__main__":
    main()
