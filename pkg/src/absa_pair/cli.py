"""Command-line entry point: prepare | train | eval | predict.

Artifacts live under ``<out_dir>``::

    prepared/<digest>/   canonical corpus, split, vocab, expanded pairs per mode
    runs/<digest>/       per-epoch checkpoints, checkpoint.npz, history.csv/.png
    reports/             <label>.md/.csv/.json, confusion figures, comparison table

Directory names are digests of the configuration that produced them, so
re-running a stage with the same config rewrites identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .auxpair import AuxMode, TemplateSet, expand_corpus
from .config import (
    ConfigError,
    PipelineConfig,
    RunManifest,
    digest_of,
    file_digest,
    prepare_key,
    train_key,
    worker_threads,
)
from .corpus import Corpus, Polarity, corpus_stats, load_corpus, stratified_split, write_canonical
from .encoder import init_params, load_checkpoint, save_checkpoint
from .evaluation import (
    EvalReport,
    PredictionSet,
    predict_corpus,
    render_details,
    render_report,
    report_label,
)
from .tokenizer import Vocab, encode_dataset, train_vocab
from .training import TrainHistory, train

log = logging.getLogger("absa_pair")

DIGEST_CHARS = 16


# -- shared helpers -------------------------------------------------------------------


def _vocab_texts(corpus: Corpus, templates: TemplateSet) -> list[str]:
    """Review texts of the training split plus every auxiliary sentence they expand to."""
    texts = [inst.text for inst in corpus]
    for mode in AuxMode:
        texts.extend(ex.sentence_b for ex in expand_corpus(corpus, mode, templates).examples)
    return texts


def _prepared_dir(cfg: PipelineConfig) -> tuple[Path, str, str]:
    if cfg.corpus_path is None:
        raise ConfigError("corpus.path is not set")
    if not cfg.corpus_path.is_file():
        raise FileNotFoundError(f"corpus file not found: {cfg.corpus_path}")
    corpus_digest = file_digest(cfg.corpus_path)
    digest = digest_of(prepare_key(cfg, corpus_digest))
    return cfg.out_dir / "prepared" / digest[:DIGEST_CHARS], digest, corpus_digest


def _run_dir(cfg: PipelineConfig) -> tuple[Path, Path, str]:
    prep_dir, prep_digest, _ = _prepared_dir(cfg)
    digest = digest_of(train_key(cfg, prep_digest))
    return prep_dir, cfg.out_dir / "runs" / digest[:DIGEST_CHARS], digest


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the earlier stage first)")
    return path


# -- commands ---------------------------------------------------------------------------


def cmd_prepare(cfg: PipelineConfig) -> Path:
    prep_dir, digest, corpus_digest = _prepared_dir(cfg)
    corpus = load_corpus(cfg.corpus_path, cfg.corpus_format)
    train_split, test_split = stratified_split(corpus, cfg.test_fraction, cfg.seed)
    vocab = train_vocab(
        _vocab_texts(train_split, cfg.templates), cfg.tokenizer.vocab_size, cfg.tokenizer.min_frequency
    )

    (prep_dir / "expanded").mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("prepare", cfg.to_dict(), inputs={str(cfg.corpus_path): corpus_digest})
    outputs = []
    for name, part in (("corpus", corpus), ("train", train_split), ("test", test_split)):
        write_canonical(part, prep_dir / f"{name}.jsonl")
        outputs.append(prep_dir / f"{name}.jsonl")
    vocab.save(prep_dir / "vocab.txt")
    outputs.append(prep_dir / "vocab.txt")
    for mode in AuxMode:
        for name, part in (("all", corpus), ("train", train_split), ("test", test_split)):
            path = prep_dir / "expanded" / f"{mode.value.lower()}-{name}.jsonl"
            expand_corpus(part, mode, cfg.templates).write_jsonl(path)
            outputs.append(path)
    stats = {name: corpus_stats(part).as_dict()
             for name, part in (("corpus", corpus), ("train", train_split), ("test", test_split))}
    (prep_dir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    outputs.append(prep_dir / "stats.json")
    for path in outputs:
        manifest.add_artifact(prep_dir, path)
    manifest.inputs["prepare_digest"] = digest
    manifest.write(prep_dir / "manifest.json")
    s = stats["corpus"]
    print(f"prepared {s['total']} instances over {s['reviews']} reviews "
          f"(positive {s['positive']}, negative {s['negative']}, neutral {s['neutral']}) -> {prep_dir}")
    return prep_dir


def _checkpoint_metadata(cfg: PipelineConfig, vocab: Vocab, run_digest: str, epoch: int) -> dict:
    return {
        "mode": cfg.mode.value,
        "model_name": cfg.model_name,
        "templates": cfg.templates.to_dict(),
        "max_len": cfg.tokenizer.max_len,
        "vocab": list(vocab.tokens),
        "run_digest": run_digest,
        "epoch": epoch,
        "tool_version": __version__,
    }


def cmd_train(cfg: PipelineConfig) -> Path:
    prep_dir, run_dir, run_digest = _run_dir(cfg)
    vocab = Vocab.load(_require(prep_dir / "vocab.txt", "prepared vocabulary"))
    enc_cfg = cfg.encoder_config(len(vocab))
    train_cfg = cfg.train_config()
    train_split = load_corpus(_require(prep_dir / "train.jsonl", "prepared train split"))
    test_split = load_corpus(_require(prep_dir / "test.jsonl", "prepared test split"))
    max_len = cfg.tokenizer.max_len
    train_data = encode_dataset(expand_corpus(train_split, cfg.mode, cfg.templates), vocab, max_len)
    eval_data = None
    if len(test_split):
        eval_data = encode_dataset(expand_corpus(test_split, cfg.mode, cfg.templates), vocab, max_len)

    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.to_dict(), inputs={
        "prepared/manifest.json": file_digest(prep_dir / "manifest.json"),
    })

    def save_epoch(epoch: int, params, history: TrainHistory) -> None:
        path = run_dir / f"checkpoint-epoch{epoch}.npz"
        save_checkpoint(path, params, _checkpoint_metadata(cfg, vocab, run_digest, epoch))
        manifest.add_artifact(run_dir, path)

    params = init_params(enc_cfg)
    params, history = train(params, train_data, train_cfg, eval_data, on_epoch_end=save_epoch)
    final = run_dir / "checkpoint.npz"
    shutil.copyfile(run_dir / f"checkpoint-epoch{history.epochs[-1].epoch}.npz", final)
    history.write_csv(run_dir / "history.csv")
    from .plotting import plot_history

    plot_history(history, run_dir / "history.png", title=report_label(cfg.model_name, cfg.mode))
    for path in (final, run_dir / "history.csv", run_dir / "history.png"):
        manifest.add_artifact(run_dir, path)
    manifest.write(run_dir / "manifest.json")
    last = history.epochs[-1]
    print(f"trained {len(history.epochs)} epoch(s), final loss {last.mean_loss:.6f}, "
          f"train accuracy {last.train_accuracy:.4f} -> {final}")
    return final


def _unique_label(label: str, taken: set[str]) -> str:
    out, k = label, 2
    while out in taken:
        out, k = f"{label}#{k}", k + 1
    taken.add(out)
    return out


def cmd_eval(cfg: PipelineConfig, checkpoints: list[Path], split: str = "test", verbose: bool = False) -> list[EvalReport]:
    prep_dir, run_dir, _ = _run_dir(cfg)
    if not checkpoints:
        checkpoints = [run_dir / "checkpoint.npz"]
    split_file = {"test": "test.jsonl", "train": "train.jsonl", "all": "corpus.jsonl"}[split]
    corpus = load_corpus(_require(prep_dir / split_file, f"prepared {split} split"))
    if len(corpus) == 0:
        raise ValueError(f"the {split} split is empty")
    report_dir = cfg.out_dir / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", cfg.to_dict(), inputs={
        f"prepared/{split_file}": file_digest(prep_dir / split_file),
    })
    from .plotting import plot_comparison, plot_confusion

    reports, taken = [], set()
    for ckpt in checkpoints:
        if not Path(ckpt).is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        params, meta = load_checkpoint(ckpt)
        manifest.inputs[str(ckpt)] = file_digest(ckpt)
        mode = AuxMode.parse(meta["mode"])
        templates = TemplateSet.from_dict(meta["templates"])
        vocab = Vocab(meta["vocab"])
        predicted, _, _ = predict_corpus(params, corpus, mode, templates, vocab, meta["max_len"])
        preds = PredictionSet(tuple(i.polarity for i in corpus), tuple(predicted), mode, meta["model_name"])
        label = _unique_label(report_label(meta["model_name"], mode), taken)
        report = EvalReport.from_predictions(preds, label)
        reports.append(report)
        stem = label.replace("#", "_")
        (report_dir / f"{stem}.md").write_text(render_report([report], "markdown"), encoding="utf-8")
        (report_dir / f"{stem}.csv").write_text(render_report([report], "csv"), encoding="utf-8")
        (report_dir / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
        plot_confusion(report, report_dir / f"{stem}-confusion.png")
        for suffix in (".md", ".csv", ".json", "-confusion.png"):
            manifest.add_artifact(report_dir, report_dir / f"{stem}{suffix}")
        if verbose:
            print(render_details(report), end="")
    table = render_report(reports, "markdown")
    (report_dir / "comparison.md").write_text(table, encoding="utf-8")
    (report_dir / "comparison.csv").write_text(render_report(reports, "csv"), encoding="utf-8")
    plot_comparison(reports, report_dir / "comparison.png")
    for name in ("comparison.md", "comparison.csv", "comparison.png"):
        manifest.add_artifact(report_dir, report_dir / name)
    manifest.write(report_dir / "manifest.json")
    print(table, end="")
    return reports


def cmd_predict(checkpoint: Path, text: str, aspect: str, mode: AuxMode | None = None,
                out_dir: Path | None = None) -> Polarity:
    if not text or not text.strip():
        raise ValueError("--text must be nonempty")
    if not aspect or not aspect.strip():
        raise ValueError("--aspect must be nonempty")
    if not Path(checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    params, meta = load_checkpoint(checkpoint)
    mode = mode or AuxMode.parse(meta["mode"])
    templates = TemplateSet.from_dict(meta["templates"])
    vocab = Vocab(meta["vocab"])
    # the same path cmd_eval takes, for a one-instance corpus; the polarity is a placeholder
    corpus = Corpus.from_records([("input", text, aspect, Polarity.POSITIVE)])
    predicted, dataset, probs = predict_corpus(params, corpus, mode, templates, vocab, meta["max_len"])
    lines = [f"mode\t{mode.value}"]
    if mode.is_binary:
        for ex, row in zip(dataset.examples, probs):
            lines.append(f"yes[{ex.candidate.value}]\t{row[1]:.6f}\t{ex.sentence_b}")
    else:
        for polarity, p in zip(Polarity, probs[0]):
            lines.append(f"p[{polarity.value}]\t{p:.6f}")
    lines.append(f"polarity\t{predicted[0].value}")
    output = "\n".join(lines) + "\n"
    sys.stdout.write(output)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "prediction.tsv").write_text(output, encoding="utf-8")
        manifest = RunManifest(
            "predict",
            {"checkpoint": str(checkpoint), "text": text, "aspect": aspect, "mode": mode.value},
            inputs={str(checkpoint): file_digest(checkpoint)},
        )
        manifest.add_artifact(out_dir, out_dir / "prediction.tsv")
        manifest.write(out_dir / "manifest.json")
    return predicted[0]


# -- argument handling -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="absa-pair",
        description="Aspect-based sentiment analysis as sentence-pair classification.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", type=Path, required=config_required,
                       help="JSON pipeline config (a run manifest also works)")
        p.add_argument("--mode", type=str, help="qa-m, nli-m, qa-b or nli-b")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")

    common(sub.add_parser("prepare", help="load, split, expand and build the vocabulary"))
    common(sub.add_parser("train", help="fine-tune on the prepared train split"))
    p_eval = sub.add_parser("eval", help="score checkpoints and write reports")
    common(p_eval)
    p_eval.add_argument("--checkpoint", type=Path, action="append", default=[],
                        help="checkpoint to score; repeat for a comparison table")
    p_eval.add_argument("--split", choices=("test", "train", "all"), default="test")
    p_eval.add_argument("--details", action="store_true", help="print per-class scores")
    p_pred = sub.add_parser("predict", help="classify one (text, aspect) pair")
    common(p_pred, config_required=False)
    p_pred.add_argument("--checkpoint", type=Path, required=True)
    p_pred.add_argument("--text", required=True)
    p_pred.add_argument("--aspect", required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    overrides = {}
    if args.mode:
        overrides["mode"] = AuxMode.parse(args.mode)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return replace(cfg, **overrides) if overrides else cfg


def run(args: argparse.Namespace) -> None:
    if args.command == "predict":
        mode = AuxMode.parse(args.mode) if args.mode else None
        cmd_predict(args.checkpoint, args.text, args.aspect, mode, args.out)
        return
    cfg = resolve_config(args)
    if args.command == "prepare":
        cmd_prepare(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.split, args.details)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = worker_threads()
        with threadpool_limits(limits=threads) if threads else nullcontext():
            run(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"absa-pair {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
