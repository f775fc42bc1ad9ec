"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic dataset), ``train``, ``eval``
(greedy and/or word-beam-search decoding with pooled CER/WER), ``infer``
(one image) and ``gradcheck``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig
from .ctc import InfeasibleAlignment, greedy_decode
from .data import (
    DataError,
    encode,
    generate_samples,
    preprocess,
    read_corpus,
    read_manifest,
    read_pgm,
    read_split,
    synthesize,
)
from .gradcheck import gradient_suite
from .lexdecode import MODES, CharClassing, WordBeamSearch, build_prefix_tree, decode_paragraph
from .metrics import evaluate
from .model import GatedLexiconNet
from .numerics import NumericalInstabilityError, precision, set_precision
from .train import Trainer, write_loss_log

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("gatedlexnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _splits(text: str) -> dict[str, int]:
    out = {}
    for item in text.split(","):
        name, _, n = item.partition("=")
        if not name or not n.isdigit():
            raise argparse.ArgumentTypeError(f"expected name=count[,name=count...], got {text!r}")
        out[name.strip()] = int(n)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gatedlexnet", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="key=value run configuration file")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides train.seed")

    s = sub.add_parser("synth", help="write a synthetic paragraph dataset")
    common(s)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--splits", type=_splits, default={"train": 10, "test": 10})

    t = sub.add_parser("train", help="train on a dataset split")
    common(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--log", type=Path, help="loss CSV (default: <out>.loss.csv)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--pretrain-lines", type=int, help="line-level CTC pretraining iterations")
    t.add_argument("--precision", choices=("float32", "float64"))

    def decoding(sp):
        sp.add_argument("--decode", choices=("greedy", "wbs", "both"), default="both")
        sp.add_argument("--corpus", type=Path, help="lexicon corpus, one line per line")
        sp.add_argument("--wbs-mode", choices=MODES)
        sp.add_argument("--beam-width", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="test")
    decoding(e)

    i = sub.add_parser("infer", help="transcribe one PGM image")
    common(i)
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--image", type=Path, required=True)
    decoding(i)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(g)
    g.add_argument("--probes", type=int, default=12)
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    for attr, section, key in (
        ("iterations", cfg.train, "iterations"),
        ("lr", cfg.train, "lr"),
        ("optimizer", cfg.train, "optimizer"),
        ("pretrain_lines", cfg.train, "pretrain_lines"),
        ("wbs_mode", cfg.lexdecode, "mode"),
        ("beam_width", cfg.lexdecode, "beam_width"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(section, key, value)
    if getattr(args, "precision", None):
        cfg.precision = args.precision
    if cfg.lexdecode.beam_width < 1:
        raise UsageError("--beam-width must be >= 1")
    return cfg


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    d = cfg.data
    manifest = synthesize(
        args.out, cfg.train.seed, args.splits, (d.lines_min, d.lines_max),
        render=d.render(), words_per_line=(d.words_min, d.words_max),
    )
    print(f"wrote {sum(manifest.splits.values())} samples to {args.out} (alphabet {manifest.alphabet!r})")
    return EXIT_OK


def _line_pretraining_set(samples, alphabet, cfg: RunConfig):
    """Single-line images rendered from the words of the training transcripts."""
    vocab = sorted({w for s in samples for ln in s.lines for w in ln.split()})
    lines = generate_samples(cfg.train.seed + 7919, 64, (1, 1), vocab, cfg.data.render(),
                             (cfg.data.words_min, cfg.data.words_max))
    return [(s.image, encode(s.lines[0], alphabet)) for s in lines]


def cmd_train(args) -> int:
    cfg = _config(args)
    set_precision(cfg.precision)
    manifest = read_manifest(args.data)
    samples = read_split(args.data / args.split, manifest.alphabet)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    model = GatedLexiconNet(cfg.model_config(len(manifest.alphabet)), seed=cfg.train.seed)
    trainer = Trainer(model, manifest.alphabet, cfg.train, cfg.attention.lam, cfg.augment)
    if cfg.train.pretrain_lines > 0:
        losses = trainer.pretrain_lines(_line_pretraining_set(samples, manifest.alphabet, cfg), cfg.train.pretrain_lines)
        print(f"line pretraining: {len(losses)} iterations, final CTC {losses[-1]:.4f}")
    rows = trainer.fit(samples, cfg.train.iterations)
    ckpt.save(args.out, model, cfg, manifest.alphabet, trainer.iteration)
    log_path = args.log or args.out.with_suffix(args.out.suffix + ".loss.csv")
    write_loss_log(log_path, rows)
    if rows:
        print(f"iterations={trainer.iteration} ctc_loss={rows[-1].ctc_loss:.4f} ce_loss={rows[-1].ce_loss:.4f}")
    print(f"checkpoint={args.out}\nloss_log={log_path}")
    return EXIT_OK


def _wbs(cfg: RunConfig, alphabet: str, corpus_lines) -> WordBeamSearch:
    classing = CharClassing.default(alphabet)
    tree, lm = build_prefix_tree(corpus_lines, classing)
    return WordBeamSearch(alphabet, tree, lm, classing, cfg.lexdecode.mode, cfg.lexdecode.beam_width)


def _fit_geometry(image: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if image.shape[-2:] == (cfg.data.height, cfg.data.width):
        return image
    return preprocess(image, cfg.data.height, cfg.data.width)


def transcribe(model: GatedLexiconNet, image: np.ndarray, alphabet: str, decoder: WordBeamSearch | None,
               max_line_length: int) -> dict[str, str]:
    """Greedy (and, with a decoder, word beam search) transcription of one paragraph image."""
    lines, _ = model.recognize(image, max_line_length)
    out = {"greedy": "\n".join(greedy_decode(p, alphabet) for p in lines)}
    if decoder is not None:
        out["wbs"] = decode_paragraph(lines, decoder) if lines else ""
    return out


def evaluate_checkpoint(checkpoint: ckpt.Checkpoint, samples, cfg: RunConfig, decode: str, corpus_lines=None):
    """Decode ``samples`` and return ``{decoder name: EvalReport}``."""
    model = checkpoint.build_model()
    alphabet = checkpoint.alphabet
    decoder = None
    if decode in ("wbs", "both"):
        corpus_lines = corpus_lines if corpus_lines is not None else [ln for s in samples for ln in s.lines]
        decoder = _wbs(cfg, alphabet, corpus_lines)
    hyps: dict[str, list[str]] = {"greedy": [], "wbs": []}
    with precision(checkpoint.config.precision):
        for s in samples:
            for k, v in transcribe(model, _fit_geometry(s.image, cfg), alphabet, decoder,
                                   cfg.attention.max_line_length).items():
                hyps[k].append(v)
    names = {"greedy": ["greedy"], "wbs": ["wbs"], "both": ["greedy", "wbs"]}[decode]
    refs = ["\n".join(s.lines) for s in samples]
    ids = [s.id for s in samples]
    return {n: evaluate(refs, hyps[n], ids) for n in names}


def _checkpoint_config(args, checkpoint: ckpt.Checkpoint) -> RunConfig:
    cfg = checkpoint.config
    if args.config:
        cfg = RunConfig.load(args.config)
    if args.wbs_mode:
        cfg.lexdecode.mode = args.wbs_mode
    if args.beam_width is not None:
        if args.beam_width < 1:
            raise UsageError("--beam-width must be >= 1")
        cfg.lexdecode.beam_width = args.beam_width
    return cfg


def cmd_eval(args) -> int:
    checkpoint = ckpt.load(args.checkpoint)
    cfg = _checkpoint_config(args, checkpoint)
    manifest = read_manifest(args.data)
    if manifest.alphabet != checkpoint.alphabet:
        raise DataError(f"alphabet mismatch: checkpoint {checkpoint.alphabet!r}, dataset {manifest.alphabet!r}")
    samples = read_split(args.data / args.split, manifest.alphabet)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    corpus = read_corpus(args.corpus) if args.corpus else None
    reports = evaluate_checkpoint(checkpoint, samples, cfg, args.decode, corpus)
    for name, report in reports.items():
        print(report.table(f"== {name} =="))
        print()
    if len(reports) == 2:
        g, w = reports["greedy"], reports["wbs"]
        print(f"{'decoder':<8}{'CER%':>8}{'WER%':>8}")
        print(f"{'greedy':<8}{100 * g.cer:>8.2f}{100 * g.wer:>8.2f}")
        print(f"{'wbs':<8}{100 * w.cer:>8.2f}{100 * w.wer:>8.2f}")
    for name, report in reports.items():
        print(report.key_values(f"{name}."))
    return EXIT_OK


def cmd_infer(args) -> int:
    checkpoint = ckpt.load(args.checkpoint)
    cfg = _checkpoint_config(args, checkpoint)
    decoder = None
    if args.decode in ("wbs", "both"):
        if not args.corpus:
            raise UsageError("word beam search needs --corpus")
        decoder = _wbs(cfg, checkpoint.alphabet, read_corpus(args.corpus))
    model = checkpoint.build_model()
    with precision(checkpoint.config.precision):
        out = transcribe(model, _fit_geometry(read_pgm(args.image), cfg), checkpoint.alphabet, decoder,
                         cfg.attention.max_line_length)
    for name, text in out.items():
        if args.decode in (name, "both"):
            print(f"[{name}]\n{text}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    with precision("float64"):
        results = gradient_suite(cfg.train.seed, args.probes)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} parameter tensors pass")
    return EXIT_OK if not failed else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalInstabilityError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ckpt.CheckpointError, InfeasibleAlignment, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
