"""Command-line driver for the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  All randomness
flows from explicit seeds; `--config` (or the GRIDKIE_CONFIG environment
variable) points at a JSON file with optional "model", "train", "augment",
"synth", and "classes" sections.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import (
    ClassSet,
    DatasetError,
    SynthSpec,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_generate,
)
from .gridder import AugmentParams, GridShape, map_to_grid, render_grid
from .model import CheckpointError, NetConfig, TokenGridNet, load_checkpoint
from .pipeline import Predictor
from .tokenizer import Vocabulary, build_vocab, tokenize_document
from .train import TrainConfig, train

CONFIG_ENV = "GRIDKIE_CONFIG"

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - {"model", "train", "augment", "synth", "classes"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _classes(cfg: dict) -> ClassSet:
    return ClassSet(cfg["classes"]) if "classes" in cfg else ClassSet()


def _augment(cfg: dict) -> AugmentParams:
    return AugmentParams(**cfg.get("augment", {}))


def _net_config(cfg: dict, classes: ClassSet,
                vocab: Vocabulary | None = None) -> NetConfig:
    section = dict(cfg.get("model", {}))
    if vocab is not None and "vocab_size" not in section:
        section["vocab_size"] = len(vocab)
    if "num_classes" not in section:
        section["num_classes"] = len(classes)
    return NetConfig.from_dict(section)


def _eval_shape(args, cfg: dict) -> GridShape:
    aug = _augment(cfg)
    rows = args.rows if args.rows is not None else aug.mean_rows
    cols = args.cols if args.cols is not None else aug.mean_cols
    return GridShape(rows, cols)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_predictor(args, cfg: dict) -> Predictor:
    model, class_names, _ = load_checkpoint(args.checkpoint)
    classes = ClassSet(class_names) if class_names else _classes(cfg)
    vocab = Vocabulary.load(args.vocab)
    return Predictor(model, vocab, classes, _eval_shape(args, cfg))


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    section = dict(cfg.get("synth", {}))
    if args.n is not None:
        section["n_documents"] = args.n
    if args.seed is not None:
        section["seed"] = args.seed
    spec = SynthSpec(**section)
    docs = synth_generate(spec)
    out = _out_dir(args) / "documents.jsonl"
    save_dataset(docs, out)
    print(f"wrote {len(docs)} documents to {out}")
    return 0


def cmd_vocab(args) -> int:
    cfg = _load_config(args.config)
    docs = load_dataset(args.data, _classes(cfg))
    vocab = build_vocab(docs, args.max_size)
    out = _out_dir(args) / "vocab.txt"
    vocab.save(out)
    print(f"wrote {len(vocab)} entries to {out}")
    return 0


def cmd_grid_dump(args) -> int:
    cfg = _load_config(args.config)
    classes = _classes(cfg)
    docs = load_dataset(args.data, classes)
    wanted = [d for d in docs if d.id == args.doc_id] if args.doc_id else docs[:1]
    if not wanted:
        raise DatasetError(f"document {args.doc_id!r} not found in {args.data}")
    doc = wanted[0]
    vocab = Vocabulary.load(args.vocab)
    grid = map_to_grid(doc, tokenize_document(doc, vocab),
                       _eval_shape(args, cfg), classes)
    out = _out_dir(args) / f"{doc.id}.grid.txt"
    out.write_text(render_grid(grid) + "\n", encoding="utf-8")
    print(f"wrote {grid.n_occupied}-piece grid to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    classes = _classes(cfg)
    docs = load_dataset(args.data, classes)
    vocab = Vocabulary.load(args.vocab)

    section = dict(cfg.get("train", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    tc = TrainConfig(augment=_augment(cfg), **section)
    model = TokenGridNet(_net_config(cfg, classes, vocab), seed=tc.seed)

    if args.holdout is not None:
        train_docs, test_docs = split_dataset(docs, 1.0 - args.holdout, tc.seed)
        logger.info("holdout split: %d train / %d test", len(train_docs), len(test_docs))
    else:
        train_docs, test_docs = docs, []

    out = _out_dir(args)
    result = train(model, train_docs, vocab, tc, classes,
                   checkpoint_dir=str(out), log_path=str(out / "train.jsonl"))
    print(f"trained {result.steps} steps, final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    if test_docs:
        predictor = Predictor(model, vocab, classes,
                              GridShape(tc.augment.mean_rows, tc.augment.mean_cols))
        print(predictor.evaluate(test_docs).to_table())
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    predictor = _load_predictor(args, cfg)
    docs = load_dataset(args.data, predictor.classes)
    report = predictor.evaluate(docs)
    print(report.to_table())
    if args.out:
        out = _out_dir(args) / "report.json"
        out.write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"wrote {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    predictor = _load_predictor(args, cfg)
    docs = load_dataset(args.data, predictor.classes)
    out = _out_dir(args)
    for doc in docs:
        payload = predictor.infer_payload(doc)
        path = out / f"{doc.id}.annotation.json"
        path.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n",
                        encoding="utf-8")
    print(f"wrote {len(docs)} annotation files to {out}")
    return 0


def cmd_param_count(args) -> int:
    cfg = _load_config(args.config)
    section = dict(cfg.get("model", {}))
    if args.embedding_dim is not None:
        section["embedding_dim"] = args.embedding_dim
    model = TokenGridNet(NetConfig.from_dict(section), seed=0)
    print(model.param_count())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    cfg = _load_config(args.config)
    app = create_app(_load_predictor(args, cfg))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- wiring -----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, seed: bool = False) -> None:
    p.add_argument("--config", help=f"JSON config path (default: ${CONFIG_ENV})")
    if seed:
        p.add_argument("--seed", type=int, help="override the configured seed")


def _add_shape(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rows", type=int, help="grid rows (default: augment mean)")
    p.add_argument("--cols", type=int, help="grid cols (default: augment mean)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridkie",
                     description="Key-information extraction over token grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic receipts")
    _add_common(p, seed=True)
    p.add_argument("--n", type=int, help="number of documents")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", help="build a vocabulary from a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--max-size", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("grid-dump", help="write a document's grid as text")
    _add_common(p)
    _add_shape(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--doc-id", help="document id (default: first document)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid_dump)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p, seed=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--holdout", type=float,
                   help="fraction held out per document type for evaluation")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    _add_common(p)
    _add_shape(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="also write report.json here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write annotation JSON for each document")
    _add_common(p)
    _add_shape(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("param-count", help="print the exact parameter count")
    _add_common(p)
    p.add_argument("--embedding-dim", type=int,
                   help="override the configured embedding size")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    _add_common(p)
    _add_shape(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("GRIDKIE_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, ValueError, OSError, RuntimeError) as exc:
        print(f"gridkie {args.command}: error: {exc}", file=sys.stderr)
        if os.environ.get("GRIDKIE_DEBUG"):
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
