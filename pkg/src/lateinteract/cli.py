"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import synth
from .ann import IvfPqIndex
from .config import Config, ConfigError
from .encoder import ColEncoder, ProjectionLayer
from .errors import LateInteractError
from .exchange import load_precomputed
from .indexer import build_index, build_index_from_reps, footprint, open_index, read_corpus
from .metrics import EvaluationError, evaluate, read_candidates, read_qrels, read_queries, read_run
from .retrieval import Mode, RetrievalParams, Searcher, write_run
from .trainer import read_triples, train

logger = logging.getLogger("lateinteract")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

ANN_FILE = "ivfpq.bin"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [encoder], [indexer], [ann], "
                                               "[retrieval] and [train] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lateinteract", description="Late-interaction retrieval engine")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus, queries, qrels, triples")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--docs", type=int, default=2000)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--candidate-depth", type=int, default=100)

    p = sub.add_parser("index", help="encode a corpus TSV into an index directory")
    _add_common(p)
    p.add_argument("--corpus", type=Path, help="doc_id<TAB>text file")
    p.add_argument("--precomputed", type=Path, help="embedding-exchange file instead of --corpus")
    p.add_argument("--index", type=Path, required=True, help="output directory")
    p.add_argument("--projection", type=Path, help="trained projection (.npy)")
    p.add_argument("--workers", type=int)
    p.add_argument("--bytes-per-dim", type=int, choices=(2, 4))

    p = sub.add_parser("ann-build", help="train and fill the IVF-PQ index for an index directory")
    _add_common(p)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, help=f"default: INDEX/{ANN_FILE}")

    p = sub.add_parser("train", help="train the projection layer on query/pos/neg triples")
    _add_common(p)
    p.add_argument("--triples", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--init", type=Path, help="starting projection (.npy)")
    p.add_argument("--log", type=Path, help="write per-iteration loss as TSV")

    for name, helptext in (("search", "rank queries against an index"),
                           ("rerank", "re-rank candidate lists with exhaustive MaxSim")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--index", type=Path, required=True)
        p.add_argument("--queries", type=Path, required=True, help="qid<TAB>text file")
        p.add_argument("--out", type=Path, required=True, help="TREC run output")
        p.add_argument("--candidates", type=Path, required=(name == "rerank"),
                       help="qid<TAB>docid file")
        p.add_argument("--k", type=int)
        p.add_argument("--tag", default="lateinteract")
        if name == "search":
            p.add_argument("--mode", choices=[m.value for m in Mode])
            p.add_argument("--k-prime", type=int)
            p.add_argument("--probes", type=int)
            p.add_argument("--ann", type=Path, help=f"default: INDEX/{ANN_FILE}")

    p = sub.add_parser("eval", help="score a run against qrels")
    _add_common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--qrels", type=Path, required=True)
    p.add_argument("--json", type=Path, help="also write the report as JSON")
    p.add_argument("--recall", type=int, nargs="+", default=[50, 200, 1000])
    p.add_argument("--sample", type=int, help="evaluate a random sample of N queries")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("footprint", help="report index size on disk")
    _add_common(p)
    p.add_argument("--index", type=Path, required=True)
    return parser


def _cmd_synth(args, cfg: Config) -> None:
    data = synth.generate(args.docs, args.queries, args.seed, candidate_depth=args.candidate_depth)
    paths = data.write(args.out)
    for name, path in paths.items():
        print(f"{name}\t{path}")


def _cmd_index(args, cfg: Config) -> None:
    idx_cfg = cfg.build("indexer", workers=args.workers, bytes_per_dim=args.bytes_per_dim)
    enc_cfg = cfg.build("encoder")
    if (args.corpus is None) == (args.precomputed is None):
        raise UsageError("give exactly one of --corpus or --precomputed")
    if args.precomputed is not None:
        reps = load_precomputed(args.precomputed, "doc", enc_cfg.dim, enc_cfg.metric)
        index = build_index_from_reps(reps, args.index, enc_cfg.dim, enc_cfg.metric,
                                      idx_cfg.bytes_per_dim)
    else:
        proj = ProjectionLayer.load(args.projection) if args.projection else None
        encoder = ColEncoder(enc_cfg, proj)
        index = build_index(read_corpus(args.corpus), encoder, args.index, idx_cfg)
    fp = footprint(index)
    print(f"documents\t{index.doc_count}\nembeddings\t{index.embedding_count}\n"
          f"skipped\t{len(index.manifest['skipped'])}\nbytes\t{fp.total_bytes}")


def _cmd_ann_build(args, cfg: Config) -> None:
    index = open_index(args.index)
    ann = IvfPqIndex.train(index.embeddings, cfg.build("ann"))
    ann.add(index.embeddings)
    out = args.out or args.index / ANN_FILE
    ann.save(out)
    print(f"cells\t{ann.partitions}\nvectors\t{ann.ntotal}\npath\t{out}")


def _cmd_train(args, cfg: Config) -> None:
    enc_cfg = cfg.build("encoder")
    init = ProjectionLayer.load(args.init) if args.init else None
    losses = []
    proj = train(read_triples(args.triples), cfg.build("train"), enc_cfg, init,
                 callback=lambda it, loss: losses.append(loss))
    proj.save(args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\t{loss:.8f}\n" for i, loss in enumerate(losses))
    print(f"iterations\t{len(losses)}\nfirst_loss\t{losses[0]:.6f}\nlast_loss\t{losses[-1]:.6f}")


def _cmd_search(args, cfg: Config, rerank_only: bool = False) -> None:
    index = open_index(args.index)
    params = cfg.build("retrieval", k=args.k,
                       mode=Mode.RERANK if rerank_only else getattr(args, "mode", None),
                       k_prime=getattr(args, "k_prime", None), probes=getattr(args, "probes", None))
    ann = None
    if params.mode is Mode.END_TO_END:
        ann = IvfPqIndex.load(getattr(args, "ann", None) or args.index / ANN_FILE)
    candidates = read_candidates(args.candidates) if args.candidates else None
    if params.mode is Mode.RERANK and candidates is None:
        raise UsageError("rerank mode needs --candidates")
    searcher = Searcher(index, ann=ann)
    runs = {}
    start = time.perf_counter()
    for qid, text in read_queries(args.queries):
        cands = candidates.get(qid, []) if candidates is not None else None
        runs[qid] = searcher.search(text, params, cands)
    elapsed = time.perf_counter() - start
    write_run(args.out, runs, args.tag)
    logger.info("%d queries in %.2fs (%.1f ms/query)", len(runs), elapsed,
                1000 * elapsed / max(1, len(runs)))
    print(f"queries\t{len(runs)}\nrun\t{args.out}")


def _cmd_eval(args, cfg: Config) -> None:
    report = evaluate(read_run(args.run), read_qrels(args.qrels), args.recall,
                      sample=args.sample, seed=args.seed)
    if args.json:
        args.json.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())


def _cmd_footprint(args, cfg: Config) -> None:
    index = open_index(args.index)
    fp = footprint(index)
    print(json.dumps({"payload_bytes": fp.payload_bytes, "metadata_bytes": fp.metadata_bytes,
                      "total_bytes": fp.total_bytes}, indent=2))


COMMANDS = {
    "synth": _cmd_synth,
    "index": _cmd_index,
    "ann-build": _cmd_ann_build,
    "train": _cmd_train,
    "search": _cmd_search,
    "rerank": lambda a, c: _cmd_search(a, c, rerank_only=True),
    "eval": _cmd_eval,
    "footprint": _cmd_footprint,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config, args.set)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"lateinteract {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LateInteractError, EvaluationError, ValueError, OSError) as exc:
        print(f"lateinteract {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
