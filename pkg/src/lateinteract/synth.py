"""Seeded synthetic corpora for tests and the acceptance suite.

Documents are drawn from a topic mixture over pseudo-words with occasional
punctuation; each query is a handful of words taken from one source document,
which is that query's single relevant document.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import Triple

_PUNCT = [",", ".", ";", ":", "!", "?", "(", ")"]
_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "be", "do", "fa", "gu",
              "hi", "jo", "pe", "qu", "sa", "ti", "wu", "xe", "yo", "ze", "ba", "ce"]


@dataclass
class SyntheticData:
    corpus: list[tuple[str, str]]
    queries: list[tuple[str, str]]
    qrels: dict[str, set]
    triples: list[Triple] = field(default_factory=list)
    candidates: dict[str, list[str]] = field(default_factory=dict)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / fname for name, fname in [
            ("corpus", "corpus.tsv"), ("queries", "queries.tsv"), ("qrels", "qrels.txt"),
            ("triples", "triples.tsv"), ("candidates", "candidates.tsv")]}
        with open(paths["corpus"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{d}\t{t}\n" for d, t in self.corpus)
        with open(paths["queries"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{q}\t{t}\n" for q, t in self.queries)
        with open(paths["qrels"], "w", encoding="utf-8") as fh:
            for q, _ in self.queries:
                fh.writelines(f"{q} 0 {d} 1\n" for d in sorted(self.qrels.get(q, ())))
        with open(paths["triples"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{t.query}\t{t.positive}\t{t.negative}\n" for t in self.triples)
        with open(paths["candidates"], "w", encoding="utf-8") as fh:
            for q, docs in self.candidates.items():
                fh.writelines(f"{q}\t{d}\n" for d in docs)
        return paths


def _word(rng: random.Random, used: set) -> str:
    while True:
        w = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 4)))
        if w not in used:
            used.add(w)
            return w


def generate(n_docs: int = 2000, n_queries: int = 50, seed: int = 0, *,
             min_len: int = 5, max_len: int = 60, n_topics: int = 40,
             words_per_topic: int = 60, shared_words: int = 400,
             topic_share: float = 0.7, punct_rate: float = 0.08,
             query_len: tuple[int, int] = (2, 5), candidate_depth: int = 100,
             candidate_miss_rate: float = 0.3) -> SyntheticData:
    """Build a deterministic corpus with queries, qrels, triples and candidates.

    ``min_len``/``max_len`` bound each document's token count (punctuation
    included). Candidate lists imitate a lexical first stage: documents ranked
    by query-word overlap, with the relevant one dropped at
    ``candidate_miss_rate`` to simulate first-stage misses.
    """
    rng = random.Random(seed)
    used: set = set()
    topics = [[_word(rng, used) for _ in range(words_per_topic)] for _ in range(n_topics)]
    common = [_word(rng, used) for _ in range(shared_words)]
    common_weights = [1.0 / (r + 1) for r in range(shared_words)]

    corpus, doc_topic, doc_words = [], [], []
    for i in range(n_docs):
        topic = rng.randrange(n_topics)
        length = rng.randint(min_len, max_len)
        toks, words = [], []
        while len(toks) < length:
            if toks and rng.random() < punct_rate:
                toks.append(rng.choice(_PUNCT))
                continue
            if rng.random() < topic_share:
                w = rng.choice(topics[topic])
            else:
                w = rng.choices(common, common_weights)[0]
            toks.append(w)
            words.append(w)
        if not words:
            w = rng.choice(topics[topic])
            toks[0] = w
            words.append(w)
        corpus.append((f"D{i}", " ".join(toks)))
        doc_topic.append(topic)
        doc_words.append(words)

    queries, qrels, triples, candidates = [], {}, [], {}
    sources = rng.sample(range(n_docs), min(n_queries, n_docs))
    for qn, src in enumerate(sources):
        qid = f"Q{qn}"
        distinct = list(dict.fromkeys(doc_words[src]))
        n = min(len(distinct), rng.randint(*query_len))
        text = " ".join(rng.sample(distinct, n))
        queries.append((qid, text))
        qrels[qid] = {corpus[src][0]}

        other = [d for d in range(n_docs) if doc_topic[d] != doc_topic[src]] or \
                [d for d in range(n_docs) if d != src]
        triples.append(Triple(text, corpus[src][1], corpus[rng.choice(other)][1]))

        qwords = set(text.split())
        overlap = sorted(range(n_docs), key=lambda d: (-len(qwords & set(doc_words[d])), d))
        picked = overlap[:candidate_depth]
        if src in picked and rng.random() < candidate_miss_rate:
            picked = [d for d in overlap[: candidate_depth + 1] if d != src][:candidate_depth]
        candidates[qid] = [corpus[d][0] for d in picked]
    return SyntheticData(corpus, queries, qrels, triples, candidates)


def separable_triples(n: int = 200, seed: int = 0, vocab: int = 300) -> list[Triple]:
    """Triples whose positives repeat the query words and negatives share none."""
    rng = random.Random(seed)
    used: set = set()
    words = [_word(rng, used) for _ in range(vocab)]
    out = []
    for _ in range(n):
        qw = rng.sample(words, rng.randint(2, 4))
        rest = [w for w in words if w not in qw]
        pos = qw + rng.sample(rest, rng.randint(4, 12))
        rng.shuffle(pos)
        neg = rng.sample(rest, rng.randint(6, 16))
        out.append(Triple(" ".join(qw), " ".join(pos), " ".join(neg)))
    return out
