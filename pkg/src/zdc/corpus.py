"""Synthetic topic corpora: one Markov chain per topic over a shared vocabulary."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Topic:
    name: str
    sequences: list[list[int]]


@dataclass
class Corpus:
    vocab: int
    topics: list[Topic]

    def validate(self) -> None:
        for t in self.topics:
            if not t.sequences:
                raise ValueError(f"topic {t.name!r} is empty")
            for seq in t.sequences:
                if any(tok < 0 or tok >= self.vocab for tok in seq):
                    raise ValueError(f"topic {t.name!r} has token ids outside [0, {self.vocab})")

    def sequences(self) -> list[list[int]]:
        return [s for t in self.topics for s in t.sequences]

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sequences())

    def to_json(self) -> dict:
        return {"vocab": self.vocab,
                "topics": [{"name": t.name, "sequences": t.sequences} for t in self.topics]}

    @classmethod
    def from_json(cls, obj: dict) -> "Corpus":
        c = cls(obj["vocab"], [Topic(t["name"], [list(map(int, s)) for s in t["sequences"]])
                               for t in obj["topics"]])
        c.validate()
        return c


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(json.dumps(corpus.to_json()) + "\n")


def load_corpus(path) -> Corpus:
    return Corpus.from_json(json.loads(Path(path).read_text()))


def topic_transitions(vocab: int, rng: np.random.Generator, branching: int = 6,
                      concentration: float = 0.5) -> np.ndarray:
    """Sparse row-stochastic matrix: each token has ``branching`` successors."""
    trans = np.zeros((vocab, vocab))
    for a in range(vocab):
        nxt = rng.choice(vocab, size=min(branching, vocab), replace=False)
        trans[a, nxt] = rng.dirichlet(np.full(len(nxt), concentration))
    return trans


def gen_corpus(seed: int = 0, vocab: int = 256, n_topics: int = 8, seqs_per_topic: int = 16,
               seq_len: int = 32, branching: int = 6) -> Corpus:
    rng = np.random.default_rng(seed)
    topics = []
    for t in range(n_topics):
        trans = topic_transitions(vocab, rng, branching)
        seqs = []
        for _ in range(seqs_per_topic):
            tok = int(rng.integers(vocab))
            seq = [tok]
            for _ in range(seq_len - 1):
                tok = int(rng.choice(vocab, p=trans[tok]))
                seq.append(tok)
            seqs.append(seq)
        topics.append(Topic(f"topic{t:02d}", seqs))
    return Corpus(vocab, topics)


def prune_corpus(corpus: Corpus, drop_ratio: float, seed: int = 0) -> Corpus:
    """Drop ``floor(drop_ratio * n)`` random sequences from every topic (at least one survives)."""
    if not 0.0 <= drop_ratio < 1.0:
        raise ValueError(f"drop ratio must lie in [0, 1), got {drop_ratio}")
    rng = np.random.default_rng(seed)
    topics = []
    for t in corpus.topics:
        n = len(t.sequences)
        n_drop = min(math.floor(drop_ratio * n), n - 1)
        dropped = set(rng.choice(n, size=n_drop, replace=False).tolist()) if n_drop else set()
        topics.append(Topic(t.name, [s for i, s in enumerate(t.sequences) if i not in dropped]))
    return Corpus(corpus.vocab, topics)
