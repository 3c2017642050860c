"""Vocabulary, synthetic translation tasks and parallel-corpus files.

The corpus layer is plain Python: pairs are tuples of token
strings until :meth:`Vocab.encode_pairs` turns them into id tuples for the
models. Three synthetic tasks stand in for real parallel data:

``digit-to-word``
    ``"3 1 4" -> "three one four"``; equal lengths.
``expand-contract``
    every source token is rewritten as a phrase whose length is given by a
    fertility table (0 to 3 tokens), so target length differs from source
    length by a varying amount.
``identity-copy``
    the target is the source.

Example
-------
>>> spec = SyntheticTaskSpec(kind="digit-to-word", min_len=2, max_len=5, seed=7)
>>> pairs = generate_synthetic(spec, 3)
>>> vocab = build_vocab([(" ".join(p.source), " ".join(p.target)) for p in pairs])
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
NUM_SPECIALS = len(SPECIAL_TOKENS)

MAX_FERTILITY = 3
MAX_OFFSET = 50

TASK_KINDS = ("digit-to-word", "expand-contract", "identity-copy")

DIGIT_WORDS = {
    "0": "zero", "1": "one", "2": "two", "3": "three", "4": "four",
    "5": "five", "6": "six", "7": "seven", "8": "eight", "9": "nine",
}

# a..l with a mix of deletions (0), copies (1) and expansions (2, 3)
DEFAULT_FERTILITY = {
    "a": 1, "b": 2, "c": 0, "d": 3, "e": 1, "f": 2,
    "g": 1, "h": 0, "i": 3, "j": 1, "k": 2, "l": 1,
}

Token = Union[str, int]


# ---------------------------------------------------------------------------
# sentence pairs and vocabulary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SentencePair:
    """A source/target pair without bos/eos markers.

    Sequences hold either token strings (as read from disk) or vocabulary
    ids (after :meth:`Vocab.encode_pair`).
    """

    source: tuple
    target: tuple

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        if not self.source:
            raise ValueError("empty source side")
        if not self.target:
            raise ValueError("empty target side")
        if PAD in self.source or PAD in self.target:
            raise ValueError("pad id inside a sentence")

    @property
    def offset(self) -> int:
        return len(self.target) - len(self.source)


class Vocab:
    """Bidirectional token <-> id mapping with the reserved ids first.

    ids ``0..3`` are ``<pad> <s> </s> <unk>``; the remaining tokens follow in
    the order given.
    """

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.tokens: list[str] = tokens
        self.index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in self.index:
                raise ValueError(f"duplicate token {tok!r} in vocabulary")
            self.index[tok] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def token_to_id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def id_to_token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise ValueError(f"id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.token_to_id(t) for t in tokens)

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.id_to_token(int(i)) for i in ids)

    def encode_pair(self, pair: SentencePair) -> SentencePair:
        return SentencePair(self.encode(pair.source), self.encode(pair.target))

    def encode_pairs(self, pairs: Iterable[SentencePair]) -> list[SentencePair]:
        return [self.encode_pair(p) for p in pairs]

    def decode_pairs(self, pairs: Iterable[SentencePair]) -> list[SentencePair]:
        return [SentencePair(self.decode(p.source), self.decode(p.target)) for p in pairs]

    # -- file format: one token per line, line k holds id k + 4 -------------

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "".join(f"{tok}\n" for tok in self.tokens[NUM_SPECIALS:])
        path.write_text(body, encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(list(SPECIAL_TOKENS) + lines)


def build_vocab(pairs: Sequence[tuple[str, str]], min_count: int = 1) -> Vocab:
    """Build a joint source/target vocabulary from raw sentence pairs.

    Parameters
    ----------
    pairs : sequence of (str, str)
        Whitespace-tokenized source and target sentences.
    min_count : int
        Tokens occurring fewer times are left out (they map to ``<unk>``).

    Returns
    -------
    Vocab
        Reserved ids first, then tokens by descending frequency with ties
        broken lexicographically.
    """
    if not pairs:
        raise ValueError("empty corpus")
    counts: Counter[str] = Counter()
    for source, target in pairs:
        counts.update(source.split())
        counts.update(target.split())
    kept = [tok for tok, n in counts.items() if n >= min_count and tok not in SPECIAL_TOKENS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocab(list(SPECIAL_TOKENS) + kept)


def raw_pairs(pairs: Iterable[SentencePair]) -> list[tuple[str, str]]:
    """Join token-string pairs back into ``(source, target)`` sentences."""
    return [(" ".join(p.source), " ".join(p.target)) for p in pairs]


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of a synthetic translation task.

    ``alphabet_size`` only matters for ``identity-copy``; ``fertility`` only
    for ``expand-contract``.
    """

    kind: str = "expand-contract"
    min_len: int = 2
    max_len: int = 12
    fertility: dict = field(default_factory=lambda: dict(DEFAULT_FERTILITY))
    seed: int = 1234
    alphabet_size: int = 12

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid source-length range [{self.min_len}, {self.max_len}]")
        if self.kind == "expand-contract":
            if not self.fertility:
                raise ValueError("expand-contract needs a non-empty fertility table")
            bad = {t: f for t, f in self.fertility.items() if f not in range(MAX_FERTILITY + 1)}
            if bad:
                raise ValueError(f"fertility values must be in 0..{MAX_FERTILITY}: {bad}")
            if all(f == 0 for f in self.fertility.values()):
                raise ValueError("fertility table deletes every token")
            widest = self.max_len * (max(self.fertility.values()) - 1)
            if widest > MAX_OFFSET or self.max_len > MAX_OFFSET:
                raise ValueError(f"max_len {self.max_len} allows offsets beyond ±{MAX_OFFSET}")
        if self.kind == "identity-copy" and not 1 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in 1..26")

    def alphabet(self) -> list[str]:
        if self.kind == "digit-to-word":
            return sorted(DIGIT_WORDS)
        if self.kind == "expand-contract":
            return sorted(self.fertility)
        return [chr(ord("a") + i) for i in range(self.alphabet_size)]


def fertility_phrase(token: str, fertility: int) -> list[str]:
    """The phrase a source token expands to: ``b`` with fertility 2 -> ``B1 B2``."""
    return [f"{token.upper()}{i}" for i in range(1, fertility + 1)]


def render_target(spec: SyntheticTaskSpec, source: Sequence[str]) -> list[str]:
    """Apply the task's deterministic source -> target mapping."""
    if spec.kind == "digit-to-word":
        return [DIGIT_WORDS[tok] for tok in source]
    if spec.kind == "identity-copy":
        return list(source)
    target: list[str] = []
    for tok in source:
        target.extend(fertility_phrase(tok, spec.fertility[tok]))
    return target


def generate_synthetic(spec: SyntheticTaskSpec, n: int) -> list[SentencePair]:
    """Draw ``n`` pairs from a synthetic task; identical seeds give identical corpora.

    Sources whose expand-contract rendering would be empty are redrawn.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(spec.seed)
    alphabet = spec.alphabet()
    pairs: list[SentencePair] = []
    while len(pairs) < n:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        source = [alphabet[i] for i in rng.integers(0, len(alphabet), size=length)]
        target = render_target(spec, source)
        if not target:
            continue
        pairs.append(SentencePair(tuple(source), tuple(target)))
    return pairs


# ---------------------------------------------------------------------------
# TSV corpus files
# ---------------------------------------------------------------------------

def read_parallel_corpus(path: Path) -> list[SentencePair]:
    """Read a UTF-8 TSV corpus: one ``source<TAB>target`` pair per line.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ValueError
        On a line without exactly two fields or with an empty side; the
        message carries the 1-based line number.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    pairs = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 TAB-separated fields, found {len(fields)}")
        source, target = fields[0].split(), fields[1].split()
        if not source or not target:
            side = "source" if not source else "target"
            raise ValueError(f"{path}:{lineno}: empty {side} side")
        pairs.append(SentencePair(tuple(source), tuple(target)))
    return pairs


def write_parallel_corpus(pairs: Iterable[SentencePair], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(" ".join(pair.source) + "\t" + " ".join(pair.target) + "\n")


def read_sources(path: Path) -> list[tuple[str, ...]]:
    """Read one whitespace-tokenized source sentence per line (translate input)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    sources = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        tokens = tuple(line.split())
        if not tokens:
            raise ValueError(f"{path}:{lineno}: empty source line")
        sources.append(tokens)
    return sources
