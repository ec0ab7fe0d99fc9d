"""Trainable subword vocabulary with greedy longest-match encoding.

The vocabulary is induced from the working corpus by iterative pair
merging, then used exactly like a WordPiece vocabulary: word-initial
pieces are stored plain, word-internal pieces carry a "##" prefix, and
a word that cannot be fully covered encodes as a single [UNK].
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, Union

from .errors import DataError

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

DEFAULT_TARGET_SIZE = 8000
DEFAULT_MIN_FREQ = 2


@dataclass(frozen=True)
class Vocab:
    """Dense token inventory; index in `tokens` is the token id."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tokens[:4] != SPECIALS:
            raise DataError(
                f"first four vocab entries must be {','.join(SPECIALS)}, got {self.tokens[:4]}"
            )
        if any(not t for t in self.tokens):
            raise DataError("vocab contains an empty token")
        if len(set(self.tokens)) != len(self.tokens):
            dupes = sorted(t for t, c in Counter(self.tokens).items() if c > 1)
            raise DataError(f"vocab contains duplicate tokens: {dupes}")

    @cached_property
    def id_of(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple([word[0]] + ["##" + c for c in word[1:]])


def _merge_token(a: str, b: str) -> str:
    return a + (b[2:] if b.startswith("##") else b)


def train_vocab(
    corpus: Iterable[Sequence[str]],
    target_size: int = DEFAULT_TARGET_SIZE,
    min_freq: int = DEFAULT_MIN_FREQ,
) -> Vocab:
    """Induce a subword vocabulary by frequency-ordered pair merging.

    Starts from the specials plus every character symbol seen at least
    min_freq times, then repeatedly merges the most frequent adjacent
    symbol pair (ties broken by the lexicographically smallest merged
    token) until target_size entries exist or no pair qualifies.
    """
    if min_freq < 1:
        raise DataError(f"min_freq must be at least 1, got {min_freq}")
    word_freq: Counter = Counter()
    for tokens in corpus:
        word_freq.update(tokens)

    seqs = {word: _word_symbols(word) for word in word_freq}
    sym_freq: Counter = Counter()
    for word, f in word_freq.items():
        for s in seqs[word]:
            sym_freq[s] += f
    alphabet = sorted(s for s, f in sym_freq.items() if f >= min_freq)
    needed = 4 + len(alphabet)
    if target_size < needed:
        raise DataError(
            f"target_size {target_size} too small: need at least {needed} "
            f"(4 specials + {len(alphabet)} alphabet symbols)"
        )

    vocab = list(SPECIALS) + alphabet
    vocab_set = set(vocab)
    while len(vocab) < target_size:
        pair_freq: Counter = Counter()
        for word, f in word_freq.items():
            seq = seqs[word]
            for pair in zip(seq, seq[1:]):
                pair_freq[pair] += f
        best = None
        for (a, b), f in pair_freq.items():
            if f < min_freq:
                continue
            merged = _merge_token(a, b)
            if merged in vocab_set:
                continue
            key = (-f, merged)
            if best is None or key < best[0]:
                best = (key, (a, b), merged)
        if best is None:
            break
        _, (a, b), merged = best
        vocab.append(merged)
        vocab_set.add(merged)
        for word, seq in seqs.items():
            if a not in seq or b not in seq:
                continue
            out: list[str] = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[word] = tuple(out)
    return Vocab(tuple(vocab))


def encode_word(word: str, v: Vocab) -> list[int]:
    """Greedy longest-match encoding of one word; whole-word [UNK] when
    any position fails to match."""
    if not word:
        raise DataError("encode_word requires a non-empty token")
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        piece_id = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            pid = v.id_of.get(piece)
            if pid is not None and piece not in SPECIALS:
                piece_id = pid
                break
            end -= 1
        if piece_id is None:
            return [UNK_ID]
        ids.append(piece_id)
        start = end
    return ids


def encode_text(tokens: Sequence[str], v: Vocab) -> list[int]:
    ids: list[int] = []
    for t in tokens:
        ids.extend(encode_word(t, v))
    return ids


def decode(ids: Sequence[int], v: Vocab) -> str:
    """Join pieces back into words: specials dropped, "##" pieces fused
    onto their predecessor."""
    words: list[str] = []
    for i in ids:
        if not 0 <= i < len(v.tokens):
            raise DataError(f"token id {i} out of range for vocab of size {len(v.tokens)}")
        if i < 4:
            continue
        tok = v.tokens[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        elif tok.startswith("##"):
            words.append(tok[2:])
        else:
            words.append(tok)
    return " ".join(words)


def save_vocab(v: Vocab, path: Union[str, Path]) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in v.tokens), encoding="utf-8")


def load_vocab(path: Union[str, Path]) -> Vocab:
    p = Path(path)
    lines = p.read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1]:
        lines.pop()
    for lineno, tok in enumerate(lines, start=1):
        if not tok:
            raise DataError(f"{p}:{lineno}: empty vocab entry")
    try:
        return Vocab(tuple(lines))
    except DataError as e:
        raise DataError(f"{p}: {e}") from None
