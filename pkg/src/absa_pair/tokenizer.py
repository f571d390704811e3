"""Whitespace + greedy WordPiece tokenization and sentence-pair packing."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
MAX_CHARS_PER_WORD = 100


class Vocab:
    """Token <-> id table. Special tokens hold ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"token {i} is empty or contains whitespace: {tok!r}")
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            index[tok] = i
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._index = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def token_of(self, i: int) -> str:
        return self.tokens[i]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def basic_tokenize(text: str) -> list[str]:
    return unicodedata.normalize("NFC", text).split()


def train_vocab(corpus_texts: Iterable[str], target_size: int, min_frequency: int = 1) -> Vocab:
    """Frequency-based vocabulary: specials, characters, then the most frequent whole words.

    Every character seen at least ``min_frequency`` times gets a word-initial and a
    ``##`` continuation token; rarer characters map to UNK. Remaining slots up to
    ``target_size`` go to multi-character words by descending frequency, ties by
    codepoint order.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    words: Counter[str] = Counter()
    for text in corpus_texts:
        words.update(basic_tokenize(text))
    chars: Counter[str] = Counter()
    for word, n in words.items():
        for ch in word:
            chars[ch] += n
    alphabet = sorted(ch for ch, n in chars.items() if n >= min_frequency)
    base = list(SPECIAL_TOKENS) + alphabet + [CONTINUATION + ch for ch in alphabet]
    if target_size <= len(base):
        raise ValueError(
            f"target_size {target_size} leaves no room beyond {len(SPECIAL_TOKENS)} special "
            f"tokens and {2 * len(alphabet)} character tokens"
        )
    taken = set(base)
    ranked = sorted(
        (w for w, n in words.items() if n >= min_frequency and len(w) > 1 and w not in taken),
        key=lambda w: (-words[w], w),
    )
    return Vocab(base + ranked[: max(0, target_size - len(base))])


def wordpiece_tokenize(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first segmentation; unsegmentable words become a single UNK."""
    if len(word) > MAX_CHARS_PER_WORD:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION + candidate
            if candidate in vocab:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[str]:
    return [piece for word in basic_tokenize(text) for piece in wordpiece_tokenize(word, vocab)]


def detokenize(tokens: Sequence[str]) -> list[str]:
    """Join ``##`` continuations back onto their words."""
    words: list[str] = []
    for tok in tokens:
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION) :]
        else:
            words.append(tok)
    return words


@dataclass(frozen=True)
class EncodedSequence:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    label: int | None = None


def truncate_pair(tokens_a: list[str], tokens_b: list[str], budget: int) -> None:
    """Drop final tokens of the longer sentence until both fit in ``budget`` (A loses ties)."""
    while len(tokens_a) + len(tokens_b) > budget:
        if len(tokens_a) >= len(tokens_b):
            tokens_a.pop()
        else:
            tokens_b.pop()


def encode_pair(
    sentence_a: str, sentence_b: str, vocab: Vocab, max_len: int = 128, label: int | None = None
) -> EncodedSequence:
    """Pack as ``[CLS] A [SEP] B [SEP] [PAD]...`` into exactly ``max_len`` positions."""
    if max_len < 5:
        raise ValueError(f"max_len must be >= 5, got {max_len}")
    tokens_a = tokenize(sentence_a, vocab)
    tokens_b = tokenize(sentence_b, vocab)
    truncate_pair(tokens_a, tokens_b, max_len - 3)
    tokens = [CLS, *tokens_a, SEP, *tokens_b, SEP]
    segments = [0] * (len(tokens_a) + 2) + [1] * (len(tokens_b) + 1)
    n_pad = max_len - len(tokens)
    ids = [vocab.lookup(t) for t in tokens] + [vocab.pad_id] * n_pad
    return EncodedSequence(
        token_ids=tuple(ids),
        segment_ids=tuple(segments + [0] * n_pad),
        attention_mask=tuple([1] * len(tokens) + [0] * n_pad),
        label=label,
    )


@dataclass(frozen=True)
class Batch:
    """Stacked encodings, each array of shape (batch, max_len)."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def take(self, idx: Sequence[int] | np.ndarray) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            self.token_ids[idx],
            self.segment_ids[idx],
            self.attention_mask[idx],
            None if self.labels is None else self.labels[idx],
        )

    @classmethod
    def stack(cls, sequences: Sequence[EncodedSequence]) -> "Batch":
        if not sequences:
            raise ValueError("cannot stack an empty list of sequences")
        lengths = {len(s.token_ids) for s in sequences}
        if len(lengths) != 1:
            raise ValueError(f"sequences have mixed lengths {sorted(lengths)}")
        labels = [s.label for s in sequences]
        return cls(
            np.array([s.token_ids for s in sequences], dtype=np.int64),
            np.array([s.segment_ids for s in sequences], dtype=np.int64),
            np.array([s.attention_mask for s in sequences], dtype=np.int64),
            None if any(l is None for l in labels) else np.array(labels, dtype=np.int64),
        )


def encode_dataset(dataset, vocab: Vocab, max_len: int) -> Batch:
    """Encode every example of a PairDataset into one Batch, labels included."""
    return Batch.stack(
        [encode_pair(ex.sentence_a, ex.sentence_b, vocab, max_len, ex.label_index) for ex in dataset.examples]
    )
