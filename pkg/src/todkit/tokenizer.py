"""Subword tokenizer: BPE merges over whitespace pre-tokens plus a
special-token registry, producing flattened dialogue token sequences.

Layout of an encoded dialogue: ``[CLS]`` then, per turn, the speaker token
(``[SYS]`` or ``[USR]``) followed by the turn's subword ids. Overlong
sequences are truncated from the front, always keeping ``[CLS]`` at index 0
so the most recent context survives.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dialogue

PAD, UNK, CLS, SEP, MASK, USR, SYS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, USR, SYS)

_SPECIAL_SPLIT = re.compile(
    "(" + "|".join(re.escape(s) for s in sorted(SPECIAL_TOKENS, key=len, reverse=True)) + ")"
)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    merges: list[tuple[str, str]]
    specials: tuple[str, ...] = SPECIAL_TOKENS

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be dense 0..|V|-1")
        for i, s in enumerate(self.specials):
            if self.token_to_id.get(s) != i:
                raise ValueError(f"special {s} must have reserved id {i}")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def num_specials(self) -> int:
        return len(self.specials)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def usr_id(self) -> int:
        return self.token_to_id[USR]

    @property
    def sys_id(self) -> int:
        return self.token_to_id[SYS]

    def speaker_id(self, speaker: str) -> int:
        return self.usr_id if speaker == "user" else self.sys_id

    def is_special(self, token_id: int) -> bool:
        return token_id < self.num_specials


@dataclass
class TokenSequence:
    ids: np.ndarray
    positions: np.ndarray
    segments: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.segments = np.asarray(self.segments, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        n = len(self.ids)
        for name in ("positions", "segments", "attention_mask"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match ids length {n}")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_ids(cls, ids: list[int] | np.ndarray) -> "TokenSequence":
        ids = np.asarray(ids, dtype=np.int64)
        n = len(ids)
        return cls(ids, np.arange(n), np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _pretokenize(text: str) -> list[str]:
    """Split into whitespace words and atomic special-token literals."""
    out: list[str] = []
    for segment in _SPECIAL_SPLIT.split(text):
        if segment in SPECIAL_TOKENS:
            out.append(segment)
        else:
            out.extend(segment.split())
    return out


def train_subword(corpus: list[str], vocab_size: int, seed: int = 0) -> Vocab:
    """Learn BPE merges from whitespace pre-tokens.

    Merge selection is by pair frequency with lexicographic tie-breaking,
    so training is deterministic and the seed has no effect on the result.
    """
    word_freq: Counter[str] = Counter()
    for text in corpus:
        for word in _pretokenize(text):
            if word not in SPECIAL_TOKENS:
                word_freq[word] += 1

    chars = sorted({c for w in word_freq for c in w})
    min_size = len(SPECIAL_TOKENS) + len(chars)
    if vocab_size <= min_size:
        raise ValueError(
            f"vocab_size {vocab_size} too small; need > {min_size} "
            f"({len(SPECIAL_TOKENS)} specials + {len(chars)} characters)"
        )

    token_to_id = {s: i for i, s in enumerate(SPECIAL_TOKENS)}
    for c in chars:
        token_to_id[c] = len(token_to_id)

    words: dict[str, tuple[str, ...]] = {w: tuple(w) for w in word_freq}
    merges: list[tuple[str, str]] = []
    while len(token_to_id) < vocab_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for w, symbols in words.items():
            f = word_freq[w]
            for a, b in zip(symbols, symbols[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best = min(pair_freq, key=lambda p: (-pair_freq[p], p))
        merges.append(best)
        merged = best[0] + best[1]
        token_to_id[merged] = len(token_to_id)
        words = {w: _apply_merge(symbols, best, merged) for w, symbols in words.items()}
    return Vocab(token_to_id=token_to_id, merges=merges)


def _apply_merge(symbols: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    out: list[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def encode_word(vocab: Vocab, word: str) -> list[int]:
    symbols: tuple[str, ...] = tuple(word)
    for pair in vocab.merges:
        symbols = _apply_merge(symbols, pair, pair[0] + pair[1])
    return [vocab.token_to_id.get(s, vocab.unk_id) for s in symbols]


def encode_text(vocab: Vocab, text: str) -> list[int]:
    """Greedy merge encoding; special-token literals map to single ids."""
    ids: list[int] = []
    for word in _pretokenize(text):
        if word in SPECIAL_TOKENS:
            ids.append(vocab.token_to_id[word])
        else:
            ids.extend(encode_word(vocab, word))
    return ids


def decode(vocab: Vocab, ids: list[int] | np.ndarray) -> str:
    """Inverse of encode for texts whose words are single vocabulary tokens."""
    return " ".join(vocab.id_to_token[int(i)] for i in ids)


def truncate_front(ids: list[int], max_len: int, cls_id: int) -> list[int]:
    """Drop tokens from the front down to max_len, keeping [CLS] at index 0."""
    if len(ids) <= max_len:
        return list(ids)
    kept = ids[len(ids) - (max_len - 1):]
    return [cls_id] + kept


def flatten_dialogue(vocab: Vocab, d: Dialogue, upto_turn: int | None = None,
                     max_len: int = 512) -> TokenSequence:
    """Flatten a (speaker-normalized) dialogue into one token sequence."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids: list[int] = [vocab.cls_id]
    for idx, turn in enumerate(d.turns):
        if upto_turn is not None and idx > upto_turn:
            break
        ids.append(vocab.speaker_id(turn.speaker))
        ids.extend(encode_text(vocab, turn.text))
    return TokenSequence.from_ids(truncate_front(ids, max_len, vocab.cls_id))


def encode_utterance(vocab: Vocab, speaker: str, text: str,
                     max_len: int = 512) -> TokenSequence:
    """[CLS] + speaker token + subwords, front-truncated like a dialogue."""
    ids = [vocab.cls_id, vocab.speaker_id(speaker)] + encode_text(vocab, text)
    return TokenSequence.from_ids(truncate_front(ids, max_len, vocab.cls_id))


def stack_sequences(seqs: list[TokenSequence], pad_id: int):
    """Stack variable-length sequences into padded (B, L) arrays."""
    if not seqs:
        raise ValueError("cannot stack an empty batch")
    max_len = max(len(s) for s in seqs)
    b = len(seqs)
    ids = np.full((b, max_len), pad_id, dtype=np.int64)
    mask = np.zeros((b, max_len), dtype=np.int64)
    segments = np.zeros((b, max_len), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        mask[i, :len(s)] = s.attention_mask
        segments[i, :len(s)] = s.segments
    positions = np.tile(np.arange(max_len, dtype=np.int64), (b, 1))
    return ids, positions, segments, mask


# ---------------------------------------------------------------------------
# vocab file I/O
# ---------------------------------------------------------------------------

_VOCAB_HEADER = "#todkit-vocab v1"


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """Line-delimited ``token<TAB>id`` entries followed by a merges section."""
    path = Path(path)
    lines = [_VOCAB_HEADER]
    for token, idx in sorted(vocab.token_to_id.items(), key=lambda kv: kv[1]):
        lines.append(f"{token}\t{idx}")
    lines.append("#merges")
    for a, b in vocab.merges:
        lines.append(f"{a}\t{b}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _VOCAB_HEADER:
        raise ValueError(f"{path}: not a todkit vocab file")
    token_to_id: dict[str, int] = {}
    merges: list[tuple[str, str]] = []
    in_merges = False
    for line in lines[1:]:
        if line == "#merges":
            in_merges = True
            continue
        if not line:
            continue
        a, b = line.split("\t")
        if in_merges:
            merges.append((a, b))
        else:
            token_to_id[a] = int(b)
    return Vocab(token_to_id=token_to_id, merges=merges)
