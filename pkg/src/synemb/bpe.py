"""Joint byte-pair-encoding vocabulary shared by every source language.

Words are split on whitespace and segmented into characters followed by a
separate ``</w>`` end-of-word symbol, so ``"low"`` starts as ``l o w </w>``.
"""

from __future__ import annotations

import hashlib
import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from synemb import FormatError, SynEmbError

END_OF_WORD = "</w>"
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
PAD, UNK, BOS, EOS = range(4)
FORMAT_VERSION = "v1"


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)
    _cache: dict[str, list[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def specials(self) -> dict[str, int]:
        return {"PAD": PAD, "UNK": UNK, "BOS": BOS, "EOS": EOS}

    def id_to_symbol(self) -> list[str]:
        out = [""] * len(self.vocab)
        for sym, i in self.vocab.items():
            out[i] = sym
        return out

    def segment_word(self, word: str) -> list[str] | None:
        """Apply merges by rank; None if the word holds a character unseen at learn time."""
        symbols = list(word) + [END_OF_WORD]
        if any(s not in self.vocab for s in symbols):
            return None
        return apply_merges(symbols, self._ranks)

    def encode(self, sentence: str) -> list[int]:
        ids: list[int] = []
        for word in unicodedata.normalize("NFC", sentence).split():
            cached = self._cache.get(word)
            if cached is None:
                pieces = self.segment_word(word)
                cached = [UNK] if pieces is None else [self.vocab[p] for p in pieces]
                self._cache[word] = cached
            ids.extend(cached)
        return ids

    def content_hash(self) -> str:
        return hashlib.sha256(dumps(self).encode("utf-8")).hexdigest()


def apply_merges(symbols: list[str], ranks: dict[tuple[str, str], int]) -> list[str]:
    symbols = list(symbols)
    while len(symbols) > 1:
        best = min(
            ((ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks),
            default=None,
        )
        if best is None:
            break
        symbols = _merge_pair(symbols, best[1])
    return symbols


def _merge_pair(symbols, pair):
    left, right = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def count_pairs(symbols) -> Counter:
    """Non-overlapping left-to-right pair counts within one word."""
    counts: Counter = Counter()
    i = 0
    n = len(symbols)
    while i < n - 1:
        pair = (symbols[i], symbols[i + 1])
        counts[pair] += 1
        # a run like a a a counts (a, a) once per disjoint occurrence
        if i + 2 < n and symbols[i + 2] == symbols[i + 1] and symbols[i] == symbols[i + 1]:
            i += 2
        else:
            i += 1
    return counts


def word_table(corpus) -> Counter:
    words: Counter = Counter()
    for sentence in corpus:
        words.update(unicodedata.normalize("NFC", sentence).split())
    return words


def learn_bpe(corpus, vocab_size: int = 2000) -> BpeModel:
    """Learn merges from a list of sentences until ``vocab_size`` symbols or no pair occurs twice.

    Pair-frequency ties go to the lexicographically smallest pair.
    """
    words = word_table(corpus)
    if not words:
        raise SynEmbError("cannot learn BPE from an empty corpus")
    chars = sorted({c for w in words for c in w})
    base = chars + [END_OF_WORD]
    if vocab_size < len(base) + len(SPECIALS):
        raise SynEmbError(
            f"vocab_size {vocab_size} is below {len(base)} base symbols + {len(SPECIALS)} specials"
        )
    vocab = {s: i for i, s in enumerate(SPECIALS)}
    for s in base:
        vocab[s] = len(vocab)

    segs = {w: list(w) + [END_OF_WORD] for w in words}
    pair_counts: Counter = Counter()
    word_pairs: dict[str, Counter] = {}
    for w, syms in segs.items():
        word_pairs[w] = count_pairs(syms)
        for p, c in word_pairs[w].items():
            pair_counts[p] += c * words[w]
    where: dict[tuple[str, str], set[str]] = {}
    for w, pc in word_pairs.items():
        for p in pc:
            where.setdefault(p, set()).add(w)

    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size and pair_counts:
        pair, count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in vocab:
            vocab[merged] = len(vocab)
        for w in list(where.get(pair, ())):
            freq = words[w]
            for p, c in word_pairs[w].items():
                pair_counts[p] -= c * freq
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                where[p].discard(w)
            segs[w] = _merge_pair(segs[w], pair)
            word_pairs[w] = count_pairs(segs[w])
            for p, c in word_pairs[w].items():
                pair_counts[p] += c * freq
                where.setdefault(p, set()).add(w)
    return BpeModel(merges, vocab)


def dumps(model: BpeModel) -> str:
    lines = [f"BPE {FORMAT_VERSION} {model.vocab_size}"]
    lines += [f"{a} {b}" for a, b in model.merges]
    lines += [f"{sym}\t{i}" for sym, i in sorted(model.vocab.items(), key=lambda kv: kv[1])]
    return "\n".join(lines) + "\n"


def save_bpe(model: BpeModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(model), encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def load_bpe(path) -> BpeModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: corrupt BPE file: {e}") from None
    lines = text.split("\n")
    header = lines[0].split(" ")
    if len(header) != 3 or header[0] != "BPE":
        raise FormatError(f"{path}: not a BPE model file (bad header {lines[0]!r})")
    if header[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported BPE format version {header[1]!r}, expected {FORMAT_VERSION}")
    try:
        size = int(header[2])
    except ValueError:
        raise FormatError(f"{path}: bad vocab size in header {lines[0]!r}") from None
    if not text.endswith("\n"):
        raise FormatError(f"{path}: truncated BPE file (no trailing newline)")
    merges, vocab = [], {}
    for lineno, line in enumerate(lines[1:-1], 2):
        if "\t" in line:
            sym, _, idx = line.partition("\t")
            try:
                vocab[sym] = int(idx)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: bad vocab id {idx!r}") from None
        else:
            parts = line.split(" ")
            if vocab or len(parts) != 2:
                raise FormatError(f"{path}: line {lineno}: malformed merge {line!r}")
            merges.append((parts[0], parts[1]))
    if len(vocab) != size or sorted(vocab.values()) != list(range(size)):
        raise FormatError(f"{path}: truncated or corrupt BPE file: {len(vocab)} vocab entries, header says {size}")
    for a, b in merges:
        if a + b not in vocab:
            raise FormatError(f"{path}: merge output {a + b!r} missing from vocab")
    return BpeModel(merges, vocab)
