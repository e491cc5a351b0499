"""Parallel-pair and UPOS-tagged evaluation data: parsing, filtering, grouping."""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from synemb import FormatError, SynEmbError

log = logging.getLogger(__name__)

UPOS_TAGS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)
SPECIAL_TAGS = ("BOS", "EOS", "PAD")
TAGSET = UPOS_TAGS + SPECIAL_TAGS
TAG_TO_ID = {tag: i for i, tag in enumerate(TAGSET)}
BOS_ID = TAG_TO_ID["BOS"]
EOS_ID = TAG_TO_ID["EOS"]
PAD_ID = TAG_TO_ID["PAD"]

_UPOS_SET = frozenset(UPOS_TAGS)
_ISO_RE = re.compile(r"^[a-z]{2}$")

SENTENCE_FINAL = frozenset(".!?…。！？")
CLOSING_QUOTES = frozenset("\"'”’»」』)")


@dataclass(frozen=True, order=True)
class LanguageId:
    iso: str
    index: int

    def __str__(self) -> str:
        return self.iso


class LanguageRegistry:
    """Maps ISO codes to contiguous indices in registration order.

    Not thread-safe: register every language during single-threaded startup.
    """

    def __init__(self, isos=()):
        self._by_iso: dict[str, LanguageId] = {}
        for iso in isos:
            self.register(iso)

    def register(self, iso: str) -> LanguageId:
        lang = self._by_iso.get(iso)
        if lang is None:
            if not _ISO_RE.match(iso):
                raise SynEmbError(f"invalid language code {iso!r}: expected 2 lowercase letters")
            lang = LanguageId(iso, len(self._by_iso))
            self._by_iso[iso] = lang
        return lang

    def get(self, iso: str) -> LanguageId:
        try:
            return self._by_iso[iso]
        except KeyError:
            raise SynEmbError(f"unknown language {iso!r}; registered: {self.isos}") from None

    def __contains__(self, iso: str) -> bool:
        return iso in self._by_iso

    def __len__(self) -> int:
        return len(self._by_iso)

    def __iter__(self):
        return iter(self._by_iso.values())

    @property
    def isos(self) -> list[str]:
        return list(self._by_iso)

    def copy(self) -> LanguageRegistry:
        return LanguageRegistry(self.isos)


@dataclass(frozen=True)
class ParallelExample:
    src_lang: LanguageId
    tgt_lang: LanguageId
    src_text: str
    tgt_upos: tuple[str, ...]

    def __post_init__(self):
        if not self.src_text.strip():
            raise SynEmbError("empty source text")
        if not self.tgt_upos:
            raise SynEmbError(f"empty UPOS sequence for {self.src_text!r}")
        if self.src_lang.iso == self.tgt_lang.iso:
            raise SynEmbError(f"source and target language are both {self.src_lang.iso!r}")


@dataclass
class EvalSentence:
    lang: str
    text: str
    upos: tuple[str, ...]
    group_id: int = -1
    id: str = ""


def check_upos(tags, where: str = "") -> tuple[str, ...]:
    for tag in tags:
        if tag not in _UPOS_SET:
            raise FormatError(f"unknown UPOS {tag!r}{where}")
    return tuple(tags)


def parse_pairs_tsv(path, registry: LanguageRegistry) -> list[ParallelExample]:
    """Read the 4-column pair file: src_iso, tgt_iso, src_text, space-joined target UPOS."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(f"{path}: malformed line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
            src_iso, tgt_iso, text, tags = fields
            upos = check_upos(tags.split(), f" at line {lineno}")
            try:
                example = ParallelExample(
                    registry.register(src_iso), registry.register(tgt_iso),
                    unicodedata.normalize("NFC", text), upos,
                )
            except SynEmbError as e:
                raise FormatError(f"{path}: malformed line {lineno}: {e}") from None
            examples.append(example)
    return examples


def format_pair(ex: ParallelExample) -> str:
    return f"{ex.src_lang.iso}\t{ex.tgt_lang.iso}\t{ex.src_text}\t{' '.join(ex.tgt_upos)}"


def write_pairs_tsv(examples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            if "\t" in ex.src_text or "\n" in ex.src_text:
                raise FormatError(f"tab or newline inside source text {ex.src_text!r}")
            f.write(format_pair(ex) + "\n")


def _ends_sentence(token: str) -> bool:
    stripped = token.rstrip("".join(CLOSING_QUOTES))
    return bool(stripped) and stripped[-1] in SENTENCE_FINAL


def is_single_complete_sentence(text: str) -> bool:
    # heuristic stand-in for "complete" and "single" sentence; see README
    tokens = text.split()
    if not tokens or not _ends_sentence(tokens[-1]):
        return False
    return not any(_ends_sentence(tok) for tok in tokens[:-1])


def filter_examples(examples, min_words: int = 3) -> list[ParallelExample]:
    """Drop short, incomplete or multi-sentence sources, then deduplicate.

    Deduplication keeps the first occurrence of each (src_lang, tgt_lang, src_text).
    """
    if min_words < 1:
        raise SynEmbError(f"min_words must be >= 1, got {min_words}")
    seen = set()
    kept = []
    for ex in examples:
        if len(ex.src_text.split()) < min_words or not is_single_complete_sentence(ex.src_text):
            continue
        key = (ex.src_lang.iso, ex.tgt_lang.iso, ex.src_text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(ex)
    return kept


def read_conllu(path, lang: str) -> tuple[list[EvalSentence], list[int]]:
    """Parse a CoNLL-U file. Returns the sentences and the block indices that were skipped."""
    sentences: list[EvalSentence] = []
    skipped: list[int] = []
    forms: list[str] = []
    tags: list[str] = []
    sent_id = ""
    missing = False
    block = 0

    def flush():
        nonlocal forms, tags, sent_id, missing, block
        if forms or missing:
            if missing:
                skipped.append(block)
            else:
                sentences.append(EvalSentence(lang, " ".join(forms), tuple(tags), id=sent_id))
            block += 1
        forms, tags, sent_id, missing = [], [], "", False

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*sent_id\s*=\s*(.+)", line)
                if m:
                    sent_id = m.group(1).strip()
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise FormatError(f"{path}: line {lineno}: expected 10 columns, got {len(cols)}")
            word_id = cols[0]
            if "-" in word_id or "." in word_id:
                continue
            if cols[3] == "_":
                missing = True
                continue
            tags.append(check_upos([cols[3]], f" at {path}:{lineno}")[0])
            forms.append(unicodedata.normalize("NFC", cols[1]))
    flush()
    return sentences, skipped


def parse_conllu(path, lang: str) -> list[EvalSentence]:
    sentences, skipped = read_conllu(path, lang)
    if skipped:
        log.warning("%s: skipped %d sentence(s) with missing UPOS", path, len(skipped))
    return sentences


@dataclass
class EvalSet:
    sentences: list[EvalSentence]
    min_group_size: int = 6

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def num_groups(self) -> int:
        return len({s.group_id for s in self.sentences})

    def group_ids(self) -> np.ndarray:
        return np.array([s.group_id for s in self.sentences], dtype=np.int64)

    def ids(self) -> list[str]:
        return [s.id or str(i) for i, s in enumerate(self.sentences)]

    def languages(self) -> list[str]:
        return list(dict.fromkeys(s.lang for s in self.sentences))

    def subset(self, lang: str) -> EvalSet:
        return EvalSet([s for s in self.sentences if s.lang == lang], self.min_group_size)

    def validate(self) -> None:
        by_upos: dict[tuple, int] = {}
        sizes: dict[int, int] = {}
        for s in self.sentences:
            gid = by_upos.setdefault(s.upos, s.group_id)
            if gid != s.group_id:
                raise FormatError(f"sentences with equal UPOS carry group ids {gid} and {s.group_id}")
            sizes[s.group_id] = sizes.get(s.group_id, 0) + 1
        if len(set(by_upos.values())) != len(by_upos):
            raise FormatError("one group id is shared by different UPOS sequences")
        if sorted(sizes) != list(range(len(sizes))):
            raise FormatError("group ids are not contiguous from 0")
        small = [g for g, n in sizes.items() if n < self.min_group_size]
        if small:
            raise FormatError(f"groups {small} have fewer than {self.min_group_size} sentences")

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for sid, s in zip(self.ids(), self.sentences):
                row = {"id": sid, "lang": s.lang, "text": s.text, "upos": list(s.upos), "group_id": s.group_id}
                f.write(json.dumps(row, ensure_ascii=False) + "\n")

    @classmethod
    def from_jsonl(cls, path, min_group_size: int = 6) -> EvalSet:
        sentences = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    s = EvalSentence(
                        row["lang"], row["text"], check_upos(row["upos"]), int(row["group_id"]),
                        str(row.get("id", len(sentences))),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, FormatError) as e:
                    raise FormatError(f"{path}: line {lineno}: {e}") from None
                sentences.append(s)
        # file may hold a looser threshold than the default
        sizes = np.bincount([s.group_id for s in sentences]) if sentences else np.zeros(0, int)
        floor = int(sizes[sizes > 0].min()) if sizes.size else min_group_size
        eval_set = cls(sentences, min(min_group_size, floor))
        eval_set.validate()
        return eval_set


def build_eval_set(
    sentences,
    min_group_size: int = 6,
    sample_groups: int | None = None,
    seed: int = 0,
) -> EvalSet:
    """Group sentences by exact UPOS sequence and keep groups of at least ``min_group_size``."""
    if min_group_size < 2:
        raise SynEmbError(f"min_group_size must be >= 2, got {min_group_size}")
    groups: dict[tuple, list[EvalSentence]] = {}
    for s in sentences:
        groups.setdefault(tuple(s.upos), []).append(s)
    keys = [k for k, members in groups.items() if len(members) >= min_group_size]
    if sample_groups is not None:
        if sample_groups > len(keys):
            raise SynEmbError(
                f"requested {sample_groups} groups but only {len(keys)} have >= {min_group_size} sentences"
            )
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(keys), size=sample_groups, replace=False).tolist())
        keys = [keys[i] for i in chosen]
    if not keys:
        log.warning("no UPOS group reaches %d sentences; eval set is empty", min_group_size)
    gid = {k: i for i, k in enumerate(keys)}
    out = []
    for s in sentences:
        g = gid.get(tuple(s.upos))
        if g is not None:
            out.append(EvalSentence(s.lang, s.text, tuple(s.upos), g, s.id))
    return EvalSet(out, min_group_size)


def gold_neighbours(group_ids) -> list[np.ndarray]:
    """Same-group indices for every item, excluding the item itself."""
    group_ids = np.asarray(group_ids)
    members: dict[int, np.ndarray] = {}
    for g in np.unique(group_ids):
        members[int(g)] = np.flatnonzero(group_ids == g)
    return [members[int(g)][members[int(g)] != i] for i, g in enumerate(group_ids)]


def read_sentences_file(path) -> list[EvalSentence]:
    """Sentences to embed: EvalSet JSON lines, or plain ``id<TAB>lang<TAB>text`` rows."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    if first.lstrip().startswith("{"):
        out = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    out.append(EvalSentence(row["lang"], row["text"], tuple(row.get("upos", ())),
                                            int(row.get("group_id", -1)), str(row.get("id", len(out)))))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise FormatError(f"{path}: line {lineno}: {e}") from None
        return out
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}: line {lineno}: expected id, lang, text")
            out.append(EvalSentence(fields[1], fields[2], (), -1, fields[0]))
    return out
