"""Synthetic parallel corpora from small template grammars.

Grammar JSON::

    {
      "templates": [{"upos": ["PRON", "VERB", "NOUN", "PUNCT"], "weight": 1.0}, ...],
      "languages": {
        "en": {"inventory": {"PRON": ["..."], ...}, "transforms": []},
        "de": {"inventory": {...}, "transforms": ["sov"]}
      }
    }

Templates end in PUNCT and use it nowhere else; PUNCT inventories hold only
sentence-final marks so that every realization is one complete sentence.

Transforms reorder a template's tags (and the aligned tokens) per language:

``sov``
    move every VERB to just before the final PUNCT
``noun_adj``
    ``ADJ NOUN`` becomes ``NOUN ADJ``
``noun_det``
    ``DET NOUN`` becomes ``NOUN DET``
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from synemb import SynEmbError
from synemb.corpus import (
    SENTENCE_FINAL, EvalSentence, EvalSet, LanguageRegistry, ParallelExample, check_upos,
)


def _sov(tags):
    body, end = tags[:-1], tags[-1:]
    verbs = [i for i in body if i[0] == "VERB"]
    rest = [i for i in body if i[0] != "VERB"]
    return rest + verbs + end


def _swap(first, second):
    def op(tags):
        out = list(tags)
        i = 0
        while i < len(out) - 1:
            if out[i][0] == first and out[i + 1][0] == second:
                out[i], out[i + 1] = out[i + 1], out[i]
                i += 2
            else:
                i += 1
        return out
    return op


TRANSFORMS = {
    "sov": _sov,
    "noun_adj": _swap("ADJ", "NOUN"),
    "noun_det": _swap("DET", "NOUN"),
}


@dataclass
class Language:
    iso: str
    inventory: dict[str, list[str]]
    transforms: list[str]

    def order(self, tags):
        """Apply this language's transforms to ``(tag, slot)`` pairs."""
        items = [(t, k) for k, t in enumerate(tags)]
        for name in self.transforms:
            items = TRANSFORMS[name](items)
        return items


@dataclass
class ToyGrammar:
    templates: list[tuple[str, ...]]
    weights: np.ndarray
    languages: dict[str, Language]

    @classmethod
    def from_dict(cls, d: dict) -> ToyGrammar:
        try:
            templates = [check_upos(t["upos"]) for t in d["templates"]]
            weights = np.array([float(t.get("weight", 1.0)) for t in d["templates"]])
            languages = {
                iso: Language(iso, {k: list(v) for k, v in spec["inventory"].items()}, list(spec.get("transforms", [])))
                for iso, spec in d["languages"].items()
            }
        except (KeyError, TypeError) as e:
            raise SynEmbError(f"malformed grammar: missing or bad field {e}") from None
        grammar = cls(templates, weights, languages)
        grammar.validate()
        return grammar

    @classmethod
    def load(cls, path) -> ToyGrammar:
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def validate(self) -> None:
        if not self.templates:
            raise SynEmbError("grammar has no templates")
        if np.any(self.weights <= 0):
            raise SynEmbError("template weights must be positive")
        for k, tpl in enumerate(self.templates):
            if tpl[-1] != "PUNCT" or "PUNCT" in tpl[:-1]:
                raise SynEmbError(f"template {k} must end in PUNCT and use it nowhere else: {tpl}")
        for lang in self.languages.values():
            for name in lang.transforms:
                if name not in TRANSFORMS:
                    raise SynEmbError(f"{lang.iso}: unknown transform {name!r}")
            for tag in {t for tpl in self.templates for t in tpl}:
                if not lang.inventory.get(tag):
                    raise SynEmbError(f"{lang.iso}: empty inventory for {tag}")
            if any(tok[-1] not in SENTENCE_FINAL for tok in lang.inventory["PUNCT"]):
                raise SynEmbError(f"{lang.iso}: PUNCT inventory may only hold sentence-final marks")
            for tag, words in lang.inventory.items():
                if any(not w or any(c.isspace() for c in w) for w in words):
                    raise SynEmbError(f"{lang.iso}: {tag} inventory has an empty or whitespace token")
            seen = {}
            for k in range(len(self.templates)):
                upos = self.language_upos(lang.iso, k)
                if upos in seen:
                    raise SynEmbError(f"{lang.iso}: templates {seen[upos]} and {k} coincide after transforms")
                seen[upos] = k

    def language(self, iso: str) -> Language:
        try:
            return self.languages[iso]
        except KeyError:
            raise SynEmbError(f"language {iso!r} not defined in grammar ({sorted(self.languages)})") from None

    def language_upos(self, iso: str, template: int) -> tuple[str, ...]:
        return tuple(t for t, _ in self.language(iso).order(self.templates[template]))

    def realize(self, iso: str, template: int, rng) -> tuple[str, tuple[str, ...]]:
        lang = self.language(iso)
        items = lang.order(self.templates[template])
        words = [lang.inventory[t][rng.integers(len(lang.inventory[t]))] for t, _ in items]
        return " ".join(words), tuple(t for t, _ in items)


def builtin_grammar(name: str = "toy") -> ToyGrammar:
    with resources.files("synemb").joinpath("data", f"{name}.json").open(encoding="utf-8") as f:
        return ToyGrammar.from_dict(json.load(f))


def generate_pairs(grammar: ToyGrammar, src_lang: str, tgt_lang: str, count: int, seed: int,
                   registry: LanguageRegistry | None = None) -> list[ParallelExample]:
    """Sample templates, realize both sides, keep the source text and the target UPOS."""
    if count < 1:
        raise SynEmbError(f"count must be >= 1, got {count}")
    grammar.language(src_lang)
    grammar.language(tgt_lang)
    registry = registry if registry is not None else LanguageRegistry()
    src, tgt = registry.register(src_lang), registry.register(tgt_lang)
    rng = np.random.default_rng(seed)
    probs = grammar.weights / grammar.weights.sum()
    out = []
    for _ in range(count):
        k = int(rng.choice(len(grammar.templates), p=probs))
        text, _ = grammar.realize(src_lang, k, rng)
        _, tgt_upos = grammar.realize(tgt_lang, k, rng)
        out.append(ParallelExample(src, tgt, text, tgt_upos))
    return out


def generate_eval_set(grammar: ToyGrammar, lang: str, groups: int, per_group: int, seed: int,
                      exclude=(), max_tries: int = 1000) -> EvalSet:
    """``per_group`` distinct sentences for each of the first ``groups`` templates (group id = template index).

    Texts listed in ``exclude`` (e.g. training sources) are never produced.
    """
    if groups < 2:
        raise SynEmbError(f"groups must be >= 2, got {groups}")
    if per_group < 6:
        raise SynEmbError(f"per_group must be >= 6, got {per_group}")
    if groups > len(grammar.templates):
        raise SynEmbError(f"requested {groups} groups but the grammar has {len(grammar.templates)} templates")
    rng = np.random.default_rng(seed)
    banned = set(exclude)
    sentences = []
    for k in range(groups):
        texts: list[str] = []
        tries = 0
        while len(texts) < per_group:
            text, upos = grammar.realize(lang, k, rng)
            tries += 1
            if text not in banned and text not in texts:
                texts.append(text)
            elif tries > max_tries * per_group:
                raise SynEmbError(
                    f"template {k} yields only {len(texts)} distinct {lang} sentences; inventory too small"
                )
        upos = grammar.language_upos(lang, k)
        sentences += [EvalSentence(lang, t, upos, k, f"{lang}-{k}-{j}") for j, t in enumerate(texts)]
    return EvalSet(sentences, min_group_size=6)


def write_grammar(grammar_dict: dict, path) -> None:
    Path(path).write_text(json.dumps(grammar_dict, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
