"""Split captions into style-related and category-related text.

Category words are matched case-insensitively against a noun lexicon
(including a trailing-s plural rule); everything else is style text. An
article directly before a matched noun is dropped rather than left
dangling in the style text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import words_of

ARTICLES = frozenset({"a", "an", "the"})


class LexiconError(ValueError):
    """Invalid or empty category lexicon."""


@dataclass(frozen=True)
class CategoryLexicon:
    """Set of category nouns (lowercase, no whitespace)."""

    words: frozenset

    def __post_init__(self):
        if not self.words:
            raise LexiconError("category lexicon is empty")
        for w in self.words:
            if not w or w != w.casefold() or any(ch.isspace() for ch in w):
                raise LexiconError(f"lexicon entry must be lowercase without whitespace: {w!r}")

    @classmethod
    def from_words(cls, words) -> "CategoryLexicon":
        return cls(frozenset(w.casefold() for w in words))

    @classmethod
    def from_file(cls, path) -> "CategoryLexicon":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        entries = [ln.strip().casefold() for ln in lines if ln.strip()]
        if not entries:
            raise LexiconError(f"lexicon file {path} contains no entries")
        return cls(frozenset(entries))

    def matches(self, token: str) -> bool:
        t = token.casefold()
        if t in self.words:
            return True
        return t.endswith("s") and t[:-1] in self.words


@dataclass(frozen=True)
class DecomposedCaption:
    style_text: str
    category_text: str


def decompose(caption: str, lexicon: CategoryLexicon) -> DecomposedCaption:
    """Route each caption word to style or category text.

    Word order is preserved within each output; articles immediately
    preceding a matched category word are dropped entirely.
    """
    tokens = words_of(caption)
    style: list[str] = []
    category: list[str] = []
    for tok in tokens:
        if lexicon.matches(tok):
            if style and style[-1].casefold() in ARTICLES:
                style.pop()
            category.append(tok)
        else:
            style.append(tok)
    return DecomposedCaption(" ".join(style), " ".join(category))


def batch_decompose(captions_path, lexicon: CategoryLexicon, out_path) -> int:
    """Stream a captions file (one per line) into JSON-lines records.

    Returns the number of records written. Output bytes are a pure
    function of the input, so re-runs are byte-identical.
    """
    n = 0
    with open(captions_path, encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            caption = line.rstrip("\n")
            d = decompose(caption, lexicon)
            record = {"caption": caption, "style_text": d.style_text, "category_text": d.category_text}
            dst.write(json.dumps(record, ensure_ascii=False) + "\n")
            n += 1
    return n
