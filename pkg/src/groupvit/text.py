"""Word-level vocabulary, tokenizer, and prompt templates.

Vocabulary file: one token per line, line number is the id. The first three
lines are always ``<pad>``, ``<unk>``, ``<eos>``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2

NOUN_PLACEHOLDER = "{noun}"

# A small stand-in for a large prompt template set.
DEFAULT_TEMPLATES = (
    "a photo of a {noun}",
    "a photo of the {noun}",
    "a picture of a {noun}",
    "an image of a {noun}",
    "a rendering of a {noun}",
    "a drawing of the {noun}",
    "a close-up photo of a {noun}",
    "there is a {noun} in the scene",
)

_SPLIT = re.compile(r"[^a-z0-9]+")


def words(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tokens[:3] != [PAD, UNK, EOS]:
            raise ValueError("vocabulary must start with <pad>, <unk>, <eos>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_words(cls, ws: Iterable[str]) -> Vocabulary:
        seen = dict.fromkeys([PAD, UNK, EOS])
        for w in ws:
            seen.setdefault(w, None)
        return cls(seen)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls(line for line in Path(path).read_text().splitlines())


@dataclass(frozen=True)
class TokenizedText:
    token_ids: np.ndarray  # (max_len,) int64
    end_position: int


def tokenize(text: str, vocab: Vocabulary, max_length: int) -> TokenizedText:
    """Lowercase, split on non-alphanumerics, map to ids, append <eos>, pad.

    Long texts are truncated so that <eos> always fits.
    """
    ids = [vocab.id(w) for w in words(text)][: max_length - 1]
    end = len(ids)
    ids.append(EOS_ID)
    ids.extend([PAD_ID] * (max_length - len(ids)))
    return TokenizedText(np.asarray(ids, dtype=np.int64), end)


def tokenize_batch(texts: Iterable[str], vocab: Vocabulary, max_length: int) -> tuple[np.ndarray, np.ndarray]:
    toks = [tokenize(t, vocab, max_length) for t in texts]
    return np.stack([t.token_ids for t in toks]), np.array([t.end_position for t in toks], dtype=np.int64)


def decode(tok: TokenizedText, vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in tok.token_ids[: tok.end_position])


def load_lines(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def load_templates(path: str | Path) -> list[str]:
    templates = load_lines(path)
    bad = [t for t in templates if NOUN_PLACEHOLDER not in t]
    if bad or not templates:
        raise ValueError(f"{path}: every template needs a {NOUN_PLACEHOLDER} placeholder: {bad}")
    return templates


def save_lines(path: str | Path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{line}\n" for line in lines))
