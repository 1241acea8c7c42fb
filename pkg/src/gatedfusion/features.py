"""Auxiliary lyric features and z-score scaling.

The auxiliary vector has a fixed column order::

    [rhyme_density, lexical_diversity, pronoun_ratio, popularity]

The three text features are dictionary-free and deterministic. Rhymes are
detected orthographically: two line-final words rhyme when their rhyme keys
match, where the key is the last vowel group of the word plus everything
after it (``bright`` and ``light`` both give ``ight``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

AUX_FEATURE_NAMES = ("rhyme_density", "lexical_diversity", "pronoun_ratio", "popularity")

PRONOUNS = frozenset(
    """
    i me my mine myself we us our ours ourselves you your yours yourself
    yourselves he him his himself she her hers herself it its itself they
    them their theirs themselves
    """.split()
)

# runs of letters/digits, optionally joined by inner apostrophes
_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*")
_RHYME_KEY_RE = re.compile(r"[aeiouy]+[^aeiouy]*$")


@dataclass(frozen=True)
class LyricRecord:
    id: str
    text: str
    popularity: float
    cluster_label: Optional[int] = None


@dataclass(frozen=True)
class StructFeatures:
    rhyme_density: float
    lexical_diversity: float
    pronoun_ratio: float
    popularity: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.rhyme_density, self.lexical_diversity, self.pronoun_ratio, self.popularity],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class ScalerParams:
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        if self.means.shape != self.stds.shape:
            raise ValueError("means and stds must have the same length")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be strictly positive")


def _lines(text: str) -> list[str]:
    return text.replace("\r\n", "\n").split("\n")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; apostrophes survive only inside a word."""
    return _TOKEN_RE.findall(text.lower())


def lexical_diversity(text: str) -> float:
    tokens = tokenize(text)
    if not tokens:
        return 0.0
    return len(set(tokens)) / len(tokens)


def pronoun_ratio(text: str) -> float:
    tokens = tokenize(text)
    if not tokens:
        return 0.0
    return sum(t in PRONOUNS for t in tokens) / len(tokens)


def rhyme_key(word: str) -> str:
    """Orthographic rhyme key (``"night" -> "ight"``); empty if there is no vowel."""
    word = word.lower().replace("'", "")
    m = _RHYME_KEY_RE.search(word)
    return m.group(0) if m else ""


def rhyme_density(text: str) -> float:
    """Share of adjacent non-empty line pairs whose last words rhyme."""
    endings = []
    for line in _lines(text):
        tokens = tokenize(line)
        if tokens:
            endings.append(rhyme_key(tokens[-1]))
    if len(endings) < 2:
        return 0.0
    pairs = list(zip(endings, endings[1:]))
    hits = sum(1 for a, b in pairs if a and a == b)
    return hits / len(pairs)


def extract_struct_features(record: LyricRecord) -> StructFeatures:
    return StructFeatures(
        rhyme_density=rhyme_density(record.text),
        lexical_diversity=lexical_diversity(record.text),
        pronoun_ratio=pronoun_ratio(record.text),
        popularity=float(record.popularity),
    )


def fit_scaler(matrix) -> ScalerParams:
    """Column means and population standard deviations.

    Columns whose std falls under 1e-12 get std 1 so that `transform` stays
    defined everywhere.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("cannot fit a scaler on an empty matrix")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds < 1e-12, 1.0, stds)
    return ScalerParams(means=means, stds=stds)


def transform(matrix, params: ScalerParams) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[1] != params.means.shape[0]:
        raise ValueError(
            f"matrix has {x.shape[1]} columns but scaler was fit on {params.means.shape[0]}"
        )
    out = (x - params.means) / params.stds
    return out[:, 0] if squeeze else out
