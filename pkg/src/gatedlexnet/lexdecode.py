"""Lexicon-constrained word beam search over CTC posteriors.

Characters are split into word characters (which must spell lexicon words)
and non-word characters (spaces, digits, punctuation, which are free). A
beam whose text ends in a word character is in the *word* state and may
only grow along the prefix tree, or by a non-word character once the
current word is complete. A beam in the *non-word* state may take any
non-word character or the first character of any lexicon word. In
``ngrams`` mode each completed word multiplies the beam score by a
bigram probability.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NEG_INF = -math.inf
MODES = ("words", "ngrams")
DEFAULT_BEAM_WIDTH = 50


def _lse(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@dataclass(frozen=True)
class CharClassing:
    word_chars: frozenset
    non_word_chars: frozenset

    def __post_init__(self):
        if self.word_chars & self.non_word_chars:
            raise ValueError(f"characters in both classes: {sorted(self.word_chars & self.non_word_chars)}")

    @classmethod
    def default(cls, alphabet: str) -> "CharClassing":
        """Letters are word characters; everything else is a non-word character."""
        return cls(frozenset(c for c in alphabet if c.isalpha()), frozenset(c for c in alphabet if not c.isalpha()))

    def split_words(self, text: str) -> list[str]:
        out, cur = [], []
        for ch in text:
            if ch in self.word_chars:
                cur.append(ch)
            elif cur:
                out.append("".join(cur))
                cur = []
        if cur:
            out.append("".join(cur))
        return out


class _Node:
    __slots__ = ("children", "is_word")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.is_word = False


class PrefixTree:
    """Character trie over the lexicon."""

    def __init__(self, words: Iterable[str] = ()):
        self.root = _Node()
        self._words: set[str] = set()
        for w in words:
            self.insert(w)

    def insert(self, word: str) -> None:
        if not word:
            return
        node = self.root
        for ch in word:
            node = node.children.setdefault(ch, _Node())
        node.is_word = True
        self._words.add(word)

    def node(self, prefix: str) -> _Node | None:
        node = self.root
        for ch in prefix:
            node = node.children.get(ch)
            if node is None:
                return None
        return node

    def is_prefix(self, prefix: str) -> bool:
        return self.node(prefix) is not None

    def is_word(self, word: str) -> bool:
        node = self.node(word)
        return node is not None and node.is_word

    def next_chars(self, prefix: str) -> set[str]:
        node = self.node(prefix)
        return set(node.children) if node is not None else set()

    @property
    def words(self) -> set[str]:
        return set(self._words)

    def __len__(self) -> int:
        return len(self._words)


@dataclass
class NgramModel:
    """Word bigram model with add-one smoothing; the first word of a line uses unigrams."""

    unigrams: Counter = field(default_factory=Counter)
    bigrams: Counter = field(default_factory=Counter)
    smoothing: float = 1.0

    def __post_init__(self):
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self._total = sum(self.unigrams.values())
        self._history: Counter = Counter()
        for (a, _), n in self.bigrams.items():
            self._history[a] += n

    @property
    def vocab_size(self) -> int:
        return len(self.unigrams)

    def prob(self, word: str, prev: str | None = None) -> float:
        v = self.vocab_size
        if prev is None:
            return (self.unigrams[word] + self.smoothing) / (self._total + self.smoothing * v)
        return (self.bigrams[(prev, word)] + self.smoothing) / (self._history[prev] + self.smoothing * v)

    def log_prob(self, word: str, prev: str | None = None) -> float:
        return math.log(self.prob(word, prev))

    def score_words(self, words: Sequence[str]) -> float:
        total, prev = 0.0, None
        for w in words:
            total += self.log_prob(w, prev)
            prev = w
        return total


def build_prefix_tree(corpus: Sequence[str], classing: CharClassing) -> tuple[PrefixTree, NgramModel]:
    """Lexicon of the distinct word-character runs in ``corpus``, plus their bigram counts."""
    if not corpus or not any(line.strip() for line in corpus):
        raise ValueError("corpus is empty")
    unigrams: Counter = Counter()
    bigrams: Counter = Counter()
    tree = PrefixTree()
    for line in corpus:
        ws = classing.split_words(line)
        for w in ws:
            tree.insert(w)
        unigrams.update(ws)
        bigrams.update(zip(ws, ws[1:]))
    return tree, NgramModel(unigrams, bigrams)


@dataclass
class _Beam:
    pb: float = NEG_INF  # ends in blank
    pnb: float = NEG_INF  # ends in the last character
    lm: float = 0.0  # log LM score of completed words
    prev_word: str | None = None
    run: str = ""  # trailing word-character run

    @property
    def total(self) -> float:
        return _lse(self.pb, self.pnb)


class WordBeamSearch:
    def __init__(self, alphabet: str, tree: PrefixTree, lm: NgramModel | None = None,
                 classing: CharClassing | None = None, mode: str = "ngrams",
                 beam_width: int = DEFAULT_BEAM_WIDTH):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if mode == "ngrams" and lm is None:
            raise ValueError("ngrams mode needs a language model")
        self.alphabet = alphabet
        self.tree = tree
        self.lm = lm
        self.classing = classing or CharClassing.default(alphabet)
        unknown = set(alphabet) - self.classing.word_chars - self.classing.non_word_chars
        if unknown:
            raise ValueError(f"characters without a class: {sorted(unknown)}")
        self.mode = mode
        self.beam_width = beam_width
        self.index = {c: i for i, c in enumerate(alphabet)}
        self._non_word = sorted(self.classing.non_word_chars & set(alphabet))

    def _allowed(self, beam: _Beam) -> list[str]:
        if beam.run:
            node = self.tree.node(beam.run)
            nxt = [c for c in node.children if c in self.index] if node is not None else []
            if node is not None and node.is_word:
                nxt += self._non_word
            return nxt
        return self._non_word + [c for c in self.tree.root.children if c in self.index]

    @staticmethod
    def _score(text: str, beam: _Beam) -> float:
        return beam.total + beam.lm

    def _word_lm(self, word: str, prev: str | None) -> float:
        return self.lm.log_prob(word, prev) if self.mode == "ngrams" else 0.0

    def _prune(self, beams: dict[str, _Beam]) -> list[tuple[str, _Beam]]:
        live = [(t, b) for t, b in beams.items() if b.total > NEG_INF]
        live.sort(key=lambda tb: (-self._score(*tb), tb[0]))
        return live[: self.beam_width]

    def decode(self, probs: np.ndarray, history: list | None = None) -> str:
        """Most probable lexicon-consistent transcription of ``probs[T, N+1]``.

        When ``history`` is a list, the best beam score after each frame is appended.
        """
        T, C = probs.shape
        if C != len(self.alphabet) + 1:
            raise ValueError(f"probability matrix has {C} classes, alphabet needs {len(self.alphabet) + 1}")
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        if not self._allowed(_Beam()):
            log.warning("word beam search: empty lexicon and no non-word characters")
            return ""
        blank = C - 1
        beams: list[tuple[str, _Beam]] = [("", _Beam(pb=0.0))]
        for t in range(T):
            lp = logp[t]
            nxt: dict[str, _Beam] = {}

            def slot(text, parent: _Beam, ch: str | None) -> _Beam:
                b = nxt.get(text)
                if b is None:
                    if ch is None:
                        b = _Beam(lm=parent.lm, prev_word=parent.prev_word, run=parent.run)
                    elif ch in self.classing.word_chars:
                        b = _Beam(lm=parent.lm, prev_word=parent.prev_word, run=parent.run + ch)
                    elif parent.run:
                        b = _Beam(lm=parent.lm + self._word_lm(parent.run, parent.prev_word), prev_word=parent.run)
                    else:
                        b = _Beam(lm=parent.lm, prev_word=parent.prev_word)
                    nxt[text] = b
                return b

            for text, beam in beams:
                total = beam.total
                same = slot(text, beam, None)
                same.pb = _lse(same.pb, total + lp[blank])
                if text:
                    same.pnb = _lse(same.pnb, beam.pnb + lp[self.index[text[-1]]])
                for ch in self._allowed(beam):
                    p = lp[self.index[ch]]
                    if p == NEG_INF:
                        continue
                    child = slot(text + ch, beam, ch)
                    src = beam.pb if text and text[-1] == ch else total
                    child.pnb = _lse(child.pnb, src + p)
            beams = self._prune(nxt)
            if history is not None:
                history.append(self._score(*beams[0]) if beams else NEG_INF)

        finished = []
        for text, beam in beams:
            if beam.run:
                if not self.tree.is_word(beam.run):
                    continue
                score = beam.total + beam.lm + self._word_lm(beam.run, beam.prev_word)
            else:
                score = beam.total + beam.lm
            finished.append((-score, text))
        if not finished:
            log.warning("word beam search: no beam ends in a complete word")
            return ""
        return min(finished)[1]


def word_beam_search(probs: np.ndarray, alphabet: str, tree: PrefixTree, lm: NgramModel | None = None,
                     mode: str = "ngrams", beam_width: int = DEFAULT_BEAM_WIDTH,
                     classing: CharClassing | None = None) -> str:
    return WordBeamSearch(alphabet, tree, lm, classing, mode, beam_width).decode(probs)


def decode_paragraph(lines: Sequence[np.ndarray], decoder: WordBeamSearch) -> str:
    """Decode each line and join the results with newlines, keeping empty lines."""
    if not lines:
        raise ValueError("no lines to decode")
    return "\n".join(decoder.decode(p) for p in lines)
