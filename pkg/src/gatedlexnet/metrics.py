"""Edit distance and pooled character / word error rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Minimum number of insertions, deletions and substitutions turning ``a`` into ``b``."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def words(text: str) -> list[str]:
    return text.split()


def _check(refs, hyps):
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")


def corpus_cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Edit operations summed over the corpus, divided by the total reference length."""
    _check(refs, hyps)
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("reference corpus is empty")
    return sum(levenshtein(r, h) for r, h in zip(refs, hyps)) / total


def corpus_wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Like :func:`corpus_cer` over whitespace-separated words (newlines count as whitespace)."""
    _check(refs, hyps)
    ref_words = [words(r) for r in refs]
    total = sum(len(r) for r in ref_words)
    if total == 0:
        raise ValueError("reference corpus has no words")
    return sum(levenshtein(r, words(h)) for r, h in zip(ref_words, hyps)) / total


@dataclass
class SampleScore:
    id: str
    ref: str
    hyp: str
    char_edits: int
    char_len: int
    word_edits: int
    word_len: int


@dataclass
class EvalReport:
    samples: list[SampleScore] = field(default_factory=list)

    @property
    def char_edits(self) -> int:
        return sum(s.char_edits for s in self.samples)

    @property
    def char_len(self) -> int:
        return sum(s.char_len for s in self.samples)

    @property
    def word_edits(self) -> int:
        return sum(s.word_edits for s in self.samples)

    @property
    def word_len(self) -> int:
        return sum(s.word_len for s in self.samples)

    @property
    def cer(self) -> float:
        return self.char_edits / self.char_len

    @property
    def wer(self) -> float:
        return self.word_edits / self.word_len

    def add(self, sample_id: str, ref: str, hyp: str) -> SampleScore:
        rw, hw = words(ref), words(hyp)
        s = SampleScore(sample_id, ref, hyp, levenshtein(ref, hyp), len(ref), levenshtein(rw, hw), len(rw))
        self.samples.append(s)
        return s

    def table(self, title: str = "") -> str:
        rows = [f"{'id':<12}{'char_err':>10}{'chars':>8}{'word_err':>10}{'words':>8}"]
        for s in self.samples:
            rows.append(f"{s.id:<12}{s.char_edits:>10}{s.char_len:>8}{s.word_edits:>10}{s.word_len:>8}")
        rows.append(f"{'total':<12}{self.char_edits:>10}{self.char_len:>8}{self.word_edits:>10}{self.word_len:>8}")
        rows.append(f"CER {100 * self.cer:.2f}%  WER {100 * self.wer:.2f}%")
        if title:
            rows.insert(0, title)
        return "\n".join(rows)

    def key_values(self, prefix: str = "") -> str:
        return "\n".join(
            f"{prefix}{k}={v}"
            for k, v in (
                ("cer", repr(self.cer)),
                ("wer", repr(self.wer)),
                ("char_edits", self.char_edits),
                ("char_len", self.char_len),
                ("word_edits", self.word_edits),
                ("word_len", self.word_len),
                ("samples", len(self.samples)),
            )
        )


def evaluate(refs: Sequence[str], hyps: Sequence[str], ids: Sequence[str] | None = None) -> EvalReport:
    _check(refs, hyps)
    ids = ids or [f"{k:04d}" for k in range(len(refs))]
    report = EvalReport()
    for i, r, h in zip(ids, refs, hyps):
        report.add(i, r, h)
    if report.char_len == 0:
        raise ValueError("reference corpus is empty")
    return report
