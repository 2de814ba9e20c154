"""Character and word error rates with per-utterance edit-operation counts."""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence

log = logging.getLogger(__name__)

_ASCII_PUNCT = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class UtteranceScore:
    utt_id: str
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    speech_type: str | None = None

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def error_rate(self) -> float:
        return self.errors / self.ref_len


@dataclass
class EvalReport:
    unit: str
    language: str
    per_utt: list[UtteranceScore] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # empty references

    @property
    def aggregate(self) -> float:
        """Corpus-level rate: total edits over total reference length."""
        return _aggregate(self.per_utt)

    def by_speech_type(self) -> dict[str, float]:
        groups: dict[str, list[UtteranceScore]] = {}
        for s in self.per_utt:
            groups.setdefault(s.speech_type or "unknown", []).append(s)
        return {k: _aggregate(v) for k, v in sorted(groups.items())}

    @property
    def warnings(self) -> int:
        return len(self.skipped)


def _aggregate(scores: Sequence[UtteranceScore]) -> float:
    ref = sum(s.ref_len for s in scores)
    if ref == 0:
        return float("nan")
    return sum(s.errors for s in scores) / ref


def edit_ops(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Minimal ``(S, D, I)`` under unit costs.

    Counts come from one optimal alignment; the backtrace prefers a substitution
    (or match), then a deletion, then an insertion.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i or j:
        if i and j and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and dist[i][j] == dist[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, d, ins


def normalize(text: str, language: str) -> str:
    if language == "zh":
        return "".join(text.split())
    if language == "en":
        return " ".join(text.lower().translate(_ASCII_PUNCT).split())
    raise ValueError(f"unknown language {language!r}")


def tokenize(text: str, language: str, unit: str) -> list[str]:
    norm = normalize(text, language)
    if unit == "char":
        return [ch for ch in norm if not ch.isspace()]
    if unit == "word":
        return norm.split()
    raise ValueError(f"unknown unit {unit!r}")


def score_corpus(
    refs: Mapping[str, str],
    hyps: Mapping[str, str],
    language: str = "zh",
    unit: str = "char",
    speech_types: Mapping[str, str] | None = None,
) -> EvalReport:
    """Score every hypothesis against its reference.

    Utterances with an empty normalized reference are skipped and counted in
    ``report.warnings``.
    """
    if language == "zh" and unit != "char":
        raise ValueError("Chinese is scored in characters only")
    missing = [u for u in hyps if u not in refs]
    if missing:
        raise KeyError(f"hypotheses without a reference: {missing[:5]}")
    report = EvalReport(unit=unit, language=language)
    for utt_id in sorted(hyps):
        ref = tokenize(refs[utt_id], language, unit)
        if not ref:
            report.skipped.append(utt_id)
            continue
        s, d, i = edit_ops(ref, tokenize(hyps[utt_id], language, unit))
        stype = speech_types.get(utt_id) if speech_types else None
        report.per_utt.append(UtteranceScore(utt_id, s, d, i, len(ref), stype))
    if report.skipped:
        log.warning("%d utterance(s) with empty references were excluded", len(report.skipped))
    return report
