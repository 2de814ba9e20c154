"""Utterance manifests: loading, whisper/normal pairing, speaker splits and statistics."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

SpeechType = Literal["normal", "whisper"]
SplitName = Literal["train", "valid", "test"]

SPEECH_TYPES = ("normal", "whisper")
LANGUAGES = ("zh", "en")
SPLITS = ("train", "valid", "test")
TYPE_LABELS = {"normal": "N", "whisper": "W"}

# Tolerance when re-checking a stored pair similarity against a fresh computation.
_SIMILARITY_TOL = 1e-9


class ManifestError(ValueError):
    """Raised when a manifest file or object violates its invariants."""


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    speech_type: SpeechType
    text: str
    audio_path: str
    video_path: str | None = None
    landmarks_path: str | None = None
    duration_s: float = 0.0
    language: str = "zh"

    @property
    def has_video(self) -> bool:
        return self.video_path is not None

    def validate(self) -> None:
        if not self.utt_id:
            raise ManifestError("utt_id must be non-empty")
        if self.speech_type not in SPEECH_TYPES:
            raise ManifestError(f"{self.utt_id}: bad speech_type {self.speech_type!r}")
        if self.language not in LANGUAGES:
            raise ManifestError(f"{self.utt_id}: bad language {self.language!r}")
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ManifestError(f"{self.utt_id}: duration_s must be > 0, got {self.duration_s}")
        if (self.video_path is None) != (self.landmarks_path is None):
            raise ManifestError(f"{self.utt_id}: video_path and landmarks_path must be given together")


@dataclass(frozen=True)
class UtterancePair:
    whisper: str
    normal: str
    similarity: float


@dataclass
class PairedManifest:
    records: dict[str, UtteranceRecord] = field(default_factory=dict)
    pairs: list[UtterancePair] = field(default_factory=list)
    unpaired: list[str] = field(default_factory=list)
    split: SplitName = "train"

    @classmethod
    def from_records(cls, records: Iterable[UtteranceRecord], split: SplitName = "train") -> "PairedManifest":
        out: dict[str, UtteranceRecord] = {}
        for rec in records:
            if rec.utt_id in out:
                raise ManifestError(f"duplicate utt_id {rec.utt_id!r}")
            out[rec.utt_id] = rec
        return cls(records=out, split=split)

    @property
    def is_paired(self) -> bool:
        return bool(self.pairs or self.unpaired)

    def by_type(self, speech_type: SpeechType) -> list[UtteranceRecord]:
        return [r for r in self.records.values() if r.speech_type == speech_type]

    def pair_of(self, whisper_id: str) -> UtterancePair | None:
        for p in self.pairs:
            if p.whisper == whisper_id:
                return p
        return None

    def validate(self) -> None:
        for rec in self.records.values():
            rec.validate()
        if self.split not in SPLITS:
            raise ManifestError(f"bad split {self.split!r}")
        seen_whisper: set[str] = set()
        for p in self.pairs:
            for uid in (p.whisper, p.normal):
                if uid not in self.records:
                    raise ManifestError(f"dangling pair reference to {uid!r}")
            w, n = self.records[p.whisper], self.records[p.normal]
            if w.speech_type != "whisper" or n.speech_type != "normal":
                raise ManifestError(f"pair ({p.whisper}, {p.normal}) has wrong speech types")
            if w.speaker_id != n.speaker_id:
                raise ManifestError(f"pair ({p.whisper}, {p.normal}) crosses speakers")
            if p.whisper in seen_whisper:
                raise ManifestError(f"whisper utterance {p.whisper!r} paired twice")
            seen_whisper.add(p.whisper)
            expected = sequence_similarity(w.text, n.text)
            if abs(expected - p.similarity) > _SIMILARITY_TOL:
                raise ManifestError(
                    f"pair ({p.whisper}, {p.normal}) similarity {p.similarity} != recomputed {expected}"
                )
        for uid in self.unpaired:
            if uid not in self.records:
                raise ManifestError(f"dangling unpaired reference to {uid!r}")
            if uid in seen_whisper:
                raise ManifestError(f"{uid!r} is both paired and unpaired")
        if self.is_paired:
            covered = seen_whisper | set(self.unpaired)
            missing = [r.utt_id for r in self.by_type("whisper") if r.utt_id not in covered]
            if missing:
                raise ManifestError(f"whisper records neither paired nor unpaired: {missing[:5]}")


# --------------------------------------------------------------------------- similarity


def _longest_match(a: str, b: str, alo: int, ahi: int, blo: int, bhi: int) -> tuple[int, int, int]:
    # Longest common block; ties go to the earliest start in a, then in b.
    best_i, best_j, best_k = alo, blo, 0
    prev: dict[int, int] = {}
    for i in range(alo, ahi):
        cur: dict[int, int] = {}
        ai = a[i]
        for j in range(blo, bhi):
            if b[j] == ai:
                k = prev.get(j - 1, 0) + 1
                cur[j] = k
                if k > best_k:
                    best_i, best_j, best_k = i - k + 1, j - k + 1, k
        prev = cur
    return best_i, best_j, best_k


def matched_characters(a: str, b: str) -> int:
    """Total size of the recursive longest-matching-block decomposition of ``a`` and ``b``."""
    total = 0
    stack = [(0, len(a), 0, len(b))]
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        i, j, k = _longest_match(a, b, alo, ahi, blo, bhi)
        if k:
            total += k
            if alo < i and blo < j:
                stack.append((alo, i, blo, j))
            if i + k < ahi and j + k < bhi:
                stack.append((i + k, ahi, j + k, bhi))
    return total


def sequence_similarity(a: str, b: str) -> float:
    """Ratcliff-Obershelp ratio ``2M / (|a| + |b|)`` with no junk filtering.

    Two empty strings count as identical (1.0).
    """
    if not a and not b:
        return 1.0
    return 2.0 * matched_characters(a, b) / (len(a) + len(b))


# --------------------------------------------------------------------------- pairing


def pair_utterances(manifest: PairedManifest) -> PairedManifest:
    normals: dict[str, list[UtteranceRecord]] = defaultdict(list)
    for rec in manifest.records.values():
        if rec.speech_type == "normal":
            normals[rec.speaker_id].append(rec)
    for cands in normals.values():
        cands.sort(key=lambda r: r.utt_id)

    pairs: list[UtterancePair] = []
    unpaired: list[str] = []
    for w in sorted(manifest.by_type("whisper"), key=lambda r: r.utt_id):
        best: UtterancePair | None = None
        # Candidates are visited in utt_id order and only a strict improvement replaces
        # the incumbent, so ties resolve to the smallest normal utt_id.
        for n in normals.get(w.speaker_id, ()):
            sim = sequence_similarity(w.text, n.text)
            if best is None or sim > best.similarity:
                best = UtterancePair(whisper=w.utt_id, normal=n.utt_id, similarity=sim)
        if best is None:
            unpaired.append(w.utt_id)
        else:
            pairs.append(best)
    return PairedManifest(records=dict(manifest.records), pairs=pairs, unpaired=unpaired, split=manifest.split)


# --------------------------------------------------------------------------- I/O


def _record_from_json(obj: dict, lineno: int) -> UtteranceRecord:
    try:
        rec = UtteranceRecord(
            utt_id=str(obj["utt_id"]),
            speaker_id=str(obj["speaker_id"]),
            speech_type=obj["speech_type"],
            text=str(obj["text"]),
            audio_path=str(obj["audio_path"]),
            video_path=obj.get("video_path"),
            landmarks_path=obj.get("landmarks_path"),
            duration_s=float(obj["duration_s"]),
            language=obj.get("language", "zh"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: malformed record ({exc!r})") from exc
    try:
        rec.validate()
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc
    return rec


def load_manifest(path: str | Path) -> PairedManifest:
    """Read a line-delimited JSON manifest and validate every invariant.

    Each line is one object. ``"type"`` selects the kind of line and defaults to
    ``"record"``; the other kinds are ``"pair"`` (whisper, normal, similarity),
    ``"unpaired"`` (utt_id) and ``"meta"`` (split).
    """
    path = Path(path)
    manifest = PairedManifest()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: parse error: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected a JSON object")
            kind = obj.pop("type", "record")
            if kind == "record":
                rec = _record_from_json(obj, lineno)
                if rec.utt_id in manifest.records:
                    raise ManifestError(f"line {lineno}: duplicate utt_id {rec.utt_id!r}")
                manifest.records[rec.utt_id] = rec
            elif kind == "pair":
                try:
                    manifest.pairs.append(
                        UtterancePair(str(obj["whisper"]), str(obj["normal"]), float(obj["similarity"]))
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ManifestError(f"line {lineno}: malformed pair ({exc!r})") from exc
            elif kind == "unpaired":
                manifest.unpaired.append(str(obj["utt_id"]))
            elif kind == "meta":
                manifest.split = obj.get("split", "train")
            else:
                raise ManifestError(f"line {lineno}: unknown line type {kind!r}")
    manifest.validate()
    return manifest


def save_manifest(manifest: PairedManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"type": "meta", "split": manifest.split}) + "\n")
        for rec in manifest.records.values():
            fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")
        for p in manifest.pairs:
            fh.write(json.dumps({"type": "pair", **asdict(p)}) + "\n")
        for uid in manifest.unpaired:
            fh.write(json.dumps({"type": "unpaired", "utt_id": uid}) + "\n")


# --------------------------------------------------------------------------- splits


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    # Largest-remainder allocation with at least one speaker per split.
    k = len(ratios)
    if n < k:
        raise ManifestError(f"cannot split {n} speaker(s) into {k} non-empty subsets")
    counts = [1] * k
    spare = n - k
    if spare:
        quotas = [r * n - 1 for r in ratios]
        floors = [max(0, math.floor(q)) for q in quotas]
        # floors may overshoot when a quota is below one speaker
        while sum(floors) > spare:
            floors[int(np.argmax(floors))] -= 1
        rest = spare - sum(floors)
        order = sorted(range(k), key=lambda i: (-(quotas[i] - floors[i]), i))
        for i in order[:rest]:
            floors[i] += 1
        counts = [c + f for c, f in zip(counts, floors)]
    return counts


def split_by_speaker(
    records: Iterable[UtteranceRecord],
    ratios: Sequence[float] = (4 / 6, 1 / 6, 1 / 6),
    seed: int = 0,
) -> tuple[PairedManifest, PairedManifest, PairedManifest]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ManifestError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ManifestError(f"ratios must sum to 1, got {sum(ratios)}")
    records = list(records)
    speakers = sorted({r.speaker_id for r in records})
    counts = _allocate(len(speakers), ratios)
    order = np.random.default_rng(seed).permutation(len(speakers))
    assignment: dict[str, str] = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for idx in order[start : start + count]:
            assignment[speakers[idx]] = name
        start += count
    parts = {
        name: PairedManifest.from_records((r for r in records if assignment[r.speaker_id] == name), split=name)
        for name in SPLITS
    }
    return parts["train"], parts["valid"], parts["test"]


def parse_ratios(text: str) -> tuple[float, float, float]:
    """``"4:1:1"`` -> normalized ``(4/6, 1/6, 1/6)``."""
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError as exc:
        raise ManifestError(f"bad ratio string {text!r}") from exc
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise ManifestError(f"bad ratio string {text!r}")
    total = sum(parts)
    return tuple(p / total for p in parts)  # type: ignore[return-value]


# --------------------------------------------------------------------------- statistics

STATS_COLUMNS = ("Set", "Video", "Num of Spk", "Type", "Time (hrs)", "Utterances")


@dataclass(frozen=True)
class StatsRow:
    has_video: bool
    num_speakers: int
    speech_type: SpeechType
    total_hours: float
    num_utterances: int


@dataclass
class CorpusStats:
    split: str
    rows: list[StatsRow]

    def render(self, sep: str = "\t", set_name: str | None = None) -> str:
        """Table with the column layout ``Set, Video, Num of Spk, Type, Time (hrs), Utterances``."""
        name = set_name or self.split.capitalize()
        lines = [sep.join(STATS_COLUMNS)]
        for row in self.rows:
            lines.append(
                sep.join(
                    [
                        name,
                        "Yes" if row.has_video else "No",
                        str(row.num_speakers),
                        TYPE_LABELS[row.speech_type],
                        f"{row.total_hours:.4f}",
                        str(row.num_utterances),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def compute_stats(manifest: PairedManifest) -> CorpusStats:
    """One row per (video, speech type) group.

    ``num_speakers`` counts the speakers of the whole video group, as the
    published table shares one speaker count across the N and W rows.
    """
    seconds: dict[tuple[bool, str], float] = defaultdict(float)
    counts: dict[tuple[bool, str], int] = defaultdict(int)
    speakers: dict[bool, set[str]] = defaultdict(set)
    # fsum keeps totals independent of record order.
    durations: dict[tuple[bool, str], list[float]] = defaultdict(list)
    for rec in manifest.records.values():
        key = (rec.has_video, rec.speech_type)
        durations[key].append(rec.duration_s)
        counts[key] += 1
        speakers[rec.has_video].add(rec.speaker_id)
    for key, vals in durations.items():
        seconds[key] = math.fsum(vals)
    rows = [
        StatsRow(
            has_video=video,
            num_speakers=len(speakers[video]),
            speech_type=stype,  # type: ignore[arg-type]
            total_hours=seconds[(video, stype)] / 3600.0,
            num_utterances=counts[(video, stype)],
        )
        for video in (True, False)
        for stype in SPEECH_TYPES
        if (video, stype) in counts
    ]
    return CorpusStats(split=manifest.split, rows=rows)
