"""Deterministic synthetic parallel whisper/normal corpus with rendered lip videos.

Each character maps to a pair of formant frequencies. Normal speech renders a
character as a harmonic series on the speaker's f0 shaped by those formants;
whisper speech renders the same formants as spectrally shaped noise at lower
level with no f0. Videos show a mouth whose opening tracks the first formant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import PairedManifest, UtteranceRecord
from .features import SAMPLE_RATE, Waveform, save_wav
from .lipgeom import FaceLandmarks, write_landmarks

# 24 characters on a 6 x 4 grid of (F1, F2) formant pairs.
CHARSET = "天地日月山水风云花草木石春夏秋冬东西南北金银江河"
F1_GRID = (300.0, 500.0, 700.0, 900.0, 1100.0, 1300.0)
F2_GRID = (1600.0, 2200.0, 2800.0, 3400.0)

FPS = 25
FRAME_SIZE = 128
NOSE = (64.0, 52.0)
MOUTH_Y = 84.0

NORMAL_RMS = 0.1
WHISPER_RMS = 0.03


@dataclass
class SyntheticCorpus:
    manifest: PairedManifest
    audio: dict[str, Waveform] = field(default_factory=dict)
    video: dict[str, np.ndarray] = field(default_factory=dict)
    landmarks: dict[str, list[FaceLandmarks]] = field(default_factory=dict)

    def write(self, root: str | Path) -> None:
        """Lay the corpus out as ``root/<speaker>/<speech_type>/<utt_id>.{wav,txt,npy,lm}``."""
        root = Path(root)
        for rec in self.manifest.records.values():
            d = root / rec.speaker_id / rec.speech_type
            d.mkdir(parents=True, exist_ok=True)
            save_wav(d / f"{rec.utt_id}.wav", self.audio[rec.utt_id])
            (d / f"{rec.utt_id}.txt").write_text(rec.text + "\n", encoding="utf-8")
            if rec.utt_id in self.video:
                np.save(d / f"{rec.utt_id}.npy", self.video[rec.utt_id])
                write_landmarks(d / f"{rec.utt_id}.lm", self.landmarks[rec.utt_id])
        (root / "language").write_text("zh\n", encoding="utf-8")


def char_formants(ch: str) -> tuple[float, float]:
    k = CHARSET.index(ch)
    return F1_GRID[k % len(F1_GRID)], F2_GRID[k // len(F1_GRID)]


def _formant_envelope(freqs: np.ndarray, f1: float, f2: float, width: float) -> np.ndarray:
    bumps = np.exp(-0.5 * ((freqs - f1) / width) ** 2) + 0.7 * np.exp(-0.5 * ((freqs - f2) / width) ** 2)
    return bumps + 0.03


def _segment_gain(n: int) -> np.ndarray:
    ramp = min(n // 4, int(0.015 * SAMPLE_RATE))
    g = np.ones(n)
    if ramp:
        r = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        g[:ramp] = r
        g[-ramp:] = r[::-1]
    return g


def _voiced(n: int, f0: float, f1: float, f2: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    harmonics = np.arange(1, int(7000 // f0) + 1) * f0
    amps = _formant_envelope(harmonics, f1, f2, width=120.0)
    phases = rng.uniform(0, 2 * np.pi, size=len(harmonics))
    return (amps[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])).sum(axis=0)


def _unvoiced(n: int, f1: float, f2: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    return np.fft.irfft(spec * _formant_envelope(freqs, f1, f2, width=200.0), n)


@dataclass(frozen=True)
class _Timing:
    lead: int
    segments: tuple[tuple[int, int], ...]  # (start, length) in samples
    total: int


def _timing(text: str, rng: np.random.Generator) -> _Timing:
    pos = lead = int(rng.uniform(0.04, 0.08) * SAMPLE_RATE)
    segs = []
    for _ in text:
        length = int(rng.uniform(0.08, 0.12) * SAMPLE_RATE)
        segs.append((pos, length))
        pos += length + int(rng.uniform(0.02, 0.04) * SAMPLE_RATE)
    total = pos + int(rng.uniform(0.04, 0.08) * SAMPLE_RATE)
    return _Timing(lead, tuple(segs), total)


def render_audio(
    text: str, speech_type: str, f0: float, scale: float, timing: _Timing, rng: np.random.Generator
) -> np.ndarray:
    out = 1e-4 * rng.standard_normal(timing.total)
    for ch, (start, length) in zip(text, timing.segments):
        f1, f2 = (f * scale for f in char_formants(ch))
        seg = _voiced(length, f0, f1, f2, rng) if speech_type == "normal" else _unvoiced(length, f1, f2, rng)
        seg = seg / (np.sqrt(np.mean(seg**2)) + 1e-12)
        level = NORMAL_RMS if speech_type == "normal" else WHISPER_RMS
        out[start : start + length] += level * seg * _segment_gain(length)
    return out


def render_video(text: str, timing: _Timing, rng: np.random.Generator) -> tuple[np.ndarray, list[FaceLandmarks]]:
    n_frames = int(np.ceil(timing.total / SAMPLE_RATE * FPS))
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE]
    frames = np.empty((n_frames, FRAME_SIZE, FRAME_SIZE), dtype=np.uint8)
    landmarks = []
    for i in range(n_frames):
        sample = int((i + 0.5) / FPS * SAMPLE_RATE)
        opening = 1.0
        for ch, (start, length) in zip(text, timing.segments):
            if start <= sample < start + length:
                opening = 2.0 + 2.5 * F1_GRID.index(char_formants(ch)[0])
        jitter = rng.normal(0, 0.5, size=2)
        cx, cy = NOSE[0] + jitter[0], MOUTH_Y + jitter[1]
        half_w = 14.0
        face = np.full((FRAME_SIZE, FRAME_SIZE), 180.0)
        face[((xx - (NOSE[0] + jitter[0])) ** 2 + (yy - (NOSE[1] + jitter[1])) ** 2) < 9] = 120.0
        mouth = ((xx - cx) / half_w) ** 2 + ((yy - cy) / opening) ** 2 < 1.0
        face[mouth] = 40.0
        frames[i] = face.astype(np.uint8)
        landmarks.append(
            FaceLandmarks(
                p1=(NOSE[0] + jitter[0], NOSE[1] + jitter[1]),
                p2=(cx - half_w, cy),
                p3=(cx + half_w, cy),
                frame_index=i,
            )
        )
    return frames, landmarks


def _random_texts(n: int, rng: np.random.Generator, min_len: int, max_len: int) -> list[str]:
    seen: set[str] = set()
    out = []
    while len(out) < n:
        k = int(rng.integers(min_len, max_len + 1))
        text = "".join(rng.choice(list(CHARSET), size=k))
        if text not in seen:
            seen.add(text)
            out.append(text)
    return out


def make_synthetic_corpus(
    n_speakers: int,
    n_utts: int,
    seed: int = 0,
    video_fraction: float = 0.75,
    min_len: int = 4,
    max_len: int = 8,
) -> SyntheticCorpus:
    """Generate ``n_utts`` parallel whisper/normal utterance pairs for each speaker.

    The first ``round(video_fraction * n_speakers)`` speakers also get lip videos
    and landmark tracks. Identical seeds give identical corpora.
    """
    if not 1 <= n_speakers <= 20:
        raise ValueError("n_speakers must be in [1, 20]")
    rng = np.random.default_rng(seed)
    n_video = int(round(video_fraction * n_speakers))
    corpus = SyntheticCorpus(manifest=PairedManifest())
    for s in range(n_speakers):
        spk = f"S{s:03d}"
        f0 = float(rng.uniform(100.0, 220.0))
        scale = float(rng.uniform(0.96, 1.04))
        for i, text in enumerate(_random_texts(n_utts, rng, min_len, max_len)):
            for stype in ("normal", "whisper"):
                timing = _timing(text, rng)
                utt = f"{spk}_{stype[0].upper()}_{i:03d}"
                samples = render_audio(text, stype, f0, scale, timing, rng)
                corpus.audio[utt] = Waveform(samples, SAMPLE_RATE)
                video_path = landmarks_path = None
                if s < n_video:
                    frames, lms = render_video(text, timing, rng)
                    corpus.video[utt], corpus.landmarks[utt] = frames, lms
                    video_path = f"{spk}/{stype}/{utt}.npy"
                    landmarks_path = f"{spk}/{stype}/{utt}.lm"
                corpus.manifest.records[utt] = UtteranceRecord(
                    utt_id=utt,
                    speaker_id=spk,
                    speech_type=stype,  # type: ignore[arg-type]
                    text=text,
                    audio_path=f"{spk}/{stype}/{utt}.wav",
                    video_path=video_path,
                    landmarks_path=landmarks_path,
                    duration_s=timing.total / SAMPLE_RATE,
                    language="zh",
                )
    return corpus


def detect_f0(frame: np.ndarray, fmin: float = 70.0, fmax: float = 400.0, threshold: float = 0.85) -> float | None:
    """Autocorrelation pitch estimate for one frame; ``None`` when no periodicity is found."""
    x = frame - frame.mean()
    energy = float(np.dot(x, x))
    if energy <= 0:
        return None
    ac = np.correlate(x, x, mode="full")[len(x) - 1 :]
    lo, hi = int(SAMPLE_RATE / fmax), int(SAMPLE_RATE / fmin)
    hi = min(hi, len(x) - 1)
    if lo >= hi:
        return None
    # Normalize each lag by the overlap length so long lags are not penalized.
    norm = ac[lo:hi] / energy * len(x) / (len(x) - np.arange(lo, hi))
    k = int(np.argmax(norm))
    return SAMPLE_RATE / (lo + k) if norm[k] > threshold else None


def pitch_hits(w: Waveform, frame_s: float = 0.04, min_rms: float = 0.005) -> int:
    """Number of non-silent frames with a detectable fundamental frequency."""
    n = int(frame_s * w.sample_rate)
    hits = 0
    for start in range(0, len(w) - n + 1, n // 2):
        frame = w.samples[start : start + n]
        if np.sqrt(np.mean(frame**2)) < min_rms:
            continue
        if detect_f0(frame) is not None:
            hits += 1
    return hits
