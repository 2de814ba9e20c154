"""Two-stage training: parallel whisper/normal audio training, then gated visual fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import PairedManifest, pair_utterances
from .model import CharTokenizer, VisualFeatures, WhisperAVModel
from .synth import make_synthetic_corpus  # noqa: F401

log = logging.getLogger(__name__)

IGNORE = -100
MEL_FRAMES_PER_VIDEO_FRAME = 4  # 100 feature frames/s vs 25 video frames/s
DEFAULT_EPOCHS = {1: 2, 2: 4}


class TrainingError(ValueError):
    pass


@dataclass
class Example:
    utt_id: str
    speech_type: str
    language: str
    text: str
    targets: list[int]
    mel: np.ndarray  # (time, n_mels)
    lips: np.ndarray | None = None  # (frames, 96, 96), luminance 0-255

    @property
    def nominal_video_length(self) -> int:
        if self.lips is not None:
            return len(self.lips)
        return max(1, -(-self.mel.shape[0] // MEL_FRAMES_PER_VIDEO_FRAME))


# (whisper member, normal member); one side may be missing for unpaired utterances.
Pair = tuple["Example | None", "Example | None"]


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int | None = None
    batch_pairs: int = 4
    lr: float = 1e-3
    seed: int = 0
    grad_clip: float = 1.0
    warmup_steps: int = 0
    branches: tuple[str, ...] = ("whisper", "normal")

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise TrainingError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if not self.lr > 0:
            raise TrainingError("lr must be positive")
        if self.batch_pairs < 1:
            raise TrainingError("batch_pairs must be >= 1")


@dataclass
class LossBreakdown:
    L_w: torch.Tensor
    L_n: torch.Tensor
    L_total: torch.Tensor

    def floats(self) -> tuple[float, float, float]:
        return tuple(float(t.detach()) for t in (self.L_w, self.L_n, self.L_total))  # type: ignore[return-value]


@dataclass
class StepLog:
    step: int
    epoch: int
    L_w: float
    L_n: float
    L_total: float


@dataclass
class TrainResult:
    model: WhisperAVModel
    curve: list[StepLog] = field(default_factory=list)


# --------------------------------------------------------------------------- batches


def make_example(
    utt_id: str,
    speech_type: str,
    language: str,
    text: str,
    mel: np.ndarray,
    tokenizer: CharTokenizer,
    lips: np.ndarray | None = None,
) -> Example:
    ids = tokenizer.prompt(language) + tokenizer.encode(text) + [tokenizer.eot]
    return Example(utt_id, speech_type, language, text, ids, np.asarray(mel, dtype=np.float32), lips)


def make_pairs(manifest: PairedManifest, examples: dict[str, Example]) -> list[Pair]:
    """Training units from a manifest: each pair, plus leftover utterances on their own branch."""
    if not manifest.is_paired:
        manifest = pair_utterances(manifest)
    out: list[Pair] = []
    used_normals: set[str] = set()
    for p in manifest.pairs:
        out.append((examples[p.whisper], examples[p.normal]))
        used_normals.add(p.normal)
    for uid in manifest.unpaired:
        out.append((examples[uid], None))
    for rec in sorted(manifest.by_type("normal"), key=lambda r: r.utt_id):
        if rec.utt_id not in used_normals:
            out.append((None, examples[rec.utt_id]))
    return out


def collate_audio(examples: Sequence[Example], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack features, padding to the longest member with the silence value -1."""
    width = max(e.mel.shape[0] for e in examples)
    n_mels = examples[0].mel.shape[1]
    mel = torch.full((len(examples), width, n_mels), -1.0, dtype=dtype)
    for i, e in enumerate(examples):
        mel[i, : e.mel.shape[0]] = torch.from_numpy(e.mel).to(dtype)
    lengths = torch.tensor([e.mel.shape[0] for e in examples])
    return mel, lengths


def collate_tokens(examples: Sequence[Example], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Decoder inputs and shifted targets; the forced language token and padding are ignored."""
    width = max(len(e.targets) for e in examples) - 1
    inputs = torch.full((len(examples), width), pad_id, dtype=torch.long)
    targets = torch.full((len(examples), width), IGNORE, dtype=torch.long)
    for i, e in enumerate(examples):
        seq = torch.tensor(e.targets)
        inputs[i, : len(seq) - 1] = seq[:-1]
        targets[i, : len(seq) - 1] = seq[1:]
        targets[i, 0] = IGNORE
    return inputs, targets


def visual_for(model: WhisperAVModel, examples: Sequence[Example]) -> VisualFeatures:
    # lip crops are stored as 8-bit luminance; the embedder sees [0, 1]
    items = [
        None if e.lips is None else torch.from_numpy(np.asarray(e.lips, dtype=np.float32) / 255.0) for e in examples
    ]
    return model.embed_visual_batch(items, [e.nominal_video_length for e in examples])


def token_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Summed cross-entropy over non-ignored targets, and the number of those targets."""
    total = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE, reduction="sum"
    )
    return total, int((targets != IGNORE).sum())


def branch_loss(model: WhisperAVModel, examples: Sequence[Example], speech_type: str, stage: int) -> torch.Tensor:
    """Mean token cross-entropy of one speech-type branch; projection only on whisper."""
    dtype = model.decoder.ln.weight.dtype
    if not examples:
        return torch.zeros((), dtype=dtype)
    mel, lengths = collate_audio(examples, dtype)
    inputs, targets = collate_tokens(examples, model.tokenizer.pad)
    fusion = stage == 2
    visual = visual_for(model, examples) if fusion else None
    logits = model.forward_branch(mel, lengths, inputs, speech_type, visual, fusion_enabled=fusion)
    total, count = token_cross_entropy(logits, targets)
    return total / count


def batch_loss(
    pairs: Sequence[Pair], model: WhisperAVModel, stage: int = 1, branches: Iterable[str] = ("whisper", "normal")
) -> LossBreakdown:
    """``L_total = L_w + L_n`` over a batch of pairs."""
    if not pairs:
        raise TrainingError("empty batch")
    branches = set(branches)
    whisper = [w for w, _ in pairs if w is not None] if "whisper" in branches else []
    normal = [n for _, n in pairs if n is not None] if "normal" in branches else []
    if not whisper and not normal:
        raise TrainingError("batch has no utterances on the selected branches")
    l_w = branch_loss(model, whisper, "whisper", stage)
    l_n = branch_loss(model, normal, "normal", stage)
    return LossBreakdown(l_w, l_n, l_w + l_n)


# --------------------------------------------------------------------------- loops


def _filter_pairs(pairs: Sequence[Pair], branches: Sequence[str]) -> list[Pair]:
    keep_w, keep_n = "whisper" in branches, "normal" in branches
    out = []
    for w, n in pairs:
        w = w if keep_w else None
        n = n if keep_n else None
        if w is not None or n is not None:
            out.append((w, n))
    return out


def train_stage(
    pairs: Sequence[Pair],
    model: WhisperAVModel,
    cfg: TrainConfig,
    on_step: Callable[[StepLog], None] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    pairs = _filter_pairs(pairs, cfg.branches)
    if not pairs:
        raise TrainingError("empty training set")
    if cfg.stage == 2 and not model.has_gates:
        model.add_gates(cfg.seed)
    params = model.freeze_for_stage(cfg.stage)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    curve: list[StepLog] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_pairs):
            if max_steps is not None and step >= max_steps:
                break
            batch = [pairs[i] for i in order[start : start + cfg.batch_pairs]]
            if cfg.warmup_steps:
                for group in opt.param_groups:
                    group["lr"] = cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)
            opt.zero_grad(set_to_none=True)
            losses = batch_loss(batch, model, cfg.stage, cfg.branches)
            losses.L_total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            step += 1
            entry = StepLog(step, epoch + 1, *losses.floats())
            curve.append(entry)
            if on_step is not None:
                on_step(entry)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    return TrainResult(model, curve)


def train_stage1(pairs: Sequence[Pair], model: WhisperAVModel, cfg: TrainConfig, **kw) -> TrainResult:
    """Parallel audio-only training of encoder, decoder and projection layer."""
    if cfg.stage != 1:
        raise TrainingError("train_stage1 needs a stage-1 config")
    return train_stage(pairs, model, cfg, **kw)


def train_stage2(pairs: Sequence[Pair], model: WhisperAVModel, cfg: TrainConfig, **kw) -> TrainResult:
    """Audio-visual training of the gated cross-attention blocks (and visual embedder) only."""
    if cfg.stage != 2:
        raise TrainingError("train_stage2 needs a stage-2 config")
    for w, n in pairs:
        for e in (w, n):
            if e is not None and max(e.targets) >= len(model.cfg.vocab):
                raise TrainingError(f"{e.utt_id}: targets do not fit the checkpoint vocabulary")
    return train_stage(pairs, model, cfg, **kw)


# --------------------------------------------------------------------------- inference helpers


def transcribe_examples(
    model: WhisperAVModel,
    examples: Sequence[Example],
    fusion_enabled: bool = False,
    batch_size: int = 32,
) -> dict[str, str]:
    """Greedy transcripts keyed by utt_id, batching utterances of one speech type and language."""
    model.eval()
    dtype = model.decoder.ln.weight.dtype
    out: dict[str, str] = {}
    groups: dict[tuple[str, str], list[Example]] = {}
    for e in examples:
        groups.setdefault((e.speech_type, e.language), []).append(e)
    for (stype, lang), group in sorted(groups.items()):
        for start in range(0, len(group), batch_size):
            chunk = group[start : start + batch_size]
            mel, lengths = collate_audio(chunk, dtype)
            visual = visual_for(model, chunk) if fusion_enabled else None
            hyps = model.transcribe_batch(mel, lengths, [stype] * len(chunk), lang, visual, fusion_enabled)
            out.update(zip((e.utt_id for e in chunk), hyps))
    return out


def write_step_log(path: str | Path, curve: Sequence[StepLog]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("step\tepoch\tL_w\tL_n\tL_total\n")
        for s in curve:
            fh.write(f"{s.step}\t{s.epoch}\t{s.L_w:.6f}\t{s.L_n:.6f}\t{s.L_total:.6f}\n")


def read_step_log(path: str | Path) -> list[StepLog]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for row in rows:
        step, epoch, lw, ln, lt = row.split("\t")
        out.append(StepLog(int(step), int(epoch), float(lw), float(ln), float(lt)))
    return out
