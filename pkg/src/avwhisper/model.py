"""Toy encoder-decoder recognizer with a whisper projection layer and gated visual cross-attention.

Structure follows the large pretrained recognizers it stands in for, at desk scale:
a strided-convolution audio encoder shared by both speech types, a residual
Linear-ReLU-Linear projection applied to whisper embeddings only, and a
pre-LN transformer decoder whose blocks can be prefixed by tanh-gated
cross-attention over per-frame visual embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

PAD, SOT, EOT, LANG_ZH, LANG_EN = "<pad>", "<sot>", "<eot>", "<zh>", "<en>"
SPECIALS = (PAD, SOT, EOT, LANG_ZH, LANG_EN)
LANG_TOKENS = {"zh": LANG_ZH, "en": LANG_EN}

LIP_SIZE = 96
LIP_POOL = 4  # 96x96 crops are average-pooled to 24x24 before the visual embedder

STAGE2_PREFIXES = ("visual_embedder.",)
STAGE2_MARKER = ".gated."


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: tuple[str, ...] = SPECIALS
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 4
    max_text_len: int = 128
    visual_dim: int = 64
    n_mels: int = 80

    def __post_init__(self) -> None:
        self.vocab = tuple(self.vocab)
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        missing = [s for s in SPECIALS if s not in self.vocab]
        if missing:
            raise ModelError(f"vocab lacks special tokens {missing}")
        if len(set(self.vocab)) != len(self.vocab):
            raise ModelError("vocab has duplicate entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CharTokenizer:
    """Character-level tokenizer: specials first, then one token per character."""

    def __init__(self, vocab: Sequence[str]):
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.pad, self.sot, self.eot = self.index[PAD], self.index[SOT], self.index[EOT]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "CharTokenizer":
        chars = sorted({ch for t in texts for ch in t})
        return cls(SPECIALS + tuple(chars))

    def lang(self, language: str) -> int:
        return self.index[LANG_TOKENS[language]]

    def prompt(self, language: str) -> list[int]:
        return [self.sot, self.lang(language)]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[ch] for ch in text]
        except KeyError as exc:
            raise ModelError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            tok = self.vocab[i]
            if tok == EOT:
                break
            if tok not in SPECIALS:
                out.append(tok)
        return "".join(out)


# --------------------------------------------------------------------------- layers


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or d_model
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(kv_dim, d_model, bias=False)
        self.value = nn.Linear(kv_dim, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor, kv: Tensor, key_padding_mask: Tensor | None = None, causal: bool = False) -> Tensor:
        b, n, d = x.shape
        s = kv.shape[1]
        h = self.n_heads
        q = self.query(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.key(kv).view(b, s, h, d // h).transpose(1, 2)
        v = self.value(kv).view(b, s, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            future = torch.ones(n, s, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


def feed_forward(d_model: int, mult: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, d_model * mult), nn.GELU(), nn.Linear(d_model * mult, d_model))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_ln = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.mlp_ln = nn.LayerNorm(cfg.d_model)
        self.mlp = feed_forward(cfg.d_model, cfg.ffn_mult)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        y = self.attn_ln(x)
        x = x + self.attn(y, y, key_padding_mask=mask)
        return x + self.mlp(self.mlp_ln(x))


class GatedCrossAttentionBlock(nn.Module):
    """``x + tanh(alpha) * XAttn(x, V)`` then ``x + tanh(beta) * FFN(x)``; gates start at zero."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_ln = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, kv_dim=cfg.visual_dim)
        self.mlp_ln = nn.LayerNorm(cfg.d_model)
        self.mlp = feed_forward(cfg.d_model, cfg.ffn_mult)
        self.alpha = nn.Parameter(torch.zeros(()))
        self.beta = nn.Parameter(torch.zeros(()))

    def forward(self, x: Tensor, visual: Tensor, visual_mask: Tensor | None) -> Tensor:
        x = x + torch.tanh(self.alpha) * self.attn(self.attn_ln(x), visual, key_padding_mask=visual_mask)
        return x + torch.tanh(self.beta) * self.mlp(self.mlp_ln(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.gated: GatedCrossAttentionBlock | None = None
        self.attn_ln = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_attn_ln = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.mlp_ln = nn.LayerNorm(cfg.d_model)
        self.mlp = feed_forward(cfg.d_model, cfg.ffn_mult)

    def forward(
        self,
        x: Tensor,
        audio: Tensor,
        audio_mask: Tensor | None,
        visual: Tensor | None,
        visual_mask: Tensor | None,
        fusion: bool,
    ) -> Tensor:
        if fusion and self.gated is not None:
            x = self.gated(x, visual, visual_mask)
        y = self.attn_ln(x)
        x = x + self.attn(y, y, causal=True)
        x = x + self.cross_attn(self.cross_attn_ln(x), audio, key_padding_mask=audio_mask)
        return x + self.mlp(self.mlp_ln(x))


def sinusoids(length: int, channels: int) -> Tensor:
    log_timescale = math.log(10000) / (channels // 2 - 1)
    inv = torch.exp(-log_timescale * torch.arange(channels // 2, dtype=torch.float64))
    t = torch.arange(length, dtype=torch.float64)[:, None] * inv[None, :]
    return torch.cat([t.sin(), t.cos()], dim=1)


class AudioEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(cfg.n_mels, cfg.d_model, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(cfg.d_model, cfg.d_model, kernel_size=3, stride=2, padding=1)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.enc_layers))
        self.ln_post = nn.LayerNorm(cfg.d_model)

    def forward(self, mel: Tensor, mask: Tensor | None) -> Tensor:
        x = F.gelu(self.conv1(mel.transpose(1, 2)))
        x = F.gelu(self.conv2(x)).transpose(1, 2)
        x = x + sinusoids(x.shape[1], x.shape[2]).to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_post(x)


class ProjectionLayer(nn.Module):
    """Residual Linear-ReLU-Linear refinement of whisper embeddings.

    The first layer is Kaiming-normal, the second is all zeros, so a fresh layer
    is the identity map.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.linear1 = nn.Linear(d_model, d_model)
        self.linear2 = nn.Linear(d_model, d_model)
        nn.init.kaiming_normal_(self.linear1.weight, mode="fan_in", nonlinearity="relu")
        nn.init.zeros_(self.linear1.bias)
        nn.init.zeros_(self.linear2.weight)
        nn.init.zeros_(self.linear2.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.linear1.in_features:
            raise ModelError(f"embedding width {x.shape[-1]} != projection width {self.linear1.in_features}")
        return x + self.linear2(F.relu(self.linear1(x)))


class VisualEmbedder(nn.Module):
    """Per-frame linear map of 24x24 average-pooled lip crops."""

    def __init__(self, visual_dim: int):
        super().__init__()
        side = LIP_SIZE // LIP_POOL
        self.linear = nn.Linear(side * side, visual_dim)
        nn.init.zeros_(self.linear.bias)

    def forward(self, frames: Tensor) -> Tensor:
        lead = frames.shape[:-2]
        pooled = F.avg_pool2d(frames.reshape(-1, 1, LIP_SIZE, LIP_SIZE), LIP_POOL)
        return self.linear(pooled.flatten(1)).reshape(*lead, -1)


class TextDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.token_embedding = nn.Embedding(len(cfg.vocab), cfg.d_model)
        nn.init.normal_(self.token_embedding.weight, std=cfg.d_model**-0.5)
        self.positional_embedding = nn.Parameter(torch.randn(cfg.max_text_len, cfg.d_model) * 0.01)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.dec_layers))
        self.ln = nn.LayerNorm(cfg.d_model)


# --------------------------------------------------------------------------- model


@dataclass
class VisualFeatures:
    frames: Tensor  # (B, S, visual_dim)
    present: Tensor  # (B,) bool
    mask: Tensor | None = None  # (B, S) True where padded


@dataclass
class AudioBatch:
    mel: Tensor  # (B, T, n_mels)
    lengths: Tensor  # (B,)


def lengths_to_mask(lengths: Tensor, width: int) -> Tensor | None:
    mask = torch.arange(width)[None, :] >= lengths[:, None]
    return mask if bool(mask.any()) else None


class WhisperAVModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg)
        self.decoder = TextDecoder(cfg)
        self.projection = ProjectionLayer(cfg.d_model)
        self.visual_embedder = VisualEmbedder(cfg.visual_dim)
        self.tokenizer = CharTokenizer(cfg.vocab)

    # -- stage bookkeeping

    @property
    def has_gates(self) -> bool:
        return all(b.gated is not None for b in self.decoder.blocks)

    def add_gates(self, seed: int = 0) -> None:
        """Insert zero-gated visual cross-attention at the start of every decoder block."""
        dtype = self.decoder.ln.weight.dtype
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for block in self.decoder.blocks:
                if block.gated is None:
                    block.gated = GatedCrossAttentionBlock(self.cfg).to(dtype=dtype)

    def stage_parameters(self, stage: int) -> dict[str, nn.Parameter]:
        """Parameters trained in ``stage``: everything else in 1, gate blocks and visual embedder in 2."""
        out = {}
        for name, p in self.named_parameters():
            is_stage2 = STAGE2_MARKER in name or name.startswith(STAGE2_PREFIXES)
            if is_stage2 == (stage == 2):
                out[name] = p
        return out

    def freeze_for_stage(self, stage: int) -> list[nn.Parameter]:
        trainable = self.stage_parameters(stage)
        for name, p in self.named_parameters():
            p.requires_grad_(name in trainable)
        return list(trainable.values())

    # -- forward pieces

    def encode_audio(self, mel: Tensor, lengths: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        """Encode ``(B, T, n_mels)`` features to ``(B, ceil(T/2), d_model)`` plus a key padding mask."""
        if mel.dim() == 2:
            mel = mel[None]
        if mel.shape[1] < 2:
            raise ModelError(f"need at least 2 feature frames, got {mel.shape[1]}")
        if mel.shape[2] != self.cfg.n_mels:
            raise ModelError(f"expected {self.cfg.n_mels} mel bins, got {mel.shape[2]}")
        t_out = (mel.shape[1] + 1) // 2
        mask = None
        if lengths is not None:
            mask = lengths_to_mask((lengths + 1) // 2, t_out)
        return self.encoder(mel, mask), mask

    def project_whisper(self, embedding: Tensor) -> Tensor:
        return self.projection(embedding)

    def embed_visual(self, lips: Tensor | None, nominal_length: int = 1) -> VisualFeatures:
        """Embed ``(S, 96, 96)`` lip crops; absent video gives all-zero features."""
        dtype = self.decoder.ln.weight.dtype
        if lips is None:
            zeros = torch.zeros(1, nominal_length, self.cfg.visual_dim, dtype=dtype)
            return VisualFeatures(zeros, torch.zeros(1, dtype=torch.bool))
        if lips.dim() != 3 or lips.shape[1:] != (LIP_SIZE, LIP_SIZE):
            raise ModelError(f"lip frames must be (S, {LIP_SIZE}, {LIP_SIZE}), got {tuple(lips.shape)}")
        emb = self.visual_embedder(lips.to(dtype))
        return VisualFeatures(emb[None], torch.ones(1, dtype=torch.bool))

    def embed_visual_batch(self, items: Sequence[Tensor | None], nominal_lengths: Sequence[int]) -> VisualFeatures:
        feats = [self.embed_visual(x, n) for x, n in zip(items, nominal_lengths)]
        width = max(f.frames.shape[1] for f in feats)
        dtype = self.decoder.ln.weight.dtype
        frames = torch.zeros(len(feats), width, self.cfg.visual_dim, dtype=dtype)
        lengths = torch.tensor([f.frames.shape[1] for f in feats])
        for i, f in enumerate(feats):
            frames[i, : f.frames.shape[1]] = f.frames[0]
        present = torch.cat([f.present for f in feats])
        return VisualFeatures(frames, present, lengths_to_mask(lengths, width))

    def decode(
        self,
        audio: Tensor,
        tokens: Tensor,
        visual: VisualFeatures | None = None,
        fusion_enabled: bool = False,
        audio_mask: Tensor | None = None,
    ) -> Tensor:
        """Logits ``(B, L, vocab)`` for token prefixes ``(B, L)``; position i sees tokens <= i."""
        if tokens.dim() == 1:
            tokens = tokens[None]
        if audio.dim() == 2:
            audio = audio[None]
        n = tokens.shape[1]
        if n > self.cfg.max_text_len:
            raise ModelError(f"prefix length {n} exceeds max_text_len {self.cfg.max_text_len}")
        if bool((tokens < 0).any()) or bool((tokens >= len(self.cfg.vocab)).any()):
            raise ModelError("token id out of vocabulary")
        fusion = fusion_enabled and self.has_gates
        if fusion and visual is None:
            raise ModelError("fusion enabled but no visual features given")
        dec = self.decoder
        x = dec.token_embedding(tokens) + dec.positional_embedding[:n]
        vis = visual.frames if fusion else None
        vis_mask = visual.mask if fusion else None
        for block in dec.blocks:
            x = block(x, audio, audio_mask, vis, vis_mask, fusion)
        x = dec.ln(x)
        return x @ dec.token_embedding.weight.T

    def forward_branch(
        self,
        mel: Tensor,
        lengths: Tensor | None,
        tokens: Tensor,
        speech_type: str,
        visual: VisualFeatures | None = None,
        fusion_enabled: bool = False,
    ) -> Tensor:
        audio, mask = self.encode_audio(mel, lengths)
        if speech_type == "whisper":
            audio = self.project_whisper(audio)
        return self.decode(audio, tokens, visual, fusion_enabled, mask)

    # -- inference

    @torch.no_grad()
    def transcribe_batch(
        self,
        mel: Tensor,
        lengths: Tensor | None,
        speech_types: Sequence[str],
        language: str,
        visual: VisualFeatures | None = None,
        fusion_enabled: bool = False,
        temperature: float = 1.0,
    ) -> list[str]:
        """Greedy decoding from ``[SOT, LANG]`` until EOT or ``max_text_len`` tokens."""
        audio, mask = self.encode_audio(mel, lengths)
        whisper = torch.tensor([s == "whisper" for s in speech_types])
        if bool(whisper.any()):
            audio = torch.where(whisper[:, None, None], self.project_whisper(audio), audio)
        tok = self.tokenizer
        b = audio.shape[0]
        seq = torch.tensor([tok.prompt(language)] * b)
        done = torch.zeros(b, dtype=torch.bool)
        while seq.shape[1] < self.cfg.max_text_len and not bool(done.all()):
            logits = self.decode(audio, seq, visual, fusion_enabled, mask)[:, -1] / temperature
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, tok.eot), nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == tok.eot
        return [tok.decode(row[2:].tolist()) for row in seq]

    def greedy_transcribe(
        self,
        mel: Tensor,
        visual: VisualFeatures | None,
        speech_type: str,
        language: str,
        fusion_enabled: bool = False,
        temperature: float = 1.0,
    ) -> str:
        if isinstance(mel, Tensor) and mel.dim() == 2:
            mel = mel[None]
        return self.transcribe_batch(mel, None, [speech_type], language, visual, fusion_enabled, temperature)[0]


def build_model(cfg: ModelConfig, seed: int = 0) -> WhisperAVModel:
    """Construct a model with parameters drawn from a seeded generator."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return WhisperAVModel(cfg)
