"""Whisper-speech recognition with parallel normal-speech training and gated lip-video fusion."""

from .corpus import PairedManifest, UtteranceRecord, compute_stats, load_manifest, pair_utterances, split_by_speaker
from .evaluation import score_corpus
from .features import Waveform, audio_frontend, log_mel
from .lipgeom import FaceLandmarks, crop_spec, crop_video
from .model import ModelConfig, WhisperAVModel, build_model
from .train import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "FaceLandmarks",
    "ModelConfig",
    "PairedManifest",
    "TrainConfig",
    "UtteranceRecord",
    "Waveform",
    "WhisperAVModel",
    "audio_frontend",
    "build_model",
    "compute_stats",
    "crop_spec",
    "crop_video",
    "load_manifest",
    "log_mel",
    "pair_utterances",
    "score_corpus",
    "split_by_speaker",
    "train_stage1",
    "train_stage2",
]
