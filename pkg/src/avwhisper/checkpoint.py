"""Checkpoint files: named tensors, model config, stage label and seed, with a content checksum."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .model import ModelConfig, WhisperAVModel


class CheckpointError(ValueError):
    pass


def tensor_checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def parameter_checksums(model: torch.nn.Module) -> dict[str, str]:
    return {name: tensor_checksum(t) for name, t in model.state_dict().items()}


def state_checksum(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(str(state[name].dtype).encode())
        h.update(str(tuple(state[name].shape)).encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: WhisperAVModel, stage: int, seed: int) -> str:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    checksum = state_checksum(state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"config": model.cfg.to_dict(), "stage": int(stage), "seed": int(seed), "tensors": state, "checksum": checksum},
        path,
    )
    return checksum


def load_checkpoint(path: str | Path, for_stage: int | None = None) -> tuple[WhisperAVModel, dict]:
    """Load a checkpoint; ``for_stage=2`` on a stage-1 file adds freshly zero-gated blocks."""
    blob = torch.load(Path(path), weights_only=True)
    try:
        state, config, stage, seed = blob["tensors"], blob["config"], blob["stage"], blob["seed"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint file") from exc
    if state_checksum(state) != blob.get("checksum"):
        raise CheckpointError(f"{path}: checksum mismatch")
    model = WhisperAVModel(ModelConfig.from_dict(config))
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    if stage == 2:
        model.add_gates(seed)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match the stored config: {exc}") from exc
    if for_stage == 2 and stage == 1:
        model.add_gates(seed)
    elif for_stage == 1 and stage == 2:
        raise CheckpointError(f"{path}: a stage-2 checkpoint cannot seed stage-1 training")
    meta = {"stage": stage, "seed": seed, "checksum": blob["checksum"]}
    return model, meta
