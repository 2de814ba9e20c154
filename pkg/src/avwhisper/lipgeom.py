"""Lip region-of-interest geometry from 5-point face landmarks and 96x96 crop extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OUTPUT_SIZE = (96, 96)
SMOOTH_WINDOW = 5


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FaceLandmarks:
    """Nose point ``p1`` and the left/right mouth corners ``p2``/``p3`` in pixels."""

    p1: tuple[float, float]
    p2: tuple[float, float]
    p3: tuple[float, float]
    frame_index: int = 0
    aux: tuple[tuple[float, float], ...] = ()

    def check(self) -> None:
        coords = (*self.p1, *self.p2, *self.p3)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"frame {self.frame_index}: non-finite landmark coordinate")
        if self.frame_index < 0:
            raise GeometryError(f"negative frame index {self.frame_index}")


@dataclass(frozen=True)
class LipCropSpec:
    center: tuple[float, float]
    width: float
    output_size: tuple[int, int] = OUTPUT_SIZE

    @property
    def height(self) -> float:
        return self.width


def mouth_center(lm: FaceLandmarks) -> tuple[float, float]:
    lm.check()
    return ((lm.p2[0] + lm.p3[0]) / 2.0, (lm.p2[1] + lm.p3[1]) / 2.0)


def crop_distances(lm: FaceLandmarks) -> tuple[float, float]:
    """Return ``(d_MN, d_p1p2)``: nose-to-mouth-center and nose-to-left-corner distances."""
    cx, cy = mouth_center(lm)
    d_mn = math.hypot(lm.p1[0] - cx, lm.p1[1] - cy)
    d_p1p2 = math.hypot(lm.p1[0] - lm.p2[0], lm.p1[1] - lm.p2[1])
    return d_mn, d_p1p2


def crop_spec(lm: FaceLandmarks) -> LipCropSpec:
    d_mn, d_p1p2 = crop_distances(lm)
    width = min(3.2 * d_mn, 2.0 * max(d_mn, d_p1p2))
    if not width > 0:
        raise GeometryError(f"frame {lm.frame_index}: degenerate lip geometry (zero crop width)")
    return LipCropSpec(center=mouth_center(lm), width=width)


def smooth_specs(specs: list[LipCropSpec], window: int = SMOOTH_WINDOW) -> list[LipCropSpec]:
    """Centered moving average of crop centers; the window shrinks at sequence edges."""
    if window <= 1 or len(specs) < 2:
        return list(specs)
    half = window // 2
    centers = np.array([s.center for s in specs], dtype=np.float64)
    out = []
    for i, s in enumerate(specs):
        lo, hi = max(0, i - half), min(len(specs), i + half + 1)
        cx, cy = centers[lo:hi].mean(axis=0)
        out.append(LipCropSpec(center=(float(cx), float(cy)), width=s.width, output_size=s.output_size))
    return out


def _bilinear_zero_pad(frame: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = frame.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    def gather(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        vy = (yi >= 0) & (yi < h)
        vx = (xi >= 0) & (xi < w)
        vals = frame[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
        return np.where(vy[:, None] & vx[None, :], vals, 0.0)

    top = gather(y0, x0) * (1 - fx) + gather(y0, x0 + 1) * fx
    bottom = gather(y0 + 1, x0) * (1 - fx) + gather(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bottom * fy


def crop_frame(frame: np.ndarray, spec: LipCropSpec) -> np.ndarray:
    """Square window of side ``spec.width`` around ``spec.center``, resampled bilinearly.

    Output pixel ``i`` samples source coordinate ``left + (i + 0.5) * width / 96 - 0.5``,
    so a 96-pixel window on integer pixel edges is copied exactly. Pixels outside
    the frame read as zero.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.size == 0:
        raise GeometryError(f"expected a non-empty 2-D luminance frame, got shape {frame.shape}")
    if not spec.width > 0:
        raise GeometryError("crop width must be positive")
    out_h, out_w = spec.output_size
    cx, cy = spec.center
    left = cx - spec.width / 2.0
    top = cy - spec.width / 2.0
    xs = left + (np.arange(out_w) + 0.5) * (spec.width / out_w) - 0.5
    ys = top + (np.arange(out_h) + 0.5) * (spec.width / out_h) - 0.5
    return _bilinear_zero_pad(frame, ys, xs)


def to_luminance(frame: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma for RGB frames; 2-D frames pass through."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return frame.astype(np.float64)
    if frame.ndim == 3 and frame.shape[-1] == 3:
        return frame.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    raise GeometryError(f"unsupported frame shape {frame.shape}")


def read_landmarks(path: str | Path) -> list[FaceLandmarks]:
    """One frame per line: ``frame_index x1 y1 x2 y2 x3 y3`` (whitespace separated)."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise GeometryError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            idx = int(parts[0])
            x1, y1, x2, y2, x3, y3 = (float(v) for v in parts[1:])
            lm = FaceLandmarks(p1=(x1, y1), p2=(x2, y2), p3=(x3, y3), frame_index=idx)
            lm.check()
            out.append(lm)
    return out


def write_landmarks(path: str | Path, landmarks: list[FaceLandmarks]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for lm in landmarks:
            coords = " ".join(repr(float(v)) for v in (*lm.p1, *lm.p2, *lm.p3))
            fh.write(f"{lm.frame_index} {coords}\n")


def crop_video(frames: np.ndarray, landmarks: list[FaceLandmarks], smooth: bool = True) -> np.ndarray:
    """Crop every frame of a ``(T, H, W)`` or ``(T, H, W, 3)`` video to ``(T, 96, 96)`` float32."""
    by_index = {lm.frame_index: lm for lm in landmarks}
    if len(by_index) != len(frames) or set(by_index) != set(range(len(frames))):
        raise GeometryError(f"landmarks cover {len(by_index)} frames, video has {len(frames)}")
    specs = [crop_spec(by_index[i]) for i in range(len(frames))]
    if smooth:
        specs = smooth_specs(specs)
    crops = [crop_frame(to_luminance(f), s) for f, s in zip(frames, specs)]
    return np.stack(crops).astype(np.float32) if crops else np.zeros((0, *OUTPUT_SIZE), np.float32)
