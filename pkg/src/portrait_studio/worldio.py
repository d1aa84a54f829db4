"""Image and clip serialization: PNG, the SWLD1 flat container, clip directories.

SWLD1 layout (little endian): magic ``SWLD1``, then u32 H, u32 W, u32 C,
then H*W*C float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraPose
from .errors import ArtifactError, InvalidInputError
from .world import FactorVector, TargetFrame

_MAGIC = b"SWLD1"


def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path))


def load_png(path: str | Path) -> np.ndarray:
    img = Image.open(str(path)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_swld(path: str | Path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidInputError(f"SWLD1 stores HxWxC arrays, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def load_swld(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _MAGIC:
        raise ArtifactError(f"{path}: not an SWLD1 container")
    h, w, c = struct.unpack("<III", blob[5:17])
    expected = 17 + h * w * c * 4
    if len(blob) != expected:
        raise ArtifactError(f"{path}: truncated SWLD1 payload")
    data = np.frombuffer(blob[17:], dtype="<f4").reshape(h, w, c)
    return data.astype(np.float64)


def frame_name(index: int) -> str:
    return f"frame_{index:04d}.png"


def save_clip(directory: str | Path, frames: list[TargetFrame],
              images: list[np.ndarray] | None = None) -> None:
    """Write a clip directory: zero-padded frames plus a JSON factor sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = []
    for i, frame in enumerate(frames):
        sidecar.append({
            "factors": frame.factors.as_dict(),
            "cam": {"yaw": frame.cam.yaw, "pitch": frame.cam.pitch},
        })
        if images is not None:
            save_png(directory / frame_name(i), images[i])
    (directory / "clip.json").write_text(json.dumps({"frames": sidecar}, indent=1))


def load_clip(directory: str | Path) -> list[TargetFrame]:
    directory = Path(directory)
    meta = directory / "clip.json"
    if not meta.exists():
        raise ArtifactError(f"{directory}: missing clip.json")
    payload = json.loads(meta.read_text())
    frames = []
    for entry in payload["frames"]:
        cam = CameraPose(entry["cam"]["yaw"], entry["cam"]["pitch"])
        frames.append(TargetFrame(FactorVector.from_dict(entry["factors"]), cam))
    return frames
