"""On-disk dataset layout and loaders.

A dataset directory holds:
    color/%06d.png        8-bit RGB
    depth/%06d.raw        float32 little-endian, row-major, meters
    score/%06d.raw        float32 little-endian, row-major, [0, 1]
    feat/%06d.featraw     magic "FEAT", u32 H_f W_f D_f, float32 payload
    poses.txt             one 4x4 row-major world-from-camera matrix per line
    intrinsics.json       fx fy cx cy width height

Query directories use the same layout; poses there are ground truth for
evaluation only and are never consumed by the localizer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyDataset
from .geometry import CameraIntrinsics, Pose
from .mapper import KeyframeRecord

FEAT_MAGIC = b"FEAT"


def save_intrinsics(K: CameraIntrinsics, path: Path) -> None:
    Path(path).write_text(json.dumps({
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "width": K.width, "height": K.height}, indent=2))


def load_intrinsics(path: Path) -> CameraIntrinsics:
    d = json.loads(Path(path).read_text())
    return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                            width=int(d["width"]), height=int(d["height"]))


def save_poses(poses: list[Pose], path: Path) -> None:
    lines = [" ".join(f"{x:.17g}" for x in p.matrix().ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path: Path) -> list[Pose]:
    poses = []
    for line in Path(path).read_text().splitlines():
        vals = [float(x) for x in line.split()]
        if not vals:
            continue
        if len(vals) != 16:
            raise ValueError(f"pose line has {len(vals)} values, expected 16")
        poses.append(Pose.from_matrix(np.array(vals).reshape(4, 4)))
    return poses


def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_raw(arr: np.ndarray, path: Path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_raw(path: Path, shape) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def save_featraw(fmap: np.ndarray, path: Path) -> None:
    hf, wf, df = fmap.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<3I", hf, wf, df))
        fh.write(np.ascontiguousarray(fmap, dtype="<f4").tobytes())


def load_featraw(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != FEAT_MAGIC:
            raise ValueError(f"{path}: bad feature map magic")
        hf, wf, df = struct.unpack("<3I", fh.read(12))
        data = np.frombuffer(fh.read(hf * wf * df * 4), dtype="<f4")
        if data.size != hf * wf * df:
            raise ValueError(f"{path}: truncated feature map")
    return data.reshape(hf, wf, df).astype(np.float32)


def write_dataset(out_dir: Path, frames: list[dict], K: CameraIntrinsics) -> None:
    """Write frames (dicts with color/depth/score/feat/pose) to a directory."""
    out = Path(out_dir)
    for sub in ("color", "depth", "score", "feat"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    poses = []
    for i, fr in enumerate(frames):
        save_image(fr["color"], out / "color" / f"{i:06d}.png")
        save_raw(fr["depth"], out / "depth" / f"{i:06d}.raw")
        save_raw(fr["score"], out / "score" / f"{i:06d}.raw")
        save_featraw(fr["feat"], out / "feat" / f"{i:06d}.featraw")
        poses.append(fr["pose"])
    save_poses(poses, out / "poses.txt")
    save_intrinsics(K, out / "intrinsics.json")


def load_dataset(path: Path) -> list[KeyframeRecord]:
    """Load every frame of a dataset directory into KeyframeRecords."""
    root = Path(path)
    K = load_intrinsics(root / "intrinsics.json")
    poses = load_poses(root / "poses.txt")
    if not poses:
        raise EmptyDataset(f"{root}: empty poses.txt")
    frames = []
    for i, pose in enumerate(poses):
        color = load_image(root / "color" / f"{i:06d}.png")
        depth = load_raw(root / "depth" / f"{i:06d}.raw", (K.height, K.width))
        score = load_raw(root / "score" / f"{i:06d}.raw", (K.height, K.width))
        feat = load_featraw(root / "feat" / f"{i:06d}.featraw")
        frames.append(KeyframeRecord(color=color, depth=depth, pose=pose,
                                     intrinsics=K, feature_map=feat,
                                     score_map=score, frame_id=i))
    return frames


def load_pairs(path: Path) -> dict[int, int]:
    """Retrieval pairs file: two whitespace-separated frame ids per line."""
    pairs = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) != 2:
            continue
        pairs[int(parts[0])] = int(parts[1])
    return pairs
