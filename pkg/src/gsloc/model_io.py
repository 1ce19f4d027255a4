"""Scene model persistence.

Sectioned little-endian binary format:

    magic "GSLM", u32 version
    sections: magic (4 bytes) + u64 payload length + payload
      META  json: bounds, config hash, counts, field metadata
      GAUS  u64 N; float64 mu/q/log_scale/opacity_logit/color/score_logit,
            u8 is_key, float64 spawn_score
      OBSV  float64 per-primitive observation statistics (optional)
      DFLD  descriptor field: level metadata + float32 tables + MLP (optional)

Primitive parameters round-trip bit-exactly (float64); the descriptor
field is stored as float32, its in-memory dtype.  No per-primitive
descriptor arrays exist anywhere in the format: descriptors are decoded
on demand from the field, so file size is linear in primitive count and
independent of descriptor dimensionality outside the fixed DFLD section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptModel
from .field import DescriptorDecoder, DescriptorField, HashEncoding
from .landmarks import ObservationStats
from .primitives import GaussianCloud, SceneModel

MODEL_MAGIC = b"GSLM"
MODEL_VERSION = 1


def _write_section(fh, magic: bytes, payload: bytes) -> None:
    fh.write(magic)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _arr_bytes(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


def _gaus_payload(cloud: GaussianCloud) -> bytes:
    parts = [struct.pack("<Q", len(cloud))]
    for name in ("mu", "q", "log_scale", "opacity_logit", "color", "score_logit"):
        parts.append(_arr_bytes(getattr(cloud, name), "<f8"))
    parts.append(_arr_bytes(cloud.is_key, "u1"))
    parts.append(_arr_bytes(cloud.spawn_score, "<f8"))
    return b"".join(parts)


def _dfld_payload(fieldobj: DescriptorField) -> bytes:
    enc = fieldobj.encoding
    dec = fieldobj.decoder
    parts = [struct.pack("<3I", enc.levels, enc.features_per_level, enc.table_size)]
    parts.append(_arr_bytes(enc.resolutions, "<f8"))
    parts.append(_arr_bytes(enc.bounds_min, "<f8"))
    parts.append(_arr_bytes(enc.bounds_max, "<f8"))
    parts.append(_arr_bytes(enc.tables, "<f4"))
    parts.append(struct.pack("<I", len(dec.weights)))
    for W, b in zip(dec.weights, dec.biases):
        parts.append(struct.pack("<2I", *W.shape))
        parts.append(_arr_bytes(W, "<f4"))
        parts.append(_arr_bytes(b, "<f4"))
    return b"".join(parts)


def save_model(scene: SceneModel, path, obs_stats: ObservationStats | None = None) -> int:
    """Write the model; returns total bytes on disk."""
    path = Path(path)
    cloud = scene.cloud
    meta = {
        "version": MODEL_VERSION,
        "bounds_min": list(map(float, scene.bounds_min)),
        "bounds_max": list(map(float, scene.bounds_max)),
        "config_hash": scene.config_hash,
        "n_primitives": len(cloud),
        "has_field": scene.descriptor_field is not None,
        "descriptor_dim": (scene.descriptor_field.decoder.out_dim
                           if scene.descriptor_field else 0),
    }
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        _write_section(fh, b"META", json.dumps(meta).encode())
        _write_section(fh, b"GAUS", _gaus_payload(cloud))
        if obs_stats is not None:
            payload = b"".join([
                _arr_bytes(obs_stats.count, "<i8"),
                _arr_bytes(obs_stats.max_angle, "<f8"),
                _arr_bytes(obs_stats.dist_mean, "<f8"),
                _arr_bytes(obs_stats.dist_std, "<f8")])
            _write_section(fh, b"OBSV", payload)
        if scene.descriptor_field is not None:
            _write_section(fh, b"DFLD", _dfld_payload(scene.descriptor_field))
    return path.stat().st_size


class _Reader:
    def __init__(self, payload: bytes, section: str):
        self.buf = payload
        self.off = 0
        self.section = section

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CorruptModel(f"section {self.section} truncated "
                               f"(need {n} bytes at offset {self.off})")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_sections(path) -> dict[bytes, bytes]:
    """Raw section table of a model file (used by size/structure checks)."""
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise CorruptModel("bad file magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != MODEL_VERSION:
        raise CorruptModel(f"unsupported version {version}")
    sections = {}
    off = 8
    while off < len(data):
        if off + 12 > len(data):
            raise CorruptModel("truncated section header")
        magic = data[off:off + 4]
        (size,) = struct.unpack("<Q", data[off + 4:off + 12])
        off += 12
        if off + size > len(data):
            raise CorruptModel(f"section {magic.decode(errors='replace')} truncated")
        sections[magic] = data[off:off + size]
        off += size
    return sections


def load_model(path):
    """Load a model file -> (SceneModel, ObservationStats | None)."""
    sections = read_sections(path)
    if b"GAUS" not in sections:
        raise CorruptModel("missing GAUS section")
    meta = json.loads(sections[b"META"].decode()) if b"META" in sections else {}

    r = _Reader(sections[b"GAUS"], "GAUS")
    (n,) = struct.unpack("<Q", r.take(8))
    cloud = GaussianCloud(0)
    cloud.mu = r.array("<f8", (n, 3))
    cloud.q = r.array("<f8", (n, 4))
    cloud.log_scale = r.array("<f8", (n, 3))
    cloud.opacity_logit = r.array("<f8", (n,))
    cloud.color = r.array("<f8", (n, 3))
    cloud.score_logit = r.array("<f8", (n,))
    cloud.is_key = r.array("u1", (n,)).astype(bool)
    cloud.spawn_score = r.array("<f8", (n,))

    scene = SceneModel(cloud=cloud)
    scene.bounds_min = np.array(meta.get("bounds_min", [0, 0, 0]), dtype=float)
    scene.bounds_max = np.array(meta.get("bounds_max", [1, 1, 1]), dtype=float)
    scene.config_hash = meta.get("config_hash", "")

    stats = None
    if b"OBSV" in sections:
        r = _Reader(sections[b"OBSV"], "OBSV")
        stats = ObservationStats(count=r.array("<i8", (n,)),
                                 max_angle=r.array("<f8", (n,)),
                                 dist_mean=r.array("<f8", (n,)),
                                 dist_std=r.array("<f8", (n,)))

    if b"DFLD" in sections:
        r = _Reader(sections[b"DFLD"], "DFLD")
        levels, fpl, table_size = struct.unpack("<3I", r.take(12))
        resolutions = r.array("<f8", (levels,))
        bmin = r.array("<f8", (3,))
        bmax = r.array("<f8", (3,))
        enc = HashEncoding.__new__(HashEncoding)
        enc.bounds_min = bmin
        enc.bounds_max = bmax
        enc.resolutions = resolutions
        enc.levels = levels
        enc.features_per_level = fpl
        enc.table_size = table_size
        enc.tables = r.array("<f4", (levels, table_size, fpl))
        (n_layers,) = struct.unpack("<I", r.take(4))
        dec = DescriptorDecoder.__new__(DescriptorDecoder)
        dec.weights, dec.biases = [], []
        for _ in range(n_layers):
            a, b = struct.unpack("<2I", r.take(8))
            dec.weights.append(r.array("<f4", (a, b)))
            dec.biases.append(r.array("<f4", (b,)))
        dec.out_dim = dec.weights[-1].shape[1]
        scene.descriptor_field = DescriptorField(enc, dec)
    return scene, stats
